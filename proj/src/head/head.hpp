#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "geo/box.hpp"
#include "geo/linalg.hpp"
#include "head/config.hpp"
#include "head/hungarian.hpp"
#include "ta/ops.hpp"
#include "ta/param_store.hpp"

namespace tmg::head {

enum class Task { ground, detect };

// Queries picked from the fused voxels: selected feature rows plus a learned
// positional embedding of the voxel centers, ordered by selection score.
template <class T>
struct QuerySet {
    ta::Tensor<T> queries;           // [K, C]
    ta::Tensor<T> anchor_t;          // [K, 3], constant copy of the centers
    std::vector<geo::Vec3> anchors;  // world-space anchor per query
    std::vector<int64_t> indices;    // source voxel row per query
    std::vector<T> scores;           // selection score per query
};

// Per-decoder-layer outputs. `align` is [K, L] token-alignment logits when
// grounding and [K, n_classes] class logits when detecting.
template <class T>
struct LayerPrediction {
    ta::Tensor<T> align;
    ta::Tensor<T> box_raw;       // [K, 9] regression outputs
    ta::Tensor<T> center_logit;  // [K]
};

struct BoxTarget {
    geo::OrientedBox9 box;
    int64_t cls = 0;  // category id; unused for grounding
};

template <class T>
struct LossBreakdown {
    ta::Tensor<T> total;  // scalar, carries the graph
    double cls = 0, box = 0, center = 0;
};

struct GroundingPick {
    geo::OrientedBox9 box;
    double score = 0;
    int64_t query = -1;
};

struct Detection {
    geo::OrientedBox9 box;
    int64_t cls = -1;
    double score = 0;
};

// ---------------------------------------------------------------------------
// parameters

template <class T>
void init_head_params(const HeadConfig& cfg, int64_t c, int64_t d_text, int64_t n_classes,
                      ta::ParamStore<T>& ps, Rng& rng) {
    cfg.validate();
    check(c >= 1 && d_text >= 1 && n_classes >= 1, "head: widths must be positive");
    check(c % cfg.heads == 0, "head: heads must divide the fused width");
    auto lin = [&](const std::string& name, int64_t in, int64_t out) {
        ps.add(name + ".w", ta::Tensor<T>::randn({in, out}, rng, T(0.02)), false);
        ps.add(name + ".b", ta::Tensor<T>::zeros({out}), false);
    };
    auto mlp2 = [&](const std::string& p, int64_t in, int64_t hid, int64_t out) {
        ps.add(p + ".w1", ta::Tensor<T>::randn({in, hid}, rng, T(0.02)), false);
        ps.add(p + ".b1", ta::Tensor<T>::zeros({hid}), false);
        ps.add(p + ".w2", ta::Tensor<T>::randn({hid, out}, rng, T(0.02)), false);
        ps.add(p + ".b2", ta::Tensor<T>::zeros({out}), false);
    };
    lin("head.pv", c, cfg.contrast_dim);
    lin("head.pt", d_text, cfg.contrast_dim);
    ps.add("head.tau", ta::Tensor<T>::full({1}, T(cfg.tau_init)), false);
    mlp2("head.qpos", 3, c, c);
    mlp2("head.box", c, c, 9);
    lin("head.ctr", c, 1);
    lin("head.cls", c, n_classes);
    for (int64_t i = 0; i < cfg.layers; ++i) {
        std::string d = "head.dec" + std::to_string(i);
        auto attn = [&](const std::string& bp, int64_t mem_dim) {
            ps.add(bp + ".ln.w", ta::Tensor<T>::ones({c}), false);
            ps.add(bp + ".ln.b", ta::Tensor<T>::zeros({c}), false);
            lin(bp + ".q", c, c);
            lin(bp + ".k", mem_dim, c);
            lin(bp + ".v", mem_dim, c);
            lin(bp + ".o", c, c);
        };
        attn(d + ".self", c);
        attn(d + ".c3d", c);
        attn(d + ".ctx", d_text);
        attn(d + ".c2d", c);
        ps.add(d + ".mlp.ln.w", ta::Tensor<T>::ones({c}), false);
        ps.add(d + ".mlp.ln.b", ta::Tensor<T>::zeros({c}), false);
        mlp2(d + ".mlp", c, 4 * c, c);
    }
}

// trainable scalar count implied by init_head_params, for accounting reports
inline int64_t head_param_count(const HeadConfig& cfg, int64_t c, int64_t d_text,
                                int64_t n_classes) {
    int64_t e = cfg.contrast_dim;
    int64_t n = (c * e + e) + (d_text * e + e) + 1;       // projections + tau
    n += (3 * c + c) + (c * c + c);                       // qpos mlp
    n += (c * c + c) + (c * 9 + 9);                       // box mlp
    n += (c + 1) + (c * n_classes + n_classes);           // center + class heads
    int64_t self_like = 2 * c + 4 * (c * c + c);          // ln + q,k,v,o at width c
    int64_t ctx = 2 * c + 2 * (c * c + c) + 2 * (d_text * c + c);
    int64_t mlp = 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c);
    n += cfg.layers * (3 * self_like + ctx + mlp);
    return n;
}

// ---------------------------------------------------------------------------
// fusion + selection

namespace detail {

// rows scaled to unit L2 norm (1e-12 floor keeps zero rows finite)
template <class T>
ta::Tensor<T> l2_normalize(const ta::Tensor<T>& x) {
    auto n = ta::sqrt(ta::add_scalar(ta::sum_axis(ta::square(x), 1, true), T(1e-12)));
    return ta::div(x, n);
}

}  // namespace detail

// Cosine-similarity logits between projected voxel features [N, C] and text
// tokens [L, D2], divided by the learnable temperature; pad columns get -1e30.
template <class T>
ta::Tensor<T> visual_text_fuse(const ta::ParamStore<T>& ps, const ta::Tensor<T>& f_pmv,
                               const ta::Tensor<T>& f_t, const std::vector<uint8_t>& text_mask) {
    check(f_pmv.dim() == 2 && f_t.dim() == 2, "visual_text_fuse: rank-2 inputs expected");
    int64_t l = f_t.extent(0);
    check(int64_t(text_mask.size()) == l, "visual_text_fuse: mask length mismatch");
    auto vn = detail::l2_normalize(ta::linear(f_pmv, ps.get("head.pv.w"), ps.get("head.pv.b")));
    auto tn = detail::l2_normalize(ta::linear(f_t, ps.get("head.pt.w"), ps.get("head.pt.b")));
    auto sim = ta::matmul(vn, ta::permute(tn, {1, 0}));
    auto tau = ta::reshape(ta::clamp_min(ps.get("head.tau"), T(1e-3)), {1, 1});
    auto logits = ta::div(sim, tau);
    bool any_pad = false;
    for (auto m : text_mask) any_pad |= (m == 0);
    if (any_pad) {
        std::vector<T> add(static_cast<size_t>(l));
        for (int64_t j = 0; j < l; ++j) add[size_t(j)] = text_mask[size_t(j)] ? T(0) : T(-1e30);
        logits = ta::add(logits, ta::Tensor<T>::from_data({1, l}, std::move(add)));
    }
    return logits;
}

// Top-k voxels by max-over-columns logit score (ties -> lower row). Queries
// are the selected feature rows plus an MLP embedding of their centers.
template <class T>
QuerySet<T> topk_select(const ta::ParamStore<T>& ps, const ta::Tensor<T>& logits,
                        const ta::Tensor<T>& f_pmv, const std::vector<geo::Vec3>& centers,
                        int64_t k) {
    check(k >= 1, "topk_select: k must be >= 1");
    int64_t n = f_pmv.extent(0);
    check(logits.dim() == 2 && logits.extent(0) == n, "topk_select: logits/feature row mismatch");
    check(int64_t(centers.size()) == n, "topk_select: one center per voxel expected");
    if (k > n) {
        std::cerr << "topk_select: k=" << k << " exceeds " << n << " voxels; selecting all\n";
        k = n;
    }
    int64_t cols = logits.extent(1);
    auto lv = logits.data();
    std::vector<T> score(size_t(n), T(-std::numeric_limits<T>::infinity()));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < cols; ++j)
            score[size_t(i)] = std::max(score[size_t(i)], lv[size_t(i * cols + j)]);
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (score[size_t(a)] != score[size_t(b)]) return score[size_t(a)] > score[size_t(b)];
        return a < b;
    });
    order.resize(size_t(k));

    QuerySet<T> qs;
    qs.indices = order;
    std::vector<T> av(size_t(k) * 3);
    for (int64_t i = 0; i < k; ++i) {
        qs.anchors.push_back(centers[size_t(order[size_t(i)])]);
        qs.scores.push_back(score[size_t(order[size_t(i)])]);
        for (int64_t d = 0; d < 3; ++d) av[size_t(i * 3 + d)] = T(qs.anchors.back()[d]);
    }
    qs.anchor_t = ta::Tensor<T>::from_data({k, 3}, std::move(av));
    auto pe = ta::linear(
        ta::relu(ta::linear(qs.anchor_t, ps.get("head.qpos.w1"), ps.get("head.qpos.b1"))),
        ps.get("head.qpos.w2"), ps.get("head.qpos.b2"));
    qs.queries = ta::add(ta::index_select(f_pmv, 0, order), pe);
    return qs;
}

// finest recovered 2D map [V, C, H, W] -> flat token matrix [V*H*W, C]
template <class T>
ta::Tensor<T> flatten_view_tokens(const ta::Tensor<T>& map) {
    check(map.dim() == 4, "flatten_view_tokens: [V,C,H,W] expected");
    int64_t v = map.extent(0), c = map.extent(1), h = map.extent(2), w = map.extent(3);
    return ta::reshape(ta::permute(map, {0, 2, 3, 1}), {v * h * w, c});
}

// ---------------------------------------------------------------------------
// decoder

// One pre-norm decoder layer: self-attention, cross-attention to fused 3D
// voxels, to text tokens (grounding only), to recovered 2D tokens (unless
// ablated), then a residual MLP. Memories are attended un-normalized; layer
// norm applies to the query stream.
template <class T>
ta::Tensor<T> decode_layer(const ta::ParamStore<T>& ps, const std::string& pfx, int64_t heads,
                           const ta::Tensor<T>& q, const ta::Tensor<T>& f_pmv,
                           const ta::Tensor<T>& f_t, const std::vector<uint8_t>& text_mask,
                           const ta::Tensor<T>& f_mv1, bool use_text, bool use_2d) {
    auto sub = [&](const ta::Tensor<T>& x, const std::string& bp, const ta::Tensor<T>& mem,
                   const std::vector<uint8_t>* km, bool self_attn) {
        auto h = ta::layernorm(x, ps.get(bp + ".ln.w"), ps.get(bp + ".ln.b"));
        const ta::Tensor<T>& src = self_attn ? h : mem;
        auto qq = ta::linear(h, ps.get(bp + ".q.w"), ps.get(bp + ".q.b"));
        auto kk = ta::linear(src, ps.get(bp + ".k.w"), ps.get(bp + ".k.b"));
        auto vv = ta::linear(src, ps.get(bp + ".v.w"), ps.get(bp + ".v.b"));
        auto a = ta::attention(qq, kk, vv, heads, km);
        return ta::add(x, ta::linear(a, ps.get(bp + ".o.w"), ps.get(bp + ".o.b")));
    };
    auto x = sub(q, pfx + ".self", q, nullptr, true);
    x = sub(x, pfx + ".c3d", f_pmv, nullptr, false);
    if (use_text) x = sub(x, pfx + ".ctx", f_t, &text_mask, false);
    if (use_2d) x = sub(x, pfx + ".c2d", f_mv1, nullptr, false);
    auto h = ta::layernorm(x, ps.get(pfx + ".mlp.ln.w"), ps.get(pfx + ".mlp.ln.b"));
    auto m = ta::linear(ta::relu(ta::linear(h, ps.get(pfx + ".mlp.w1"), ps.get(pfx + ".mlp.b1"))),
                        ps.get(pfx + ".mlp.w2"), ps.get(pfx + ".mlp.b2"));
    return ta::add(x, m);
}

// Runs the stacked decoder and the shared prediction heads after every layer
// (deep supervision). Grounding re-scores alignment with the contrastive
// projections; detection uses the class head and skips the text memory.
template <class T>
std::vector<LayerPrediction<T>> decode(const ta::ParamStore<T>& ps, const HeadConfig& cfg,
                                       const QuerySet<T>& qs, const ta::Tensor<T>& f_pmv,
                                       const ta::Tensor<T>& f_t,
                                       const std::vector<uint8_t>& text_mask,
                                       const ta::Tensor<T>& f_mv1, Task task) {
    int64_t k = qs.queries.extent(0);
    std::vector<LayerPrediction<T>> out;
    auto x = qs.queries;
    for (int64_t i = 0; i < cfg.layers; ++i) {
        x = decode_layer(ps, "head.dec" + std::to_string(i), cfg.heads, x, f_pmv, f_t, text_mask,
                         f_mv1, task == Task::ground, cfg.use_2d);
        LayerPrediction<T> p;
        p.align = task == Task::ground
                      ? visual_text_fuse(ps, x, f_t, text_mask)
                      : ta::linear(x, ps.get("head.cls.w"), ps.get("head.cls.b"));
        p.box_raw = ta::linear(
            ta::relu(ta::linear(x, ps.get("head.box.w1"), ps.get("head.box.b1"))),
            ps.get("head.box.w2"), ps.get("head.box.b2"));
        p.center_logit = ta::reshape(ta::linear(x, ps.get("head.ctr.w"), ps.get("head.ctr.b")), {k});
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// box coding

// raw 9-vector -> box: center = anchor + raw[0:3], size = softplus(raw[3:6]) +
// 1e-4, angles = pi * tanh(raw[6:9])
inline geo::OrientedBox9 decode_box(const std::array<double, 9>& raw, const geo::Vec3& anchor) {
    auto sp = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
    geo::Vec3 c{anchor[0] + raw[0], anchor[1] + raw[1], anchor[2] + raw[2]};
    geo::Vec3 s{sp(raw[3]) + 1e-4, sp(raw[4]) + 1e-4, sp(raw[5]) + 1e-4};
    geo::Vec3 a{std::numbers::pi * std::tanh(raw[6]), std::numbers::pi * std::tanh(raw[7]),
                std::numbers::pi * std::tanh(raw[8])};
    return geo::make_box(c, s, a);
}

// in-graph variant on [K, 9] raws and [K, 3] anchors, emitting [K, 9]
template <class T>
ta::Tensor<T> decode_box_graph(const ta::Tensor<T>& raw, const ta::Tensor<T>& anchors) {
    check(raw.dim() == 2 && raw.extent(1) == 9, "decode_box_graph: [K,9] raw expected");
    check(anchors.dim() == 2 && anchors.extent(1) == 3 && anchors.extent(0) == raw.extent(0),
          "decode_box_graph: anchor shape mismatch");
    auto c = ta::add(ta::slice(raw, 1, 0, 3), anchors);
    auto s = ta::add_scalar(ta::softplus(ta::slice(raw, 1, 3, 3)), T(1e-4));
    auto a = ta::mul_scalar(ta::tanh(ta::slice(raw, 1, 6, 3)), T(std::numbers::pi));
    return ta::concat(std::vector<ta::Tensor<T>>{c, s, a}, 1);
}

// inverse of decode_box, producing the 9 regression targets for a gt box
inline std::array<double, 9> encode_box_target(const geo::OrientedBox9& b, const geo::Vec3& anchor) {
    std::array<double, 9> e{};
    for (int i = 0; i < 3; ++i) e[size_t(i)] = b.center[i] - anchor[i];
    for (int i = 0; i < 3; ++i) {
        double y = std::max(b.size[i] - 1e-4, 1e-6);
        e[size_t(3 + i)] = y > 30 ? y : std::log(std::expm1(y));
    }
    for (int i = 0; i < 3; ++i) {
        double t = std::clamp(b.angles[i] / std::numbers::pi, -0.999999, 0.999999);
        e[size_t(6 + i)] = std::atanh(t);
    }
    return e;
}

// ---------------------------------------------------------------------------
// loss

// Sigmoid focal loss summed over all logits and divided by `norm`; `pos`
// flags the positive entries. gamma = 0 reduces to alpha-weighted CE.
template <class T>
ta::Tensor<T> focal_loss(const ta::Tensor<T>& logits, const std::vector<uint8_t>& pos, T falpha,
                         T fgamma, T norm) {
    check(int64_t(pos.size()) == logits.numel(), "focal_loss: positive mask size mismatch");
    check(norm > 0, "focal_loss: norm must be positive");
    std::vector<T> sgn(pos.size()), at(pos.size());
    for (size_t i = 0; i < pos.size(); ++i) {
        sgn[i] = pos[i] ? T(1) : T(-1);
        at[i] = pos[i] ? falpha : T(1) - falpha;
    }
    auto xt = ta::mul(logits, ta::Tensor<T>::from_data(logits.shape(), std::move(sgn)));
    auto ce = ta::neg(ta::log(ta::clamp_min(ta::sigmoid(xt), T(1e-12))));
    auto mod = ta::exp(ta::mul_scalar(
        ta::log(ta::clamp_min(ta::sigmoid(ta::neg(xt)), T(1e-12))), fgamma));
    auto l = ta::mul(ta::Tensor<T>::from_data(logits.shape(), std::move(at)), ta::mul(mod, ce));
    return ta::mul_scalar(ta::sum_all(l), T(1) / norm);
}

// mean binary cross-entropy of logits against soft targets in [0, 1]
template <class T>
ta::Tensor<T> bce_loss(const ta::Tensor<T>& logits, const std::vector<T>& target) {
    check(int64_t(target.size()) == logits.numel(), "bce_loss: target size mismatch");
    std::vector<T> tneg(target.size());
    for (size_t i = 0; i < target.size(); ++i) {
        check(target[i] >= T(0) && target[i] <= T(1), "bce_loss: targets must lie in [0,1]");
        tneg[i] = T(1) - target[i];
    }
    auto lp = ta::log(ta::clamp_min(ta::sigmoid(logits), T(1e-12)));
    auto ln = ta::log(ta::clamp_min(ta::sigmoid(ta::neg(logits)), T(1e-12)));
    auto tp = ta::Tensor<T>::from_data(logits.shape(), std::vector<T>(target));
    auto tn = ta::Tensor<T>::from_data(logits.shape(), std::move(tneg));
    return ta::neg(ta::mean_all(ta::add(ta::mul(tp, lp), ta::mul(tn, ln))));
}

// Hungarian-matched set loss, applied per decoder layer and averaged.
// Matching cost per (query, target): alpha * (-alignment prob) + beta *
// L1(raw box vs encoded target) + gamma * |anchor - target center|. Matched
// queries are focal positives; every query gets a BCE centerness term against
// exp(-d^2 / 2 sigma^2) of its anchor (0 when unmatched).
template <class T>
LossBreakdown<T> match_loss(const std::vector<LayerPrediction<T>>& preds, const QuerySet<T>& qs,
                            const std::vector<BoxTarget>& targets, const HeadConfig& cfg,
                            Task task) {
    check(!preds.empty(), "match_loss: no layer predictions");
    if (task == Task::ground)
        check(targets.size() == 1, "match_loss: grounding expects exactly one target");
    int64_t k = int64_t(qs.anchors.size());
    int64_t nt = int64_t(targets.size());
    double inv_2s2 = 1.0 / (2.0 * cfg.center_sigma * cfg.center_sigma);

    ta::Tensor<T> total;
    bool have_total = false;
    double acc_cls = 0, acc_box = 0, acc_ctr = 0;
    for (const auto& p : preds) {
        int64_t cols = p.align.extent(1);
        auto align_v = p.align.data();
        auto raw_v = p.box_raw.data();

        // per-query alignment logit: max over text tokens when grounding
        ta::Tensor<T> qlog;
        if (task == Task::ground) qlog = ta::max_axis(p.align, 1);

        // pairwise cost on forward values
        std::vector<std::pair<int64_t, int64_t>> pairs;
        if (nt > 0) {
            std::vector<double> cost(size_t(k * nt));
            for (int64_t q = 0; q < k; ++q) {
                for (int64_t t = 0; t < nt; ++t) {
                    int64_t col = task == Task::ground ? 0 : targets[size_t(t)].cls;
                    check(col >= 0 && col < cols, "match_loss: target class out of range");
                    double lq = task == Task::ground ? double(qlog.data()[size_t(q)])
                                                     : double(align_v[size_t(q * cols + col)]);
                    double prob = 1.0 / (1.0 + std::exp(-lq));
                    auto enc = encode_box_target(targets[size_t(t)].box, qs.anchors[size_t(q)]);
                    double l1 = 0;
                    for (int i = 0; i < 9; ++i)
                        l1 += std::abs(double(raw_v[size_t(q * 9 + i)]) - enc[size_t(i)]);
                    double d = geo::norm(qs.anchors[size_t(q)] - targets[size_t(t)].box.center);
                    cost[size_t(q * nt + t)] =
                        cfg.alpha * (-prob) + cfg.beta * l1 + cfg.gamma * d;
                }
            }
            pairs = hungarian(cost, k, nt);
        }
        int64_t matched = int64_t(pairs.size());

        // classification: focal with matched entries positive
        std::vector<uint8_t> pos(size_t(p.align.numel()), 0);
        if (task == Task::ground) {
            pos.assign(size_t(k), 0);
            for (auto& pr : pairs) pos[size_t(pr.first)] = 1;
        } else {
            for (auto& pr : pairs)
                pos[size_t(pr.first * cols + targets[size_t(pr.second)].cls)] = 1;
        }
        auto cls_t = focal_loss(task == Task::ground ? qlog : p.align, pos, T(cfg.focal_alpha),
                                T(cfg.focal_gamma), T(std::max<int64_t>(1, matched)));

        // box regression on matched pairs
        ta::Tensor<T> box_t;
        bool have_box = matched > 0;
        if (have_box) {
            std::vector<int64_t> rows;
            std::vector<T> enc_flat;
            for (auto& pr : pairs) {
                rows.push_back(pr.first);
                auto enc = encode_box_target(targets[size_t(pr.second)].box,
                                             qs.anchors[size_t(pr.first)]);
                for (double e : enc) enc_flat.push_back(T(e));
            }
            auto sel = ta::index_select(p.box_raw, 0, rows);
            auto tgt = ta::Tensor<T>::from_data({matched, 9}, std::move(enc_flat));
            box_t = ta::mul_scalar(ta::sum_all(ta::abs(ta::sub(sel, tgt))), T(1) / T(matched));
        }

        // centerness: soft gaussian target for matched anchors, 0 otherwise
        std::vector<T> ctr_target(size_t(k), T(0));
        for (auto& pr : pairs) {
            double d = geo::norm(qs.anchors[size_t(pr.first)] -
                                 targets[size_t(pr.second)].box.center);
            ctr_target[size_t(pr.first)] = T(std::exp(-d * d * inv_2s2));
        }
        auto ctr_t = bce_loss(p.center_logit, ctr_target);

        acc_cls += double(cls_t.item());
        acc_ctr += double(ctr_t.item());
        auto layer = ta::add(ta::mul_scalar(cls_t, T(cfg.alpha)),
                             ta::mul_scalar(ctr_t, T(cfg.gamma)));
        if (have_box) {
            acc_box += double(box_t.item());
            layer = ta::add(layer, ta::mul_scalar(box_t, T(cfg.beta)));
        }
        total = have_total ? ta::add(total, layer) : layer;
        have_total = true;
    }
    T inv_layers = T(1) / T(preds.size());
    LossBreakdown<T> out;
    out.total = ta::mul_scalar(total, inv_layers);
    out.cls = acc_cls / double(preds.size());
    out.box = acc_box / double(preds.size());
    out.center = acc_ctr / double(preds.size());
    return out;
}

// ---------------------------------------------------------------------------
// prediction extraction (final layer)

// grounding output: the box of the query maximizing sigmoid(center) *
// sigmoid(best token alignment); ties -> lower query index
template <class T>
GroundingPick pick_grounding(const LayerPrediction<T>& last, const QuerySet<T>& qs) {
    int64_t k = last.center_logit.extent(0);
    check(k == int64_t(qs.anchors.size()), "pick_grounding: query count mismatch");
    int64_t cols = last.align.extent(1);
    auto av = last.align.data();
    auto cv = last.center_logit.data();
    auto rv = last.box_raw.data();
    GroundingPick best;
    for (int64_t q = 0; q < k; ++q) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, double(av[size_t(q * cols + j)]));
        double s = 1.0 / (1.0 + std::exp(-double(cv[size_t(q)]))) / (1.0 + std::exp(-mx));
        if (s > best.score) {
            best.score = s;
            best.query = q;
        }
    }
    std::array<double, 9> raw{};
    for (int i = 0; i < 9; ++i) raw[size_t(i)] = double(rv[size_t(best.query * 9 + i)]);
    best.box = decode_box(raw, qs.anchors[size_t(best.query)]);
    return best;
}

// detection output: each query's best class, kept above the score threshold
template <class T>
std::vector<Detection> pick_detections(const LayerPrediction<T>& last, const QuerySet<T>& qs,
                                       double threshold = 0.1) {
    int64_t k = last.center_logit.extent(0);
    int64_t cols = last.align.extent(1);
    auto av = last.align.data();
    auto cv = last.center_logit.data();
    auto rv = last.box_raw.data();
    std::vector<Detection> out;
    for (int64_t q = 0; q < k; ++q) {
        int64_t bc = 0;
        double mx = double(av[size_t(q * cols)]);
        for (int64_t j = 1; j < cols; ++j) {
            double v = double(av[size_t(q * cols + j)]);
            if (v > mx) {
                mx = v;
                bc = j;
            }
        }
        double s = 1.0 / (1.0 + std::exp(-mx)) / (1.0 + std::exp(-double(cv[size_t(q)])));
        if (s <= threshold) continue;
        std::array<double, 9> raw{};
        for (int i = 0; i < 9; ++i) raw[size_t(i)] = double(rv[size_t(q * 9 + i)]);
        out.push_back({decode_box(raw, qs.anchors[size_t(q)]), bc, s});
    }
    return out;
}

}  // namespace tmg::head

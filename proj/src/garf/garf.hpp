#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "enc/config.hpp"
#include "garf/config.hpp"
#include "garf/sparse.hpp"
#include "geo/camera.hpp"
#include "ta/ops.hpp"
#include "ta/param_store.hpp"

namespace tmg::garf {

namespace detail {

template <class T>
void add_bn(ta::ParamStore<T>& ps, const std::string& prefix, int64_t c) {
    ps.add(prefix + ".w", ta::Tensor<T>::ones({c}), false);
    ps.add(prefix + ".b", ta::Tensor<T>::zeros({c}), false);
    ps.add_buffer(prefix + ".mean", ta::Tensor<T>::zeros({c}));
    ps.add_buffer(prefix + ".var", ta::Tensor<T>::ones({c}));
}

// Batch norm over rows (channel axis 1); training mode folds the fresh batch
// statistics into the running buffers with momentum 0.1.
template <class T>
ta::Tensor<T> bn(const ta::Tensor<T>& x, ta::ParamStore<T>& ps, const std::string& prefix,
                 bool train) {
    if (train) {
        std::vector<T> m, v;
        auto y = ta::batchnorm_train(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"), &m, &v);
        auto rm = ps.buffer(prefix + ".mean").raw_data();
        auto rv = ps.buffer(prefix + ".var").raw_data();
        for (size_t i = 0; i < m.size(); ++i) {
            rm[i] = T(0.9) * rm[i] + T(0.1) * m[i];
            rv[i] = T(0.9) * rv[i] + T(0.1) * v[i];
        }
        return y;
    }
    auto rm = ps.buffer(prefix + ".mean").data();
    auto rv = ps.buffer(prefix + ".var").data();
    return ta::batchnorm_eval(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"),
                              std::vector<T>(rm.begin(), rm.end()),
                              std::vector<T>(rv.begin(), rv.end()));
}

// ceil-mode 2x2/2 average pooling; edge windows average their valid cells only
template <class T>
ta::Tensor<T> avg_pool_ceil2(const ta::Tensor<T>& x) {
    check(x.dim() == 4, "avg_pool: needs [V,C,H,W]");
    int64_t V = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    int64_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
    auto flat = ta::reshape(ta::permute(x, {0, 2, 3, 1}), {V * H * W, C});
    std::vector<int64_t> idx;
    std::vector<T> wt;
    idx.reserve(static_cast<size_t>(V * Ho * Wo * 4));
    wt.reserve(idx.capacity());
    for (int64_t v = 0; v < V; ++v)
        for (int64_t yo = 0; yo < Ho; ++yo)
            for (int64_t xo = 0; xo < Wo; ++xo) {
                int64_t valid = std::min<int64_t>(2, H - 2 * yo) * std::min<int64_t>(2, W - 2 * xo);
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx) {
                        int64_t y = 2 * yo + dy, xx = 2 * xo + dx;
                        bool in = y < H && xx < W;
                        idx.push_back(in ? (v * H + y) * W + xx : -1);
                        wt.push_back(in ? T(1) / static_cast<T>(valid) : T(0));
                    }
            }
    auto pooled = ta::weighted_gather(flat, std::move(idx), std::move(wt), 4);
    return ta::permute(ta::reshape(pooled, {V, Ho, Wo, C}), {0, 3, 1, 2});
}

}  // namespace detail

// All fusion-stage parameters train; only the token encoders upstream are
// frozen. Sparse conv weights are [27*Cin, Cout]; 1x1 convs are plain linears.
template <class T>
void init_garf_params(ta::ParamStore<T>& ps, const enc::EncoderConfig& ec, const GarfConfig& gc,
                      Rng& rng) {
    ec.validate();
    gc.validate();
    int64_t dp = gc.stem_channels, c = gc.channels, d1 = ec.d_model;
    auto w = [&](Shape s) { return ta::Tensor<T>::randn(s, rng, T(0.02)); };
    ps.add("garf.stem.w", w({27 * 6, dp}), false);
    ps.add("garf.stem.b", ta::Tensor<T>::zeros({dp}), false);
    detail::add_bn(ps, "garf.stem.bn", dp);
    ps.add("garf.up.w", w({d1, c}), false);
    ps.add("garf.up.b", ta::Tensor<T>::zeros({c}), false);
    detail::add_bn(ps, "garf.up.bn", c);
    ps.add("garf.reduce.w", w({dp + c, c}), false);
    ps.add("garf.reduce.b", ta::Tensor<T>::zeros({c}), false);
    detail::add_bn(ps, "garf.reduce.bn", c);
    for (int64_t i = 1; i <= gc.pyramid_levels; ++i) {
        std::string pyr = "garf.pyr" + std::to_string(i);
        ps.add(pyr + ".w", w({27 * c, c}), false);
        ps.add(pyr + ".b", ta::Tensor<T>::zeros({c}), false);
        detail::add_bn(ps, pyr + ".bn", c);
        std::string rec = "garf.rec" + std::to_string(i);
        ps.add(rec + ".w", w({d1, c}), false);
        ps.add(rec + ".b", ta::Tensor<T>::zeros({c}), false);
        detail::add_bn(ps, rec + ".bn", c);
        std::string ap = "garf.apif" + std::to_string(i);
        ps.add(ap + ".w1", w({2 * c, c / 2}), false);
        ps.add(ap + ".b1", ta::Tensor<T>::zeros({c / 2}), false);
        ps.add(ap + ".w2", w({c / 2, c}), false);
        ps.add(ap + ".b2", ta::Tensor<T>::zeros({c}), false);
    }
    ps.add("garf.neck.w", w({2 * c, c}), false);
    ps.add("garf.neck.b", ta::Tensor<T>::zeros({c}), false);
}

// Voxel stem: mean-pooled raw features -> one submanifold 3^3 conv + BN + ReLU.
template <class T>
SparseTensor3D<T> stem(const SparseTensor3D<T>& raw, ta::ParamStore<T>& ps, bool train) {
    auto s1 = sparse_conv3(raw, ps.get("garf.stem.w"), ps.get("garf.stem.b"), 1);
    s1.feats = ta::relu(detail::bn(s1.feats, ps, "garf.stem.bn", train));
    return s1;
}

// Inverse-distance blend of each query position's 3 nearest token centers
// (distances floored at 1e-8, nearest-tie broken toward the lower token).
template <class T>
ta::Tensor<T> interp_tokens(const ta::Tensor<T>& f_p, const std::vector<geo::Vec3>& centers,
                            const std::vector<geo::Vec3>& queries) {
    int64_t m = f_p.extent(0);
    check(f_p.dim() == 2 && m == static_cast<int64_t>(centers.size()),
          "interp: token/center count mismatch");
    check(m >= 3, "interp: needs at least 3 point tokens");
    int64_t n = static_cast<int64_t>(queries.size());
    std::vector<int64_t> idx(static_cast<size_t>(n * 3));
    std::vector<T> wt(static_cast<size_t>(n * 3));
    std::vector<std::pair<double, int64_t>> dist(static_cast<size_t>(m));
    for (int64_t i = 0; i < n; ++i) {
        const geo::Vec3& p = queries[static_cast<size_t>(i)];
        for (int64_t j = 0; j < m; ++j)
            dist[static_cast<size_t>(j)] = {geo::norm(centers[static_cast<size_t>(j)] - p), j};
        std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
        double invsum = 0;
        std::array<double, 3> inv;
        for (int k = 0; k < 3; ++k) {
            inv[static_cast<size_t>(k)] = 1.0 / std::max(dist[static_cast<size_t>(k)].first, 1e-8);
            invsum += inv[static_cast<size_t>(k)];
        }
        for (int k = 0; k < 3; ++k) {
            idx[static_cast<size_t>(i * 3 + k)] = dist[static_cast<size_t>(k)].second;
            wt[static_cast<size_t>(i * 3 + k)] = static_cast<T>(inv[static_cast<size_t>(k)] / invsum);
        }
    }
    return ta::weighted_gather(f_p, std::move(idx), std::move(wt), 3);
}

// Spread the M point tokens back over the voxel set: inverse-distance blend at
// every voxel center, then 1x1 conv + BN + ReLU.
template <class T>
ta::Tensor<T> propagate_3d(const ta::Tensor<T>& f_p, const std::vector<geo::Vec3>& centers,
                           const SparseTensor3D<T>& s1, ta::ParamStore<T>& ps, bool train) {
    std::vector<geo::Vec3> queries(static_cast<size_t>(s1.size()));
    for (int64_t i = 0; i < s1.size(); ++i) queries[static_cast<size_t>(i)] = s1.world_center(i);
    auto up = interp_tokens(f_p, centers, queries);
    auto y = ta::linear(up, ps.get("garf.up.w"), ps.get("garf.up.b"));
    return ta::relu(detail::bn(y, ps, "garf.up.bn", train));
}

// Concat the stem features with the propagated token features on the same
// coordinate set, reduce to C channels, then stack stride-2 conv stages.
template <class T>
std::vector<SparseTensor3D<T>> rebuild_and_pyramid(const SparseTensor3D<T>& s1,
                                                   const ta::Tensor<T>& f_ps,
                                                   ta::ParamStore<T>& ps, const GarfConfig& gc,
                                                   bool train) {
    check(f_ps.extent(0) == s1.size(), "pyramid: f_ps row mismatch");
    SparseTensor3D<T> s2 = s1;
    s2.feats = ta::concat(std::vector<ta::Tensor<T>>{s1.feats, f_ps}, 1);
    s2.feats = ta::relu(detail::bn(
        ta::linear(s2.feats, ps.get("garf.reduce.w"), ps.get("garf.reduce.b")), ps,
        "garf.reduce.bn", train));
    std::vector<SparseTensor3D<T>> levels;
    SparseTensor3D<T> cur = std::move(s2);
    for (int64_t i = 1; i <= gc.pyramid_levels; ++i) {
        std::string p = "garf.pyr" + std::to_string(i);
        cur = sparse_conv3(cur, ps.get(p + ".w"), ps.get(p + ".b"), 2);
        cur.feats = ta::relu(detail::bn(cur.feats, ps, p + ".bn", train));
        levels.push_back(cur);
    }
    return levels;
}

// Rebuild spatial image maps from the encoder taps: drop the class token,
// lay tokens on the patch grid row-major, 1x1 conv + BN + ReLU, then pool
// level i down i-1 times (ceil semantics).
template <class T>
std::vector<ta::Tensor<T>> recover_2d(const std::vector<ta::Tensor<T>>& taps,
                                      const enc::EncoderConfig& ec, ta::ParamStore<T>& ps,
                                      const GarfConfig& gc, bool train) {
    check(static_cast<int64_t>(taps.size()) == gc.pyramid_levels,
          "recover_2d: need one tap per pyramid level");
    int64_t g = ec.image_size / ec.patch_size;
    std::vector<ta::Tensor<T>> maps;
    for (size_t li = 0; li < taps.size(); ++li) {
        const auto& tap = taps[li];
        check(tap.dim() == 3 && tap.extent(1) == g * g + 1 && tap.extent(2) == ec.d_model,
              "recover_2d: tap shape mismatch");
        int64_t nv = tap.extent(0);
        std::string p = "garf.rec" + std::to_string(li + 1);
        auto x = ta::slice(tap, 1, 1, g * g);  // token j lands at (j / g, j % g)
        x = ta::linear(x, ps.get(p + ".w"), ps.get(p + ".b"));
        x = ta::reshape(ta::permute(x, {0, 2, 1}), {nv, gc.channels, g, g});
        x = ta::relu(detail::bn(x, ps, p + ".bn", train));
        for (size_t k = 0; k < li; ++k) x = detail::avg_pool_ceil2(x);
        maps.push_back(x);
    }
    return maps;
}

// Project each voxel center into every view; where visible, bilinearly sample
// the level's map at the patch-scaled pixel (clamped to the map border) and
// average over the visible views. Voxels no view sees come back exactly zero.
template <class T>
ta::Tensor<T> project_sample(const SparseTensor3D<T>& level, const ta::Tensor<T>& map2d,
                             const std::vector<geo::CameraView>& views, int64_t patch_size,
                             int64_t level_index) {
    check(map2d.dim() == 4, "project_sample: map must be [V,C,H,W]");
    int64_t nv = map2d.extent(0), C = map2d.extent(1), H = map2d.extent(2), W = map2d.extent(3);
    check(nv == static_cast<int64_t>(views.size()), "project_sample: view count mismatch");
    int64_t n = level.size();
    double scale = static_cast<double>(patch_size) * std::pow(2.0, static_cast<double>(level_index - 1));
    std::vector<geo::Vec3> centers(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) centers[static_cast<size_t>(i)] = level.world_center(i);
    std::vector<std::vector<geo::ProjectedPoint>> proj(static_cast<size_t>(nv));
    for (int64_t v = 0; v < nv; ++v) proj[static_cast<size_t>(v)] = geo::project(centers, views[static_cast<size_t>(v)]);
    auto flat = ta::reshape(ta::permute(map2d, {0, 2, 3, 1}), {nv * H * W, C});
    int64_t J = nv * 4;
    std::vector<int64_t> idx(static_cast<size_t>(n * J), -1);
    std::vector<T> wt(static_cast<size_t>(n * J), T(0));
    for (int64_t i = 0; i < n; ++i) {
        int64_t nvis = 0;
        for (int64_t v = 0; v < nv; ++v) nvis += proj[static_cast<size_t>(v)][static_cast<size_t>(i)].visible;
        if (nvis == 0) continue;
        for (int64_t v = 0; v < nv; ++v) {
            const auto& pp = proj[static_cast<size_t>(v)][static_cast<size_t>(i)];
            if (!pp.visible) continue;
            // full-res pixel -> map coordinates via the pixel-center convention
            double mu = std::clamp((pp.u + 0.5) / scale - 0.5, 0.0, static_cast<double>(W - 1));
            double mv = std::clamp((pp.v + 0.5) / scale - 0.5, 0.0, static_cast<double>(H - 1));
            int64_t x0 = static_cast<int64_t>(std::floor(mu)), y0 = static_cast<int64_t>(std::floor(mv));
            int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            double fx = mu - static_cast<double>(x0), fy = mv - static_cast<double>(y0);
            double cw[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
            int64_t cx[4] = {x0, x1, x0, x1}, cy[4] = {y0, y0, y1, y1};
            for (int k = 0; k < 4; ++k) {
                size_t slot = static_cast<size_t>(i * J + v * 4 + k);
                idx[slot] = (v * H + cy[k]) * W + cx[k];
                wt[slot] = static_cast<T>(cw[k] / static_cast<double>(nvis));
            }
        }
    }
    return ta::weighted_gather(flat, std::move(idx), std::move(wt), J);
}

// Pooled-descriptor gating: concat point and projected features, squeeze with
// max and mean over the voxel rows, push both through one shared bottleneck
// MLP, and sigmoid-gate the concatenated features channelwise.
template <class T>
ta::Tensor<T> apif_fuse(const ta::Tensor<T>& f_s, const ta::Tensor<T>& f_proj,
                        ta::ParamStore<T>& ps, int64_t level_index) {
    check(f_s.dim() == 2 && f_proj.dim() == 2 && f_s.extent(0) == f_proj.extent(0) &&
              f_s.extent(1) == f_proj.extent(1),
          "apif: rank or shape mismatch");
    std::string p = "garf.apif" + std::to_string(level_index);
    if (f_s.extent(0) == 0)
        return ta::Tensor<T>::from_data({0, 2 * f_s.extent(1)}, std::vector<T>{});
    auto fc = ta::concat(std::vector<ta::Tensor<T>>{f_s, f_proj}, 1);
    auto mlp = [&](const ta::Tensor<T>& d) {
        auto h = ta::relu(ta::linear(d, ps.get(p + ".w1"), ps.get(p + ".b1")));
        return ta::linear(h, ps.get(p + ".w2"), ps.get(p + ".b2"));
    };
    auto mx = mlp(ta::max_axis(fc, 0, true));
    auto av = mlp(ta::mean_axis(fc, 0, true));
    auto gate = ta::sigmoid(ta::concat(std::vector<ta::Tensor<T>>{mx, av}, 1));
    return ta::mul(fc, gate);  // gate broadcasts over rows
}

// Top-down merge: walk from the coarsest level down, adding each voxel's
// parent feature (its floor(c/2) cell one level up), then 1x1 conv at the
// finest level and keep the top ceil(prune_keep*N) rows by L2 norm.
template <class T>
SparseTensor3D<T> neck(std::vector<SparseTensor3D<T>> fused, ta::ParamStore<T>& ps,
                       const GarfConfig& gc) {
    check(!fused.empty(), "neck: needs at least one level");
    for (size_t li = fused.size() - 1; li > 0; --li) {
        auto parents = coord_index(fused[li].coords);
        const auto& fine = fused[li - 1];
        int64_t n = fine.size();
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::vector<T> wt(static_cast<size_t>(n), T(1));
        for (int64_t i = 0; i < n; ++i) {
            const Coord& c = fine.coords[static_cast<size_t>(i)];
            auto it = parents.find(Coord{floordiv2(c[0]), floordiv2(c[1]), floordiv2(c[2])});
            check(it != parents.end(), "neck: missing parent voxel");
            idx[static_cast<size_t>(i)] = it->second;
        }
        auto up = ta::weighted_gather(fused[li].feats, std::move(idx), std::move(wt), 1);
        fused[li - 1].feats = ta::add(fused[li - 1].feats, up);
    }
    SparseTensor3D<T> out = fused.front();
    out.feats = ta::linear(out.feats, ps.get("garf.neck.w"), ps.get("garf.neck.b"));
    int64_t n = out.size(), c = out.feats.extent(1);
    int64_t keep = static_cast<int64_t>(std::ceil(gc.prune_keep * static_cast<double>(n)));
    keep = std::min(keep, n);
    auto vals = out.feats.data();
    std::vector<std::pair<double, int64_t>> rank(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < c; ++j) {
            double x = static_cast<double>(vals[static_cast<size_t>(i * c + j)]);
            s += x * x;
        }
        rank[static_cast<size_t>(i)] = {-std::sqrt(s), i};  // ties keep the lower index
    }
    std::sort(rank.begin(), rank.end());
    std::vector<int64_t> kept(static_cast<size_t>(keep));
    for (int64_t i = 0; i < keep; ++i) kept[static_cast<size_t>(i)] = rank[static_cast<size_t>(i)].second;
    std::sort(kept.begin(), kept.end());
    SparseTensor3D<T> pruned;
    pruned.voxel_size = out.voxel_size;
    pruned.stride = out.stride;
    for (int64_t i : kept) pruned.coords.push_back(out.coords[static_cast<size_t>(i)]);
    pruned.feats = ta::index_select(out.feats, 0, kept);
    return pruned;
}

template <class T>
struct GarfOutput {
    SparseTensor3D<T> s_pmv;             // pruned fused voxels, width C
    std::vector<geo::Vec3> anchors;      // world centers of the surviving voxels
    std::vector<ta::Tensor<T>> maps_2d;  // recovered per-level maps [V,C,Hi,Wi]
};

// Full fusion stage: voxelize -> stem -> token propagation -> sparse pyramid,
// recover 2D maps from the encoder taps, project + gate-fuse per level, and
// merge through the neck.
template <class T>
GarfOutput<T> garf_forward(const geo::PointCloud& pc, const ta::Tensor<T>& f_p,
                           const std::vector<geo::Vec3>& token_centers,
                           const std::vector<ta::Tensor<T>>& taps,
                           const std::vector<geo::CameraView>& views, ta::ParamStore<T>& ps,
                           const enc::EncoderConfig& ec, const GarfConfig& gc, bool train) {
    auto raw = voxelize<T>(pc, gc.voxel_size);
    auto s1 = stem(raw, ps, train);
    auto f_ps = propagate_3d(f_p, token_centers, s1, ps, train);
    auto levels = rebuild_and_pyramid(s1, f_ps, ps, gc, train);
    GarfOutput<T> out;
    out.maps_2d = recover_2d(taps, ec, ps, gc, train);
    std::vector<SparseTensor3D<T>> fused(levels.size());
    for (size_t i = 0; i < levels.size(); ++i) {
        auto f_proj = project_sample(levels[i], out.maps_2d[i], views, ec.patch_size,
                                     static_cast<int64_t>(i + 1));
        fused[i] = levels[i];
        fused[i].feats = apif_fuse(levels[i].feats, f_proj, ps, static_cast<int64_t>(i + 1));
    }
    out.s_pmv = neck(std::move(fused), ps, gc);
    out.anchors.reserve(static_cast<size_t>(out.s_pmv.size()));
    for (int64_t i = 0; i < out.s_pmv.size(); ++i) out.anchors.push_back(out.s_pmv.world_center(i));
    return out;
}

}  // namespace tmg::garf

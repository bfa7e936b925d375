#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "enc/tokenize.hpp"
#include "ta/param_store.hpp"

namespace tmg::enc {

namespace detail {

template <class T>
void add_linear(ta::ParamStore<T>& ps, Rng& rng, const std::string& name, int64_t in, int64_t out,
                bool frozen) {
    ps.add(name + ".w", ta::Tensor<T>::randn({in, out}, rng, 0.02), frozen);
    ps.add(name + ".b", ta::Tensor<T>::zeros({out}), frozen);
}

template <class T>
void add_block(ta::ParamStore<T>& ps, Rng& rng, const std::string& pfx, int64_t d, bool frozen) {
    ps.add(pfx + ".ln1.w", ta::Tensor<T>::ones({d}), frozen);
    ps.add(pfx + ".ln1.b", ta::Tensor<T>::zeros({d}), frozen);
    add_linear(ps, rng, pfx + ".q", d, d, frozen);
    add_linear(ps, rng, pfx + ".k", d, d, frozen);
    add_linear(ps, rng, pfx + ".v", d, d, frozen);
    add_linear(ps, rng, pfx + ".o", d, d, frozen);
    ps.add(pfx + ".ln2.w", ta::Tensor<T>::ones({d}), frozen);
    ps.add(pfx + ".ln2.b", ta::Tensor<T>::zeros({d}), frozen);
    add_linear(ps, rng, pfx + ".mlp1", d, 4 * d, frozen);
    add_linear(ps, rng, pfx + ".mlp2", 4 * d, d, frozen);
}

template <class T>
void add_adapter(ta::ParamStore<T>& ps, Rng& rng, const std::string& pfx, int64_t d, int64_t bn) {
    // second projection starts at zero so the adapter begins as the identity
    ps.add(pfx + ".w1", ta::Tensor<T>::randn({d, bn}, rng, 0.02), false);
    ps.add(pfx + ".b1", ta::Tensor<T>::zeros({bn}), false);
    ps.add(pfx + ".w2", ta::Tensor<T>::zeros({bn, d}), false);
    ps.add(pfx + ".b2", ta::Tensor<T>::zeros({d}), false);
}

inline std::string adapter_prefix(Modality m, int64_t layer) {
    return std::string("adapter.") + modality_name(m) + ".l" + std::to_string(layer);
}

}  // namespace detail

// Creates every encoder parameter. The whole backbone — both transformers,
// patch/point/text embeddings — is frozen; adapters are the only trainable
// part. Image and point sequences share the "vis." transformer weights.
template <class T>
void init_encoder_params(const EncoderConfig& cfg, ta::ParamStore<T>& ps, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ps.add("vis.patch.w", ta::Tensor<T>::randn({cfg.d_model, 3, cfg.patch_size, cfg.patch_size}, rng, 0.02),
           true);
    ps.add("vis.patch.b", ta::Tensor<T>::zeros({cfg.d_model}), true);
    ps.add("vis.cls", ta::Tensor<T>::randn({1, cfg.d_model}, rng, 0.02), true);
    ps.add("vis.pos", ta::Tensor<T>::randn({cfg.image_tokens(), cfg.d_model}, rng, 0.02), true);
    for (int64_t l = 1; l <= cfg.layers; ++l)
        detail::add_block(ps, rng, "vis.l" + std::to_string(l), cfg.d_model, true);
    ps.add("vis.lnf.w", ta::Tensor<T>::ones({cfg.d_model}), true);
    ps.add("vis.lnf.b", ta::Tensor<T>::zeros({cfg.d_model}), true);

    detail::add_linear(ps, rng, "pt.mlp1", cfg.point_in_channels, cfg.d_model, true);
    detail::add_linear(ps, rng, "pt.mlp2", cfg.d_model, cfg.d_model, true);
    detail::add_linear(ps, rng, "pt.pos1", 3, cfg.d_model, true);
    detail::add_linear(ps, rng, "pt.pos2", cfg.d_model, cfg.d_model, true);

    ps.add("txt.embed", ta::Tensor<T>::randn({kVocab, cfg.text_d_model}, rng, 0.02), true);
    ps.add("txt.pos", ta::Tensor<T>::randn({cfg.text_max_len, cfg.text_d_model}, rng, 0.02), true);
    for (int64_t l = 1; l <= cfg.layers; ++l)
        detail::add_block(ps, rng, "txt.l" + std::to_string(l), cfg.text_d_model, true);
    ps.add("txt.lnf.w", ta::Tensor<T>::ones({cfg.text_d_model}), true);
    ps.add("txt.lnf.b", ta::Tensor<T>::zeros({cfg.text_d_model}), true);

    for (int64_t l : cfg.adapter_layers) {
        detail::add_adapter(ps, rng, detail::adapter_prefix(Modality::image, l), cfg.d_model,
                            cfg.adapter_bottleneck);
        detail::add_adapter(ps, rng, detail::adapter_prefix(Modality::point, l), cfg.d_model,
                            cfg.adapter_bottleneck);
        detail::add_adapter(ps, rng, detail::adapter_prefix(Modality::text, l), cfg.text_d_model,
                            cfg.adapter_bottleneck);
    }
}

// Bottleneck residual: x + W2(gelu(W1 x + b1)) + b2.
template <class T>
ta::Tensor<T> adapter_forward(const ta::ParamStore<T>& ps, const std::string& pfx,
                              const ta::Tensor<T>& x) {
    auto h = ta::gelu(ta::linear(x, ps.get(pfx + ".w1"), ps.get(pfx + ".b1")));
    return ta::add(x, ta::linear(h, ps.get(pfx + ".w2"), ps.get(pfx + ".b2")));
}

namespace detail {

template <class T>
ta::Tensor<T> block_forward(const ta::ParamStore<T>& ps, const std::string& pfx, int64_t heads,
                            const ta::Tensor<T>& x, const std::vector<uint8_t>* mask) {
    auto h = ta::layernorm(x, ps.get(pfx + ".ln1.w"), ps.get(pfx + ".ln1.b"));
    auto q = ta::linear(h, ps.get(pfx + ".q.w"), ps.get(pfx + ".q.b"));
    auto k = ta::linear(h, ps.get(pfx + ".k.w"), ps.get(pfx + ".k.b"));
    auto v = ta::linear(h, ps.get(pfx + ".v.w"), ps.get(pfx + ".v.b"));
    auto a = ta::attention(q, k, v, heads, mask);
    auto x1 = ta::add(x, ta::linear(a, ps.get(pfx + ".o.w"), ps.get(pfx + ".o.b")));
    auto h2 = ta::layernorm(x1, ps.get(pfx + ".ln2.w"), ps.get(pfx + ".ln2.b"));
    auto m = ta::linear(ta::gelu(ta::linear(h2, ps.get(pfx + ".mlp1.w"), ps.get(pfx + ".mlp1.b"))),
                        ps.get(pfx + ".mlp2.w"), ps.get(pfx + ".mlp2.b"));
    return ta::add(x1, m);
}

}  // namespace detail

template <class T>
struct EncodeResult {
    TokenSequence<T> final_seq;
    std::vector<ta::Tensor<T>> taps;  // post-block (and post-adapter) output per layer
};

// Pre-norm transformer over each sequence in the batch. Image and point
// sequences run the same visual weights; the modality tag only selects which
// adapter stack fires after the configured odd layers.
template <class T>
EncodeResult<T> encode(const EncoderConfig& cfg, const ta::ParamStore<T>& ps,
                       const TokenSequence<T>& seq) {
    cfg.validate();
    check(seq.tokens.dim() == 3, "encode: tokens must be [N, L, D]");
    int64_t n = seq.tokens.extent(0), len = seq.tokens.extent(1), d = seq.tokens.extent(2);
    bool is_text = seq.kind == Modality::text;
    check(d == (is_text ? cfg.text_d_model : cfg.d_model), "encode: token dim mismatch with config");
    check(int64_t(seq.mask.size()) == n * len, "encode: mask size mismatch");
    std::string tf = is_text ? "txt" : "vis";

    std::vector<std::vector<ta::Tensor<T>>> per_layer(size_t(cfg.layers));
    std::vector<ta::Tensor<T>> finals;
    for (int64_t s = 0; s < n; ++s) {
        auto x = ta::reshape(ta::slice(seq.tokens, 0, s, 1), {len, d});
        std::vector<uint8_t> m(seq.mask.begin() + s * len, seq.mask.begin() + (s + 1) * len);
        bool padded = false;
        for (uint8_t b : m) padded |= (b == 0);
        size_t next_adapter = 0;
        for (int64_t l = 1; l <= cfg.layers; ++l) {
            x = detail::block_forward(ps, tf + ".l" + std::to_string(l),
                                      is_text ? cfg.text_heads : cfg.heads, x, padded ? &m : nullptr);
            if (next_adapter < cfg.adapter_layers.size() && cfg.adapter_layers[next_adapter] == l) {
                x = adapter_forward(ps, detail::adapter_prefix(seq.kind, l), x);
                ++next_adapter;
            }
            per_layer[size_t(l - 1)].push_back(ta::reshape(x, {1, len, d}));
        }
        x = ta::layernorm(x, ps.get(tf + ".lnf.w"), ps.get(tf + ".lnf.b"));
        finals.push_back(ta::reshape(x, {1, len, d}));
    }

    EncodeResult<T> out;
    out.final_seq.tokens = n == 1 ? finals[0] : ta::concat(finals, 0);
    out.final_seq.mask = seq.mask;
    out.final_seq.kind = seq.kind;
    for (auto& layer : per_layer)
        out.taps.push_back(layer.size() == 1 ? layer[0] : ta::concat(layer, 0));
    return out;
}

// Point path, Eq-style: farthest-point centers -> K nearest neighbors ->
// center-normalized group features -> shared MLP + max-pool -> plus a learned
// positional embedding of the raw center coordinates.
template <class T>
TokenSequence<T> tokenize_points(const EncoderConfig& cfg, const ta::ParamStore<T>& ps,
                                 const geo::PointCloud& pc, uint64_t seed) {
    cfg.validate();
    check(int64_t(pc.positions.size()) >= cfg.point_groups,
          "tokenize_points: cloud smaller than the group count; resample the scene with more "
          "valid-depth pixels or lower point_groups");
    auto centers = fps(pc.positions, cfg.point_groups, seed);
    auto groups = knn_groups(pc.positions, centers, cfg.point_neighbors);
    auto feats = group_features<T>(pc, centers, groups, cfg.point_in_channels);  // [M,K,C]

    auto h = ta::gelu(ta::linear(feats, ps.get("pt.mlp1.w"), ps.get("pt.mlp1.b")));
    auto g = ta::linear(h, ps.get("pt.mlp2.w"), ps.get("pt.mlp2.b"));
    auto pooled = ta::max_axis(g, 1);  // [M,D]

    std::vector<T> cdata(size_t(cfg.point_groups * 3));
    for (int64_t i = 0; i < cfg.point_groups; ++i)
        for (int c = 0; c < 3; ++c)
            cdata[size_t(i * 3 + c)] = T(pc.positions[size_t(centers[size_t(i)])][size_t(c)]);
    auto ctr = ta::Tensor<T>::from_data({cfg.point_groups, 3}, std::move(cdata));
    auto pe = ta::linear(ta::gelu(ta::linear(ctr, ps.get("pt.pos1.w"), ps.get("pt.pos1.b"))),
                         ps.get("pt.pos2.w"), ps.get("pt.pos2.b"));

    TokenSequence<T> out;
    out.tokens = ta::reshape(ta::add(pooled, pe), {1, cfg.point_groups, cfg.d_model});
    out.mask.assign(size_t(cfg.point_groups), 1);
    out.kind = Modality::point;
    return out;
}

// Image path: multi-view batch [N,3,H,W] -> patchify conv -> class token ->
// learned 2D positions. All views ride through as one batch.
template <class T>
TokenSequence<T> tokenize_images(const EncoderConfig& cfg, const ta::ParamStore<T>& ps,
                                 const ta::Tensor<T>& views) {
    cfg.validate();
    check(views.dim() == 4 && views.extent(1) == 3, "tokenize_images: expected [N,3,H,W]");
    check(views.extent(2) == cfg.image_size && views.extent(3) == cfg.image_size,
          "tokenize_images: resolution must be " + std::to_string(cfg.image_size) + "x" +
              std::to_string(cfg.image_size));
    int64_t nv = views.extent(0);
    int64_t p = cfg.image_size / cfg.patch_size;
    auto grid = ta::conv2d(views, ps.get("vis.patch.w"), cfg.patch_size, 0);     // [N,D,p,p]
    grid = ta::add(grid, ta::reshape(ps.get("vis.patch.b"), {cfg.d_model, 1, 1}));
    auto toks = ta::permute(ta::reshape(grid, {nv, cfg.d_model, p * p}), {0, 2, 1});  // [N,p²,D]
    auto cls = ta::reshape(ta::index_select(ps.get("vis.cls"), 0, std::vector<int64_t>(size_t(nv), 0)),
                           {nv, 1, cfg.d_model});
    auto seq = ta::concat(std::vector<ta::Tensor<T>>{cls, toks}, 1);
    seq = ta::add(seq, ps.get("vis.pos"));

    TokenSequence<T> out;
    out.tokens = seq;
    out.mask.assign(size_t(nv * cfg.image_tokens()), 1);
    out.kind = Modality::image;
    return out;
}

// Text path: byte ids -> embedding rows + learned positions; PAD masked out.
template <class T>
TokenSequence<T> tokenize_text(const EncoderConfig& cfg, const ta::ParamStore<T>& ps,
                               const std::string& prompt) {
    cfg.validate();
    auto ids = text_to_ids(prompt, cfg.text_max_len);
    auto emb = ta::index_select(ps.get("txt.embed"), 0, ids);  // [L,D2]
    auto seq = ta::add(emb, ps.get("txt.pos"));
    TokenSequence<T> out;
    out.tokens = ta::reshape(seq, {1, cfg.text_max_len, cfg.text_d_model});
    out.mask.resize(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) out.mask[i] = ids[i] == kPad ? 0 : 1;
    out.kind = Modality::text;
    return out;
}

struct ParamReport {
    int64_t total = 0, trainable = 0, frozen = 0;
    std::vector<std::pair<std::string, int64_t>> modules;  // top-level prefix -> param count

    std::string table() const {
        std::ostringstream os;
        os << "module      params\n";
        for (const auto& [name, count] : modules) {
            os << name;
            for (size_t i = name.size(); i < 12; ++i) os << ' ';
            os << count << "\n";
        }
        os << "trainable   " << trainable << "\n";
        os << "frozen      " << frozen << "\n";
        os << "total       " << total << " (" << (total ? 100.0 * double(trainable) / double(total) : 0.0)
           << "% trainable)\n";
        return os.str();
    }
};

template <class T>
ParamReport param_report(const ta::ParamStore<T>& ps) {
    ParamReport r;
    std::map<std::string, int64_t> mods;
    for (const auto& [name, t] : ps.params()) {
        int64_t n = t.numel();
        r.total += n;
        (ps.is_frozen(name) ? r.frozen : r.trainable) += n;
        mods[name.substr(0, name.find('.'))] += n;
    }
    r.modules.assign(mods.begin(), mods.end());
    return r;
}

}  // namespace tmg::enc

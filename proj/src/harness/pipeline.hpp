#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "enc/encoder.hpp"
#include "garf/garf.hpp"
#include "harness/scene.hpp"
#include "head/head.hpp"
#include <json.hpp>

namespace tmg::harness {

// ---------------------------------------------------------------------------
// configuration

struct DataConfig {
    int64_t views_train = 4;
    int64_t views_eval = 6;
    int64_t points = 2048;  // cloud size after merging and subsampling views

    void validate() const {
        check(views_train >= 1 && views_eval >= 1, "data config: need at least one view");
        check(points >= 64, "data config: points too small for the tokenizer");
    }
};

inline void from_json(const nlohmann::json& j, DataConfig& c) {
    j.at("views_train").get_to(c.views_train);
    j.at("views_eval").get_to(c.views_eval);
    j.at("points").get_to(c.points);
}

inline void to_json(nlohmann::json& j, const DataConfig& c) {
    j = {{"views_train", c.views_train}, {"views_eval", c.views_eval}, {"points", c.points}};
}

struct TrainConfig {
    int64_t epochs = 12;
    double lr = 2e-3;
    double weight_decay = 1e-5;
    uint64_t seed = 0;

    void validate() const {
        check(epochs >= 1, "train config: epochs must be >= 1");
        check(lr >= 0 && weight_decay >= 0, "train config: negative lr or weight decay");
    }
};

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("epochs").get_to(c.epochs);
    j.at("lr").get_to(c.lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("seed").get_to(c.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs}, {"lr", c.lr}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

struct PipelineConfig {
    enc::EncoderConfig encoder;
    garf::GarfConfig garf;
    head::HeadConfig head;
    GenConfig gen;
    DataConfig data;
    TrainConfig train;

    void validate() const {
        encoder.validate();
        garf.validate();
        head.validate();
        gen.validate();
        data.validate();
        train.validate();
        check(gen.image_size == encoder.image_size,
              "config: harness image_size must match the encoder resolution");
        check(gen.views >= data.views_train && gen.views >= data.views_eval,
              "config: generated views must cover views_train and views_eval");
    }
};

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "config file missing: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("config file malformed: " + path + ": " + e.what());
    }
    PipelineConfig c;
    try {
        c.encoder = j.at("encoder").get<enc::EncoderConfig>();
        c.garf = j.at("garf").get<garf::GarfConfig>();
        c.head = j.at("head").get<head::HeadConfig>();
        c.gen = j.at("harness").get<GenConfig>();
        c.data = j.at("data").get<DataConfig>();
        c.train = j.at("train").get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        fail("config file malformed: " + path + ": " + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// model

struct Model {
    PipelineConfig cfg;
    ta::ParamStore<double> ps;
};

// Frozen backbone + trainable adapters, then the fusion stage, the decoder
// head, and a small token-level fusion MLP used only when the fusion stage is
// ablated away.
inline Model make_model(const PipelineConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    enc::init_encoder_params(cfg.encoder, m.ps, seed);
    Rng rng(fnv1a64("model:" + std::to_string(seed)));
    garf::init_garf_params(m.ps, cfg.encoder, cfg.garf, rng);
    head::init_head_params(cfg.head, cfg.garf.channels, cfg.encoder.text_d_model, kCategories,
                           m.ps, rng);
    using D = ta::Tensor<double>;
    int64_t d = cfg.encoder.d_model, c = cfg.garf.channels;
    m.ps.add("fuse.w1", D::randn({2 * d, c}, rng, 0.02), false);
    m.ps.add("fuse.b1", D::zeros({c}), false);
    m.ps.add("fuse.w2", D::randn({c, c}, rng, 0.02), false);
    m.ps.add("fuse.b2", D::zeros({c}), false);
    return m;
}

// trainable scalars of the fallback fusion MLP, for accounting
inline int64_t fuse_param_count(const PipelineConfig& cfg) {
    int64_t d = cfg.encoder.d_model, c = cfg.garf.channels;
    return (2 * d * c + c) + (c * c + c);
}

// ---------------------------------------------------------------------------
// per-scene input preparation (parameter independent, cache freely)

struct SceneInput {
    std::string id;
    geo::PointCloud pc;
    ta::Tensor<double> views_rgb;        // [V,3,H,W]
    std::vector<geo::CameraView> views;  // the V views consumed
    uint64_t point_seed = 0;
};

inline SceneInput make_scene_input(const Scene& s, const PipelineConfig& cfg, int64_t n_views) {
    check(n_views >= 1 && n_views <= int64_t(s.views.size()),
          "scene " + s.id + " has " + std::to_string(s.views.size()) + " views, need " +
              std::to_string(n_views));
    SceneInput in;
    in.id = s.id;
    in.point_seed = fnv1a64("points:" + s.id);

    geo::PointCloud all;
    for (int64_t v = 0; v < n_views; ++v) {
        const auto& view = s.views[size_t(v)];
        check(view.width == cfg.encoder.image_size && view.height == cfg.encoder.image_size,
              "scene " + s.id + ": view resolution " + std::to_string(view.width) +
                  " does not match the encoder's " + std::to_string(cfg.encoder.image_size));
        auto pc = geo::unproject(view, 1);
        all.positions.insert(all.positions.end(), pc.positions.begin(), pc.positions.end());
        all.colors.insert(all.colors.end(), pc.colors.begin(), pc.colors.end());
        in.views.push_back(view);
    }
    int64_t n = int64_t(all.positions.size());
    if (n <= cfg.data.points) {
        in.pc = std::move(all);
    } else {
        std::vector<int64_t> idx(static_cast<size_t>(n), 0);
        for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = i;
        Rng rng(in.point_seed);
        for (int64_t i = 0; i < cfg.data.points; ++i) {
            int64_t j = i + rng.randint(n - i);
            std::swap(idx[size_t(i)], idx[size_t(j)]);
        }
        idx.resize(size_t(cfg.data.points));
        std::sort(idx.begin(), idx.end());
        for (int64_t i : idx) {
            in.pc.positions.push_back(all.positions[size_t(i)]);
            in.pc.colors.push_back(all.colors[size_t(i)]);
        }
    }

    int64_t h = cfg.encoder.image_size;
    std::vector<double> px(size_t(n_views * 3 * h * h));
    for (int64_t v = 0; v < n_views; ++v)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < h; ++x)
                    px[size_t(((v * 3 + c) * h + y) * h + x)] =
                        double(s.views[size_t(v)].rgb[size_t((y * h + x) * 3 + c)]);
    in.views_rgb = ta::Tensor<double>::from_data({n_views, 3, h, h}, std::move(px));
    return in;
}

// ---------------------------------------------------------------------------
// end-to-end forward

struct RunFlags {
    head::Task task = head::Task::ground;
    bool use_garf = true;
    bool use_2d = true;
    bool train = false;
};

struct ForwardResult {
    std::vector<head::LayerPrediction<double>> preds;
    head::QuerySet<double> qs;
    head::LossBreakdown<double> loss;  // valid when targets were supplied
};

inline ForwardResult forward(Model& m, const SceneInput& in, const std::string& prompt,
                             const std::vector<head::BoxTarget>* targets, const RunFlags& f) {
    using D = ta::Tensor<double>;
    auto& ps = m.ps;
    const auto& ec = m.cfg.encoder;
    const auto& gc = m.cfg.garf;
    head::HeadConfig hc = m.cfg.head;
    if (!f.use_garf || !f.use_2d) hc.use_2d = false;  // 2D maps only exist with the fusion stage

    auto img_enc = enc::encode(ec, ps, enc::tokenize_images(ec, ps, in.views_rgb));

    auto pt_enc = enc::encode(ec, ps, enc::tokenize_points(ec, ps, in.pc, in.point_seed));
    auto f_p = ta::reshape(pt_enc.final_seq.tokens, {ec.point_groups, ec.d_model});
    auto center_idx = enc::fps(in.pc.positions, ec.point_groups, in.point_seed);
    std::vector<geo::Vec3> token_centers;
    token_centers.reserve(center_idx.size());
    for (int64_t i : center_idx) token_centers.push_back(in.pc.positions[size_t(i)]);

    D f_t;
    std::vector<uint8_t> tmask;
    if (f.task == head::Task::ground) {
        auto tx_enc = enc::encode(ec, ps, enc::tokenize_text(ec, ps, prompt));
        f_t = ta::reshape(tx_enc.final_seq.tokens, {ec.text_max_len, ec.text_d_model});
        tmask = tx_enc.final_seq.mask;
    } else {
        f_t = D::zeros({1, ec.text_d_model});
        tmask = {1};
    }

    D feats, f_mv1;
    std::vector<geo::Vec3> anchors;
    if (f.use_garf) {
        std::vector<D> taps;
        for (int64_t l : garf::tap_layers(ec.layers, gc.pyramid_levels))
            taps.push_back(img_enc.taps[size_t(l - 1)]);
        auto g = garf::garf_forward(in.pc, f_p, token_centers, taps, in.views, ps, ec, gc, f.train);
        feats = g.s_pmv.feats;
        anchors = std::move(g.anchors);
        f_mv1 = hc.use_2d ? head::flatten_view_tokens(g.maps_2d[0]) : D::zeros({1, gc.channels});
    } else {
        // token-level fusion: each point token gets the mean image token, and
        // a two-layer MLP maps the pair down to the fused width
        int64_t v = img_enc.final_seq.tokens.extent(0), l = img_enc.final_seq.tokens.extent(1);
        auto flat = ta::reshape(img_enc.final_seq.tokens, {v * l, ec.d_model});
        auto mean_img = ta::mul_scalar(ta::sum_axis(flat, 0, true), 1.0 / double(v * l));
        auto rep = ta::index_select(mean_img, 0, std::vector<int64_t>(size_t(ec.point_groups), 0));
        auto cat = ta::concat(std::vector<D>{f_p, rep}, 1);
        feats = ta::linear(ta::relu(ta::linear(cat, ps.get("fuse.w1"), ps.get("fuse.b1"))),
                           ps.get("fuse.w2"), ps.get("fuse.b2"));
        anchors = token_centers;
        f_mv1 = D::zeros({1, gc.channels});
    }

    D lg = f.task == head::Task::ground
               ? head::visual_text_fuse(ps, feats, f_t, tmask)
               : ta::linear(feats, ps.get("head.cls.w"), ps.get("head.cls.b"));
    ForwardResult r;
    r.qs = head::topk_select(ps, lg, feats, anchors, hc.queries);
    r.preds = head::decode(ps, hc, r.qs, feats, f_t, tmask, f_mv1, f.task);
    if (targets) r.loss = head::match_loss(r.preds, r.qs, *targets, hc, f.task);
    return r;
}

inline std::vector<head::BoxTarget> detect_targets(const Scene& s) {
    std::vector<head::BoxTarget> t;
    t.reserve(s.objects.size());
    for (const auto& o : s.objects) t.push_back({o.box, o.category});
    return t;
}

}  // namespace tmg::harness

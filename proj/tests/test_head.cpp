#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "head/head.hpp"
#include "ref/ref_head.hpp"
#include "rng.hpp"
#include "ta/gradcheck.hpp"

using namespace tmg;
using geo::Vec3;
using head::BoxTarget;
using head::HeadConfig;
using head::Task;
using D = ta::Tensor<double>;

namespace {

HeadConfig tiny_head() {
    HeadConfig hc;
    hc.queries = 4;
    hc.layers = 2;
    hc.heads = 2;
    hc.contrast_dim = 4;
    return hc;
}

constexpr int64_t kC = 8, kDt = 6, kCls = 3;

void init_tiny(ta::ParamStore<double>& ps, const HeadConfig& hc, uint64_t seed = 5) {
    Rng rng(seed);
    head::init_head_params(hc, kC, kDt, kCls, ps, rng);
}

double max_abs_diff(const D& a, const D& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    auto av = a.data(), bv = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(av[size_t(i)] - bv[size_t(i)]));
    return m;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<double> vec(const D& t) { return {t.data().begin(), t.data().end()}; }

// scalar mirror of one decoder layer, chained from the ref primitives
std::vector<double> decode_layer_scalar(const ta::ParamStore<double>& ps, const std::string& pfx,
                                        int64_t heads, std::vector<double> x, int64_t rows,
                                        int64_t c, const std::vector<double>& f3d, int64_t n3d,
                                        const std::vector<double>& ftx, int64_t ltx, int64_t dtx,
                                        const std::vector<uint8_t>& tmask,
                                        const std::vector<double>& f2d, int64_t n2d, bool use_text,
                                        bool use_2d) {
    auto W = [&](const std::string& n) { return ps.get(n).data(); };
    auto sub = [&](std::vector<double> in, const std::string& bp, const std::vector<double>& mem,
                   int64_t ml, int64_t md, const std::vector<uint8_t>* km, bool self_attn) {
        auto h = ref::layernorm_scalar(in, rows, c, W(bp + ".ln.w"), W(bp + ".ln.b"));
        const std::vector<double>& src = self_attn ? h : mem;
        int64_t sl = self_attn ? rows : ml, sd = self_attn ? c : md;
        auto q = ref::linear_scalar(h, rows, c, W(bp + ".q.w"), W(bp + ".q.b"), c);
        auto k = ref::linear_scalar(src, sl, sd, W(bp + ".k.w"), W(bp + ".k.b"), c);
        auto v = ref::linear_scalar(src, sl, sd, W(bp + ".v.w"), W(bp + ".v.b"), c);
        auto a = ref::mha_scalar(q, rows, k, v, sl, c, heads, km);
        auto o = ref::linear_scalar(a, rows, c, W(bp + ".o.w"), W(bp + ".o.b"), c);
        for (size_t i = 0; i < in.size(); ++i) in[i] += o[i];
        return in;
    };
    x = sub(std::move(x), pfx + ".self", x, rows, c, nullptr, true);
    x = sub(std::move(x), pfx + ".c3d", f3d, n3d, c, nullptr, false);
    if (use_text) x = sub(std::move(x), pfx + ".ctx", ftx, ltx, dtx, &tmask, false);
    if (use_2d) x = sub(std::move(x), pfx + ".c2d", f2d, n2d, c, nullptr, false);
    auto h = ref::layernorm_scalar(x, rows, c, W(pfx + ".mlp.ln.w"), W(pfx + ".mlp.ln.b"));
    auto m1 = ref::linear_scalar(h, rows, c, W(pfx + ".mlp.w1"), W(pfx + ".mlp.b1"), 4 * c);
    for (auto& e : m1) e = std::max(e, 0.0);
    auto m2 = ref::linear_scalar(m1, rows, 4 * c, W(pfx + ".mlp.w2"), W(pfx + ".mlp.b2"), c);
    for (size_t i = 0; i < x.size(); ++i) x[i] += m2[i];
    return x;
}

void zero_param(ta::ParamStore<double>& ps, const std::string& name) {
    auto d = ps.get(name).raw_data();
    std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace

TEST_CASE("projected cosine logits hit the closed-form corners") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    Rng rng(3);
    head::init_head_params(hc, 4, 4, kCls, ps, rng);  // square so identity fits
    for (const char* n : {"head.pv.w", "head.pt.w"}) {
        auto d = ps.get(n).raw_data();
        std::fill(d.begin(), d.end(), 0.0);
        for (int64_t i = 0; i < 4; ++i) d[size_t(i * 4 + i)] = 1.0;
    }
    auto f_v = D::from_data({2, 4}, {1, 2, 3, 4, 1, 0, 0, 0});
    auto f_t = D::from_data({2, 4}, {1, 2, 3, 4, 0, 1, 0, 0});
    auto lg = head::visual_text_fuse(ps, f_v, f_t, {1, 1});
    REQUIRE(lg.shape() == Shape{2, 2});
    // identical projected vectors: cosine 1, over tau
    CHECK(std::abs(lg.data()[0] - 1.0 / 0.07) <= 1e-7);
    // orthogonal projected vectors: exactly zero
    CHECK(lg.data()[3] == 0.0);
}

TEST_CASE("cosine logits match the scalar oracle and mask pad tokens") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    Rng rng(11);
    auto f_v = D::randn({4, kC}, rng, 1.0);
    auto f_t = D::randn({3, kDt}, rng, 1.0);

    auto lg = head::visual_text_fuse(ps, f_v, f_t, {1, 1, 1});
    auto want = ref::cosine_logits_scalar(f_v.data(), 4, kC, f_t.data(), 3, kDt,
                                          ps.get("head.pv.w").data(), ps.get("head.pv.b").data(),
                                          ps.get("head.pt.w").data(), ps.get("head.pt.b").data(),
                                          hc.contrast_dim, ps.get("head.tau").data()[0]);
    CHECK(max_abs_diff(lg.data(), want) <= 1e-12);

    auto masked = head::visual_text_fuse(ps, f_v, f_t, {1, 1, 0});
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(masked.data()[size_t(i * 3 + 2)] <= -1e29);
        CHECK(masked.data()[size_t(i * 3)] == lg.data()[size_t(i * 3)]);
    }
}

TEST_CASE("top-k selection orders by score, breaks ties low, and builds queries") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    Rng rng(7);
    auto f = D::randn({3, kC}, rng, 1.0);
    std::vector<Vec3> centers{{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
    auto lg = D::from_data({3, 1}, {0.1, 0.9, 0.5});

    auto all = head::topk_select(ps, lg, f, centers, 3);
    CHECK(all.indices == std::vector<int64_t>{1, 2, 0});
    CHECK(all.scores == std::vector<double>{0.9, 0.5, 0.1});
    auto two = head::topk_select(ps, lg, f, centers, 2);
    CHECK(two.indices == std::vector<int64_t>{1, 2});

    auto tie = head::topk_select(ps, D::from_data({2, 1}, {0.5, 0.5}),
                                 D::randn({2, kC}, rng, 1.0), {{0, 0, 0}, {1, 1, 1}}, 1);
    CHECK(tie.indices == std::vector<int64_t>{0});

    // k beyond the voxel count falls back to selecting everything
    auto over = head::topk_select(ps, lg, f, centers, 9);
    CHECK(over.indices.size() == 3);

    // max over columns drives the score
    auto wide = head::topk_select(ps, D::from_data({2, 3}, {-5, 2, 0.3, 3, 1, 0}),
                                  D::randn({2, kC}, rng, 1.0), {{0, 0, 0}, {1, 0, 0}}, 1);
    CHECK(wide.indices == std::vector<int64_t>{1});

    // queries = selected rows + positional mlp of the centers
    for (int64_t i = 0; i < 2; ++i) {
        int64_t src = two.indices[size_t(i)];
        std::vector<double> anc{centers[size_t(src)][0], centers[size_t(src)][1],
                                centers[size_t(src)][2]};
        auto h = ref::linear_scalar(anc, 1, 3, ps.get("head.qpos.w1").data(),
                                    ps.get("head.qpos.b1").data(), kC);
        for (auto& e : h) e = std::max(e, 0.0);
        auto pe = ref::linear_scalar(h, 1, kC, ps.get("head.qpos.w2").data(),
                                     ps.get("head.qpos.b2").data(), kC);
        for (int64_t c = 0; c < kC; ++c) {
            double want = f.data()[size_t(src * kC + c)] + pe[size_t(c)];
            CHECK(std::abs(two.queries.data()[size_t(i * kC + c)] - want) <= 1e-12);
        }
        CHECK(two.anchors[size_t(i)] == centers[size_t(src)]);
    }
}

TEST_CASE("decoder layer matches the primitive-chain oracle") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    Rng rng(13);

    auto run = [&](int64_t k, int64_t n3d, int64_t ltx, int64_t n2d,
                   const std::vector<uint8_t>& tmask) {
        auto q = D::randn({k, kC}, rng, 1.0);
        auto f3 = D::randn({n3d, kC}, rng, 1.0);
        auto ft = D::randn({ltx, kDt}, rng, 1.0);
        auto f2 = D::randn({n2d, kC}, rng, 1.0);
        auto out = head::decode_layer(ps, "head.dec0", hc.heads, q, f3, ft, tmask, f2, true, true);
        auto want = decode_layer_scalar(ps, "head.dec0", hc.heads, vec(q), k, kC, vec(f3), n3d,
                                        vec(ft), ltx, kDt, tmask, vec(f2), n2d, true, true);
        CHECK(max_abs_diff(out.data(), want) <= 1e-12);
    };
    run(2, 3, 2, 4, {1, 1});
    run(2, 3, 2, 4, {1, 0});  // masked text token
    run(1, 1, 1, 1, {1});     // softmax over a single key everywhere
}

TEST_CASE("zeroed 2D value projection equals the structural ablation") {
    HeadConfig with = tiny_head();
    HeadConfig without = with;
    without.use_2d = false;
    ta::ParamStore<double> ps;
    init_tiny(ps, with);
    for (int64_t i = 0; i < with.layers; ++i) {
        std::string bp = "head.dec" + std::to_string(i) + ".c2d";
        zero_param(ps, bp + ".v.w");
        zero_param(ps, bp + ".v.b");
        zero_param(ps, bp + ".o.b");
    }
    Rng rng(17);
    auto f3 = D::randn({5, kC}, rng, 1.0);
    auto ft = D::randn({3, kDt}, rng, 1.0);
    auto f2 = D::randn({4, kC}, rng, 1.0);
    std::vector<uint8_t> tmask{1, 1, 1};
    std::vector<Vec3> centers{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
    auto lg = head::visual_text_fuse(ps, f3, ft, tmask);
    auto qs = head::topk_select(ps, lg, f3, centers, 4);

    auto a = head::decode(ps, with, qs, f3, ft, tmask, f2, Task::ground);
    auto b = head::decode(ps, without, qs, f3, ft, tmask, f2, Task::ground);
    REQUIRE(a.size() == b.size());
    for (size_t l = 0; l < a.size(); ++l) {
        CHECK(max_abs_diff(a[l].align, b[l].align) == 0.0);
        CHECK(max_abs_diff(a[l].box_raw, b[l].box_raw) == 0.0);
        CHECK(max_abs_diff(a[l].center_logit, b[l].center_logit) == 0.0);
    }
}

TEST_CASE("box decoding: closed forms, asymptote, round trip, gradient") {
    Vec3 anchor{0.5, -1.0, 2.0};
    auto b0 = head::decode_box({0, 0, 0, 0, 0, 0, 0, 0, 0}, anchor);
    CHECK(b0.center == anchor);
    for (int i = 0; i < 3; ++i) {
        CHECK(b0.size[i] == doctest::Approx(std::log(2.0) + 1e-4).epsilon(1e-12));
        CHECK(b0.angles[i] == 0.0);
    }

    auto big = head::decode_box({0, 0, 0, 40, 0, 0, 0, 0, 0}, anchor);
    CHECK(std::abs(big.size[0] - (40.0 + 1e-4)) <= 1e-8);

    geo::OrientedBox9 gt = geo::make_box({1.5, 0.2, -0.3}, {0.4, 1.2, 2.5}, {0.7, -0.2, 1.1});
    auto enc = head::encode_box_target(gt, anchor);
    auto back = head::decode_box(enc, anchor);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(back.center[i] - gt.center[i]) <= 1e-12);
        CHECK(std::abs(back.size[i] - gt.size[i]) <= 1e-9);
        CHECK(std::abs(back.angles[i] - gt.angles[i]) <= 1e-9);
    }

    // graph variant agrees with the scalar path
    Rng rng(23);
    auto raw = D::randn({2, 9}, rng, 1.0);
    auto anchors = D::from_data({2, 3}, {0.5, -1.0, 2.0, 0.0, 1.0, 0.0});
    auto dec = head::decode_box_graph(raw, anchors);
    for (int64_t q = 0; q < 2; ++q) {
        std::array<double, 9> r{};
        for (int i = 0; i < 9; ++i) r[size_t(i)] = raw.data()[size_t(q * 9 + i)];
        Vec3 a{anchors.data()[size_t(q * 3)], anchors.data()[size_t(q * 3 + 1)],
               anchors.data()[size_t(q * 3 + 2)]};
        auto box = head::decode_box(r, a);
        for (int i = 0; i < 3; ++i) {
            CHECK(std::abs(dec.data()[size_t(q * 9 + i)] - box.center[i]) <= 1e-15);
            CHECK(std::abs(dec.data()[size_t(q * 9 + 3 + i)] - box.size[i]) <= 1e-15);
            CHECK(std::abs(dec.data()[size_t(q * 9 + 6 + i)] - box.angles[i]) <= 1e-15);
        }
    }

    ta::ParamStore<double> ps;
    ps.add("raw", D::randn({2, 9}, rng, 0.5), false);
    auto wsum = D::randn({2, 9}, rng, 1.0);
    auto loss = [&]() {
        return ta::sum_all(ta::mul(head::decode_box_graph(ps.get("raw"), anchors), wsum));
    };
    auto rep = ta::grad_check(ps, loss, 1e-5, -1, 29);
    INFO(rep.str());
    CHECK(rep.max_rel_err <= 1e-5);
}

TEST_CASE("hungarian equals brute force and breaks ties lexicographically") {
    using P = std::vector<std::pair<int64_t, int64_t>>;
    CHECK(head::hungarian({1, 2, 2, 1}, 2, 2) == P{{0, 0}, {1, 1}});
    CHECK(head::assignment_value({1, 2, 2, 1}, 2, 2) == 2.0);
    CHECK(head::hungarian({0, 0, 0, 0}, 2, 2) == P{{0, 0}, {1, 1}});

    // diagonal-dominant: identity assignment
    std::vector<double> diag(16);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) diag[size_t(i * 4 + j)] = i == j ? 0.1 : 7.0 + double(i + j);
    auto dpairs = head::hungarian(diag, 4, 4);
    for (int64_t i = 0; i < 4; ++i) CHECK(dpairs[size_t(i)] == std::pair<int64_t, int64_t>{i, i});

    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> cost(36);
        for (auto& c : cost) c = rng.uniform(-5.0, 5.0);
        auto got = head::hungarian(cost, 6, 6);
        auto [bestv, bestp] = ref::assignment_brute(cost, 6, 6);
        CHECK(got == bestp);
        double total = 0;
        for (auto& pr : got) total += cost[size_t(pr.first * 6 + pr.second)];
        CHECK(total == doctest::Approx(bestv).epsilon(1e-12));
    }
    for (int trial = 0; trial < 20; ++trial) {
        for (auto [n, m] : {std::pair<int64_t, int64_t>{2, 4}, {4, 2}, {3, 5}, {5, 3}}) {
            std::vector<double> cost(size_t(n * m));
            for (auto& c : cost) c = rng.uniform(0.0, 3.0);
            CHECK(head::hungarian(cost, n, m) == ref::assignment_brute(cost, n, m).second);
        }
    }

    CHECK_THROWS_WITH_AS(
        head::assignment_value({1.0, std::numeric_limits<double>::infinity()}, 1, 2),
        doctest::Contains("finite"), std::runtime_error);
}

TEST_CASE("focal and bce reduce to their scalar definitions") {
    Rng rng(37);
    auto lg = D::randn({5}, rng, 2.0);
    std::vector<uint8_t> pos{1, 0, 0, 1, 0};

    auto f = head::focal_loss(lg, pos, 0.25, 2.0, 2.0);
    double want = 0;
    for (int64_t i = 0; i < 5; ++i)
        want += ref::focal_scalar(lg.data()[size_t(i)], pos[size_t(i)] != 0, 0.25, 2.0);
    CHECK(std::abs(f.item() - want / 2.0) <= 1e-12);

    // gamma = 0, alpha = 0.5: half of plain cross-entropy
    auto f0 = head::focal_loss(lg, pos, 0.5, 0.0, 1.0);
    double ce = 0;
    for (int64_t i = 0; i < 5; ++i) {
        double xt = pos[size_t(i)] ? lg.data()[size_t(i)] : -lg.data()[size_t(i)];
        ce += -std::log(1.0 / (1.0 + std::exp(-xt)));
    }
    CHECK(std::abs(f0.item() - 0.5 * ce) <= 1e-12);

    std::vector<double> tgt{0.0, 1.0, 0.25, 0.9, 0.5};
    auto b = head::bce_loss(lg, tgt);
    double bw = 0;
    for (int64_t i = 0; i < 5; ++i) bw += ref::bce_scalar(lg.data()[size_t(i)], tgt[size_t(i)]);
    CHECK(std::abs(b.item() - bw / 5.0) <= 1e-12);
    CHECK_THROWS_WITH_AS(head::bce_loss(lg, {0.0, 1.0, 2.0, 0.0, 0.0}),
                         doctest::Contains("[0,1]"), std::runtime_error);
}

namespace {

// hand-assembled single-layer prediction set
head::QuerySet<double> manual_queries(const std::vector<Vec3>& anchors) {
    head::QuerySet<double> qs;
    qs.anchors = anchors;
    std::vector<double> flat;
    for (auto& a : anchors)
        for (double v : a) flat.push_back(v);
    qs.anchor_t = D::from_data({int64_t(anchors.size()), 3}, std::move(flat));
    qs.queries = D::zeros({int64_t(anchors.size()), 1});  // unused by match_loss
    for (size_t i = 0; i < anchors.size(); ++i) {
        qs.indices.push_back(int64_t(i));
        qs.scores.push_back(0.0);
    }
    return qs;
}

}  // namespace

TEST_CASE("single-pair match loss equals the hand-built sum") {
    HeadConfig hc = tiny_head();
    auto qs = manual_queries({{0.5, 0.0, 0.0}});
    geo::OrientedBox9 gt = geo::make_box({1.0, 0.0, 0.0}, {0.6, 0.8, 1.0}, {0.3, 0.1, -0.4});

    head::LayerPrediction<double> p;
    p.align = D::from_data({1, 2}, {0.4, 1.3});
    Rng rng(41);
    p.box_raw = D::randn({1, 9}, rng, 1.0);
    p.center_logit = D::from_data({1}, {0.7});

    auto lb = head::match_loss<double>({p}, qs, {{gt, 0}}, hc, Task::ground);

    double cls = ref::focal_scalar(1.3, true, hc.focal_alpha, hc.focal_gamma);
    auto enc = head::encode_box_target(gt, qs.anchors[0]);
    double box = 0;
    for (int i = 0; i < 9; ++i) box += std::abs(p.box_raw.data()[size_t(i)] - enc[size_t(i)]);
    double d = 0.5;
    double ctr = ref::bce_scalar(0.7, std::exp(-d * d / (2 * hc.center_sigma * hc.center_sigma)));

    CHECK(std::abs(lb.cls - cls) <= 1e-12);
    CHECK(std::abs(lb.box - box) <= 1e-12);
    CHECK(std::abs(lb.center - ctr) <= 1e-12);
    CHECK(std::abs(lb.total.item() - (cls + box + ctr)) <= 1e-12);
}

TEST_CASE("perfect predictions drive the loss toward zero") {
    HeadConfig hc = tiny_head();
    geo::OrientedBox9 gt = geo::make_box({1.0, 2.0, 0.5}, {0.6, 0.8, 1.0}, {0.3, 0.0, 0.0});

    // one query sitting exactly on the target
    auto qs1 = manual_queries({gt.center});
    auto enc = head::encode_box_target(gt, gt.center);
    head::LayerPrediction<double> p;
    p.align = D::from_data({1, 1}, {10.0});
    p.box_raw = D::from_data({1, 9}, std::vector<double>(enc.begin(), enc.end()));
    p.center_logit = D::from_data({1}, {20.0});
    auto lb = head::match_loss<double>({p}, qs1, {{gt, 0}}, hc, Task::ground);
    CHECK(lb.total.item() <= 1e-3);
    CHECK(lb.total.item() >= 0.0);

    // three confident negatives alongside
    auto qs4 = manual_queries({gt.center, {5, 5, 5}, {-4, 2, 0}, {0, -6, 1}});
    head::LayerPrediction<double> p4;
    p4.align = D::from_data({4, 1}, {10.0, -10.0, -10.0, -10.0});
    std::vector<double> raws(36, 0.0);
    std::array<double, 9> e4 = head::encode_box_target(gt, gt.center);
    for (int i = 0; i < 9; ++i) raws[size_t(i)] = e4[size_t(i)];
    p4.box_raw = D::from_data({4, 9}, std::move(raws));
    p4.center_logit = D::from_data({4}, {20.0, -20.0, -20.0, -20.0});
    auto lb4 = head::match_loss<double>({p4}, qs4, {{gt, 0}}, hc, Task::ground);
    CHECK(lb4.total.item() <= 1e-3);
}

TEST_CASE("match loss: target permutation, nonnegativity, weight linearity") {
    HeadConfig hc = tiny_head();
    Rng rng(43);
    auto qs = manual_queries({{0, 0, 0}, {2, 0, 0}, {0, 3, 0}, {4, 4, 0}, {-2, -2, 1}});
    std::vector<BoxTarget> targets{
        {geo::make_box({0.1, 0.1, 0.0}, {0.5, 0.5, 0.5}, {0.2, 0, 0}), 0},
        {geo::make_box({2.1, -0.1, 0.1}, {0.8, 0.4, 0.6}, {-0.5, 0, 0}), 2},
        {geo::make_box({-0.1, 3.2, 0.0}, {1.0, 1.0, 0.3}, {0.0, 0.1, 0}), 1},
    };
    head::LayerPrediction<double> p;
    p.align = D::randn({5, kCls}, rng, 1.0);
    p.box_raw = D::randn({5, 9}, rng, 0.5);
    p.center_logit = D::randn({5}, rng, 1.0);

    auto base = head::match_loss<double>({p}, qs, targets, hc, Task::detect);
    CHECK(base.total.item() >= 0.0);
    CHECK(base.cls >= 0.0);
    CHECK(base.box >= 0.0);
    CHECK(base.center >= 0.0);

    std::vector<BoxTarget> rot{targets[1], targets[2], targets[0]};
    auto perm = head::match_loss<double>({p}, qs, rot, hc, Task::detect);
    CHECK(perm.total.item() == base.total.item());

    HeadConfig heavy = hc;
    heavy.alpha = 2.0;
    auto h = head::match_loss<double>({p}, qs, targets, heavy, Task::detect);
    REQUIRE(std::abs(h.cls - base.cls) <= 1e-12);  // matching unchanged
    CHECK(std::abs(h.total.item() - (base.total.item() + base.cls)) <= 1e-12);

    // detection with no targets degrades to classification + centerness
    auto empty = head::match_loss<double>({p}, qs, {}, hc, Task::detect);
    CHECK(empty.box == 0.0);
    CHECK(empty.total.item() >= 0.0);

    CHECK_THROWS_WITH_AS(head::match_loss<double>({p}, qs, targets, hc, Task::ground),
                         doctest::Contains("exactly one"), std::runtime_error);
}

TEST_CASE("query permutation flows through the decoder equivariantly") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    Rng rng(47);
    auto f3 = D::randn({6, kC}, rng, 1.0);
    auto ft = D::randn({3, kDt}, rng, 1.0);
    auto f2 = D::randn({4, kC}, rng, 1.0);
    std::vector<uint8_t> tmask{1, 1, 1};
    std::vector<Vec3> centers;
    for (int i = 0; i < 6; ++i) centers.push_back({double(i), double(i % 2), 0.0});
    auto lg = head::visual_text_fuse(ps, f3, ft, tmask);
    auto qa = head::topk_select(ps, lg, f3, centers, 4);

    std::vector<int64_t> perm{2, 0, 3, 1};
    head::QuerySet<double> qb;
    qb.queries = ta::index_select(qa.queries, 0, perm);
    qb.anchor_t = ta::index_select(qa.anchor_t, 0, perm);
    for (int64_t i : perm) {
        qb.anchors.push_back(qa.anchors[size_t(i)]);
        qb.indices.push_back(qa.indices[size_t(i)]);
        qb.scores.push_back(qa.scores[size_t(i)]);
    }

    auto pa = head::decode(ps, hc, qa, f3, ft, tmask, f2, Task::ground);
    auto pb = head::decode(ps, hc, qb, f3, ft, tmask, f2, Task::ground);
    for (size_t l = 0; l < pa.size(); ++l) {
        auto aa = pa[l].align.data(), ab = pb[l].align.data();
        auto ra = pa[l].box_raw.data(), rb = pb[l].box_raw.data();
        auto ca = pa[l].center_logit.data(), cb = pb[l].center_logit.data();
        int64_t cols = pa[l].align.extent(1);
        for (int64_t i = 0; i < 4; ++i) {
            int64_t src = perm[size_t(i)];
            for (int64_t j = 0; j < cols; ++j)
                CHECK(std::abs(ab[size_t(i * cols + j)] - aa[size_t(src * cols + j)]) <= 1e-5);
            for (int64_t j = 0; j < 9; ++j)
                CHECK(std::abs(rb[size_t(i * 9 + j)] - ra[size_t(src * 9 + j)]) <= 1e-5);
            CHECK(std::abs(cb[size_t(i)] - ca[size_t(src)]) <= 1e-5);
        }
    }
}

TEST_CASE("deep supervision emits one prediction set per layer") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    Rng rng(53);
    auto f3 = D::randn({5, kC}, rng, 1.0);
    auto ft = D::randn({2, kDt}, rng, 1.0);
    auto f2 = D::randn({4, kC}, rng, 1.0);
    std::vector<uint8_t> tmask{1, 1};
    std::vector<Vec3> centers{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {2, 0, 0}};
    auto qs = head::topk_select(ps, head::visual_text_fuse(ps, f3, ft, tmask), f3, centers, 4);

    auto pg = head::decode(ps, hc, qs, f3, ft, tmask, f2, Task::ground);
    REQUIRE(int64_t(pg.size()) == hc.layers);
    for (auto& p : pg) {
        CHECK(p.align.shape() == Shape{4, 2});
        CHECK(p.box_raw.shape() == Shape{4, 9});
        CHECK(p.center_logit.shape() == Shape{4});
    }
    auto pd = head::decode(ps, hc, qs, f3, ft, tmask, f2, Task::detect);
    for (auto& p : pd) CHECK(p.align.shape() == Shape{4, kCls});
}

TEST_CASE("full head gradient passes finite differences") {
    // h = 1e-4 here: the composed loss is ~16 while some gradient entries are
    // ~1e-6, so a smaller step drowns the central difference in f64 roundoff
    // (eps*|loss|/2h). Kinks are handled separately by the bias kick below.
    // anchors keep well away from relu kinks (no all-zero coordinates)
    std::vector<Vec3> centers{{0.3, 0.4, 0.2},  {2.1, 0.3, 0.1}, {0.2, 2.2, 0.3},
                              {-2.2, 0.1, 0.4}, {0.1, 0.2, 2.3}, {2.2, 2.1, 0.2}};
    std::vector<uint8_t> tmask{1, 1, 1};
    HeadConfig hc = tiny_head();

    auto build = [&](ta::ParamStore<double>& ps) {
        init_tiny(ps, hc);
        Rng rng(59);
        ps.add("in.fpmv", D::randn({6, kC}, rng, 1.0), false);
        ps.add("in.ft", D::randn({3, kDt}, rng, 1.0), false);
        ps.add("in.fmv", D::randn({4, kC}, rng, 1.0), false);
        // push relu pre-activations away from the kink so the central
        // difference stays on one linear piece
        Rng kick(613);
        for (auto& [name, t] : ps.params()) {
            if (name.size() > 3 && name.compare(name.size() - 3, 3, ".b1") == 0) {
                auto d = ps.get(name).raw_data();
                for (auto& v : d) v = kick.normal() * 0.4;
            }
        }
    };

    {
        ta::ParamStore<double> ps;
        build(ps);
        std::vector<BoxTarget> tgt{
            {geo::make_box({1.8, 0.1, 0.0}, {0.7, 0.5, 0.9}, {0.4, 0.05, -0.2}), 0}};
        auto fwd = [&]() {
            auto f3 = ps.get("in.fpmv");
            auto ft = ps.get("in.ft");
            auto f2 = ps.get("in.fmv");
            auto lg = head::visual_text_fuse(ps, f3, ft, tmask);
            auto qs = head::topk_select(ps, lg, f3, centers, 4);
            auto preds = head::decode(ps, hc, qs, f3, ft, tmask, f2, Task::ground);
            return head::match_loss(preds, qs, tgt, hc, Task::ground).total;
        };
        auto rep = ta::grad_check(ps, fwd, 1e-4, 2, 61);
        INFO(rep.str());
        CHECK(rep.max_rel_err <= 1e-4);
    }
    {
        // fresh store: params the detect graph never touches must not carry
        // gradients left over from the grounding pass
        ta::ParamStore<double> ps;
        build(ps);
        std::vector<BoxTarget> tgt{
            {geo::make_box({-1.9, 0.2, 0.1}, {0.6, 0.6, 0.6}, {0.0, 0.0, 0.3}), 1},
            {geo::make_box({0.1, 1.9, -0.1}, {1.1, 0.5, 0.8}, {-0.6, 0.1, 0.0}), 2}};
        auto fwd = [&]() {
            auto f3 = ps.get("in.fpmv");
            auto ft = ps.get("in.ft");
            auto f2 = ps.get("in.fmv");
            auto lg = ta::linear(f3, ps.get("head.cls.w"), ps.get("head.cls.b"));
            auto qs = head::topk_select(ps, lg, f3, centers, 4);
            auto preds = head::decode(ps, hc, qs, f3, ft, tmask, f2, Task::detect);
            return head::match_loss(preds, qs, tgt, hc, Task::detect).total;
        };
        auto rep = ta::grad_check(ps, fwd, 1e-4, 1, 67);
        INFO(rep.str());
        CHECK(rep.max_rel_err <= 1e-4);
    }
}

TEST_CASE("prediction extraction picks the best query and class") {
    auto qs = manual_queries({{0, 0, 0}, {1, 2, 3}});
    head::LayerPrediction<double> p;
    p.align = D::from_data({2, 2}, {-1.0, 0.2, 2.0, 0.5});
    p.box_raw = D::from_data({2, 9}, std::vector<double>(18, 0.0));
    p.center_logit = D::from_data({2}, {-0.5, 1.5});

    auto pick = head::pick_grounding(p, qs);
    CHECK(pick.query == 1);
    double want = 1.0 / (1.0 + std::exp(-1.5)) / (1.0 + std::exp(-2.0));
    CHECK(std::abs(pick.score - want) <= 1e-12);
    CHECK(pick.box.center == Vec3{1, 2, 3});
    CHECK(pick.box.size[0] == doctest::Approx(std::log(2.0) + 1e-4).epsilon(1e-12));

    // detection: class tie goes to the lower id, weak queries drop out
    head::LayerPrediction<double> d;
    d.align = D::from_data({2, 3}, {2.0, 2.0, -1.0, -5.0, -5.0, -5.0});
    d.box_raw = D::from_data({2, 9}, std::vector<double>(18, 0.0));
    d.center_logit = D::from_data({2}, {1.0, -5.0});
    auto dets = head::pick_detections(d, qs, 0.1);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].cls == 0);
    CHECK(dets[0].box.center == Vec3{0, 0, 0});
    double ds = 1.0 / (1.0 + std::exp(-2.0)) / (1.0 + std::exp(-1.0));
    CHECK(std::abs(dets[0].score - ds) <= 1e-12);
}

TEST_CASE("head config ships in both presets and rejects bad values") {
    for (const char* name : {"/configs/desk.json", "/configs/paper_scale.json"}) {
        std::ifstream in(std::string(TMG_REPO_DIR) + name);
        REQUIRE(in.good());
        auto j = nlohmann::json::parse(in);
        HeadConfig hc = j.at("head").get<HeadConfig>();
        hc.validate();
    }
    std::ifstream in(std::string(TMG_REPO_DIR) + "/configs/desk.json");
    auto j = nlohmann::json::parse(in);
    HeadConfig desk = j.at("head").get<HeadConfig>();
    CHECK(desk.queries == 16);
    CHECK(desk.layers == 2);
    CHECK(desk.use_2d);

    HeadConfig bad = desk;
    bad.queries = 0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("queries"), std::runtime_error);
    bad = desk;
    bad.focal_alpha = 1.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("focal_alpha"), std::runtime_error);

    nlohmann::json rt = desk;
    HeadConfig back = rt.get<HeadConfig>();
    CHECK(back.contrast_dim == desk.contrast_dim);
    CHECK(back.center_sigma == desk.center_sigma);
}

TEST_CASE("parameter initialization matches the closed-form count") {
    HeadConfig hc = tiny_head();
    ta::ParamStore<double> ps;
    init_tiny(ps, hc);
    CHECK(ps.trainable_count() == head::head_param_count(hc, kC, kDt, kCls));
    CHECK(ps.frozen_count() == 0);

    // heads must divide the runtime width
    ta::ParamStore<double> ps2;
    Rng rng(71);
    HeadConfig odd = hc;
    odd.heads = 3;
    CHECK_THROWS_WITH_AS(head::init_head_params(odd, kC, kDt, kCls, ps2, rng),
                         doctest::Contains("divide"), std::runtime_error);
}

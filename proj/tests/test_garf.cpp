#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "garf/garf.hpp"
#include "ref/ref_garf.hpp"
#include "rng.hpp"
#include "ta/gradcheck.hpp"

using namespace tmg;
using garf::Coord;
using garf::GarfConfig;
using garf::SparseTensor3D;
using geo::CameraView;
using geo::Vec3;
using D = ta::Tensor<double>;

namespace {

enc::EncoderConfig tiny_encoder() {
    enc::EncoderConfig ec;
    ec.d_model = 8;
    ec.layers = 4;
    ec.heads = 2;
    ec.image_size = 32;
    ec.patch_size = 8;
    ec.text_d_model = 8;
    ec.text_heads = 2;
    ec.text_max_len = 8;
    ec.adapter_bottleneck = 4;
    ec.adapter_layers = {1, 3};
    ec.point_groups = 4;
    ec.point_neighbors = 2;
    return ec;
}

GarfConfig tiny_garf() {
    GarfConfig gc;
    gc.voxel_size = 0.25;
    gc.stem_channels = 4;
    gc.channels = 4;
    gc.pyramid_levels = 2;
    gc.prune_keep = 1.0;
    return gc;
}

CameraView look_from(Vec3 pos, int64_t wh, double f) {
    // identity rotation: the camera looks down +z from `pos`
    CameraView v;
    v.fx = v.fy = f;
    v.cx = v.cy = double(wh) / 2.0;
    v.width = v.height = wh;
    v.depth.assign(size_t(wh * wh), 1.0f);
    v.t = Vec3{-pos[0], -pos[1], -pos[2]};
    return v;
}

SparseTensor3D<double> make_sparse(std::vector<Coord> coords, D feats, double vs, int64_t stride) {
    SparseTensor3D<double> s;
    s.coords = std::move(coords);
    s.feats = std::move(feats);
    s.voxel_size = vs;
    s.stride = stride;
    return s;
}

bool bitwise_equal(const D& a, const D& b) {
    return a.numel() == b.numel() &&
           std::memcmp(a.data().data(), b.data().data(), sizeof(double) * size_t(a.numel())) == 0;
}

}  // namespace

TEST_CASE("voxelize mean-pools duplicates and keeps grid structure") {
    geo::PointCloud pc;
    pc.positions = {{0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}};
    pc.colors = {{1.0f, 0.0f, 0.0f}, {0.0f, 1.0f, 0.0f}};
    auto s = garf::voxelize<double>(pc, 1.0);
    REQUIRE(s.size() == 1);
    CHECK(s.coords[0] == Coord{0, 0, 0});
    auto f = s.feats.data();
    CHECK(f[0] == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(f[3] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(f[4] == doctest::Approx(0.5).epsilon(1e-12));

    geo::PointCloud grid;
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z) grid.positions.push_back({x + 0.5, y + 0.5, z + 0.5});
    auto g = garf::voxelize<double>(grid, 1.0);
    REQUIRE(g.size() == 8);
    CHECK(g.coords.front() == Coord{0, 0, 0});
    CHECK(g.coords.back() == Coord{1, 1, 1});
    g.check_valid();
    // colorless clouds get zero color channels
    auto c = garf::voxelize<double>(grid, 1.0).feats.data();
    CHECK(c[5] == 0.0);

    geo::PointCloud empty;
    CHECK_THROWS_WITH_AS(garf::voxelize<double>(empty, 1.0), doctest::Contains("empty"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(garf::voxelize<double>(pc, 0.0), doctest::Contains("positive"),
                         std::runtime_error);
}

TEST_CASE("submanifold conv matches the densify-then-dense-conv oracle") {
    Rng rng(11);
    std::vector<Coord> coords = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};  // 3-voxel line
    int64_t cin = 6, cout = 4;
    auto feats = D::randn({3, cin}, rng, 1.0);
    auto w = D::randn({27 * cin, cout}, rng, 0.5);
    auto b = D::randn({cout}, rng, 0.5);
    auto in = make_sparse(coords, feats, 0.25, 1);
    auto out = garf::sparse_conv3(in, w, b, 1);
    REQUIRE(out.coords == coords);
    CHECK(out.stride == 1);
    auto want = ref::dense_conv3(coords, feats.data(), cin, out.coords, w.data(), b.data(), cout, 1);
    auto got = out.feats.data();
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("stride-2 conv halves coordinates and matches the densify oracle") {
    Rng rng(12);
    std::vector<Coord> coords;
    while (coords.size() < 20) {
        Coord c{int32_t(rng.randint(9)) - 4, int32_t(rng.randint(9)) - 4, int32_t(rng.randint(9)) - 4};
        if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end());
    int64_t cin = 4, cout = 5;
    auto feats = D::randn({20, cin}, rng, 1.0);
    auto w = D::randn({27 * cin, cout}, rng, 0.5);
    auto b = D::randn({cout}, rng, 0.5);
    auto in = make_sparse(coords, feats, 0.25, 2);
    auto out = garf::sparse_conv3(in, w, b, 2);
    CHECK(out.stride == 4);

    std::vector<Coord> expect;
    for (const Coord& c : coords)
        expect.push_back({garf::floordiv2(c[0]), garf::floordiv2(c[1]), garf::floordiv2(c[2])});
    std::sort(expect.begin(), expect.end());
    expect.erase(std::unique(expect.begin(), expect.end()), expect.end());
    REQUIRE(out.coords == expect);

    auto want = ref::dense_conv3(coords, feats.data(), cin, out.coords, w.data(), b.data(), cout, 2);
    auto got = out.feats.data();
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("token interpolation: zero-distance dominance, symmetry, loop oracle") {
    Rng rng(13);
    auto f_p = D::randn({4, 5}, rng, 1.0);
    std::vector<Vec3> centers = {{0.125, 0.125, 0.125}, {2, 0, 0}, {0, 2, 0}, {0, 0, 2}};

    // query sits exactly on token 0 -> weight ~1 on its feature
    auto hit = garf::interp_tokens(f_p, centers, {centers[0]});
    for (int64_t j = 0; j < 5; ++j)
        CHECK(std::abs(hit.data()[size_t(j)] - f_p.data()[size_t(j)]) < 1e-6);

    // equidistant from all three -> unweighted mean
    auto f3 = D::randn({3, 5}, rng, 1.0);
    std::vector<Vec3> tri = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    auto mid = garf::interp_tokens(f3, tri, {Vec3{1.0 / 3, 1.0 / 3, 1.0 / 3}});
    for (int64_t j = 0; j < 5; ++j) {
        double mean = (f3.data()[size_t(j)] + f3.data()[size_t(5 + j)] + f3.data()[size_t(10 + j)]) / 3.0;
        CHECK(std::abs(mid.data()[size_t(j)] - mean) < 1e-12);
    }

    std::vector<Vec3> queries;
    for (int i = 0; i < 10; ++i)
        queries.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    auto got = garf::interp_tokens(f_p, centers, queries);
    auto want = ref::interp3_scalar(f_p.data(), 4, 5, centers, queries);
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);

    auto f2 = D::randn({2, 5}, rng, 1.0);
    CHECK_THROWS_WITH_AS(garf::interp_tokens(f2, {Vec3{0, 0, 0}, Vec3{1, 0, 0}}, queries),
                         doctest::Contains("at least 3"), std::runtime_error);
}

TEST_CASE("pyramid keeps single voxels and collapses a unit block") {
    Rng rng(14);
    auto ec = tiny_encoder();
    auto gc = tiny_garf();
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, ec, gc, rng);

    auto one = make_sparse({{3, -2, 5}}, D::randn({1, gc.stem_channels}, rng, 1.0), 0.25, 1);
    auto f_ps1 = D::randn({1, gc.channels}, rng, 1.0);
    auto levels = garf::rebuild_and_pyramid(one, f_ps1, ps, gc, true);
    REQUIRE(levels.size() == 2);
    for (const auto& l : levels) {
        CHECK(l.size() == 1);
        CHECK(l.feats.extent(1) == gc.channels);
    }
    CHECK(levels[0].stride == 2);
    CHECK(levels[1].stride == 4);
    CHECK(levels[0].coords[0] == Coord{1, -1, 2});

    std::vector<Coord> block;
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z) block.push_back({int32_t(x), int32_t(y), int32_t(z)});
    std::sort(block.begin(), block.end());
    auto cube = make_sparse(block, D::randn({8, gc.stem_channels}, rng, 1.0), 0.25, 1);
    auto lv = garf::rebuild_and_pyramid(cube, D::randn({8, gc.channels}, rng, 1.0), ps, gc, true);
    CHECK(lv[0].size() == 1);  // the 2^3 block folds into one stride-2 cell
    CHECK(lv[1].size() == 1);
    CHECK(lv[0].coords[0] == Coord{0, 0, 0});
}

TEST_CASE("2D recovery lays tokens row-major and matches the index map") {
    Rng rng(15);
    auto ec = tiny_encoder();  // 32/8 -> 4x4 grid, 17 tokens
    auto gc = tiny_garf();
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, ec, gc, rng);
    int64_t g = ec.image_size / ec.patch_size, d = ec.d_model, c = gc.channels;

    std::vector<D> taps = {D::randn({2, g * g + 1, d}, rng, 1.0),
                           D::randn({2, g * g + 1, d}, rng, 1.0)};
    auto maps = garf::recover_2d(taps, ec, ps, gc, false);  // eval-mode norm: unit buffers
    REQUIRE(maps.size() == 2);
    CHECK(maps[0].shape() == Shape{2, c, g, g});
    CHECK(maps[1].shape() == Shape{2, c, 2, 2});

    auto w = ps.get("garf.rec1.w").data();
    auto b = ps.get("garf.rec1.b").data();
    auto tap = taps[0].data();
    auto m0 = maps[0].data();
    for (int64_t v = 0; v < 2; ++v)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t j = 0; j < g * g; ++j) {
                double lin = b[size_t(ch)];
                for (int64_t k = 0; k < d; ++k)
                    lin += tap[size_t((v * (g * g + 1) + 1 + j) * d + k)] * w[size_t(k * c + ch)];
                double want = std::max(lin / std::sqrt(1.0 + 1e-5), 0.0);
                double got = m0[size_t(((v * c + ch) * g + j / g) * g + j % g)];
                CHECK(std::abs(got - want) < 1e-12);
            }

    // constant tokens produce spatially constant maps
    std::vector<D> flat = {D::full({1, g * g + 1, d}, 0.3), D::full({1, g * g + 1, d}, 0.3)};
    auto cm = garf::recover_2d(flat, ec, ps, gc, false);
    auto v0 = cm[0].data();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t px = 1; px < g * g; ++px)
            CHECK(v0[size_t(ch * g * g + px)] == v0[size_t(ch * g * g)]);

    std::vector<D> wrong = {taps[0]};
    CHECK_THROWS_WITH_AS(garf::recover_2d(wrong, ec, ps, gc, false),
                         doctest::Contains("one tap per"), std::runtime_error);
}

TEST_CASE("ceil-mode average pooling matches a window loop") {
    Rng rng(16);
    auto x = D::randn({2, 3, 5, 7}, rng, 1.0);
    auto y = garf::detail::avg_pool_ceil2(x);
    REQUIRE(y.shape() == Shape{2, 3, 3, 4});
    auto xd = x.data();
    auto yd = y.data();
    for (int64_t v = 0; v < 2; ++v)
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t yo = 0; yo < 3; ++yo)
                for (int64_t xo = 0; xo < 4; ++xo) {
                    double acc = 0;
                    int64_t cnt = 0;
                    for (int64_t dy = 0; dy < 2; ++dy)
                        for (int64_t dx = 0; dx < 2; ++dx) {
                            int64_t yy = 2 * yo + dy, xx = 2 * xo + dx;
                            if (yy < 5 && xx < 7) {
                                acc += xd[size_t(((v * 3 + ch) * 5 + yy) * 7 + xx)];
                                ++cnt;
                            }
                        }
                    CHECK(std::abs(yd[size_t(((v * 3 + ch) * 3 + yo) * 4 + xo)] - acc / cnt) < 1e-12);
                }
}

TEST_CASE("projection sampling averages views and matches the scalar oracle") {
    Rng rng(17);
    std::vector<Coord> coords;
    while (coords.size() < 30) {
        Coord c{int32_t(rng.randint(8)) - 4, int32_t(rng.randint(8)) - 4, int32_t(rng.randint(4)) - 2};
        if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end());
    auto level = make_sparse(coords, D::randn({30, 4}, rng, 1.0), 0.25, 2);
    auto map = D::randn({2, 4, 4, 4}, rng, 1.0);
    std::vector<CameraView> views = {look_from({0, 0, -5}, 32, 24.0), look_from({0.4, -0.3, -6}, 32, 20.0)};

    auto got = garf::project_sample(level, map, views, 8, 1);
    std::vector<Vec3> centers;
    for (int64_t i = 0; i < level.size(); ++i) centers.push_back(level.world_center(i));
    auto want = ref::project_sample_scalar(centers, map.data(), 2, 4, 4, 4, views, 8.0);
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-9);

    // swapping the views never changes the average
    std::vector<CameraView> swapped = {views[1], views[0]};
    auto map_sw = ta::concat(std::vector<D>{ta::slice(map, 0, 1, 1), ta::slice(map, 0, 0, 1)}, 0);
    auto got_sw = garf::project_sample(level, map_sw, swapped, 8, 1);
    for (int64_t i = 0; i < got.numel(); ++i)
        CHECK(std::abs(got.data()[size_t(i)] - got_sw.data()[size_t(i)]) < 1e-12);

    // constant map -> every visible voxel receives the constant
    auto cmap = D::full({2, 4, 4, 4}, 0.7);
    auto cg = garf::project_sample(level, cmap, views, 8, 1);
    for (int64_t i = 0; i < level.size(); ++i) {
        double v = cg.data()[size_t(i * 4)];
        if (v != 0.0) CHECK(std::abs(v - 0.7) < 1e-12);
    }

    // zero maps give exactly zero features
    auto zg = garf::project_sample(level, D::zeros({2, 4, 4, 4}), views, 8, 1);
    for (int64_t i = 0; i < zg.numel(); ++i) CHECK(zg.data()[size_t(i)] == 0.0);

    // a voxel behind both cameras contributes a zero row
    auto behind = make_sparse({{0, 0, -40}}, D::randn({1, 4}, rng, 1.0), 0.25, 2);
    auto bg = garf::project_sample(behind, map, views, 8, 1);
    for (int64_t j = 0; j < 4; ++j) CHECK(bg.data()[size_t(j)] == 0.0);
}

TEST_CASE("gating matches the pooled-descriptor oracle and saturates") {
    Rng rng(18);
    auto ec = tiny_encoder();
    auto gc = tiny_garf();
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, ec, gc, rng);
    int64_t c = gc.channels;
    auto f_s = D::randn({7, c}, rng, 1.0);
    auto f_proj = D::randn({7, c}, rng, 1.0);

    auto got = garf::apif_fuse(f_s, f_proj, ps, 1);
    REQUIRE(got.shape() == Shape{7, 2 * c});
    auto want = ref::apif_scalar(f_s.data(), f_proj.data(), 7, c, ps.get("garf.apif1.w1").data(),
                                 ps.get("garf.apif1.b1").data(), ps.get("garf.apif1.w2").data(),
                                 ps.get("garf.apif1.b2").data());
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);

    // zeroed MLP -> gate is exactly 0.5 everywhere
    for (auto name : {"garf.apif2.w1", "garf.apif2.b1", "garf.apif2.w2", "garf.apif2.b2"}) {
        auto raw = ps.get(name).raw_data();
        std::fill(raw.begin(), raw.end(), 0.0);
    }
    auto half = garf::apif_fuse(f_s, f_proj, ps, 2);
    for (int64_t i = 0; i < 7; ++i)
        for (int64_t j = 0; j < c; ++j) {
            CHECK(half.data()[size_t(i * 2 * c + j)] == 0.5 * f_s.data()[size_t(i * c + j)]);
            CHECK(half.data()[size_t(i * 2 * c + c + j)] == 0.5 * f_proj.data()[size_t(i * c + j)]);
        }

    // with the gate pinned, scaling inputs scales the fused rows linearly
    auto tripled = garf::apif_fuse(ta::mul_scalar(f_s, 3.0), ta::mul_scalar(f_proj, 3.0), ps, 2);
    for (int64_t i = 0; i < tripled.numel(); ++i)
        CHECK(std::abs(tripled.data()[size_t(i)] - 3.0 * half.data()[size_t(i)]) < 1e-12);

    // a large negative output bias saturates the gate shut
    auto b2 = ps.get("garf.apif2.b2").raw_data();
    std::fill(b2.begin(), b2.end(), -50.0);
    auto shut = garf::apif_fuse(f_s, f_proj, ps, 2);
    for (int64_t i = 0; i < shut.numel(); ++i) CHECK(std::abs(shut.data()[size_t(i)]) < 1e-12);

    // empty level passes through as an empty tensor
    auto empty = garf::apif_fuse(D::zeros({0, c}), D::zeros({0, c}), ps, 1);
    CHECK(empty.shape() == Shape{0, 2 * c});
}

TEST_CASE("neck merges top-down, prunes by norm, and matches a parent loop") {
    Rng rng(19);
    GarfConfig gc = tiny_garf();
    gc.channels = 2;
    gc.prune_keep = 1.0;
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, tiny_encoder(), gc, rng);
    // neck conv := projection onto the first two channels
    {
        auto w = ps.get("garf.neck.w").raw_data();
        std::fill(w.begin(), w.end(), 0.0);
        w[0] = 1.0;
        w[1 * 2 + 1] = 1.0;  // rows are the 2C inputs, columns the C outputs
    }

    // single level: conv only, sparsity unchanged
    auto single = make_sparse({{0, 0, 0}, {1, 0, 0}}, D::randn({2, 4}, rng, 1.0), 0.25, 2);
    auto out = garf::neck(std::vector<SparseTensor3D<double>>{single}, ps, gc);
    REQUIRE(out.coords == single.coords);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j)
            CHECK(std::abs(out.feats.data()[size_t(i * 2 + j)] -
                           single.feats.data()[size_t(i * 4 + j)]) < 1e-12);

    // norms 1,2,3,4 with keep=0.75 drop exactly the weakest voxel
    gc.prune_keep = 0.75;
    auto ranked = make_sparse({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}},
                              D::from_data({4, 4}, {1, 0, 9, 9, 2, 0, 9, 9, 0, 3, 9, 9, 4, 0, 9, 9}),
                              0.25, 2);
    auto pruned = garf::neck(std::vector<SparseTensor3D<double>>{ranked}, ps, gc);
    REQUIRE(pruned.size() == 3);
    CHECK(pruned.coords == std::vector<Coord>{{1, 0, 0}, {2, 0, 0}, {3, 0, 0}});

    // equal norms keep the lower indices
    gc.prune_keep = 0.5;
    auto tied = make_sparse({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}},
                            D::from_data({4, 4}, {2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0}),
                            0.25, 2);
    auto kept = garf::neck(std::vector<SparseTensor3D<double>>{tied}, ps, gc);
    REQUIRE(kept.size() == 2);
    CHECK(kept.coords == std::vector<Coord>{{0, 0, 0}, {1, 0, 0}});

    // two levels: each fine voxel picks up its floor(c/2) parent before conv
    gc.prune_keep = 1.0;
    std::vector<Coord> fine_coords;
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z) fine_coords.push_back({int32_t(x), int32_t(y), int32_t(z)});
    std::sort(fine_coords.begin(), fine_coords.end());
    auto fine_feats = D::randn({8, 4}, rng, 1.0);
    auto coarse_feats = D::randn({1, 4}, rng, 1.0);
    auto fine = make_sparse(fine_coords, fine_feats, 0.25, 2);
    auto coarse = make_sparse({{0, 0, 0}}, coarse_feats, 0.25, 4);
    auto merged = garf::neck(std::vector<SparseTensor3D<double>>{fine, coarse}, ps, gc);
    REQUIRE(merged.size() == 8);
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            double want = fine_feats.data()[size_t(i * 4 + j)] + coarse_feats.data()[size_t(j)];
            CHECK(std::abs(merged.feats.data()[size_t(i * 2 + j)] - want) < 1e-12);
        }
}

TEST_CASE("full fusion stage is deterministic and keeps levels aligned") {
    Rng rng(20);
    auto ec = tiny_encoder();
    auto gc = tiny_garf();
    gc.prune_keep = 0.75;
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, ec, gc, rng);

    geo::PointCloud pc;
    for (int i = 0; i < 60; ++i)
        pc.positions.push_back({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.4, 0.4)});
    auto f_p = D::randn({4, ec.d_model}, rng, 1.0);
    std::vector<Vec3> token_centers = {{0.3, 0.3, 0}, {-0.3, 0.3, 0}, {0.3, -0.3, 0}, {-0.3, -0.3, 0}};
    int64_t L = ec.image_tokens();
    std::vector<D> taps = {D::randn({2, L, ec.d_model}, rng, 1.0), D::randn({2, L, ec.d_model}, rng, 1.0)};
    std::vector<CameraView> views = {look_from({0, 0, -5}, 32, 24.0), look_from({0.5, 0, -5}, 32, 24.0)};

    auto a = garf::garf_forward(pc, f_p, token_centers, taps, views, ps, ec, gc, true);
    auto b = garf::garf_forward(pc, f_p, token_centers, taps, views, ps, ec, gc, true);
    CHECK(bitwise_equal(a.s_pmv.feats, b.s_pmv.feats));
    CHECK(a.s_pmv.coords == b.s_pmv.coords);

    auto raw = garf::voxelize<double>(pc, gc.voxel_size);
    auto s1 = garf::stem(raw, ps, true);
    auto levels = garf::rebuild_and_pyramid(s1, garf::propagate_3d(f_p, token_centers, s1, ps, true),
                                            ps, gc, true);
    int64_t n1 = levels[0].size();
    CHECK(a.s_pmv.size() == int64_t(std::ceil(0.75 * double(n1))));
    CHECK(a.s_pmv.stride == 2);
    CHECK(a.maps_2d.size() == 2);
    REQUIRE(a.anchors.size() == size_t(a.s_pmv.size()));
    for (int64_t i = 0; i < a.s_pmv.size(); ++i) {
        Vec3 w = a.s_pmv.world_center(i);
        CHECK(w[0] == a.anchors[size_t(i)][0]);
        CHECK(w[1] == a.anchors[size_t(i)][1]);
        CHECK(w[2] == a.anchors[size_t(i)][2]);
    }
    // every surviving coordinate existed at the finest pyramid level
    for (const Coord& c : a.s_pmv.coords)
        CHECK(std::find(levels[0].coords.begin(), levels[0].coords.end(), c) != levels[0].coords.end());
}

TEST_CASE("fusion stage passes a finite-difference gradient check") {
    Rng rng(21);
    auto ec = tiny_encoder();
    auto gc = tiny_garf();  // prune_keep 1.0 so the kept set cannot flip under perturbation
    ta::ParamStore<double> ps;
    garf::init_garf_params(ps, ec, gc, rng);

    geo::PointCloud pc;
    for (int i = 0; i < 12; ++i)
        pc.positions.push_back({rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.3, 0.3)});
    auto f_p = D::randn({4, ec.d_model}, rng, 1.0);
    std::vector<Vec3> token_centers = {{0.2, 0.2, 0}, {-0.2, 0.2, 0}, {0.2, -0.2, 0}, {-0.2, -0.2, 0}};
    int64_t L = ec.image_tokens();
    std::vector<D> taps = {D::randn({2, L, ec.d_model}, rng, 1.0), D::randn({2, L, ec.d_model}, rng, 1.0)};
    std::vector<CameraView> views = {look_from({0, 0, -5}, 32, 24.0), look_from({0.5, 0.2, -5}, 32, 24.0)};

    // fixed readout weights so the loss is a plain scalar of the fused voxels
    auto holdw = std::make_shared<std::vector<double>>();
    auto loss = [&, holdw]() {
        auto out = garf::garf_forward(pc, f_p, token_centers, taps, views, ps, ec, gc, true);
        int64_t n = out.s_pmv.feats.numel();
        if (holdw->empty()) {
            Rng r(99);
            for (int64_t i = 0; i < n; ++i) holdw->push_back(r.normal() / std::sqrt(double(n)));
        }
        auto w = D::from_data(out.s_pmv.feats.shape(), *holdw);
        return ta::sum_all(ta::mul(out.s_pmv.feats, w));
    };
    auto rep = ta::grad_check(ps, loss, 1e-5, 3, 77);
    INFO(rep.str());
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("tap selection takes the last odd encoder layers in order") {
    CHECK(garf::tap_layers(4, 2) == std::vector<int64_t>{1, 3});
    CHECK(garf::tap_layers(12, 3) == std::vector<int64_t>{7, 9, 11});
    CHECK(garf::tap_layers(5, 3) == std::vector<int64_t>{1, 3, 5});
    CHECK_THROWS_WITH_AS(garf::tap_layers(4, 3), doctest::Contains("odd layer count"),
                         std::runtime_error);
}

TEST_CASE("fusion config ships in both presets and rejects bad values") {
    for (const char* name : {"/configs/desk.json", "/configs/paper_scale.json"}) {
        std::ifstream in(std::string(TMG_REPO_DIR) + name);
        REQUIRE(in.good());
        auto j = nlohmann::json::parse(in);
        GarfConfig gc = j.at("garf").get<GarfConfig>();
        gc.validate();
    }
    std::ifstream in(std::string(TMG_REPO_DIR) + "/configs/desk.json");
    auto j = nlohmann::json::parse(in);
    GarfConfig desk = j.at("garf").get<GarfConfig>();
    CHECK(desk.voxel_size == 0.25);
    CHECK(desk.pyramid_levels == 2);
    CHECK(desk.channels == 16);

    GarfConfig bad = desk;
    bad.channels = 7;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("even"), std::runtime_error);
    bad = desk;
    bad.prune_keep = 0.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("(0,1]"), std::runtime_error);

    nlohmann::json rt = desk;
    GarfConfig back = rt.get<GarfConfig>();
    CHECK(back.stem_channels == desk.stem_channels);
    CHECK(back.prune_keep == desk.prune_keep);
}

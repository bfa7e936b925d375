#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "common.hpp"
#include "geo/box.hpp"
#include "geo/camera.hpp"
#include "rng.hpp"
#include <json.hpp>

namespace tmg::harness {

// ---------------------------------------------------------------------------
// vocabulary

constexpr int64_t kCategories = 12;
constexpr int64_t kColors = 6;

inline const char* category_name(int64_t c) {
    static const char* names[kCategories] = {"mug",    "book",  "lamp",  "plant",
                                             "laptop", "phone", "bottle", "bowl",
                                             "clock",  "vase",  "radio",  "camera"};
    check(c >= 0 && c < kCategories, "unknown category id");
    return names[c];
}

inline const char* color_name(int64_t c) {
    static const char* names[kColors] = {"red", "green", "blue", "yellow", "purple", "orange"};
    check(c >= 0 && c < kColors, "unknown color id");
    return names[c];
}

inline std::array<float, 3> color_rgb(int64_t c) {
    static const std::array<float, 3> rgb[kColors] = {
        {0.85f, 0.15f, 0.15f}, {0.15f, 0.70f, 0.20f}, {0.15f, 0.30f, 0.85f},
        {0.90f, 0.85f, 0.15f}, {0.60f, 0.20f, 0.75f}, {0.95f, 0.55f, 0.10f}};
    check(c >= 0 && c < kColors, "unknown color id");
    return rgb[c];
}

// nominal object extents in meters; jittered at generation time
inline geo::Vec3 category_size(int64_t c) {
    static const geo::Vec3 sizes[kCategories] = {
        {0.30, 0.30, 0.35}, {0.45, 0.32, 0.18}, {0.35, 0.35, 0.70}, {0.40, 0.40, 0.55},
        {0.55, 0.40, 0.15}, {0.18, 0.30, 0.12}, {0.20, 0.20, 0.50}, {0.45, 0.45, 0.22},
        {0.38, 0.16, 0.38}, {0.28, 0.28, 0.60}, {0.50, 0.24, 0.34}, {0.30, 0.22, 0.26}};
    check(c >= 0 && c < kCategories, "unknown category id");
    return sizes[c];
}

// ---------------------------------------------------------------------------
// types

struct GenConfig {
    std::array<double, 3> room{3.2, 3.2, 1.6};
    int64_t min_objects = 3;
    int64_t max_objects = 7;
    int64_t views = 6;
    int64_t image_size = 32;
    int64_t max_prompts = 8;
    double camera_radius = 2.8;
    double camera_height = 1.5;
    double focal = 22.0;  // pixels, at image_size resolution

    void validate() const {
        check(room[0] > 0 && room[1] > 0 && room[2] > 0, "gen config: room must be positive");
        check(min_objects >= 1 && max_objects >= min_objects, "gen config: bad object count range");
        check(views >= 1, "gen config: need at least one view");
        check(image_size >= 8, "gen config: image_size too small to render");
        check(max_prompts >= 1, "gen config: max_prompts must be >= 1");
        check(camera_radius > 0 && focal > 0, "gen config: camera parameters must be positive");
    }
};

inline void from_json(const nlohmann::json& j, GenConfig& c) {
    j.at("room").get_to(c.room);
    j.at("min_objects").get_to(c.min_objects);
    j.at("max_objects").get_to(c.max_objects);
    j.at("views").get_to(c.views);
    j.at("image_size").get_to(c.image_size);
    j.at("max_prompts").get_to(c.max_prompts);
    j.at("camera_radius").get_to(c.camera_radius);
    j.at("camera_height").get_to(c.camera_height);
    j.at("focal").get_to(c.focal);
}

inline void to_json(nlohmann::json& j, const GenConfig& c) {
    j = {{"room", c.room},
         {"min_objects", c.min_objects},
         {"max_objects", c.max_objects},
         {"views", c.views},
         {"image_size", c.image_size},
         {"max_prompts", c.max_prompts},
         {"camera_radius", c.camera_radius},
         {"camera_height", c.camera_height},
         {"focal", c.focal}};
}

struct SceneObject {
    geo::OrientedBox9 box;
    int64_t category = 0;
    int64_t color = 0;
};

struct Prompt {
    std::string text;
    int64_t target = 0;
    bool view_dependent = false;
    int64_t n_distractors = 0;
};

struct Scene {
    std::string id;
    std::vector<geo::CameraView> views;
    std::vector<SceneObject> objects;
    std::vector<Prompt> prompts;
};

// ---------------------------------------------------------------------------
// cameras and raycasting

// World->camera extrinsics for a camera at `eye` looking at `target`.
// Convention: +x right, +y down, +z forward; world up is +z.
inline geo::CameraView look_at(const geo::Vec3& eye, const geo::Vec3& target, int64_t size,
                               double focal) {
    geo::Vec3 f = target - eye;
    double n = geo::norm(f);
    check(n > 1e-9, "look_at: eye and target coincide");
    f = (1.0 / n) * f;
    geo::Vec3 up{0, 0, 1};
    geo::Vec3 x = geo::cross(f, up);
    if (geo::norm(x) < 1e-6) x = geo::cross(f, geo::Vec3{0, 1, 0});  // looking straight up/down
    x = (1.0 / geo::norm(x)) * x;
    geo::Vec3 y = geo::cross(f, x);

    geo::CameraView v;
    v.R = {x[0], x[1], x[2], y[0], y[1], y[2], f[0], f[1], f[2]};
    v.t = {-geo::dot(x, eye), -geo::dot(y, eye), -geo::dot(f, eye)};
    v.fx = v.fy = focal;
    v.cx = v.cy = 0.5 * double(size - 1);
    v.width = v.height = size;
    v.depth.assign(size_t(size * size), 0.0f);
    return v;
}

struct RayHit {
    double t = std::numeric_limits<double>::infinity();  // camera-z depth
    int axis = -1;                                       // entry face axis in box frame
    double sign = 0;                                     // entry face sign
    bool hit = false;
};

// Slab test against an oriented box. `o`/`d` are world-space; `d` need not be
// unit length — t is reported in units of d, so passing the camera-frame
// direction with z=1 makes t the camera depth directly.
inline RayHit ray_box(const geo::Vec3& o, const geo::Vec3& d, const geo::OrientedBox9& b,
                      const geo::Mat3& r, double t_near) {
    geo::Vec3 ob = geo::mul_t(r, o - b.center);
    geo::Vec3 db = geo::mul_t(r, d);
    double lo = t_near, hi = std::numeric_limits<double>::infinity();
    int lo_axis = -1;
    double lo_sign = 0;
    for (int a = 0; a < 3; ++a) {
        double half = 0.5 * b.size[size_t(a)];
        if (std::abs(db[size_t(a)]) < 1e-12) {
            if (std::abs(ob[size_t(a)]) > half) return {};
            continue;
        }
        double inv = 1.0 / db[size_t(a)];
        double t1 = (-half - ob[size_t(a)]) * inv;
        double t2 = (half - ob[size_t(a)]) * inv;
        double s = -1;
        if (t1 > t2) {
            std::swap(t1, t2);
            s = 1;
        }
        if (t1 > lo) {
            lo = t1;
            lo_axis = a;
            lo_sign = s;
        }
        hi = std::min(hi, t2);
        if (lo > hi) return {};
    }
    if (lo_axis < 0) return {};  // origin inside the box past the near plane
    RayHit h;
    h.t = lo;
    h.axis = lo_axis;
    h.sign = lo_sign;
    h.hit = true;
    return h;
}

// Distance from a world point to the surface of an oriented box (0 on the
// surface, positive inside or out).
inline double box_surface_distance(const geo::OrientedBox9& b, const geo::Vec3& p) {
    geo::Vec3 q = geo::mul_t(geo::box_rotation(b), p - b.center);
    double out2 = 0, max_in = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        double dq = std::abs(q[size_t(a)]) - 0.5 * b.size[size_t(a)];
        if (dq > 0) out2 += dq * dq;
        max_in = std::max(max_in, dq);
    }
    return out2 > 0 ? std::sqrt(out2) : -max_in;
}

// Flat-shaded nearest-hit rendering of every pixel; background keeps depth 0
// and black rgb.
inline void render_views(Scene& scene) {
    const geo::Vec3 light = (1.0 / geo::norm(geo::Vec3{0.4, 0.25, 0.88})) * geo::Vec3{0.4, 0.25, 0.88};
    std::vector<geo::Mat3> rots;
    rots.reserve(scene.objects.size());
    for (const auto& ob : scene.objects) rots.push_back(geo::box_rotation(ob.box));

    for (auto& view : scene.views) {
        geo::Vec3 eye = geo::mul_t(view.R, geo::Vec3{-view.t[0], -view.t[1], -view.t[2]});
        view.rgb.assign(size_t(view.width * view.height * 3), 0.0f);
        view.depth.assign(size_t(view.width * view.height), 0.0f);
        for (int64_t py = 0; py < view.height; ++py)
            for (int64_t px = 0; px < view.width; ++px) {
                geo::Vec3 dc{(double(px) - view.cx) / view.fx, (double(py) - view.cy) / view.fy, 1.0};
                geo::Vec3 dw = geo::mul_t(view.R, dc);
                RayHit best;
                size_t best_obj = 0;
                for (size_t i = 0; i < scene.objects.size(); ++i) {
                    RayHit h = ray_box(eye, dw, scene.objects[i].box, rots[i], view.near);
                    if (h.hit && h.t < best.t) {
                        best = h;
                        best_obj = i;
                    }
                }
                if (!best.hit) continue;
                size_t pix = size_t(py * view.width + px);
                view.depth[pix] = float(best.t);
                geo::Vec3 n{rots[best_obj][size_t(0 + best.axis)] * best.sign,
                            rots[best_obj][size_t(3 + best.axis)] * best.sign,
                            rots[best_obj][size_t(6 + best.axis)] * best.sign};
                double shade = 0.55 + 0.45 * std::abs(geo::dot(n, light));
                auto rgb = color_rgb(scene.objects[best_obj].color);
                for (int c = 0; c < 3; ++c) view.rgb[pix * 3 + size_t(c)] = float(rgb[size_t(c)] * shade);
            }
    }
}

// ---------------------------------------------------------------------------
// prompt synthesis

namespace detail {

inline std::string attr_phrase(const SceneObject& o) {
    return std::string(color_name(o.color)) + " " + category_name(o.category);
}

inline void synthesize_prompts(Scene& s, Rng& rng, int64_t max_prompts) {
    const auto& obs = s.objects;
    std::vector<int64_t> cat_count(kCategories, 0);
    std::map<std::pair<int64_t, int64_t>, int64_t> attr_count;
    for (const auto& o : obs) {
        ++cat_count[size_t(o.category)];
        ++attr_count[{o.color, o.category}];
    }
    auto dist = [&](size_t a, size_t b) { return geo::norm(obs[a].box.center - obs[b].box.center); };

    std::vector<Prompt> out;
    // unique color+category pairs stand on their own
    for (size_t i = 0; i < obs.size(); ++i)
        if (attr_count[{obs[i].color, obs[i].category}] == 1)
            out.push_back({"the " + attr_phrase(obs[i]), int64_t(i), false,
                           cat_count[size_t(obs[i].category)] - 1});
    // ambiguous pairs are anchored to the nearest uniquely-described object,
    // kept only when the target is strictly the closest of its look-alikes
    for (size_t i = 0; i < obs.size(); ++i) {
        if (attr_count[{obs[i].color, obs[i].category}] == 1) continue;
        int64_t anchor = -1;
        double best = std::numeric_limits<double>::infinity();
        for (size_t a = 0; a < obs.size(); ++a) {
            if (a == i || attr_count[{obs[a].color, obs[a].category}] != 1) continue;
            if (dist(i, a) < best) {
                best = dist(i, a);
                anchor = int64_t(a);
            }
        }
        if (anchor < 0) continue;
        bool closest = true;
        for (size_t j = 0; j < obs.size() && closest; ++j)
            if (j != i && obs[j].color == obs[i].color && obs[j].category == obs[i].category)
                closest = dist(j, size_t(anchor)) > best + 1e-9;
        if (closest)
            out.push_back({"the " + attr_phrase(obs[i]) + " near the " +
                               attr_phrase(obs[size_t(anchor)]),
                           int64_t(i), false, cat_count[size_t(obs[i].category)] - 1});
    }
    // view-dependent: left/right/front of view 0, per multi-instance category
    const auto& v0 = s.views[0];
    std::vector<geo::Vec3> cam(obs.size());
    for (size_t i = 0; i < obs.size(); ++i) cam[i] = geo::mul(v0.R, obs[i].box.center) + v0.t;
    for (int64_t c = 0; c < kCategories; ++c) {
        if (cat_count[size_t(c)] < 2) continue;
        std::vector<size_t> memb;
        for (size_t i = 0; i < obs.size(); ++i)
            if (obs[i].category == c) memb.push_back(i);
        struct Rule {
            const char* text;
            int axis;
            double dir;  // -1: minimum wins, +1: maximum wins
        };
        for (const Rule& r : {Rule{"on the left", 0, -1}, Rule{"on the right", 0, 1},
                              Rule{"in front", 2, -1}}) {
            size_t win = memb[0];
            for (size_t m : memb)
                if (r.dir * cam[m][size_t(r.axis)] > r.dir * cam[win][size_t(r.axis)]) win = m;
            double margin = std::numeric_limits<double>::infinity();
            for (size_t m : memb)
                if (m != win)
                    margin = std::min(margin, r.dir * (cam[win][size_t(r.axis)] - cam[m][size_t(r.axis)]));
            if (margin < 0.05) continue;  // too close to call; skip the prompt
            out.push_back({std::string("the ") + category_name(c) + " " + r.text, int64_t(win),
                           true, cat_count[size_t(c)] - 1});
        }
    }

    // keep a deterministic, varied subset
    for (size_t i = out.size(); i > 1; --i)
        std::swap(out[i - 1], out[size_t(rng.randint(int64_t(i)))]);
    if (int64_t(out.size()) > max_prompts) out.resize(size_t(max_prompts));
    s.prompts = std::move(out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generation

inline Scene generate_scene(uint64_t seed, const GenConfig& cfg) {
    cfg.validate();
    // a draw can come out promptless (no unique pair resolvable); redraw from a
    // seed-derived successor so the result is still a pure function of `seed`
    for (int attempt = 0; attempt < 8; ++attempt) {
        Rng rng(fnv1a64("scene:" + std::to_string(seed) + ":" + std::to_string(attempt)));
        Scene s;
        s.id = "scene_" + std::to_string(seed);

        int64_t n = cfg.min_objects + rng.randint(cfg.max_objects - cfg.min_objects + 1);
        for (int64_t i = 0; i < n; ++i) {
            bool placed = false;
            for (int tries = 0; tries < 1000 && !placed; ++tries) {
                SceneObject o;
                o.category = rng.randint(kCategories);
                o.color = rng.randint(kColors);
                geo::Vec3 sz = category_size(o.category);
                for (int a = 0; a < 3; ++a) sz[size_t(a)] *= rng.uniform(0.8, 1.25);
                double m = 0.5 * geo::norm(sz);
                check(2 * m < cfg.room[0] && 2 * m < cfg.room[1] && 2 * m < cfg.room[2],
                      "gen config: room too small for the object sizes");
                geo::Vec3 ctr{rng.uniform(m, cfg.room[0] - m), rng.uniform(m, cfg.room[1] - m),
                              rng.uniform(m, cfg.room[2] - m)};
                geo::Vec3 ang{rng.uniform(-std::numbers::pi, std::numbers::pi),
                              rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
                o.box = geo::make_box(ctr, sz, ang);
                bool clear = true;
                for (const auto& prev : s.objects)
                    clear = clear && geo::iou9(o.box, prev.box) <= 0.01;
                if (clear) {
                    s.objects.push_back(o);
                    placed = true;
                }
            }
            check(placed,
                  "scene generation: could not place object " + std::to_string(i) + " of " +
                      std::to_string(n) + " after 1000 tries; use fewer objects or a larger room");
        }

        geo::Vec3 center{0.5 * cfg.room[0], 0.5 * cfg.room[1], 0.35 * cfg.room[2]};
        for (int64_t v = 0; v < cfg.views; ++v) {
            double th = 2.0 * std::numbers::pi * double(v) / double(cfg.views);
            geo::Vec3 eye{center[0] + cfg.camera_radius * std::cos(th),
                          center[1] + cfg.camera_radius * std::sin(th), cfg.camera_height};
            s.views.push_back(look_at(eye, center, cfg.image_size, cfg.focal));
        }
        render_views(s);
        detail::synthesize_prompts(s, rng, cfg.max_prompts);
        if (!s.prompts.empty()) return s;
    }
    fail("scene generation: seed produced no resolvable prompts after 8 redraws");
}

}  // namespace tmg::harness

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "harness/scene.hpp"
#include <json.hpp>

namespace tmg::harness {

namespace detail {

inline void write_f32(const std::string& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "cannot open for write: " + path);
    // payload is raw little-endian float32; this project targets LE hosts
    out.write(reinterpret_cast<const char*>(data.data()),
              std::streamsize(data.size() * sizeof(float)));
    check(out.good(), "write failed: " + path);
}

inline std::vector<float> read_f32(const std::string& path, size_t expected) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    check(in.good(), "scene file missing: " + path);
    size_t bytes = size_t(in.tellg());
    check(bytes == expected * sizeof(float),
          path + ": expected " + std::to_string(expected * sizeof(float)) + " bytes, got " +
              std::to_string(bytes));
    in.seekg(0);
    std::vector<float> data(expected);
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(bytes));
    check(in.good(), "read failed: " + path);
    return data;
}

}  // namespace detail

inline void save_scene(const Scene& s, const std::string& dir) {
    check(!s.views.empty(), "save_scene: scene has no views");
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["id"] = s.id;
    j["width"] = s.views[0].width;
    j["height"] = s.views[0].height;
    nlohmann::json views = nlohmann::json::array();
    for (const auto& v : s.views) {
        check(v.width == s.views[0].width && v.height == s.views[0].height,
              "save_scene: views must share a resolution");
        views.push_back({{"fx", v.fx},
                         {"fy", v.fy},
                         {"cx", v.cx},
                         {"cy", v.cy},
                         {"near", v.near},
                         {"R", std::vector<double>(v.R.begin(), v.R.end())},
                         {"t", std::vector<double>(v.t.begin(), v.t.end())}});
    }
    j["views"] = std::move(views);
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"center", std::vector<double>(o.box.center.begin(), o.box.center.end())},
                        {"size", std::vector<double>(o.box.size.begin(), o.box.size.end())},
                        {"angles", std::vector<double>(o.box.angles.begin(), o.box.angles.end())},
                        {"category", o.category},
                        {"color", o.color}});
    j["objects"] = std::move(objs);
    nlohmann::json prompts = nlohmann::json::array();
    for (const auto& p : s.prompts)
        prompts.push_back({{"text", p.text},
                           {"target", p.target},
                           {"view_dependent", p.view_dependent},
                           {"n_distractors", p.n_distractors}});
    j["prompts"] = std::move(prompts);

    std::ofstream meta(dir + "/meta.json");
    check(meta.good(), "cannot open for write: " + dir + "/meta.json");
    meta << j.dump(2) << "\n";
    check(meta.good(), "write failed: " + dir + "/meta.json");

    for (size_t v = 0; v < s.views.size(); ++v) {
        detail::write_f32(dir + "/rgb_" + std::to_string(v) + ".f32", s.views[v].rgb);
        detail::write_f32(dir + "/depth_" + std::to_string(v) + ".f32", s.views[v].depth);
    }
}

inline Scene load_scene(const std::string& dir) {
    std::string meta_path = dir + "/meta.json";
    std::ifstream in(meta_path);
    check(in.good(), "scene manifest missing: " + meta_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("scene manifest malformed: " + meta_path + ": " + e.what());
    }

    Scene s;
    try {
        s.id = j.at("id").get<std::string>();
        int64_t w = j.at("width").get<int64_t>();
        int64_t h = j.at("height").get<int64_t>();
        for (const auto& jv : j.at("views")) {
            geo::CameraView v;
            v.fx = jv.at("fx").get<double>();
            v.fy = jv.at("fy").get<double>();
            v.cx = jv.at("cx").get<double>();
            v.cy = jv.at("cy").get<double>();
            v.near = jv.at("near").get<double>();
            auto r = jv.at("R").get<std::vector<double>>();
            auto t = jv.at("t").get<std::vector<double>>();
            check(r.size() == 9 && t.size() == 3, "scene manifest malformed: bad extrinsics");
            std::copy(r.begin(), r.end(), v.R.begin());
            std::copy(t.begin(), t.end(), v.t.begin());
            v.width = w;
            v.height = h;
            s.views.push_back(std::move(v));
        }
        for (const auto& jo : j.at("objects")) {
            SceneObject o;
            auto c = jo.at("center").get<std::vector<double>>();
            auto sz = jo.at("size").get<std::vector<double>>();
            auto a = jo.at("angles").get<std::vector<double>>();
            check(c.size() == 3 && sz.size() == 3 && a.size() == 3,
                  "scene manifest malformed: bad box");
            o.box = geo::make_box({c[0], c[1], c[2]}, {sz[0], sz[1], sz[2]}, {a[0], a[1], a[2]});
            o.category = jo.at("category").get<int64_t>();
            o.color = jo.at("color").get<int64_t>();
            check(o.category >= 0 && o.category < kCategories && o.color >= 0 && o.color < kColors,
                  "scene manifest malformed: category/color out of range");
            s.objects.push_back(std::move(o));
        }
        for (const auto& jp : j.at("prompts")) {
            Prompt p;
            p.text = jp.at("text").get<std::string>();
            p.target = jp.at("target").get<int64_t>();
            p.view_dependent = jp.at("view_dependent").get<bool>();
            p.n_distractors = jp.at("n_distractors").get<int64_t>();
            check(p.target >= 0 && p.target < int64_t(s.objects.size()),
                  "scene manifest malformed: prompt target out of range");
            s.prompts.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        fail("scene manifest malformed: " + meta_path + ": " + e.what());
    }

    for (size_t v = 0; v < s.views.size(); ++v) {
        auto& view = s.views[v];
        view.rgb = detail::read_f32(dir + "/rgb_" + std::to_string(v) + ".f32",
                                    size_t(view.width * view.height * 3));
        view.depth = detail::read_f32(dir + "/depth_" + std::to_string(v) + ".f32",
                                      size_t(view.width * view.height));
        view.check_valid();
    }
    return s;
}

// Datasets are directories of scene subdirectories, consumed in name order.
inline std::vector<std::string> list_scene_dirs(const std::string& root) {
    check(std::filesystem::is_directory(root), "dataset directory missing: " + root);
    std::vector<std::string> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json"))
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    check(!dirs.empty(), "dataset directory holds no scenes: " + root);
    return dirs;
}

inline std::vector<Scene> load_dataset(const std::string& root) {
    std::vector<Scene> scenes;
    for (const auto& d : list_scene_dirs(root)) scenes.push_back(load_scene(d));
    return scenes;
}

inline void save_dataset(const std::vector<Scene>& scenes, const std::string& root) {
    std::filesystem::create_directories(root);
    for (size_t i = 0; i < scenes.size(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "scene_%04zu", i);
        save_scene(scenes[i], root + "/" + buf);
    }
}

}  // namespace tmg::harness

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace tmg::enc {

// Architecture of the shared frozen encoder: one visual transformer serving
// both image patches and point tokens, one text transformer, and residual
// adapters at the configured (odd, 1-indexed) layers.
struct EncoderConfig {
    int64_t d_model = 32;
    int64_t layers = 4;
    int64_t heads = 4;
    int64_t image_size = 32;
    int64_t patch_size = 8;
    int64_t text_d_model = 32;
    int64_t text_heads = 4;
    int64_t text_max_len = 32;
    int64_t adapter_bottleneck = 8;
    std::vector<int64_t> adapter_layers = {1, 3};
    int64_t point_groups = 64;     // M
    int64_t point_neighbors = 8;   // K
    int64_t point_in_channels = 6; // xyz (+rgb)

    void validate() const {
        check(d_model > 0 && layers > 0 && heads > 0, "config: non-positive encoder dims");
        check(d_model % heads == 0, "config: d_model not divisible by heads");
        check(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
              "config: image_size must be a multiple of patch_size");
        check(text_d_model > 0 && text_heads > 0 && text_d_model % text_heads == 0,
              "config: text_d_model not divisible by text_heads");
        check(text_max_len >= 3, "config: text_max_len must fit BOS, one byte, EOS");
        check(adapter_bottleneck > 0, "config: non-positive adapter bottleneck");
        for (size_t i = 0; i < adapter_layers.size(); ++i) {
            int64_t l = adapter_layers[i];
            check(l % 2 == 1, "config: adapter layers must be odd (1-indexed)");
            check(l >= 1 && l <= layers, "config: adapter layer out of range");
            check(i == 0 || adapter_layers[i - 1] < l, "config: adapter layers must be strictly increasing");
        }
        check(point_groups > 0 && point_neighbors > 0, "config: non-positive point grouping");
        check(point_in_channels == 3 || point_in_channels == 6,
              "config: point_in_channels must be 3 (xyz) or 6 (xyz+rgb)");
    }

    int64_t image_tokens() const {
        int64_t p = image_size / patch_size;
        return p * p + 1;  // + class token
    }
};

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("text_d_model").get_to(c.text_d_model);
    j.at("text_heads").get_to(c.text_heads);
    j.at("text_max_len").get_to(c.text_max_len);
    j.at("adapter_bottleneck").get_to(c.adapter_bottleneck);
    j.at("adapter_layers").get_to(c.adapter_layers);
    j.at("point_groups").get_to(c.point_groups);
    j.at("point_neighbors").get_to(c.point_neighbors);
    j.at("point_in_channels").get_to(c.point_in_channels);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = nlohmann::json{{"d_model", c.d_model},
                       {"layers", c.layers},
                       {"heads", c.heads},
                       {"image_size", c.image_size},
                       {"patch_size", c.patch_size},
                       {"text_d_model", c.text_d_model},
                       {"text_heads", c.text_heads},
                       {"text_max_len", c.text_max_len},
                       {"adapter_bottleneck", c.adapter_bottleneck},
                       {"adapter_layers", c.adapter_layers},
                       {"point_groups", c.point_groups},
                       {"point_neighbors", c.point_neighbors},
                       {"point_in_channels", c.point_in_channels}};
}

}  // namespace tmg::enc

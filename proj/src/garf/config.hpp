#pragma once

#include <cstdint>
#include <vector>

#include "common.hpp"
#include <json.hpp>

namespace tmg::garf {

// Fusion-stage hyperparameters. `channels` is the per-level width C of both
// the 3D pyramid and the recovered 2D maps; fused features are 2C wide until
// the neck projects them back to C.
struct GarfConfig {
    double voxel_size = 0.25;    // base (stride-1) voxel edge, meters
    int64_t stem_channels = 16;  // width of the voxel stem output
    int64_t channels = 16;       // per-level fusion width C
    int64_t pyramid_levels = 3;  // stride-2 stages after the stem
    double prune_keep = 0.75;    // fraction of finest voxels the neck keeps

    void validate() const {
        check(voxel_size > 0, "garf config: voxel_size must be positive");
        check(stem_channels > 0, "garf config: stem_channels must be positive");
        check(channels > 0 && channels % 2 == 0,
              "garf config: channels must be positive and even");
        check(pyramid_levels >= 1 && pyramid_levels <= 6,
              "garf config: pyramid_levels must be in [1,6]");
        check(prune_keep > 0 && prune_keep <= 1.0,
              "garf config: prune_keep must be in (0,1]");
    }
};

inline void from_json(const nlohmann::json& j, GarfConfig& c) {
    j.at("voxel_size").get_to(c.voxel_size);
    j.at("stem_channels").get_to(c.stem_channels);
    j.at("channels").get_to(c.channels);
    j.at("pyramid_levels").get_to(c.pyramid_levels);
    j.at("prune_keep").get_to(c.prune_keep);
}

inline void to_json(nlohmann::json& j, const GarfConfig& c) {
    j = {{"voxel_size", c.voxel_size},
         {"stem_channels", c.stem_channels},
         {"channels", c.channels},
         {"pyramid_levels", c.pyramid_levels},
         {"prune_keep", c.prune_keep}};
}

// 2D recovery taps the visual encoder at its last `levels` odd layers
// (1-indexed), in ascending order so earlier layers pair with finer levels.
inline std::vector<int64_t> tap_layers(int64_t encoder_layers, int64_t levels) {
    std::vector<int64_t> odd;
    for (int64_t l = 1; l <= encoder_layers; l += 2) odd.push_back(l);
    check(static_cast<int64_t>(odd.size()) >= levels,
          "garf config: pyramid_levels exceeds the encoder's odd layer count");
    return {odd.end() - levels, odd.end()};
}

}  // namespace tmg::garf

#pragma once

#include <cstdint>

#include "common.hpp"
#include <json.hpp>

namespace tmg::head {

// Decoder / loss hyperparameters. The decoder runs at the fused 3D feature
// width C (garf channels); text memory keeps its own width until the per-block
// key/value projections.
struct HeadConfig {
    int64_t queries = 16;       // K: queries kept by top-k selection
    int64_t layers = 2;         // stacked decoder layers
    int64_t heads = 2;          // attention heads (must divide C)
    int64_t contrast_dim = 16;  // shared dim of the visual/text projections
    double tau_init = 0.07;     // learnable logit temperature, clamped >= 1e-3
    double alpha = 1.0;         // classification term weight
    double beta = 1.0;          // box regression term weight
    double gamma = 1.0;         // centerness term weight
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double center_sigma = 0.5;  // meters; soft center target bandwidth
    bool use_2d = true;         // cross-attend to the recovered 2D tokens

    void validate() const {
        check(queries >= 1, "head config: queries must be >= 1");
        check(layers >= 1, "head config: layers must be >= 1");
        check(heads >= 1, "head config: heads must be >= 1");
        check(contrast_dim >= 1, "head config: contrast_dim must be >= 1");
        check(tau_init > 0, "head config: tau_init must be positive");
        check(alpha >= 0 && beta >= 0 && gamma >= 0,
              "head config: loss weights must be nonnegative");
        check(focal_gamma >= 0, "head config: focal_gamma must be nonnegative");
        check(focal_alpha > 0 && focal_alpha < 1, "head config: focal_alpha must be in (0,1)");
        check(center_sigma > 0, "head config: center_sigma must be positive");
    }
};

inline void from_json(const nlohmann::json& j, HeadConfig& c) {
    j.at("queries").get_to(c.queries);
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("contrast_dim").get_to(c.contrast_dim);
    j.at("tau_init").get_to(c.tau_init);
    j.at("alpha").get_to(c.alpha);
    j.at("beta").get_to(c.beta);
    j.at("gamma").get_to(c.gamma);
    j.at("focal_gamma").get_to(c.focal_gamma);
    j.at("focal_alpha").get_to(c.focal_alpha);
    j.at("center_sigma").get_to(c.center_sigma);
    j.at("use_2d").get_to(c.use_2d);
}

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
    j = {{"queries", c.queries},
         {"layers", c.layers},
         {"heads", c.heads},
         {"contrast_dim", c.contrast_dim},
         {"tau_init", c.tau_init},
         {"alpha", c.alpha},
         {"beta", c.beta},
         {"gamma", c.gamma},
         {"focal_gamma", c.focal_gamma},
         {"focal_alpha", c.focal_alpha},
         {"center_sigma", c.center_sigma},
         {"use_2d", c.use_2d}};
}

}  // namespace tmg::head

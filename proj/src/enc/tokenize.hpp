#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "enc/config.hpp"
#include "geo/camera.hpp"
#include "rng.hpp"
#include "ta/ops.hpp"

namespace tmg::enc {

enum class Modality { image, point, text };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::image: return "image";
        case Modality::point: return "point";
        default: return "text";
    }
}

// One batch of token sequences: tokens [N, L, D]; mask[n*L + l] nonzero marks
// a real token. Padded positions must stay out of attention and pooling.
template <class T>
struct TokenSequence {
    ta::Tensor<T> tokens;
    std::vector<uint8_t> mask;
    Modality kind = Modality::image;

    bool fully_valid() const {
        for (uint8_t m : mask)
            if (!m) return false;
        return true;
    }
};

// Byte-level text vocabulary: ids 0..255 are raw bytes.
constexpr int64_t kBos = 256;
constexpr int64_t kEos = 257;
constexpr int64_t kPad = 258;
constexpr int64_t kVocab = 259;

inline std::vector<int64_t> text_to_ids(const std::string& prompt, int64_t max_len) {
    check(!prompt.empty(), "tokenize_text: empty prompt");
    check(max_len >= 3, "tokenize_text: max_len too small");
    std::vector<int64_t> ids;
    ids.reserve(size_t(max_len));
    ids.push_back(kBos);
    int64_t budget = max_len - 2;  // room for BOS and EOS
    for (int64_t i = 0; i < budget && i < int64_t(prompt.size()); ++i)
        ids.push_back(int64_t(uint8_t(prompt[size_t(i)])));
    ids.push_back(kEos);
    while (int64_t(ids.size()) < max_len) ids.push_back(kPad);
    return ids;
}

inline std::string ids_to_text(const std::vector<int64_t>& ids) {
    std::string s;
    for (int64_t id : ids)
        if (id >= 0 && id < 256) s.push_back(char(uint8_t(id)));
    return s;
}

// Greedy farthest-point sampling: seeded uniform start, then repeatedly the
// point with the largest distance to the selected set; ties -> lowest index.
inline std::vector<int64_t> fps(const std::vector<geo::Vec3>& points, int64_t m, uint64_t seed) {
    int64_t s = int64_t(points.size());
    check(m >= 1 && m <= s, "fps: need 1 <= m <= point count");
    Rng rng(seed);
    std::vector<int64_t> picked;
    picked.reserve(size_t(m));
    picked.push_back(rng.randint(s));
    std::vector<double> best(size_t(s), std::numeric_limits<double>::infinity());
    for (int64_t step = 1; step < m; ++step) {
        const geo::Vec3& last = points[size_t(picked.back())];
        int64_t arg = -1;
        double far = -1.0;
        for (int64_t i = 0; i < s; ++i) {
            geo::Vec3 d = points[size_t(i)] - last;
            best[size_t(i)] = std::min(best[size_t(i)], geo::dot(d, d));
            if (best[size_t(i)] > far) {
                far = best[size_t(i)];
                arg = i;
            }
        }
        picked.push_back(arg);
    }
    return picked;
}

// Indices of the k nearest points to each center (the center itself counts);
// ties broken by lower point index via stable ordering on (distance, index).
inline std::vector<std::vector<int64_t>> knn_groups(const std::vector<geo::Vec3>& points,
                                                    const std::vector<int64_t>& centers, int64_t k) {
    check(k >= 1 && k <= int64_t(points.size()), "knn: need 1 <= k <= point count");
    std::vector<std::vector<int64_t>> groups(centers.size());
    std::vector<std::pair<double, int64_t>> order(points.size());
    for (size_t c = 0; c < centers.size(); ++c) {
        const geo::Vec3& ctr = points[size_t(centers[c])];
        for (size_t i = 0; i < points.size(); ++i) {
            geo::Vec3 d = points[i] - ctr;
            order[i] = {geo::dot(d, d), int64_t(i)};
        }
        std::partial_sort(order.begin(), order.begin() + k, order.end());
        groups[c].resize(size_t(k));
        for (int64_t i = 0; i < k; ++i) groups[c][size_t(i)] = order[size_t(i)].second;
    }
    return groups;
}

// Grouped, center-normalized neighborhood features: [M, K, C] with the first
// three channels (p - center) and, when configured, the neighbor color.
template <class T>
ta::Tensor<T> group_features(const geo::PointCloud& pc, const std::vector<int64_t>& centers,
                             const std::vector<std::vector<int64_t>>& groups, int64_t channels) {
    int64_t m = int64_t(centers.size());
    int64_t k = int64_t(groups.at(0).size());
    check(channels == 3 || channels == 6, "group_features: channels must be 3 or 6");
    check(channels == 3 || !pc.colors.empty(), "group_features: config expects colors but cloud has none");
    std::vector<T> data(size_t(m * k * channels));
    for (int64_t g = 0; g < m; ++g) {
        const geo::Vec3& ctr = pc.positions[size_t(centers[size_t(g)])];
        for (int64_t j = 0; j < k; ++j) {
            int64_t idx = groups[size_t(g)][size_t(j)];
            geo::Vec3 rel = pc.positions[size_t(idx)] - ctr;
            T* dst = &data[size_t((g * k + j) * channels)];
            for (int c = 0; c < 3; ++c) dst[c] = T(rel[size_t(c)]);
            if (channels == 6)
                for (int c = 0; c < 3; ++c) dst[3 + c] = T(pc.colors[size_t(idx)][size_t(c)]);
        }
    }
    return ta::Tensor<T>::from_data({m, k, channels}, std::move(data));
}

}  // namespace tmg::enc

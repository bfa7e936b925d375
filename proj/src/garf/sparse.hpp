#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "geo/camera.hpp"
#include "ta/ops.hpp"
#include "ta/param_store.hpp"

namespace tmg::garf {

using Coord = std::array<int32_t, 3>;

// Occupied voxels only: one coordinate row per feature row, coordinates
// lexicographically sorted and unique. `stride` counts base voxels per edge,
// so the world-space cell size is stride * voxel_size.
template <class T>
struct SparseTensor3D {
    std::vector<Coord> coords;
    ta::Tensor<T> feats;  // [N, C]
    double voxel_size = 0;
    int64_t stride = 1;

    int64_t size() const { return static_cast<int64_t>(coords.size()); }

    geo::Vec3 world_center(int64_t i) const {
        double s = voxel_size * static_cast<double>(stride);
        const Coord& c = coords[static_cast<size_t>(i)];
        return geo::Vec3{(c[0] + 0.5) * s, (c[1] + 0.5) * s, (c[2] + 0.5) * s};
    }

    void check_valid() const {
        check(feats.dim() == 2 && feats.extent(0) == size(), "sparse tensor: row mismatch");
        for (size_t i = 1; i < coords.size(); ++i)
            check(coords[i - 1] < coords[i], "sparse tensor: coords not sorted unique");
    }
};

inline int32_t floordiv2(int32_t v) { return v >= 0 ? v / 2 : (v - 1) / 2; }

inline std::map<Coord, int64_t> coord_index(const std::vector<Coord>& coords) {
    std::map<Coord, int64_t> m;
    for (size_t i = 0; i < coords.size(); ++i) m[coords[i]] = static_cast<int64_t>(i);
    return m;
}

// Floor-quantize points onto the voxel grid; duplicate hits mean-pool their
// raw features (world position, then color — zeros when the cloud has none).
template <class T>
SparseTensor3D<T> voxelize(const geo::PointCloud& pc, double voxel_size) {
    check(voxel_size > 0, "voxelize: voxel size must be positive");
    check(!pc.positions.empty(), "voxelize: empty point cloud");
    check(pc.colors.empty() || pc.colors.size() == pc.positions.size(),
          "voxelize: color/position count mismatch");
    std::map<Coord, std::pair<std::array<double, 6>, int64_t>> cells;
    for (size_t i = 0; i < pc.positions.size(); ++i) {
        const geo::Vec3& p = pc.positions[i];
        Coord c;
        for (int a = 0; a < 3; ++a) {
            double q = std::floor(p[static_cast<size_t>(a)] / voxel_size);
            check(std::abs(q) < 1e9, "voxelize: coordinate out of range");
            c[static_cast<size_t>(a)] = static_cast<int32_t>(q);
        }
        auto& [acc, n] = cells[c];
        for (int a = 0; a < 3; ++a) acc[static_cast<size_t>(a)] += p[static_cast<size_t>(a)];
        if (!pc.colors.empty())
            for (int a = 0; a < 3; ++a) acc[static_cast<size_t>(a + 3)] += pc.colors[i][static_cast<size_t>(a)];
        ++n;
    }
    SparseTensor3D<T> out;
    out.voxel_size = voxel_size;
    out.stride = 1;
    std::vector<T> feats;
    feats.reserve(cells.size() * 6);
    for (const auto& [c, cell] : cells) {
        out.coords.push_back(c);
        for (int a = 0; a < 6; ++a)
            feats.push_back(static_cast<T>(cell.first[static_cast<size_t>(a)] /
                                           static_cast<double>(cell.second)));
    }
    out.feats = ta::Tensor<T>::from_data({out.size(), 6}, std::move(feats));
    return out;
}

// 3x3x3 sparse convolution. stride 1 keeps the input's coordinate set
// (submanifold); stride 2 emits the unique floor(c/2) set, each output voxel
// gathering inputs at 2*o + k. Offsets enumerate kx outer, ky, kz inner over
// {-1,0,1}, and the weight's rows follow that order: row = offset*Cin + cin.
template <class T>
SparseTensor3D<T> sparse_conv3(const SparseTensor3D<T>& in, const ta::Tensor<T>& w,
                               const ta::Tensor<T>& b, int64_t stride) {
    check(stride == 1 || stride == 2, "sparse conv: stride must be 1 or 2");
    int64_t cin = in.feats.extent(1);
    check(w.dim() == 2 && w.extent(0) == 27 * cin, "sparse conv: weight rows != 27*Cin");
    SparseTensor3D<T> out;
    out.voxel_size = in.voxel_size;
    out.stride = in.stride * stride;
    if (stride == 1) {
        out.coords = in.coords;
    } else {
        std::map<Coord, int64_t> seen;
        for (const Coord& c : in.coords)
            seen.emplace(Coord{floordiv2(c[0]), floordiv2(c[1]), floordiv2(c[2])}, 0);
        for (const auto& [c, unused] : seen) out.coords.push_back(c);
    }
    auto idx_of = coord_index(in.coords);
    int64_t n = out.size();
    std::vector<ta::Tensor<T>> cols;
    cols.reserve(27);
    for (int32_t kx = -1; kx <= 1; ++kx)
        for (int32_t ky = -1; ky <= 1; ++ky)
            for (int32_t kz = -1; kz <= 1; ++kz) {
                std::vector<int64_t> idx(static_cast<size_t>(n), -1);
                std::vector<T> wt(static_cast<size_t>(n), T(1));
                for (int64_t i = 0; i < n; ++i) {
                    const Coord& o = out.coords[static_cast<size_t>(i)];
                    int32_t s = static_cast<int32_t>(stride);
                    Coord u{o[0] * s + kx, o[1] * s + ky, o[2] * s + kz};
                    auto it = idx_of.find(u);
                    if (it != idx_of.end()) idx[static_cast<size_t>(i)] = it->second;
                }
                cols.push_back(ta::weighted_gather(in.feats, std::move(idx), std::move(wt), 1));
            }
    out.feats = ta::linear(ta::concat(cols, 1), w, b);
    return out;
}

}  // namespace tmg::garf

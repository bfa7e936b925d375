#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rng.hpp"
#include "ta/param_store.hpp"
#include "ta/tensor.hpp"

namespace tmg::ta {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;

  std::string str() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "max rel err %.3e at %s[%lld] over %lld coordinates",
                  max_rel_err, worst_param.c_str(), static_cast<long long>(worst_index),
                  static_cast<long long>(coords_checked));
    return buf;
  }
};

// Central-difference check of d(forward)/d(param) against the recorded
// backward pass, per trainable parameter in `store`. `forward` must rebuild
// the computation from the store's current values on every call and be free
// of side effects. With max_coords_per_param >= 0, coordinates are sampled
// (seeded) instead of sweeping every entry.
inline GradCheckReport grad_check(ParamStore<double>& store,
                                  const std::function<Tensor<double>()>& forward,
                                  double h = 1e-5, int64_t max_coords_per_param = -1,
                                  uint64_t seed = 42) {
  // analytic pass
  std::map<std::string, std::vector<double>> analytic;
  {
    Graph<double> g;
    auto loss = forward();
    check(loss.numel() == 1, "grad check: forward must return a scalar");
    check(std::isfinite(loss.item()), "grad check: non-finite loss");
    g.backward(loss);
    for (auto& [name, t] : store.params()) {
      if (store.is_frozen(name)) continue;
      if (t.has_grad())
        analytic[name] = std::vector<double>(t.grad().begin(), t.grad().end());
      else
        analytic[name] = std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
    }
  }

  GradCheckReport rep;
  Rng rng(seed);
  for (auto& [name, grad] : analytic) {
    auto& t = store.get(name);
    auto vals = t.raw_data();
    int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param >= 0 && n > max_coords_per_param) {
      // sample distinct coordinates
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < max_coords_per_param; ++i) {
        int64_t j = i + static_cast<int64_t>(rng.randint(static_cast<uint64_t>(n - i)));
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
        coords.push_back(all[static_cast<size_t>(i)]);
      }
    } else {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    }
    for (int64_t c : coords) {
      double orig = vals[static_cast<size_t>(c)];
      vals[static_cast<size_t>(c)] = orig + h;
      double fp = forward().item();
      vals[static_cast<size_t>(c)] = orig - h;
      double fm = forward().item();
      vals[static_cast<size_t>(c)] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = grad[static_cast<size_t>(c)];
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_index = c;
      }
    }
  }
  return rep;
}

}  // namespace tmg::ta

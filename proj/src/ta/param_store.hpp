#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ta/tensor.hpp"

namespace tmg::ta {

// Named parameters with a frozen partition, plus non-learned buffers
// (normalisation running statistics). Buffers are saved in checkpoints but
// are invisible to the optimizer and excluded from parameter counts.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t, bool frozen) {
    check(!params_.count(name) && !buffers_.count(name),
          "param store: duplicate name '" + name + "'");
    t.set_requires_grad(!frozen);
    frozen_[name] = frozen;
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor<T>& add_buffer(const std::string& name, Tensor<T> t) {
    check(!params_.count(name) && !buffers_.count(name),
          "param store: duplicate name '" + name + "'");
    t.set_requires_grad(false);
    return buffers_.emplace(name, std::move(t)).first->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    check(it != params_.end(), "param store: unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    check(it != params_.end(), "param store: unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    check(it != buffers_.end(), "param store: unknown buffer '" + name + "'");
    return it->second;
  }

  bool is_frozen(const std::string& name) const {
    auto it = frozen_.find(name);
    check(it != frozen_.end(), "param store: unknown parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
  std::map<std::string, Tensor<T>>& buffers_mut() { return buffers_; }

  // allocate a zero gradient if no backward pass touched this parameter
  // (e.g. a trainable branch that a given task never exercises)
  void ensure_zero_grad(const std::string& name) {
    auto& t = get(name);
    auto& n = *t.node();
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  }

  int64_t total_count() const {
    int64_t c = 0;
    for (auto& [k, v] : params_) c += v.numel();
    return c;
  }
  int64_t trainable_count() const {
    int64_t c = 0;
    for (auto& [k, v] : params_)
      if (!frozen_.at(k)) c += v.numel();
    return c;
  }
  int64_t frozen_count() const { return total_count() - trainable_count(); }
  double trainable_fraction() const {
    int64_t t = total_count();
    return t == 0 ? 0.0 : static_cast<double>(trainable_count()) / static_cast<double>(t);
  }

  // hash of the frozen-partition bytes in name order; detects any drift
  uint64_t frozen_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t len) {
      auto* b = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < len; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (auto& [k, v] : params_) {
      if (!frozen_.at(k)) continue;
      mix(k.data(), k.size());
      mix(v.data().data(), v.data().size() * sizeof(T));
    }
    return h;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, bool> frozen_;
  std::map<std::string, Tensor<T>> buffers_;
};

// Decoupled-weight-decay Adam with bias correction. Frozen parameters are
// never read or written; a trainable parameter without a gradient is an
// error (callers pass explicit zeros for branches a task does not train).
template <class T>
class AdamW {
 public:
  explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 double weight_decay = 1e-5)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamStore<T>& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, tensor] : store.params()) {
      if (store.is_frozen(name)) continue;
      auto& node = *tensor.node();
      check(!node.grad.empty(),
            "optimizer: missing gradient for trainable parameter '" + name + "'");
      check(node.grad.size() == node.value.size(),
            "optimizer: gradient size mismatch for '" + name + "'");
      auto& slot = state_[name];
      if (slot.m.empty()) {
        slot.m.assign(node.value.size(), T(0));
        slot.v.assign(node.value.size(), T(0));
      }
      T* p = node.value.data();
      const T* g = node.grad.data();
      T* m = slot.m.data();
      T* v = slot.v.data();
      int64_t n = static_cast<int64_t>(node.value.size());
      T decay = static_cast<T>(1.0 - lr_ * wd_);
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i) {
        p[i] *= decay;
        m[i] = static_cast<T>(b1_) * m[i] + static_cast<T>(1.0 - b1_) * g[i];
        v[i] = static_cast<T>(b2_) * v[i] + static_cast<T>(1.0 - b2_) * g[i] * g[i];
        double mhat = static_cast<double>(m[i]) / bc1;
        double vhat = static_cast<double>(v[i]) / bc2;
        p[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  int64_t steps() const { return t_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  std::map<std::string, Slot> state_;
  int64_t t_ = 0;
  double lr_, b1_, b2_, eps_, wd_;
};

// ---------------------------------------------------------------------------
// checkpoint file: text manifest with key=value fields per entry, then a
// float32 little-endian payload introduced by a literal "DATA" line.

namespace detail {

inline std::string shape_field(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string r;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += 'x';
    r += std::to_string(s[i]);
  }
  return r;
}

inline Shape parse_shape_field(const std::string& f) {
  if (f == "scalar") return {};
  Shape s;
  std::stringstream ss(f);
  std::string tok;
  while (std::getline(ss, tok, 'x')) s.push_back(std::stoll(tok));
  return s;
}

inline std::map<std::string, std::string> parse_kv_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    auto eq = tok.find('=');
    check(eq != std::string::npos, "checkpoint: malformed manifest token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  std::ostringstream manifest;
  std::vector<float> payload;
  auto emit = [&](const std::string& name, const Tensor<T>& t, bool frozen, const char* kind) {
    manifest << "name=" << name << " kind=" << kind << " frozen=" << (frozen ? 1 : 0)
             << " shape=" << detail::shape_field(t.shape()) << " offset=" << payload.size()
             << "\n";
    for (T v : t.data()) payload.push_back(static_cast<float>(v));
  };
  for (auto& [name, t] : store.params()) emit(name, t, store.is_frozen(name), "param");
  for (auto& [name, t] : store.buffers()) emit(name, t, false, "buffer");

  std::ofstream f(path, std::ios::binary);
  check(f.good(), "checkpoint: cannot open '" + path + "' for writing");
  f << "tmg-checkpoint v1\n";
  f << "entries=" << (store.params().size() + store.buffers().size()) << "\n";
  f << "floats=" << payload.size() << "\n";
  f << manifest.str();
  f << "DATA\n";
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  check(f.good(), "checkpoint: write to '" + path + "' failed");
}

template <class T>
void load_checkpoint(ParamStore<T>& store, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint reader assumes a little-endian host");
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "checkpoint: cannot open '" + path + "'");
  std::string line;
  check(std::getline(f, line) && line == "tmg-checkpoint v1",
        "checkpoint: bad magic in '" + path + "'");
  check(std::getline(f, line) && line.rfind("entries=", 0) == 0, "checkpoint: missing entry count");
  size_t entries = std::stoull(line.substr(8));
  check(std::getline(f, line) && line.rfind("floats=", 0) == 0, "checkpoint: missing float count");
  size_t total_floats = std::stoull(line.substr(7));

  struct Entry {
    std::string name, kind;
    bool frozen;
    Shape shape;
    size_t offset;
  };
  std::vector<Entry> list;
  for (size_t i = 0; i < entries; ++i) {
    check(static_cast<bool>(std::getline(f, line)), "checkpoint: truncated manifest");
    auto kv = detail::parse_kv_line(line);
    for (const char* key : {"name", "kind", "frozen", "shape", "offset"})
      check(kv.count(key), std::string("checkpoint: manifest entry missing '") + key + "'");
    list.push_back({kv["name"], kv["kind"], kv["frozen"] == "1",
                    detail::parse_shape_field(kv["shape"]), std::stoull(kv["offset"])});
  }
  check(std::getline(f, line) && line == "DATA", "checkpoint: missing DATA separator");

  std::vector<float> payload(total_floats);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(total_floats * sizeof(float)));
  check(static_cast<size_t>(f.gcount()) == total_floats * sizeof(float),
        "checkpoint: payload shorter than declared");
  check(f.peek() == std::ifstream::traits_type::eof(),
        "checkpoint: trailing bytes after declared payload");

  check(entries == store.params().size() + store.buffers().size(),
        "checkpoint: entry count " + std::to_string(entries) + " does not match model (" +
            std::to_string(store.params().size() + store.buffers().size()) + ")");
  size_t accounted = 0;
  for (auto& e : list) {
    Tensor<T>* dst = nullptr;
    if (e.kind == "param") {
      check(store.has(e.name), "checkpoint: unknown parameter '" + e.name + "'");
      check(store.is_frozen(e.name) == e.frozen,
            "checkpoint: frozen flag mismatch for '" + e.name + "'");
      dst = &store.get(e.name);
    } else if (e.kind == "buffer") {
      dst = &store.buffer(e.name);
    } else {
      fail("checkpoint: unknown entry kind '" + e.kind + "'");
    }
    check(dst->shape() == e.shape, "checkpoint: shape mismatch for '" + e.name + "': file has " +
                                       shape_str(e.shape) + ", model has " +
                                       shape_str(dst->shape()));
    size_t n = static_cast<size_t>(dst->numel());
    check(e.offset + n <= total_floats, "checkpoint: entry '" + e.name + "' overruns payload");
    auto span = dst->raw_data();
    for (size_t i = 0; i < n; ++i) span[i] = static_cast<T>(payload[e.offset + i]);
    accounted += n;
  }
  check(accounted == total_floats, "checkpoint: payload length does not match manifest entries");
}

}  // namespace tmg::ta

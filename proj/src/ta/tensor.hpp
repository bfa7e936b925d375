#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace tmg::ta {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass allocates it
  bool requires_grad = false;
};

template <class T>
class Graph;

// Dense row-major tensor. Copies are shallow (shared storage); values are
// only mutated through ops or, for leaf parameters, through raw_data().
template <class T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node<T>>()) {}
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    // zero extents are legal (an empty set of rows); negatives never are
    for (int64_t e : shape)
      check(e >= 0, "tensor: extents must be nonnegative, got shape " + shape_str(shape));
    check(static_cast<int64_t>(data.size()) == numel_of(shape),
          "tensor: data length " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel_of(shape)), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel_of(shape)));
    for (auto& v : d) v = static_cast<T>(rng.normal(0.0, stddev));
    return from_data(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel_of(shape)));
    for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  int64_t dim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t extent(int64_t i) const {
    if (i < 0) i += dim();
    return node_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return numel_of(node_->shape); }

  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }
  // Direct mutation; valid for leaves outside any recorded forward.
  std::span<T> raw_data() { return {node_->value.data(), node_->value.size()}; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const {
    check(has_grad(), "tensor: grad not allocated (no backward pass touched this tensor)");
    return {node_->grad.data(), node_->grad.size()};
  }

  T item() const {
    check(numel() == 1, "tensor: item() on non-scalar shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    check(static_cast<int64_t>(idx.size()) == dim(), "tensor: at() rank mismatch");
    int64_t flat = 0;
    int64_t i = 0;
    for (auto v : idx) {
      flat = flat * node_->shape[static_cast<size_t>(i)] + v;
      ++i;
    }
    return node_->value[static_cast<size_t>(flat)];
  }

  // Value copy detached from any graph.
  Tensor detached() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Recorded forward tape. Construction installs the graph as the active one
// for this thread; destruction restores the previous. Records are appended
// in execution order, which is a topological order of the op DAG, and the
// backward pass walks them strictly in reverse.
template <class T>
class Graph {
 public:
  Graph() : prev_(current_) { current_ = this; }
  ~Graph() { current_ = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return current_; }

  void record(std::shared_ptr<Node<T>> out, std::vector<std::shared_ptr<Node<T>>> inputs,
              std::function<void()> backward) {
    records_.push_back({std::move(out), std::move(inputs), std::move(backward)});
  }

  size_t num_records() const { return records_.size(); }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

  void backward(const Tensor<T>& loss) {
    check(!consumed_, "graph: backward called twice without a new forward");
    consumed_ = true;
    check(loss.numel() == 1,
          "graph: backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    check(loss.requires_grad(), "graph: loss does not require grad");
    for (T v : loss.data()) check(std::isfinite(static_cast<double>(v)), "graph: non-finite loss");

    // Grads are zeroed per backward; there is no cross-step accumulation.
    std::unordered_set<Node<T>*> seen;
    auto prep = [&seen](const std::shared_ptr<Node<T>>& n) {
      if (!n->requires_grad) return;
      if (seen.insert(n.get()).second) n->grad.assign(n->value.size(), T(0));
    };
    for (auto& r : records_) {
      prep(r.out);
      for (auto& i : r.inputs) prep(i);
    }
    prep(loss.node());
    loss.node()->grad.assign(1, T(1));

    // Backward closures run raw kernels; suspend recording while they run.
    Graph* saved = current_;
    current_ = nullptr;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->bw();
    current_ = saved;
  }

 private:
  struct Record {
    std::shared_ptr<Node<T>> out;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void()> bw;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
  Graph* prev_;
  static thread_local Graph* current_;
};

template <class T>
thread_local Graph<T>* Graph<T>::current_ = nullptr;

template <class T>
inline bool track_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (Graph<T>::current() == nullptr) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace tmg::ta

#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "equitab/errors.hpp"

namespace equitab {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

template <class S>
class Tape;

// Dense row-major tensor over float or double. Copies are shallow (storage
// is shared); ops never mutate their inputs, and only optimizer code mutates
// leaf parameters, between tapes. A rank-0 tensor is a scalar.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t = uninit(std::move(shape));
    std::memset(t.data(), 0, static_cast<std::size_t>(t.size_) * sizeof(S));
    return t;
  }

  // Uninitialized storage; callers must overwrite every element. Buffers are
  // 64-byte aligned so vectorized reduction order depends only on shape,
  // never on where the allocator placed the block.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.size_ = shape_numel(shape);
    t.shape_ = std::move(shape);
    const std::size_t bytes =
        ((static_cast<std::size_t>(t.size_) * sizeof(S) + 63) / 64 + 1) * 64;
    void* p = std::aligned_alloc(64, bytes);
    if (!p) throw std::bad_alloc();
    t.data_ = std::shared_ptr<S[]>(static_cast<S*>(p),
                                   [](S* q) { std::free(q); });
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = uninit(std::move(shape));
    for (Index i = 0; i < t.size_; ++i) t.data_[static_cast<std::size_t>(i)] = value;
    return t;
  }

  static Tensor scalar(S value) { return full({}, value); }

  static Tensor from(Shape shape, const std::vector<S>& values) {
    if (shape_numel(shape) != static_cast<Index>(values.size()))
      throw ShapeError("tensor data size " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t = uninit(std::move(shape));
    std::memcpy(t.data(), values.data(), values.size() * sizeof(S));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_ ? size_ : 0; }
  Index extent(Index axis) const { return shape_[static_cast<std::size_t>(axis)]; }

  S* data() { return data_.get(); }
  const S* data() const { return data_.get(); }

  S& at(Index flat) { return data_[static_cast<std::size_t>(flat)]; }
  S at(Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

  // Row-major indexing helpers, unchecked.
  S& operator()(Index i) { return at(i); }
  S operator()(Index i) const { return at(i); }
  S& operator()(Index i, Index j) { return at(i * shape_[1] + j); }
  S operator()(Index i, Index j) const { return at(i * shape_[1] + j); }
  S& operator()(Index i, Index j, Index k) {
    return at((i * shape_[1] + j) * shape_[2] + k);
  }
  S operator()(Index i, Index j, Index k) const {
    return at((i * shape_[1] + j) * shape_[2] + k);
  }
  S& operator()(Index i, Index j, Index k, Index l) {
    return at(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l);
  }
  S operator()(Index i, Index j, Index k, Index l) const {
    return at(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l);
  }

  // Deep copy; drops any tape association.
  Tensor clone() const {
    if (!data_) return Tensor();
    Tensor t = uninit(shape_);
    std::memcpy(t.data_.get(), data_.get(),
                static_cast<std::size_t>(size_) * sizeof(S));
    return t;
  }

  // Shares storage; drops any tape association.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.size_ = size_;
    t.data_ = data_;
    return t;
  }

  // Shares storage under a new shape; the caller guarantees the element
  // count matches. Drops any tape association.
  Tensor reshaped(Shape shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = size_;
    t.data_ = data_;
    return t;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out = Tensor<T>::uninit(shape_);
    for (Index i = 0; i < size_; ++i)
      out.at(i) = static_cast<T>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  // Number of owners of the underlying buffer (shallow copies included).
  long buffer_refs() const { return data_.use_count(); }

  bool on_tape() const { return node_ >= 0; }
  int node() const { return node_; }
  const std::shared_ptr<Tape<S>>& tape() const { return tape_; }
  bool requires_grad() const { return requires_grad_; }

  void attach(std::shared_ptr<Tape<S>> tape, int node) {
    tape_ = std::move(tape);
    node_ = node;
    requires_grad_ = true;
  }

 private:
  Shape shape_;
  Index size_ = 0;
  std::shared_ptr<S[]> data_;
  std::shared_ptr<Tape<S>> tape_;
  int node_ = -1;
  bool requires_grad_ = false;
};

// Reverse-mode tape. Recording order is a topological order by construction
// (an op can only consume tensors that already exist), so the backward pass
// walks node ids from the loss downward and visits each reachable node
// exactly once. Gradient accumulation happens in recording order of the
// consumers, which is fixed, so backward is deterministic.
//
// A tape and the tensors recorded on it belong to a single worker; separate
// workers must use separate tapes.
template <class S>
class Tape : public std::enable_shared_from_this<Tape<S>> {
 public:
  using Pull = std::function<void(Tape&, const Tensor<S>&)>;

  static std::shared_ptr<Tape> create() { return std::make_shared<Tape>(); }

  // Registers a leaf whose gradient will be available after backward().
  void watch(Tensor<S>& t) {
    if (!t.defined()) throw ConfigError("cannot watch an undefined tensor");
    if (t.tape().get() == this && t.on_tape()) return;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.shape(), {}, nullptr});
    t.attach(this->shared_from_this(), id);
  }

  int emit(Shape shape, std::vector<int> parents, Pull pull) {
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(shape), std::move(parents), std::move(pull)});
    return id;
  }

  std::size_t size() const { return nodes_.size(); }

  // Runs reverse accumulation from a scalar loss recorded on this tape.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw RankError("backward expects a scalar loss, got shape " +
                      shape_str(loss.shape()));
    if (loss.tape().get() != this || !loss.on_tape())
      throw ConfigError("backward: loss is not recorded on this tape");
    grads_.assign(nodes_.size(), Tensor<S>());
    grads_[static_cast<std::size_t>(loss.node())] =
        Tensor<S>::full(loss.shape(), S(1));
    for (int id = loss.node(); id >= 0; --id) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      const Tensor<S>& g = grads_[static_cast<std::size_t>(id)];
      if (g.defined() && n.pull) n.pull(*this, g);
    }
  }

  // Adds `g` into the node's gradient slot. A uniquely-owned buffer is
  // adopted without copying; shared buffers are cloned so later additions
  // cannot corrupt aliased gradients.
  void accumulate(int node, Tensor<S> g) {
    Tensor<S>& slot = grads_[static_cast<std::size_t>(node)];
    if (!slot.defined()) {
      slot = (g.buffer_refs() == 1) ? g.detached() : g.clone();
      return;
    }
    S* dst = slot.data();
    const S* src = g.data();
    const Index n = slot.numel();
    for (Index i = 0; i < n; ++i) dst[i] += src[i];
  }

  // Gradient of a watched (or recorded) tensor; empty if none was produced.
  Tensor<S> grad(const Tensor<S>& t) const {
    if (t.tape().get() != this || !t.on_tape() || !t.requires_grad())
      return Tensor<S>();
    if (static_cast<std::size_t>(t.node()) >= grads_.size()) return Tensor<S>();
    return grads_[static_cast<std::size_t>(t.node())];
  }

  // Frees recorded closures and gradients; watched tensors keep stale
  // handles and must be re-watched on a fresh tape.
  void clear() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    Pull pull;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace equitab

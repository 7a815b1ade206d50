#ifndef CDSNAS_TENSOR_HPP_
#define CDSNAS_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdsnas/common.hpp"
#include "cdsnas/rng.hpp"

namespace cdsnas {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> v;
  bool requires_grad = false;
  // Lazy linkage to the tape that last saw this tensor. Tape ids are never
  // reused, so a stale id simply fails to match.
  std::uint64_t tape_id = 0;
  int node = -1;
};

inline std::uint64_t next_tape_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

// Dense n-dimensional array. Element type is a run-wide choice: double for
// the gradient-check suites, float for training runs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) {
    validate(shape);
    impl_ = std::make_shared<detail::TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->v.assign(static_cast<std::size_t>(cdsnas::numel(impl_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<T> values) {
    validate(shape);
    if (static_cast<std::int64_t>(values.size()) != cdsnas::numel(shape))
      fail_shape("tensor: ", values.size(), " values for shape ", shape_str(shape));
    impl_ = std::make_shared<detail::TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->v = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor({1}, std::vector<T>{value}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (T& x : t.data()) x = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->v.size()); }

  // Lvalue-only: the buffer lives inside the (shared) impl, so handing out a
  // reference from a temporary would dangle.
  std::vector<T>& data() & { return impl_->v; }
  const std::vector<T>& data() const& { return impl_->v; }
  std::vector<T>&& data() && = delete;
  const std::vector<T>&& data() const&& = delete;

  T item() const {
    if (numel() != 1) fail_shape("item: tensor of shape ", shape_str(shape()), " is not scalar");
    return impl_->v[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  // Deep copy of the values; no tape linkage, no grad flag.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->v = impl_->v;
    return t;
  }

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) fail_shape("tensor: rank-0 shapes are not supported");
    for (std::int64_t d : shape)
      if (d < 1) fail_shape("tensor: shape ", shape_str(shape), " has a dimension < 1");
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
  friend class Tape<T>;
};

template <typename T>
using GradMap = std::unordered_map<int, Tensor<T>>;

// Records ops in execution order; backward() replays them in reverse. One
// tape belongs to one thread of execution; independent runs get independent
// tapes.
template <typename T>
class Tape {
 public:
  // Backward rule: reads the output gradient, accumulates into the input
  // gradient buffers (null for untracked inputs).
  using BackwardFn =
      std::function<void(const std::vector<T>& gout, const std::vector<std::vector<T>*>& gin)>;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // RAII activation on the current thread. Scopes nest.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_ref()) { active_ref() = &t; }
    ~Scope() { active_ref() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_ref(); }

  // Registers a leaf. Leaves are the entries of the gradient map.
  int watch(const Tensor<T>& t) {
    auto* impl = t.impl_.get();
    if (impl == nullptr) fail_shape("tape: cannot watch an undefined tensor");
    if (impl->tape_id == id_) return impl->node;
    impl->tape_id = id_;
    impl->node = add_node(impl->shape, /*leaf=*/true);
    return impl->node;
  }

  int id_of(const Tensor<T>& t) const {
    auto* impl = t.impl_.get();
    return (impl && impl->tape_id == id_) ? impl->node : -1;
  }

  // Returns the node id to use as an op input: an existing node, a freshly
  // watched leaf if the tensor asks for gradients, or -1 (plain constant).
  int track(const Tensor<T>& t) {
    int id = id_of(t);
    if (id >= 0) return id;
    if (t.requires_grad()) return watch(t);
    return -1;
  }

  // Attaches an op result to the tape.
  int add_result(Tensor<T>& out) {
    auto* impl = out.impl_.get();
    impl->tape_id = id_;
    impl->node = add_node(impl->shape, /*leaf=*/false);
    return impl->node;
  }

  void record(std::vector<int> inputs, int output, BackwardFn fn) {
    ops_.push_back(OpRec{std::move(inputs), output, std::move(fn)});
  }

  std::size_t num_ops() const { return ops_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Returns a gradient for every watched
  // leaf (zeros when the loss does not depend on it).
  GradMap<T> backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      fail_shape("backward: loss must be a scalar tensor");
    int loss_id = id_of(loss);
    if (loss_id < 0) fail_shape("backward: loss was not produced on this tape");

    grads_.assign(nodes_.size(), {});
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      grads_[i].assign(static_cast<std::size_t>(cdsnas::numel(nodes_[i].shape)), T(0));
    grads_[static_cast<std::size_t>(loss_id)][0] = T(1);

    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      std::vector<std::vector<T>*> gin(it->inputs.size(), nullptr);
      for (std::size_t i = 0; i < it->inputs.size(); ++i)
        if (it->inputs[i] >= 0) gin[i] = &grads_[static_cast<std::size_t>(it->inputs[i])];
      it->backward(grads_[static_cast<std::size_t>(it->output)], gin);
    }

    GradMap<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].leaf) continue;
      out.emplace(static_cast<int>(i), Tensor<T>(nodes_[i].shape, std::move(grads_[i])));
    }
    grads_.clear();
    return out;
  }

  // Gradient lookup for a leaf; zeros if the tensor never touched this tape.
  Tensor<T> grad_or_zero(const GradMap<T>& grads, const Tensor<T>& leaf) const {
    int id = id_of(leaf);
    if (id >= 0) {
      auto it = grads.find(id);
      if (it != grads.end()) return it->second;
    }
    return Tensor<T>(leaf.shape());
  }

 private:
  struct NodeInfo {
    Shape shape;
    bool leaf;
  };
  struct OpRec {
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  static Tape*& active_ref() {
    thread_local Tape* active = nullptr;
    return active;
  }

  int add_node(const Shape& shape, bool leaf) {
    nodes_.push_back(NodeInfo{shape, leaf});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::uint64_t id_;
  std::vector<NodeInfo> nodes_;
  std::vector<OpRec> ops_;
  std::vector<std::vector<T>> grads_;
};

namespace detail {

// Shared recording path for all ops: records iff a tape is active and at
// least one input is tracked on it.
template <typename T>
void maybe_record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                  typename Tape<T>::BackwardFn fn) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  bool any = false;
  for (const Tensor<T>* t : inputs) {
    int id = tape->track(*t);
    ids.push_back(id);
    any = any || id >= 0;
  }
  if (!any) return;
  int out_id = tape->add_result(out);
  tape->record(std::move(ids), out_id, std::move(fn));
}

}  // namespace detail

// Numerically equal copy that participates in no gradient path.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone();
}

}  // namespace cdsnas

#endif  // CDSNAS_TENSOR_HPP_

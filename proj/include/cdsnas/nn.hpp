#ifndef CDSNAS_NN_HPP_
#define CDSNAS_NN_HPP_

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cdsnas/ops.hpp"
#include "cdsnas/rng.hpp"
#include "cdsnas/tensor.hpp"

namespace cdsnas {

// Visits (name, tensor, is_param): parameters are trainable, buffers (BN
// running stats) are not but still belong in checkpoints.
template <typename T>
using StateVisitor = std::function<void(const std::string&, Tensor<T>&, bool)>;

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual void visit_state(const std::string& prefix, const StateVisitor<T>& visit) = 0;
  virtual void set_training(bool) {}

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    visit_state("", [&](const std::string&, Tensor<T>& t, bool is_param) {
      if (is_param) out.push_back(&t);
    });
    return out;
  }

  std::int64_t num_params() {
    std::int64_t n = 0;
    for (Tensor<T>* p : parameters()) n += p->numel();
    return n;
  }
};

// Fan-in-scaled normal init for conv and linear weights.
template <typename T>
Tensor<T> init_weight(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> w = Tensor<T>::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
  w.set_requires_grad(true);
  return w;
}

template <typename T>
class Conv1x1 : public Module<T> {
 public:
  Conv1x1(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
      : w_(init_weight<T>({out_ch, in_ch}, in_ch, rng)) {}

  Tensor<T> forward(const Tensor<T>& x) override { return conv1x1(x, w_); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    visit(prefix + "w", w_, true);
  }

 private:
  Tensor<T> w_;
};

template <typename T>
class DwConv3x3 : public Module<T> {
 public:
  DwConv3x3(std::int64_t channels, Rng& rng) : w_(init_weight<T>({channels, 3, 3}, 9, rng)) {}

  Tensor<T> forward(const Tensor<T>& x) override { return dwconv3x3(x, w_); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    visit(prefix + "w", w_, true);
  }

 private:
  Tensor<T> w_;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, std::int64_t stride,
         std::int64_t pad, Rng& rng)
      : w_(init_weight<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng)), stride_(stride), pad_(pad) {}

  Tensor<T> forward(const Tensor<T>& x) override { return conv2d(x, w_, stride_, pad_); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    visit(prefix + "w", w_, true);
  }

 private:
  Tensor<T> w_;
  std::int64_t stride_, pad_;
};

// Affine at (1, 0), running stats at (0, 1); epsilon 1e-5, momentum 0.1.
template <typename T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(std::int64_t channels)
      : gamma_({channels}, T(1)),
        beta_({channels}, T(0)),
        run_mean_({channels}, T(0)),
        run_var_({channels}, T(1)) {
    gamma_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    return batch_norm(x, gamma_, beta_, run_mean_, run_var_, training_);
  }

  void set_training(bool on) override { training_ = on; }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    visit(prefix + "gamma", gamma_, true);
    visit(prefix + "beta", beta_, true);
    visit(prefix + "run_mean", run_mean_, false);
    visit(prefix + "run_var", run_var_, false);
  }

 private:
  Tensor<T> gamma_, beta_, run_mean_, run_var_;
  bool training_ = true;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::int64_t in_dim, std::int64_t out_dim, Rng& rng)
      : w_(init_weight<T>({out_dim, in_dim}, in_dim, rng)), b_({out_dim}, T(0)) {
    b_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) override { return linear(x, w_, b_); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    visit(prefix + "w", w_, true);
    visit(prefix + "b", b_, true);
  }

 private:
  Tensor<T> w_, b_;
};

// Ordered list of named submodules; forward chains them.
template <typename T>
class Sequential : public Module<T> {
 public:
  Sequential() = default;

  Sequential& append(std::string name, std::unique_ptr<Module<T>> m) {
    items_.emplace_back(std::move(name), std::move(m));
    return *this;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> y = x;
    for (auto& [name, m] : items_) y = m->forward(y);
    return y;
  }

  void set_training(bool on) override {
    for (auto& [name, m] : items_) m->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    for (auto& [name, m] : items_) m->visit_state(prefix + name + ".", visit);
  }

  std::size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Module<T>>>> items_;
};

template <typename T>
class Relu : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override { return relu(x); }
  void visit_state(const std::string&, const StateVisitor<T>&) override {}
};

}  // namespace cdsnas

#endif  // CDSNAS_NN_HPP_

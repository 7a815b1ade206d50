#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cdsnas/nn.hpp"
#include "cdsnas/ops.hpp"
#include "cdsnas/tensor.hpp"
#include "oracles.hpp"

using namespace cdsnas;
using cdsnas_tests::fd_max_rel_err;

namespace {

template <typename T>
struct FdCase {
  std::vector<Tensor<T>> inputs;
  std::function<Tensor<T>(const std::vector<Tensor<T>>&)> apply;
};

// Pushes values away from a kink so central differences stay on one branch.
template <typename T>
Tensor<T> randn_off_zero(Shape shape, Rng& rng, double margin) {
  Tensor<T> t = Tensor<T>::randn(std::move(shape), rng);
  for (T& v : t.data()) {
    if (std::abs(static_cast<double>(v)) < margin) v = v < T(0) ? T(-margin) : T(margin);
  }
  return t;
}

// Shuffled strictly-spaced ramp: every pairwise difference exceeds the FD
// step, so pooling argmaxes cannot flip under perturbation.
template <typename T>
Tensor<T> randn_distinct(Shape shape, Rng& rng, double margin) {
  Tensor<T> t(std::move(shape));
  auto& v = t.data();
  std::vector<std::size_t> perm(v.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<T>(5.0 * margin * static_cast<double>(perm[i]) -
                          2.5 * margin * static_cast<double>(v.size()));
  return t;
}

template <typename T>
using CaseBuilder = std::function<FdCase<T>(Rng&, double margin)>;

template <typename T>
void run_fd_suite(const char* name, const CaseBuilder<T>& build, int cases, double step,
                  double tol) {
  Rng rng(0xC0FFEE ^ static_cast<std::uint64_t>(std::string(name).size() * 2654435761u));
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    FdCase<T> c = build(rng, 4.0 * step);
    double err = fd_max_rel_err<T>(c.inputs, c.apply, rng, step);
    worst = std::max(worst, err);
  }
  INFO(std::string(name) << " worst rel err " << worst);
  CHECK(worst < tol);
}

// The whole primitive set, each with a generator tuned to stay off kinks.
template <typename T>
std::vector<std::pair<const char*, CaseBuilder<T>>> all_op_cases() {
  using Builder = CaseBuilder<T>;
  std::vector<std::pair<const char*, Builder>> out;

  auto grad_on = [](Tensor<T> t) {
    t.set_requires_grad(true);
    return t;
  };

  out.emplace_back("add", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     Shape s{2, 3, 4};
                     return {{grad_on(Tensor<T>::randn(s, rng)), grad_on(Tensor<T>::randn(s, rng))},
                             [](const std::vector<Tensor<T>>& in) { return add(in[0], in[1]); }};
                   }));
  out.emplace_back("sub", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     Shape s{3, 5};
                     return {{grad_on(Tensor<T>::randn(s, rng)), grad_on(Tensor<T>::randn(s, rng))},
                             [](const std::vector<Tensor<T>>& in) { return sub(in[0], in[1]); }};
                   }));
  out.emplace_back("mul", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     Shape s{2, 7};
                     return {{grad_on(Tensor<T>::randn(s, rng)), grad_on(Tensor<T>::randn(s, rng))},
                             [](const std::vector<Tensor<T>>& in) { return mul(in[0], in[1]); }};
                   }));
  out.emplace_back("affine", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({4, 3}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return affine(in[0], T(-1), T(1));
                             }};
                   }));
  out.emplace_back("relu", Builder([grad_on](Rng& rng, double m) -> FdCase<T> {
                     return {{grad_on(randn_off_zero<T>({3, 6}, rng, m))},
                             [](const std::vector<Tensor<T>>& in) { return relu(in[0]); }};
                   }));
  out.emplace_back("sigmoid", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 9}, rng))},
                             [](const std::vector<Tensor<T>>& in) { return sigmoid(in[0]); }};
                   }));
  out.emplace_back("reshape", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 6}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return reshape(in[0], {2, 6, 1, 1});
                             }};
                   }));
  out.emplace_back("sum", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({5, 2}, rng))},
                             [](const std::vector<Tensor<T>>& in) { return sum(in[0]); }};
                   }));
  out.emplace_back("mean", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({4, 4}, rng))},
                             [](const std::vector<Tensor<T>>& in) { return mean(in[0]); }};
                   }));
  out.emplace_back("mul_entry", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 3, 2, 2}, rng)),
                              grad_on(Tensor<T>::randn({5}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return mul_entry(in[0], in[1], 3);
                             }};
                   }));
  out.emplace_back("softmax", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({7}, rng))},
                             [](const std::vector<Tensor<T>>& in) { return softmax(in[0]); }};
                   }));
  out.emplace_back("conv1x1", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 3, 4, 3}, rng)),
                              grad_on(Tensor<T>::randn({5, 3}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return conv1x1(in[0], in[1]);
                             }};
                   }));
  out.emplace_back("dwconv3x3", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 3, 5, 4}, rng)),
                              grad_on(Tensor<T>::randn({3, 3, 3}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return dwconv3x3(in[0], in[1]);
                             }};
                   }));
  out.emplace_back("conv2d_3x3s1", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 2, 5, 4}, rng)),
                              grad_on(Tensor<T>::randn({3, 2, 3, 3}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return conv2d(in[0], in[1], 1, 1);
                             }};
                   }));
  out.emplace_back("conv2d_7x7s2", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({1, 2, 10, 8}, rng)),
                              grad_on(Tensor<T>::randn({3, 2, 7, 7}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return conv2d(in[0], in[1], 2, 3);
                             }};
                   }));
  out.emplace_back("batch_norm_train", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     auto rm = std::make_shared<Tensor<T>>(Shape{3}, T(0));
                     auto rv = std::make_shared<Tensor<T>>(Shape{3}, T(1));
                     return {{grad_on(Tensor<T>::randn({4, 3, 2, 2}, rng)),
                              grad_on(Tensor<T>::randn({3}, rng)),
                              grad_on(Tensor<T>::randn({3}, rng))},
                             [rm, rv](const std::vector<Tensor<T>>& in) {
                               return batch_norm(in[0], in[1], in[2], *rm, *rv, true);
                             }};
                   }));
  out.emplace_back("batch_norm_eval", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     auto rm = std::make_shared<Tensor<T>>(Tensor<T>::randn({3}, rng));
                     auto rv = std::make_shared<Tensor<T>>(Shape{3}, T(0));
                     for (T& v : rv->data()) v = static_cast<T>(0.5 + rng.uniform(0.0, 1.0));
                     return {{grad_on(Tensor<T>::randn({2, 3, 2, 3}, rng)),
                              grad_on(Tensor<T>::randn({3}, rng)),
                              grad_on(Tensor<T>::randn({3}, rng))},
                             [rm, rv](const std::vector<Tensor<T>>& in) {
                               return batch_norm(in[0], in[1], in[2], *rm, *rv, false);
                             }};
                   }));
  out.emplace_back("max_pool3x3s2", Builder([grad_on](Rng& rng, double m) -> FdCase<T> {
                     return {{grad_on(randn_distinct<T>({1, 2, 8, 6}, rng, m))},
                             [](const std::vector<Tensor<T>>& in) {
                               return max_pool3x3s2(in[0]);
                             }};
                   }));
  out.emplace_back("avg_pool2x2s2", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 2, 6, 4}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return avg_pool2x2s2(in[0]);
                             }};
                   }));
  out.emplace_back("global_avg_pool", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({3, 4, 3, 5}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return global_avg_pool(in[0]);
                             }};
                   }));
  out.emplace_back("stripe_avg_pool", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 3, 8, 4}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return stripe_avg_pool(in[0], 4, 8);
                             }};
                   }));
  out.emplace_back("channel_weighted_sum", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     Shape s{2, 3, 4, 2};
                     return {{grad_on(Tensor<T>::randn(s, rng)), grad_on(Tensor<T>::randn(s, rng)),
                              grad_on(Tensor<T>::randn({2, 3}, rng)),
                              grad_on(Tensor<T>::randn({2, 3}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return channel_weighted_sum(in[0], in[1], in[2], in[3]);
                             }};
                   }));
  out.emplace_back("linear", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({3, 4}, rng)),
                              grad_on(Tensor<T>::randn({5, 4}, rng)),
                              grad_on(Tensor<T>::randn({5}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return linear(in[0], in[1], in[2]);
                             }};
                   }));
  out.emplace_back("concat_dim1", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     return {{grad_on(Tensor<T>::randn({2, 3, 2, 2}, rng)),
                              grad_on(Tensor<T>::randn({2, 2, 2, 2}, rng))},
                             [](const std::vector<Tensor<T>>& in) {
                               return concat_dim1(in[0], in[1]);
                             }};
                   }));
  out.emplace_back("softmax_cross_entropy", Builder([grad_on](Rng& rng, double) -> FdCase<T> {
                     std::vector<int> labels{1, 0, 3, 2};
                     return {{grad_on(Tensor<T>::randn({4, 4}, rng))},
                             [labels](const std::vector<Tensor<T>>& in) {
                               return softmax_cross_entropy(in[0], labels);
                             }};
                   }));
  out.emplace_back("triplet_batch_hard", Builder([grad_on](Rng& rng, double m) -> FdCase<T> {
                     std::vector<int> labels{0, 0, 1, 1, 2, 2};
                     // Redraw until hinges and hardest-pair selections sit
                     // clear of the FD step.
                     for (int attempt = 0; attempt < 200; ++attempt) {
                       Tensor<T> f = Tensor<T>::randn({6, 3}, rng);
                       const auto& fv = f.data();
                       auto dist = [&](int i, int j) {
                         double acc = 0;
                         for (int k = 0; k < 3; ++k) {
                           double diff = static_cast<double>(fv[static_cast<std::size_t>(i * 3 + k)]) -
                                         static_cast<double>(fv[static_cast<std::size_t>(j * 3 + k)]);
                           acc += diff * diff;
                         }
                         return std::sqrt(acc);
                       };
                       double clearance = 1e9;
                       for (int i = 0; i < 6; ++i) {
                         std::vector<double> pos, neg;
                         for (int j = 0; j < 6; ++j) {
                           if (i == j) continue;
                           (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? pos
                                                                                                       : neg)
                               .push_back(dist(i, j));
                         }
                         std::sort(pos.rbegin(), pos.rend());
                         std::sort(neg.begin(), neg.end());
                         if (pos.size() > 1) clearance = std::min(clearance, pos[0] - pos[1]);
                         if (neg.size() > 1) clearance = std::min(clearance, neg[1] - neg[0]);
                         clearance = std::min(clearance, std::abs(pos[0] - neg[0] + 0.3));
                       }
                       if (clearance > 6.0 * m) {
                         return {{grad_on(f)}, [labels](const std::vector<Tensor<T>>& in) {
                                   return triplet_batch_hard(in[0], labels, T(0.3));
                                 }};
                       }
                     }
                     FAIL("no clean triplet configuration found");
                     return {};
                   }));
  return out;
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.shape() == Shape{2, 3, 4});
  CHECK_THROWS_AS(Tensor<double>({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(5, 0.0)), ShapeError);
  CHECK_THROWS_AS(Tensor<double>(Shape{}), ShapeError);
}

TEST_CASE("finite differences agree with every primitive backward rule (64-bit)") {
  for (auto& [name, builder] : all_op_cases<double>()) {
    run_fd_suite<double>(name, builder, 20, 1e-5, 1e-6);
  }
}

TEST_CASE("finite differences agree with every primitive backward rule (32-bit)") {
  for (auto& [name, builder] : all_op_cases<float>()) {
    run_fd_suite<float>(name, builder, 20, 1e-2, 1e-3);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("identity sum gives gradient one") {
    Tensor<double> x = Tensor<double>::scalar(3.5);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = sum(affine(x, 1.0, 0.0));
    auto grads = tape.backward(loss);
    CHECK(tape.grad_or_zero(grads, x).item() == doctest::Approx(1.0));
  }
  SUBCASE("loss independent of a leaf gives zero gradient") {
    Tensor<double> x({3}, std::vector<double>{1, 2, 3});
    Tensor<double> y({3}, std::vector<double>{4, 5, 6});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.watch(y);
    Tensor<double> loss = sum(mul(x, x));
    auto grads = tape.backward(loss);
    Tensor<double> gy = tape.grad_or_zero(grads, y);
    for (double v : gy.data()) CHECK(v == 0.0);
  }
  SUBCASE("loss must be scalar and on the tape") {
    Tensor<double> x({3}, std::vector<double>{1, 2, 3});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
    Tensor<double> off_tape = Tensor<double>::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(off_tape), ShapeError);
  }
}

TEST_CASE("detach cuts all gradient paths") {
  Tensor<double> h({3}, std::vector<double>{1, 0, 1});
  Tensor<double> p({3}, std::vector<double>{0.5, 0.2, 0.3});
  h.set_requires_grad(true);
  p.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.watch(h);
  tape.watch(p);
  Tensor<double> m = sub(detach(h), detach(p));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(m.data()[i] == doctest::Approx(h.data()[i] - p.data()[i]));
  // The loss touches p directly so the tape has something to differentiate;
  // the detached bridge m must contribute nothing to either leaf.
  Tensor<double> loss = sum(mul(m, p));
  auto grads = tape.backward(loss);
  Tensor<double> gh = tape.grad_or_zero(grads, h);
  for (double v : gh.data()) CHECK(v == 0.0);
  Tensor<double> gp = tape.grad_or_zero(grads, p);
  for (std::size_t i = 0; i < 3; ++i) CHECK(gp.data()[i] == doctest::Approx(m.data()[i]));
}

TEST_CASE("named shape examples") {
  Rng rng(7);
  SUBCASE("depthwise 3x3 pad 1 keeps (4,16,8)") {
    Tensor<double> x = Tensor<double>::randn({1, 4, 16, 8}, rng);
    Tensor<double> w = Tensor<double>::randn({4, 3, 3}, rng);
    CHECK(dwconv3x3(x, w).shape() == Shape{1, 4, 16, 8});
  }
  SUBCASE("relu of all-negative input is all zero") {
    Tensor<double> x({2, 5}, std::vector<double>(10, -2.0));
    Tensor<double> y = relu(x);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("channel-weighted sum with unit weights is the plain sum") {
    Tensor<double> a = Tensor<double>::randn({2, 3, 4, 4}, rng);
    Tensor<double> b = Tensor<double>::randn({2, 3, 4, 4}, rng);
    Tensor<double> ones({2, 3}, 1.0);
    Tensor<double> got = channel_weighted_sum(a, b, ones, ones);
    Tensor<double> want = add(a, b);
    for (std::size_t i = 0; i < got.data().size(); ++i)
      CHECK(got.data()[i] == doctest::Approx(want.data()[i]));
  }
  SUBCASE("shape mismatch diagnostics name the op and both shapes") {
    Tensor<double> a({2, 3}, 0.0);
    Tensor<double> b({3, 2}, 0.0);
    try {
      add(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("add") != std::string::npos);
      CHECK(msg.find("(2,3)") != std::string::npos);
      CHECK(msg.find("(3,2)") != std::string::npos);
    }
  }
}

TEST_CASE("batch norm train mode normalizes the batch") {
  Rng rng(11);
  Tensor<double> x = Tensor<double>::randn({8, 5, 4, 3}, rng, 3.0);
  for (auto& v : x.data()) v += 1.7;
  Tensor<double> gamma({5}, 1.0);
  Tensor<double> beta({5}, 0.0);
  Tensor<double> rm({5}, 0.0);
  Tensor<double> rv({5}, 1.0);
  Tensor<double> y = batch_norm(x, gamma, beta, rm, rv, true);
  const std::int64_t n = 8, c = 5, s = 12, m = n * s;
  for (std::int64_t ic = 0; ic < c; ++ic) {
    double mean = 0, var = 0;
    for (std::int64_t in = 0; in < n; ++in)
      for (std::int64_t k = 0; k < s; ++k)
        mean += y.data()[static_cast<std::size_t>((in * c + ic) * s + k)];
    mean /= static_cast<double>(m);
    for (std::int64_t in = 0; in < n; ++in)
      for (std::int64_t k = 0; k < s; ++k) {
        double d = y.data()[static_cast<std::size_t>((in * c + ic) * s + k)] - mean;
        var += d * d;
      }
    var /= static_cast<double>(m);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("replaying the same seeded graph is bitwise identical") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> x = Tensor<float>::randn({2, 3, 8, 8}, rng);
    Tensor<float> w = Tensor<float>::randn({4, 3}, rng);
    w.set_requires_grad(true);
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    Tensor<float> y = relu(conv1x1(x, w));
    Tensor<float> loss = mean(y);
    auto grads = tape.backward(loss);
    std::vector<float> out = y.data();
    Tensor<float> gw = tape.grad_or_zero(grads, w);
    out.insert(out.end(), gw.data().begin(), gw.data().end());
    return out;
  };
  auto a = run(123);
  auto b = run(123);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("module state visitation") {
  Rng rng(3);
  Sequential<double> seq;
  seq.append("conv", std::make_unique<Conv1x1<double>>(4, 8, rng));
  seq.append("bn", std::make_unique<BatchNorm<double>>(8));
  seq.append("act", std::make_unique<Relu<double>>());
  std::vector<std::string> names;
  seq.visit_state("net.", [&](const std::string& n, Tensor<double>&, bool) { names.push_back(n); });
  CHECK(names == std::vector<std::string>{"net.conv.w", "net.bn.gamma", "net.bn.beta",
                                          "net.bn.run_mean", "net.bn.run_var"});
  CHECK(seq.num_params() == 4 * 8 + 8 + 8);
}

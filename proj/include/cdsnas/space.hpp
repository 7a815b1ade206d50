#ifndef CDSNAS_SPACE_HPP_
#define CDSNAS_SPACE_HPP_

#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdsnas/nn.hpp"

namespace cdsnas {

// ---------------------------------------------------------------------------
// Search-space descriptions

// CS: combined kernel pairs, one CBlock per position. CDS: the same pairs
// with a repeat factor, one CDBlock (r chained CBlocks) per position.
enum class SpaceKind { CS, CDS };

inline const char* to_string(SpaceKind k) { return k == SpaceKind::CS ? "cs" : "cds"; }

inline SpaceKind space_kind_from(const std::string& s) {
  if (s == "cs") return SpaceKind::CS;
  if (s == "cds") return SpaceKind::CDS;
  fail_data("unknown space kind '", s, "' (expected cs or cds)");
}

struct CandidateSpec {
  int k1 = 3;
  int k2 = 5;
  int r = 1;

  bool operator==(const CandidateSpec&) const = default;
};

inline const std::array<std::pair<int, int>, 6>& kernel_pairs() {
  static const std::array<std::pair<int, int>, 6> pairs{
      {{3, 5}, {3, 7}, {3, 9}, {5, 7}, {5, 9}, {7, 9}}};
  return pairs;
}

inline bool valid_kernel_pair(int k1, int k2) {
  for (const auto& [a, b] : kernel_pairs())
    if (a == k1 && b == k2) return true;
  return false;
}

// CS: the six kernel pairs with r=1. CDS: pair-major cartesian product with
// r ascending, twelve entries.
inline std::vector<CandidateSpec> candidate_set(SpaceKind kind) {
  std::vector<CandidateSpec> out;
  for (const auto& [k1, k2] : kernel_pairs()) {
    if (kind == SpaceKind::CS) {
      out.push_back({k1, k2, 1});
    } else {
      out.push_back({k1, k2, 1});
      out.push_back({k1, k2, 2});
    }
  }
  return out;
}

inline std::int64_t space_cardinality(SpaceKind kind, int positions = 6) {
  std::int64_t n = static_cast<std::int64_t>(candidate_set(kind).size());
  std::int64_t total = 1;
  for (int i = 0; i < positions; ++i) total *= n;
  return total;
}

// Stem width, per-stage widths, and the final embedding width. The defaults
// reproduce the 512-dim global feature; full-scale widths are a config knob.
struct ChannelPlan {
  std::int64_t stem = 64;
  std::vector<std::int64_t> stage = {64, 96, 128};
  std::int64_t embed = 512;

  bool operator==(const ChannelPlan&) const = default;
};

inline std::int64_t round_channels(double c) {
  auto r = static_cast<std::int64_t>(c / 4.0 + 0.5) * 4;
  return r < 4 ? 4 : r;
}

inline ChannelPlan scale_plan(const ChannelPlan& plan, double beta) {
  ChannelPlan out = plan;
  out.stem = round_channels(beta * static_cast<double>(plan.stem));
  for (std::size_t i = 0; i < plan.stage.size(); ++i)
    out.stage[i] = round_channels(beta * static_cast<double>(plan.stage[i]));
  out.embed = round_channels(beta * static_cast<double>(plan.embed));
  return out;
}

// A fully determined network: one candidate per MBlock position plus the
// width/resolution multipliers and the channel plan.
struct ArchitectureDescriptor {
  SpaceKind kind = SpaceKind::CDS;
  std::array<CandidateSpec, 6> layers{};
  double beta = 1.0;
  double gamma = 1.0;
  ChannelPlan plan{};

  int depth() const {
    int d = 0;
    for (const auto& l : layers) d += l.r;
    return d;
  }
};

inline void validate(const ArchitectureDescriptor& d) {
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const auto& l = d.layers[i];
    if (!valid_kernel_pair(l.k1, l.k2))
      fail_data("descriptor layer ", i + 1, ": invalid kernel tuple (", l.k1, ",", l.k2, ")");
    if (l.r != 1 && l.r != 2)
      fail_data("descriptor layer ", i + 1, ": repeat factor ", l.r, " not in {1,2}");
    if (d.kind == SpaceKind::CS && l.r != 1)
      fail_data("descriptor layer ", i + 1, ": repeat factor ", l.r, " in a cs descriptor");
  }
  if (d.beta <= 0 || d.gamma <= 0)
    fail_data("descriptor: multipliers must be positive, got beta=", d.beta, " gamma=", d.gamma);
  int depth = d.depth();
  if (depth < 6 || depth > 12) fail_data("descriptor: depth ", depth, " outside [6,12]");
}

// Channel plan scaled by beta; the intended input resolution scales by gamma
// wherever the descriptor is materialized.
inline ArchitectureDescriptor scale_descriptor(const ArchitectureDescriptor& d, double beta,
                                               double gamma) {
  if (beta <= 0 || gamma <= 0)
    fail_data("scale_descriptor: multipliers must be positive, got beta=", beta, " gamma=", gamma);
  ArchitectureDescriptor out = d;
  out.beta = d.beta * beta;
  out.gamma = d.gamma * gamma;
  out.plan = scale_plan(d.plan, beta);
  return out;
}

inline std::int64_t scaled_resolution(std::int64_t base, double gamma) {
  auto r = static_cast<std::int64_t>(static_cast<double>(base) * gamma + 0.5);
  return r < 1 ? 1 : r;
}

// ---------------------------------------------------------------------------
// Descriptor file format:
//   cds-arch v1 <kind> beta=<f> gamma=<f>
//   layer <i> k1=<int> k2=<int> r=<int>     (six lines, i = 1..6)

inline std::string format_multiplier(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string emit_descriptor(const ArchitectureDescriptor& d) {
  std::ostringstream os;
  os << "cds-arch v1 " << to_string(d.kind) << " beta=" << format_multiplier(d.beta)
     << " gamma=" << format_multiplier(d.gamma) << "\n";
  for (std::size_t i = 0; i < d.layers.size(); ++i)
    os << "layer " << i + 1 << " k1=" << d.layers[i].k1 << " k2=" << d.layers[i].k2
       << " r=" << d.layers[i].r << "\n";
  return os.str();
}

namespace detail {

inline std::string expect_kv(const std::string& token, const std::string& key,
                             const std::string& line) {
  if (token.rfind(key + "=", 0) != 0)
    fail_data("descriptor: expected ", key, "=... in line '", line, "'");
  return token.substr(key.size() + 1);
}

}  // namespace detail

inline ArchitectureDescriptor parse_descriptor(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) fail_data("descriptor: empty input");
  ArchitectureDescriptor d;
  {
    std::istringstream ls(line);
    std::string magic, version, kind, beta, gamma;
    ls >> magic >> version >> kind >> beta >> gamma;
    if (magic != "cds-arch" || version != "v1")
      fail_data("descriptor: bad header line '", line, "'");
    d.kind = space_kind_from(kind);
    d.beta = std::stod(detail::expect_kv(beta, "beta", line));
    d.gamma = std::stod(detail::expect_kv(gamma, "gamma", line));
  }
  for (int i = 0; i < 6; ++i) {
    if (!std::getline(is, line)) fail_data("descriptor: missing layer line ", i + 1);
    std::istringstream ls(line);
    std::string word, idx, k1, k2, r;
    ls >> word >> idx >> k1 >> k2 >> r;
    if (word != "layer" || idx != std::to_string(i + 1))
      fail_data("descriptor: expected 'layer ", i + 1, " ...', got '", line, "'");
    auto& l = d.layers[static_cast<std::size_t>(i)];
    try {
      l.k1 = std::stoi(detail::expect_kv(k1, "k1", line));
      l.k2 = std::stoi(detail::expect_kv(k2, "k2", line));
      l.r = std::stoi(detail::expect_kv(r, "r", line));
    } catch (const std::logic_error&) {
      fail_data("descriptor: malformed integer in line '", line, "'");
    }
  }
  d.plan = scale_plan(ChannelPlan{}, d.beta);
  validate(d);
  return d;
}

inline ArchitectureDescriptor load_descriptor(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_data("descriptor: cannot open ", path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_descriptor(os.str());
}

inline void save_descriptor(const ArchitectureDescriptor& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("descriptor: cannot write ", path);
  out << emit_descriptor(d);
}

// ---------------------------------------------------------------------------
// Blocks

// Lite 3x3: pointwise 1x1 conv, depthwise 3x3 conv, BN, ReLU.
template <typename T>
class LiteUnit : public Module<T> {
 public:
  LiteUnit(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
      : pw_(in_ch, out_ch, rng), dw_(out_ch, rng), bn_(out_ch) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    return relu(bn_.forward(dw_.forward(pw_.forward(x))));
  }

  void set_training(bool on) override { bn_.set_training(on); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    pw_.visit_state(prefix + "pw.", visit);
    dw_.visit_state(prefix + "dw.", visit);
    bn_.visit_state(prefix + "bn.", visit);
  }

 private:
  Conv1x1<T> pw_;
  DwConv3x3<T> dw_;
  BatchNorm<T> bn_;
};

// Lite k: floor(k/2) chained Lite 3x3 units; effective receptive field k x k.
template <typename T>
class LiteK : public Module<T> {
 public:
  LiteK(std::int64_t channels, int k, Rng& rng) {
    if (k < 3 || k % 2 == 0) fail_data("lite_k: kernel size ", k, " must be odd and >= 3");
    for (int i = 0; i < k / 2; ++i)
      units_.append(str("u", i), std::make_unique<LiteUnit<T>>(channels, channels, rng));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return units_.forward(x); }
  void set_training(bool on) override { units_.set_training(on); }
  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    units_.visit_state(prefix, visit);
  }
  std::size_t depth() const { return units_.size(); }

 private:
  Sequential<T> units_;
};

// Per-channel sigmoid weights from the globally pooled block input through a
// two-layer bottleneck.
template <typename T>
class FusionGate : public Module<T> {
 public:
  FusionGate(std::int64_t in_ch, std::int64_t out_ch, std::int64_t reduction, Rng& rng)
      : l1_(in_ch, in_ch / reduction, rng), l2_(in_ch / reduction, out_ch, rng) {
    if (in_ch < reduction)
      fail_data("fusion gate: ", in_ch, " channels < reduction ratio ", reduction);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    return sigmoid(l2_.forward(relu(l1_.forward(global_avg_pool(x)))));
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    l1_.visit_state(prefix + "l1.", visit);
    l2_.visit_state(prefix + "l2.", visit);
  }

  Linear<T>& l2() { return l2_; }

 private:
  Linear<T> l1_, l2_;
};

// Combined block: 1x1 squeeze, two parallel Lite-k branches fused by the
// gate's channel-wise weighted summation, 1x1 restore, residual add.
template <typename T>
class CBlock : public Module<T> {
 public:
  CBlock(std::int64_t channels, int k1, int k2, Rng& rng, std::int64_t reduction = 4)
      : squeeze_(channels, mid(channels, reduction), rng),
        branch1_(mid(channels, reduction), k1, rng),
        branch2_(mid(channels, reduction), k2, rng),
        gate_(channels, mid(channels, reduction), reduction, rng),
        restore_(mid(channels, reduction), channels, rng) {
    if (channels < reduction)
      fail_data("cblock: ", channels, " channels < reduction ratio ", reduction);
    if (!valid_kernel_pair(k1, k2))
      fail_data("cblock: invalid kernel tuple (", k1, ",", k2, ")");
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> s = squeeze_.forward(x);
    Tensor<T> g = gate_.forward(x);
    Tensor<T> fused = channel_weighted_sum(branch1_.forward(s), branch2_.forward(s), g,
                                           affine(g, T(-1), T(1)));
    return add(restore_.forward(fused), x);
  }

  void set_training(bool on) override {
    branch1_.set_training(on);
    branch2_.set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    squeeze_.visit_state(prefix + "squeeze.", visit);
    branch1_.visit_state(prefix + "lite1.", visit);
    branch2_.visit_state(prefix + "lite2.", visit);
    gate_.visit_state(prefix + "gate.", visit);
    restore_.visit_state(prefix + "restore.", visit);
  }

  FusionGate<T>& gate() { return gate_; }

 private:
  static std::int64_t mid(std::int64_t channels, std::int64_t reduction) {
    std::int64_t m = channels / reduction;
    return m < 1 ? 1 : m;
  }

  Conv1x1<T> squeeze_;
  LiteK<T> branch1_, branch2_;
  FusionGate<T> gate_;
  Conv1x1<T> restore_;
};

// r chained CBlocks (r = 1 degenerates to a plain CBlock).
template <typename T>
class CDBlock : public Module<T> {
 public:
  CDBlock(std::int64_t channels, const CandidateSpec& spec, Rng& rng, std::int64_t reduction = 4) {
    for (int i = 0; i < spec.r; ++i)
      blocks_.append(str("cb", i),
                     std::make_unique<CBlock<T>>(channels, spec.k1, spec.k2, rng, reduction));
  }

  Tensor<T> forward(const Tensor<T>& x) override { return blocks_.forward(x); }
  void set_training(bool on) override { blocks_.set_training(on); }
  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    blocks_.visit_state(prefix, visit);
  }
  std::size_t repeats() const { return blocks_.size(); }

 private:
  Sequential<T> blocks_;
};

// 1x1 conv to the next stage width, then 2x2 average pooling stride 2.
template <typename T>
class DownSample : public Module<T> {
 public:
  DownSample(std::int64_t in_ch, std::int64_t out_ch, Rng& rng) : conv_(in_ch, out_ch, rng) {}

  Tensor<T> forward(const Tensor<T>& x) override { return avg_pool2x2s2(conv_.forward(x)); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    conv_.visit_state(prefix + "conv.", visit);
  }

 private:
  Conv1x1<T> conv_;
};

// 7x7 stride-2 convolution followed by 3x3 max pooling stride 2.
template <typename T>
class Stem : public Module<T> {
 public:
  Stem(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
      : conv_(in_ch, out_ch, 7, 2, 3, rng), bn_(out_ch) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    return max_pool3x3s2(relu(bn_.forward(conv_.forward(x))));
  }

  void set_training(bool on) override { bn_.set_training(on); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    conv_.visit_state(prefix + "conv.", visit);
    bn_.visit_state(prefix + "bn.", visit);
  }

 private:
  Conv2d<T> conv_;
  BatchNorm<T> bn_;
};

// 1x1 projection to the embedding width.
template <typename T>
class HeadProjection : public Module<T> {
 public:
  HeadProjection(std::int64_t in_ch, std::int64_t embed, Rng& rng)
      : conv_(in_ch, embed, rng), bn_(embed) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    return relu(bn_.forward(conv_.forward(x)));
  }

  void set_training(bool on) override { bn_.set_training(on); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    conv_.visit_state(prefix + "conv.", visit);
    bn_.visit_state(prefix + "bn.", visit);
  }

 private:
  Conv1x1<T> conv_;
  BatchNorm<T> bn_;
};

// ---------------------------------------------------------------------------
// Macro networks

// Stage/stem layout shared by the supernet and derived networks. The
// canonical net has three stages of two blocks; micro layouts shrink both for
// enumerable oracle spaces.
struct MacroLayout {
  std::int64_t in_channels = 3;
  ChannelPlan plan{};
  int blocks_per_stage = 2;

  int num_stages() const { return static_cast<int>(plan.stage.size()); }
  int num_positions() const { return num_stages() * blocks_per_stage; }

  // Stem divides spatial dims by 4, each DownSample by 2.
  std::int64_t spatial_divisor() const { return 4ll << (num_stages() - 1); }

  void validate_input(std::int64_t h, std::int64_t w) const {
    std::int64_t d = spatial_divisor();
    if (h % d != 0 || w % d != 0)
      fail_data("input resolution ", h, "x", w, " not divisible by ", d);
    if (plan.stem != plan.stage.at(0))
      fail_data("channel plan: stem width ", plan.stem, " must equal stage-1 width ",
                plan.stage.at(0));
  }
};

inline MacroLayout layout_for(const ArchitectureDescriptor& d) {
  MacroLayout layout;
  layout.plan = d.plan;
  return layout;
}

// Per-MBlock gate view: straight-through vector plus the selected branches.
template <typename T>
struct BranchGate {
  Tensor<T> hhat;
  std::vector<int> selected;
};

// One searchable position: n parallel branch subnetworks. Only the gated
// branches are evaluated; the counter records how many.
template <typename T>
class MBlock {
 public:
  void add_branch(std::unique_ptr<Module<T>> branch) { branches_.push_back(std::move(branch)); }

  std::size_t num_branches() const { return branches_.size(); }

  Module<T>& branch(std::size_t j) { return *branches_[j]; }

  // F(x) = sum over selected j of hhat_j * f_j(x).
  Tensor<T> forward(const Tensor<T>& x, const BranchGate<T>& gate) {
    if (gate.hhat.numel() != static_cast<std::int64_t>(branches_.size()))
      fail_shape("mblock: gate length ", gate.hhat.numel(), " for ", branches_.size(),
                 " branches");
    if (gate.selected.empty()) fail_data("mblock: no branches selected");
    Tensor<T> acc;
    for (int j : gate.selected) {
      if (j < 0 || j >= static_cast<int>(branches_.size()))
        fail_data("mblock: selected branch ", j, " out of range");
      Tensor<T> y = branches_[static_cast<std::size_t>(j)]->forward(x);
      ++eval_count_;
      if (acc.defined() && y.shape() != acc.shape())
        fail_shape("mblock: branch ", j, " output ", shape_str(y.shape()),
                   " mismatches ", shape_str(acc.shape()));
      Tensor<T> term = mul_entry(y, gate.hhat, j);
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  }

  void set_training(bool on) {
    for (auto& b : branches_) b->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) {
    for (std::size_t j = 0; j < branches_.size(); ++j)
      branches_[j]->visit_state(prefix + "br" + std::to_string(j) + ".", visit);
  }

  std::int64_t eval_count() const { return eval_count_; }
  void reset_eval_count() { eval_count_ = 0; }

 private:
  std::vector<std::unique_ptr<Module<T>>> branches_;
  std::int64_t eval_count_ = 0;
};

// The macro search network: stem, stages of MBlocks with DownSample blocks
// between them, 1x1 head projection. fmap2 taps the output of the
// next-to-last stage, fmap3 the projected output of the last stage.
template <typename T>
class SuperNet {
 public:
  struct Taps {
    Tensor<T> fmap2;
    Tensor<T> fmap3;
  };

  // Branches built from the candidate list; custom branch factories support
  // planted micro-spaces.
  using BranchFactory =
      std::function<std::unique_ptr<Module<T>>(int position, const CandidateSpec&, std::int64_t, Rng&)>;

  SuperNet(MacroLayout layout, std::vector<CandidateSpec> candidates, Rng& rng,
           BranchFactory factory = nullptr)
      : layout_(std::move(layout)),
        candidates_(std::move(candidates)),
        stem_(layout_.in_channels, layout_.plan.stem, rng) {
    if (candidates_.empty()) fail_data("supernet: empty candidate set");
    if (!factory)
      factory = [](int, const CandidateSpec& spec, std::int64_t ch, Rng& r) {
        return std::make_unique<CDBlock<T>>(ch, spec, r);
      };
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      std::int64_t ch = layout_.plan.stage[static_cast<std::size_t>(s)];
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position) {
        blocks_.emplace_back();
        for (const auto& spec : candidates_)
          blocks_.back().add_branch(factory(position, spec, ch, rng));
      }
      if (s + 1 < layout_.num_stages())
        downsamples_.push_back(std::make_unique<DownSample<T>>(
            ch, layout_.plan.stage[static_cast<std::size_t>(s + 1)], rng));
    }
    proj_ = std::make_unique<HeadProjection<T>>(layout_.plan.stage.back(), layout_.plan.embed, rng);
  }

  int num_positions() const { return static_cast<int>(blocks_.size()); }
  std::size_t num_candidates() const { return candidates_.size(); }
  const MacroLayout& layout() const { return layout_; }
  MBlock<T>& mblock(int i) { return blocks_[static_cast<std::size_t>(i)]; }

  Taps forward(const Tensor<T>& x, const std::vector<BranchGate<T>>& gates) {
    if (static_cast<int>(gates.size()) != num_positions())
      fail_shape("supernet: ", gates.size(), " gates for ", num_positions(), " positions");
    layout_.validate_input(x.dim(2), x.dim(3));
    Tensor<T> y = stem_.forward(x);
    Taps taps;
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position)
        y = blocks_[static_cast<std::size_t>(position)].forward(
            y, gates[static_cast<std::size_t>(position)]);
      if (s == layout_.num_stages() - 2) taps.fmap2 = y;
      if (s + 1 < layout_.num_stages())
        y = downsamples_[static_cast<std::size_t>(s)]->forward(y);
    }
    taps.fmap3 = proj_->forward(y);
    if (!taps.fmap2.defined()) taps.fmap2 = taps.fmap3;
    return taps;
  }

  void set_training(bool on) {
    stem_.set_training(on);
    for (auto& m : blocks_) m.set_training(on);
    proj_->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) {
    stem_.visit_state(prefix + "stem.", visit);
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position)
        blocks_[static_cast<std::size_t>(position)].visit_state(
            prefix + str("s", s + 1, ".m", b, "."), visit);
      if (s + 1 < layout_.num_stages())
        downsamples_[static_cast<std::size_t>(s)]->visit_state(prefix + str("ds", s + 1, "."),
                                                               visit);
    }
    proj_->visit_state(prefix + "proj.", visit);
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    visit_state("", [&](const std::string&, Tensor<T>& t, bool is_param) {
      if (is_param) out.push_back(&t);
    });
    return out;
  }

  std::vector<std::int64_t> eval_counts() const {
    std::vector<std::int64_t> out;
    for (const auto& m : blocks_) out.push_back(m.eval_count());
    return out;
  }

  void reset_eval_counts() {
    for (auto& m : blocks_) m.reset_eval_count();
  }

 private:
  MacroLayout layout_;
  std::vector<CandidateSpec> candidates_;
  Stem<T> stem_;
  std::vector<MBlock<T>> blocks_;
  std::vector<std::unique_ptr<DownSample<T>>> downsamples_;
  std::unique_ptr<HeadProjection<T>> proj_;
};

// Single-path network built from chosen candidates: no gates, no unused
// branches.
template <typename T>
class BackboneNetwork {
 public:
  struct Taps {
    Tensor<T> fmap2;
    Tensor<T> fmap3;
  };

  BackboneNetwork(MacroLayout layout, std::vector<CandidateSpec> chosen, Rng& rng)
      : layout_(std::move(layout)), chosen_(std::move(chosen)),
        stem_(layout_.in_channels, layout_.plan.stem, rng) {
    if (static_cast<int>(chosen_.size()) != layout_.num_positions())
      fail_data("network: ", chosen_.size(), " blocks for ", layout_.num_positions(),
                " positions");
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      std::int64_t ch = layout_.plan.stage[static_cast<std::size_t>(s)];
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position)
        blocks_.push_back(std::make_unique<CDBlock<T>>(
            ch, chosen_[static_cast<std::size_t>(position)], rng));
      if (s + 1 < layout_.num_stages())
        downsamples_.push_back(std::make_unique<DownSample<T>>(
            ch, layout_.plan.stage[static_cast<std::size_t>(s + 1)], rng));
    }
    proj_ = std::make_unique<HeadProjection<T>>(layout_.plan.stage.back(), layout_.plan.embed, rng);
  }

  Taps forward(const Tensor<T>& x) {
    layout_.validate_input(x.dim(2), x.dim(3));
    Tensor<T> y = stem_.forward(x);
    Taps taps;
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position)
        y = blocks_[static_cast<std::size_t>(position)]->forward(y);
      if (s == layout_.num_stages() - 2) taps.fmap2 = y;
      if (s + 1 < layout_.num_stages()) y = downsamples_[static_cast<std::size_t>(s)]->forward(y);
    }
    taps.fmap3 = proj_->forward(y);
    if (!taps.fmap2.defined()) taps.fmap2 = taps.fmap3;
    return taps;
  }

  void set_training(bool on) {
    stem_.set_training(on);
    for (auto& b : blocks_) b->set_training(on);
    proj_->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) {
    stem_.visit_state(prefix + "stem.", visit);
    int position = 0;
    for (int s = 0; s < layout_.num_stages(); ++s) {
      for (int b = 0; b < layout_.blocks_per_stage; ++b, ++position)
        blocks_[static_cast<std::size_t>(position)]->visit_state(prefix + str("s", s + 1, ".b", b, "."),
                                                                 visit);
      if (s + 1 < layout_.num_stages())
        downsamples_[static_cast<std::size_t>(s)]->visit_state(prefix + str("ds", s + 1, "."),
                                                               visit);
    }
    proj_->visit_state(prefix + "proj.", visit);
  }

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

  const MacroLayout& layout() const { return layout_; }
  const std::vector<CandidateSpec>& chosen() const { return chosen_; }
  std::int64_t embed_dim() const { return layout_.plan.embed; }
  std::int64_t stage2_channels() const {
    auto& st = layout_.plan.stage;
    return st.size() >= 2 ? st[st.size() - 2] : st.back();
  }

 private:
  MacroLayout layout_;
  std::vector<CandidateSpec> chosen_;
  Stem<T> stem_;
  std::vector<std::unique_ptr<CDBlock<T>>> blocks_;
  std::vector<std::unique_ptr<DownSample<T>>> downsamples_;
  std::unique_ptr<HeadProjection<T>> proj_;
};

template <typename T>
BackboneNetwork<T> build_network(const ArchitectureDescriptor& d, Rng& rng) {
  validate(d);
  std::vector<CandidateSpec> chosen(d.layers.begin(), d.layers.end());
  return BackboneNetwork<T>(layout_for(d), std::move(chosen), rng);
}

// Copies supernet parameters into a derived network: branch `selection[i]` of
// MBlock i maps onto derived block i, everything else maps by name.
template <typename T, typename Net>
void copy_supernet_params(SuperNet<T>& supernet, const std::vector<int>& selection, Net& net) {
  std::unordered_map<std::string, Tensor<T>*> source;
  supernet.visit_state("", [&](const std::string& name, Tensor<T>& t, bool) {
    source[name] = &t;
  });
  const int blocks_per_stage = supernet.layout().blocks_per_stage;
  // s<i>.b<j>.rest -> s<i>.m<j>.br<sel>.rest; all other names map verbatim.
  auto translate = [&](const std::string& name) -> std::string {
    auto digit = [&](std::size_t i) {
      return i < name.size() && std::isdigit(static_cast<unsigned char>(name[i]));
    };
    if (name.empty() || name[0] != 's' || !digit(1)) return name;
    std::size_t i = 1;
    while (digit(i)) ++i;
    if (i + 1 >= name.size() || name[i] != '.' || name[i + 1] != 'b' || !digit(i + 2)) return name;
    std::size_t j = i + 2;
    std::size_t k = j;
    while (digit(k)) ++k;
    if (k >= name.size() || name[k] != '.') return name;
    int stage = std::stoi(name.substr(1, i - 1));
    int block = std::stoi(name.substr(j, k - j));
    int position = (stage - 1) * blocks_per_stage + block;
    return str("s", stage, ".m", block, ".br",
               selection[static_cast<std::size_t>(position)], ".") +
           name.substr(k + 1);
  };
  net.visit_state("", [&](const std::string& name, Tensor<T>& t, bool) {
    std::string key = translate(name);
    auto it = source.find(key);
    if (it == source.end()) fail_data("copy_supernet_params: no source tensor for ", key);
    if (it->second->shape() != t.shape())
      fail_shape("copy_supernet_params: shape mismatch for ", key);
    t.data() = it->second->data();
  });
}

// ---------------------------------------------------------------------------
// Analyzer: closed-form parameter/MAC counts, depth, receptive fields, and
// space cardinality, computed from shapes without building the network.

struct LayerAnalysis {
  int position = 0;
  CandidateSpec spec;
  std::int64_t channels = 0;
  std::int64_t receptive_field = 0;
};

struct AnalysisReport {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  int depth = 0;
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;
  std::int64_t embed_dim = 0;
  std::int64_t space_size = 0;
  std::vector<LayerAnalysis> layers;
};

namespace detail {

struct RfState {
  std::int64_t rf = 1;
  std::int64_t jump = 1;
};

}  // namespace detail

// MAC counts cover convolution and linear maps (the gate bottleneck counts
// once per image). Parameter counts cover trainable tensors only, matching
// enumeration over the built network.
inline AnalysisReport analyze(const ArchitectureDescriptor& d, std::int64_t base_h = 256,
                              std::int64_t base_w = 128, std::int64_t reduction = 4) {
  validate(d);
  MacroLayout layout = layout_for(d);
  AnalysisReport rep;
  rep.depth = d.depth();
  rep.space_size = space_cardinality(d.kind);
  rep.embed_dim = layout.plan.embed;
  rep.input_h = scaled_resolution(base_h, d.gamma);
  rep.input_w = scaled_resolution(base_w, d.gamma);
  layout.validate_input(rep.input_h, rep.input_w);

  std::int64_t h = rep.input_h, w = rep.input_w;
  detail::RfState rf;

  // Stem: 7x7 s2 conv (+BN), 3x3 s2 max pool.
  rep.params += layout.plan.stem * layout.in_channels * 49 + 2 * layout.plan.stem;
  h = (h + 6 - 7) / 2 + 1;
  w = (w + 6 - 7) / 2 + 1;
  rep.macs += layout.plan.stem * layout.in_channels * 49 * h * w;
  rf.rf += 6 * rf.jump;
  rf.jump *= 2;
  h = (h + 2 - 3) / 2 + 1;
  w = (w + 2 - 3) / 2 + 1;
  rf.rf += 2 * rf.jump;
  rf.jump *= 2;

  int position = 0;
  for (int s = 0; s < layout.num_stages(); ++s) {
    std::int64_t c = layout.plan.stage[static_cast<std::size_t>(s)];
    std::int64_t m = std::max<std::int64_t>(c / reduction, 1);
    std::int64_t c4 = c / reduction;
    for (int b = 0; b < layout.blocks_per_stage; ++b, ++position) {
      const CandidateSpec& spec = d.layers[static_cast<std::size_t>(position)];
      for (int rep_i = 0; rep_i < spec.r; ++rep_i) {
        // squeeze + restore
        rep.params += c * m + m * c;
        rep.macs += (c * m + m * c) * h * w;
        // lite branches
        for (int k : {spec.k1, spec.k2}) {
          std::int64_t units = k / 2;
          rep.params += units * (m * m + 9 * m + 2 * m);
          rep.macs += units * (m * m + 9 * m) * h * w;
        }
        // fusion gate bottleneck
        rep.params += c * c4 + c4 + c4 * m + m;
        rep.macs += c * c4 + c4 * m;
        // receptive field grows along the wider branch
        rf.rf += static_cast<std::int64_t>(std::max(spec.k1, spec.k2) - 1) * rf.jump;
      }
      rep.layers.push_back(LayerAnalysis{position, spec, c, rf.rf});
    }
    if (s + 1 < layout.num_stages()) {
      std::int64_t cn = layout.plan.stage[static_cast<std::size_t>(s + 1)];
      rep.params += c * cn;
      rep.macs += c * cn * h * w;
      h /= 2;
      w /= 2;
      rf.rf += rf.jump;
      rf.jump *= 2;
    }
  }
  rep.params += layout.plan.stage.back() * layout.plan.embed + 2 * layout.plan.embed;
  rep.macs += layout.plan.stage.back() * layout.plan.embed * h * w;
  return rep;
}

}  // namespace cdsnas

#endif  // CDSNAS_SPACE_HPP_

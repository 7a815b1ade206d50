#ifndef CDSNAS_NECK_HPP_
#define CDSNAS_NECK_HPP_

#include <memory>
#include <string>
#include <vector>

#include "cdsnas/nn.hpp"

namespace cdsnas {

// BLNeck: global-feature neck whose fully-connected bridge maps the
// triplet-constrained embedding space into the softmax-constrained one.
// FNeck: stripe-local heads on the shallower fmap2 tap. BNNeck: ablation
// variant with batch normalization in place of the bridge. All heads are
// train-only; inference keeps the triplet-side features.
enum class NeckVariant { FBLNeck, BLNeckOnly, BNNeck };

inline const char* to_string(NeckVariant v) {
  switch (v) {
    case NeckVariant::FBLNeck: return "fblneck";
    case NeckVariant::BLNeckOnly: return "blneck";
    case NeckVariant::BNNeck: return "bnneck";
  }
  return "?";
}

inline NeckVariant neck_variant_from(const std::string& s) {
  if (s == "fblneck") return NeckVariant::FBLNeck;
  if (s == "blneck") return NeckVariant::BLNeckOnly;
  if (s == "bnneck") return NeckVariant::BNNeck;
  fail_data("unknown neck variant '", s, "' (expected fblneck, blneck or bnneck)");
}

struct NeckConfig {
  std::int64_t global_width = 512;
  int partitions = 2;
  std::int64_t stripe_width = 128;
  std::int64_t classes = 0;
  NeckVariant variant = NeckVariant::FBLNeck;

  int active_partitions() const {
    return variant == NeckVariant::FBLNeck ? partitions : 0;
  }

  std::int64_t inference_width() const {
    return global_width + static_cast<std::int64_t>(active_partitions()) * stripe_width;
  }
};

template <typename T>
struct FeatureBundle {
  Tensor<T> f_tri1;
  Tensor<T> logits1;
  std::vector<Tensor<T>> f_tri2;
  std::vector<Tensor<T>> logits2;
};

enum class LossMode { Search, Train };

template <typename T>
struct LossReport {
  double l_tri1 = 0;
  double l_id1 = 0;
  double l_tri2 = 0;
  double l_id2 = 0;
  double total_value = 0;
  Tensor<T> total;
};

// Dense bridge (width-preserving) + BN + ReLU ahead of the classifier.
template <typename T>
class BLNeck : public Module<T> {
 public:
  BLNeck(std::int64_t width, std::int64_t classes, Rng& rng)
      : bridge_(width, width, rng), bridge_bn_(width), cls_(width, classes, rng) {}

  // Returns logits; the caller already holds the pooled triplet feature.
  Tensor<T> forward(const Tensor<T>& f_tri) override {
    return cls_.forward(relu(bridge_bn_.forward(bridge_.forward(f_tri))));
  }

  void set_training(bool on) override { bridge_bn_.set_training(on); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    bridge_.visit_state(prefix + "bridge.", visit);
    bridge_bn_.visit_state(prefix + "bridge_bn.", visit);
    cls_.visit_state(prefix + "cls.", visit);
  }

 private:
  Linear<T> bridge_;
  BatchNorm<T> bridge_bn_;
  Linear<T> cls_;
};

// Ablation bridge: batch normalization only.
template <typename T>
class BNNeckHead : public Module<T> {
 public:
  BNNeckHead(std::int64_t width, std::int64_t classes, Rng& rng)
      : bridge_bn_(width), cls_(width, classes, rng) {}

  Tensor<T> forward(const Tensor<T>& f_tri) override {
    return cls_.forward(bridge_bn_.forward(f_tri));
  }

  void set_training(bool on) override { bridge_bn_.set_training(on); }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) override {
    bridge_bn_.visit_state(prefix + "bridge_bn.", visit);
    cls_.visit_state(prefix + "cls.", visit);
  }

 private:
  BatchNorm<T> bridge_bn_;
  Linear<T> cls_;
};

// Squeezes fmap2 to the stripe width, pools each horizontal stripe, and runs
// an independent BLNeck-style head per stripe.
template <typename T>
class FNeck {
 public:
  FNeck(std::int64_t in_channels, const NeckConfig& cfg, Rng& rng)
      : partitions_(cfg.partitions), squeeze_(in_channels, cfg.stripe_width, rng) {
    for (int s = 0; s < partitions_; ++s)
      heads_.push_back(std::make_unique<BLNeck<T>>(cfg.stripe_width, cfg.classes, rng));
  }

  // Triplet-side stripe features only (the inference path).
  std::vector<Tensor<T>> stripe_features(const Tensor<T>& fmap2) {
    const std::int64_t h = fmap2.dim(2);
    if (h % partitions_ != 0)
      fail_shape("fneck: height ", h, " not divisible by ", partitions_, " partitions");
    Tensor<T> squeezed = squeeze_.forward(fmap2);
    std::vector<Tensor<T>> out;
    const std::int64_t band = h / partitions_;
    for (int s = 0; s < partitions_; ++s)
      out.push_back(stripe_avg_pool(squeezed, s * band, (s + 1) * band));
    return out;
  }

  std::vector<Tensor<T>> logits(const std::vector<Tensor<T>>& stripe_feats) {
    std::vector<Tensor<T>> out;
    for (int s = 0; s < partitions_; ++s)
      out.push_back(heads_[static_cast<std::size_t>(s)]->forward(
          stripe_feats[static_cast<std::size_t>(s)]));
    return out;
  }

  void set_training(bool on) {
    for (auto& h : heads_) h->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) {
    squeeze_.visit_state(prefix + "squeeze.", visit);
    for (int s = 0; s < partitions_; ++s)
      heads_[static_cast<std::size_t>(s)]->visit_state(prefix + str("stripe", s, "."), visit);
  }

  int partitions() const { return partitions_; }

 private:
  int partitions_;
  Conv1x1<T> squeeze_;
  std::vector<std::unique_ptr<BLNeck<T>>> heads_;
};

// The composed training head over the backbone taps. fmap3 feeds the global
// neck, fmap2 feeds the stripe neck when the variant keeps it.
template <typename T>
class NeckHead {
 public:
  NeckHead(const NeckConfig& cfg, std::int64_t fmap2_channels, Rng& rng) : cfg_(cfg) {
    if (cfg.classes < 1) fail_data("neck: class count must be positive");
    if (cfg.variant == NeckVariant::BNNeck)
      bn_head_ = std::make_unique<BNNeckHead<T>>(cfg.global_width, cfg.classes, rng);
    else
      bl_head_ = std::make_unique<BLNeck<T>>(cfg.global_width, cfg.classes, rng);
    if (cfg.active_partitions() > 0)
      fneck_ = std::make_unique<FNeck<T>>(fmap2_channels, cfg, rng);
  }

  const NeckConfig& config() const { return cfg_; }

  // Training path: triplet features plus classifier logits everywhere.
  FeatureBundle<T> forward(const Tensor<T>& fmap2, const Tensor<T>& fmap3) {
    FeatureBundle<T> out;
    out.f_tri1 = global_avg_pool(fmap3);
    out.logits1 = bl_head_ ? bl_head_->forward(out.f_tri1) : bn_head_->forward(out.f_tri1);
    if (fneck_) {
      out.f_tri2 = fneck_->stripe_features(fmap2);
      out.logits2 = fneck_->logits(out.f_tri2);
    }
    return out;
  }

  // Inference path: the concatenated triplet-side features; no classifier or
  // bridge tensors are touched.
  Tensor<T> inference_embedding(const Tensor<T>& fmap2, const Tensor<T>& fmap3) {
    Tensor<T> embed = global_avg_pool(fmap3);
    if (fneck_)
      for (Tensor<T>& s : fneck_->stripe_features(fmap2)) embed = concat_dim1(embed, s);
    return embed;
  }

  void set_training(bool on) {
    if (bl_head_) bl_head_->set_training(on);
    if (bn_head_) bn_head_->set_training(on);
    if (fneck_) fneck_->set_training(on);
  }

  void visit_state(const std::string& prefix, const StateVisitor<T>& visit) {
    if (bl_head_) bl_head_->visit_state(prefix + "global.", visit);
    if (bn_head_) bn_head_->visit_state(prefix + "global.", visit);
    if (fneck_) fneck_->visit_state(prefix + "fneck.", visit);
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    visit_state("neck.", [&](const std::string&, Tensor<T>& t, bool is_param) {
      if (is_param) out.push_back(&t);
    });
    return out;
  }

  std::int64_t num_params() {
    std::int64_t n = 0;
    for (Tensor<T>* p : parameters()) n += p->numel();
    return n;
  }

 private:
  NeckConfig cfg_;
  std::unique_ptr<BLNeck<T>> bl_head_;
  std::unique_ptr<BNNeckHead<T>> bn_head_;
  std::unique_ptr<FNeck<T>> fneck_;
};

// Bridge and classifier tensors are train-only; everything else (including
// the FNeck squeeze) is needed to produce inference embeddings.
inline bool neck_head_tensor(const std::string& name) {
  return name.find(".bridge") != std::string::npos || name.find(".cls.") != std::string::npos;
}

// Search mode: global terms only. Train mode: all four terms, stripe terms
// averaged across stripes. `expected_stripes` guards against a bundle whose
// stripe features went missing (>= 0 enforces an exact count).
template <typename T>
LossReport<T> compose_loss(const FeatureBundle<T>& bundle, const std::vector<int>& labels,
                           LossMode mode, T margin = T(0.3), int expected_stripes = -1) {
  LossReport<T> rep;
  if (!bundle.f_tri1.defined() || !bundle.logits1.defined())
    fail_data("compose_loss: bundle is missing global features");
  if (mode == LossMode::Train && expected_stripes >= 0 &&
      static_cast<int>(bundle.f_tri2.size()) != expected_stripes)
    fail_data("compose_loss: expected ", expected_stripes, " stripe features, got ",
              bundle.f_tri2.size());
  Tensor<T> ltri1 = triplet_batch_hard(bundle.f_tri1, labels, margin);
  Tensor<T> lid1 = softmax_cross_entropy(bundle.logits1, labels);
  rep.l_tri1 = static_cast<double>(ltri1.item());
  rep.l_id1 = static_cast<double>(lid1.item());
  rep.total = add(ltri1, lid1);
  if (mode == LossMode::Train && !bundle.f_tri2.empty()) {
    if (bundle.logits2.size() != bundle.f_tri2.size())
      fail_data("compose_loss: stripe features and logits disagree");
    Tensor<T> ltri2, lid2;
    for (std::size_t s = 0; s < bundle.f_tri2.size(); ++s) {
      Tensor<T> t = triplet_batch_hard(bundle.f_tri2[s], labels, margin);
      Tensor<T> c = softmax_cross_entropy(bundle.logits2[s], labels);
      ltri2 = ltri2.defined() ? add(ltri2, t) : t;
      lid2 = lid2.defined() ? add(lid2, c) : c;
    }
    T inv = T(1) / static_cast<T>(bundle.f_tri2.size());
    ltri2 = affine(ltri2, inv, T(0));
    lid2 = affine(lid2, inv, T(0));
    rep.l_tri2 = static_cast<double>(ltri2.item());
    rep.l_id2 = static_cast<double>(lid2.item());
    rep.total = add(rep.total, add(ltri2, lid2));
  } else if (mode == LossMode::Train && !bundle.logits2.empty()) {
    fail_data("compose_loss: stripe logits without stripe features");
  }
  rep.total_value = static_cast<double>(rep.total.item());
  return rep;
}

}  // namespace cdsnas

#endif  // CDSNAS_NECK_HPP_

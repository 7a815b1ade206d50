#ifndef CDSNAS_DATA_HPP_
#define CDSNAS_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cdsnas/rng.hpp"
#include "cdsnas/tensor.hpp"

namespace cdsnas {

// ---------------------------------------------------------------------------
// Synthetic combined-pattern retrieval task. An identity is a pair of blobs
// of characteristic sizes with fixed colors; instances jitter the blob
// positions over a noise background, so retrieval has to key on the
// size/color combination rather than absolute position.

struct SyntheticSpec {
  int identities = 20;
  int instances = 8;
  std::int64_t channels = 3;
  std::int64_t height = 64;
  std::int64_t width = 32;
  double noise = 0.1;
  int jitter = 3;
  std::uint64_t seed = 0;
};

template <typename T>
struct Dataset {
  std::int64_t channels = 0, height = 0, width = 0;
  std::vector<std::vector<T>> images;
  std::vector<int> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
  std::int64_t image_numel() const { return channels * height * width; }

  int num_identities() const {
    int top = -1;
    for (int l : labels) top = std::max(top, l);
    return top + 1;
  }

  Tensor<T> batch(const std::vector<int>& indices) const {
    if (indices.empty()) fail_data("dataset: empty batch");
    Tensor<T> out({static_cast<std::int64_t>(indices.size()), channels, height, width});
    auto& ov = out.data();
    std::size_t stride = static_cast<std::size_t>(image_numel());
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy_n(images[static_cast<std::size_t>(indices[i])].begin(), stride,
                  ov.begin() + static_cast<std::ptrdiff_t>(i * stride));
    return out;
  }

  std::vector<int> batch_labels(const std::vector<int>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }
};

namespace detail {

template <typename T>
void draw_blob(std::vector<T>& img, std::int64_t c, std::int64_t h, std::int64_t w, double cy,
               double cx, int diameter, const double color[3]) {
  double radius = static_cast<double>(diameter) / 2.0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      if (dy * dy + dx * dx > radius * radius) continue;
      for (std::int64_t ch = 0; ch < c; ++ch)
        img[static_cast<std::size_t>((ch * h + y) * w + x)] =
            static_cast<T>(color[ch % 3]);
    }
}

}  // namespace detail

// Each identity owns a blob-size pair from {3,5,7,9} and a color signature;
// instances jitter the positions and add background noise. Deterministic
// under the spec seed.
template <typename T>
Dataset<T> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.identities < 1 || spec.instances < 1) fail_data("synthetic: empty spec");
  const std::int64_t h = spec.height, w = spec.width, c = spec.channels;
  static const int kDiameters[4] = {3, 5, 7, 9};
  Rng rng(spec.seed);
  Dataset<T> ds;
  ds.channels = c;
  ds.height = h;
  ds.width = w;
  for (int id = 0; id < spec.identities; ++id) {
    int d1 = kDiameters[rng.uniform_int(0, 3)];
    int d2 = kDiameters[rng.uniform_int(0, 3)];
    if (d1 > std::min(h, w) || d2 > std::min(h, w))
      fail_data("synthetic: blob diameter exceeds image size ", h, "x", w);
    double color1[3], color2[3];
    for (int k = 0; k < 3; ++k) {
      color1[k] = rng.uniform(0.3, 1.0);
      color2[k] = rng.uniform(0.3, 1.0);
    }
    // Blob 1 lives in the top half, blob 2 in the bottom half; margins keep
    // the jittered blob inside the image.
    auto center_range = [&](int diameter, double lo, double hi) {
      double margin = diameter / 2.0 + spec.jitter + 1.0;
      double a = lo + margin, b = hi - margin;
      if (a > b) fail_data("synthetic: blob of diameter ", diameter, " with jitter ", spec.jitter,
                           " does not fit between rows ", lo, " and ", hi);
      return std::pair<double, double>(a, b);
    };
    auto [y1lo, y1hi] = center_range(d1, 0.0, static_cast<double>(h) / 2.0);
    auto [y2lo, y2hi] = center_range(d2, static_cast<double>(h) / 2.0, static_cast<double>(h));
    auto [x1lo, x1hi] = center_range(d1, 0.0, static_cast<double>(w));
    double base_y1 = rng.uniform(y1lo, y1hi);
    double base_y2 = rng.uniform(y2lo, y2hi);
    double base_x1 = rng.uniform(x1lo, x1hi);
    auto [x2lo, x2hi] = center_range(d2, 0.0, static_cast<double>(w));
    double base_x2 = rng.uniform(x2lo, x2hi);
    for (int inst = 0; inst < spec.instances; ++inst) {
      std::vector<T> img(static_cast<std::size_t>(c * h * w), T(0));
      if (spec.noise > 0)
        for (auto& v : img) v = static_cast<T>(rng.normal(0.0, spec.noise));
      auto jit = [&]() {
        return spec.jitter > 0 ? static_cast<double>(rng.uniform_int(-spec.jitter, spec.jitter))
                               : 0.0;
      };
      detail::draw_blob(img, c, h, w, base_y1 + jit(), base_x1 + jit(), d1, color1);
      detail::draw_blob(img, c, h, w, base_y2 + jit(), base_x2 + jit(), d2, color2);
      ds.images.push_back(std::move(img));
      ds.labels.push_back(id);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PK sampling: each batch holds P distinct identities with K instances each;
// an epoch walks a shuffled identity round-robin so every identity appears.

class PkSampler {
 public:
  PkSampler(const std::vector<int>& labels, int p, int k, std::uint64_t seed)
      : p_(p), k_(k), rng_(seed) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      by_identity_[labels[i]].push_back(static_cast<int>(i));
    if (p < 2 || k < 2)
      fail_data("pk_sampler: need P >= 2 and K >= 2, got P=", p, " K=", k);
    if (static_cast<int>(by_identity_.size()) < p)
      fail_data("pk_sampler: ", by_identity_.size(), " identities < P=", p);
    for (const auto& [id, idx] : by_identity_)
      if (static_cast<int>(idx.size()) < k)
        fail_data("pk_sampler: identity ", id, " has ", idx.size(), " instances < K=", k);
    for (const auto& [id, idx] : by_identity_) identity_order_.push_back(id);
  }

  int batch_size() const { return p_ * k_; }

  int batches_per_epoch() const {
    auto n = static_cast<int>(identity_order_.size());
    return (n + p_ - 1) / p_;
  }

  // P*K indices; reshuffles the identity round-robin at each epoch boundary.
  // P positions of a permutation are always distinct identities; the final
  // batch of an epoch may wrap into the front of the same permutation.
  std::vector<int> next_batch() {
    if (cursor_ == 0) rng_.shuffle(identity_order_);
    std::vector<int> chosen;
    std::size_t n = identity_order_.size();
    for (int i = 0; i < p_; ++i)
      chosen.push_back(identity_order_[(cursor_ + static_cast<std::size_t>(i)) % n]);
    cursor_ += static_cast<std::size_t>(p_);
    if (cursor_ >= n) cursor_ = 0;
    std::vector<int> batch;
    for (int id : chosen) {
      std::vector<int> pool = by_identity_.at(id);
      rng_.shuffle(pool);
      for (int i = 0; i < k_; ++i) batch.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return batch;
  }

 private:
  int p_, k_;
  Rng rng_;
  std::map<int, std::vector<int>> by_identity_;
  std::vector<int> identity_order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Random-erasing augmentation: with probability `prob`, fill a random
// rectangle whose area fraction falls in [area_lo, area_hi] with random
// values. Returns whether a rectangle was erased.

template <typename T>
bool random_erasing(std::vector<T>& image, std::int64_t c, std::int64_t h, std::int64_t w,
                    Rng& rng, double prob, double area_lo = 0.02, double area_hi = 0.4) {
  if (prob < 0.0 || prob > 1.0) fail_data("random_erasing: probability ", prob, " outside [0,1]");
  if (prob == 0.0 || rng.uniform() >= prob) return false;
  const double total = static_cast<double>(h * w);
  for (int attempt = 0; attempt < 20; ++attempt) {
    double frac = rng.uniform(area_lo, area_hi);
    double aspect = rng.uniform(0.3, 1.0 / 0.3);
    auto eh = static_cast<std::int64_t>(std::sqrt(frac * total * aspect) + 0.5);
    auto ew = static_cast<std::int64_t>(std::sqrt(frac * total / aspect) + 0.5);
    if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
    double realized = static_cast<double>(eh * ew) / total;
    if (realized < area_lo || realized > area_hi) continue;
    std::int64_t y0 = rng.uniform_int(0, h - eh);
    std::int64_t x0 = rng.uniform_int(0, w - ew);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = y0; y < y0 + eh; ++y)
        for (std::int64_t x = x0; x < x0 + ew; ++x)
          image[static_cast<std::size_t>((ch * h + y) * w + x)] = static_cast<T>(rng.uniform());
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Retrieval evaluation: Euclidean ranking, rank-1 and mean average precision.

struct RetrievalIndex {
  std::vector<std::vector<double>> query;
  std::vector<int> query_labels;
  std::vector<std::vector<double>> gallery;
  std::vector<int> gallery_labels;
  // When query and gallery are the same set, a query never matches itself
  // (by index, so duplicate features elsewhere still count).
  bool same_set = false;
};

struct RetrievalMetrics {
  double rank1 = 0;
  double mean_ap = 0;
};

// AP per query: precision accumulated at every relevant hit, divided by the
// number of relevant gallery items. Queries with no relevant item are
// skipped.
inline RetrievalMetrics evaluate_retrieval(const RetrievalIndex& index) {
  if (index.query.empty() || index.gallery.empty())
    fail_data("evaluate_retrieval: empty query or gallery set");
  if (index.query.size() != index.query_labels.size() ||
      index.gallery.size() != index.gallery_labels.size())
    fail_data("evaluate_retrieval: labels do not match embeddings");
  const std::size_t dim = index.query[0].size();
  for (const auto& g : index.gallery)
    if (g.size() != dim) fail_data("evaluate_retrieval: embedding width mismatch");

  double rank1 = 0, ap_sum = 0;
  std::int64_t counted = 0;
  std::vector<std::size_t> order(index.gallery.size());
  std::vector<double> dist(index.gallery.size());
  for (std::size_t q = 0; q < index.query.size(); ++q) {
    for (std::size_t g = 0; g < index.gallery.size(); ++g) {
      double acc = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        double d = index.query[q][k] - index.gallery[g][k];
        acc += d * d;
      }
      dist[g] = std::sqrt(acc);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    int relevant = 0;
    for (std::size_t g = 0; g < index.gallery.size(); ++g)
      if (!(index.same_set && g == q) && index.gallery_labels[g] == index.query_labels[q])
        ++relevant;
    if (relevant == 0) continue;
    ++counted;
    int hits = 0, seen = 0;
    double ap = 0;
    bool first = true;
    for (std::size_t oi : order) {
      if (index.same_set && oi == q) continue;
      ++seen;
      bool match = index.gallery_labels[oi] == index.query_labels[q];
      if (first) {
        if (match) rank1 += 1.0;
        first = false;
      }
      if (match) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(seen);
      }
    }
    ap_sum += ap / static_cast<double>(relevant);
  }
  if (counted == 0) fail_data("evaluate_retrieval: no query has a relevant gallery item");
  return {rank1 / static_cast<double>(counted), ap_sum / static_cast<double>(counted)};
}

}  // namespace cdsnas

#endif  // CDSNAS_DATA_HPP_

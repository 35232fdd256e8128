#pragma once

// Loading, stratified splitting and augmentation of manifest datasets.
// Images are (3, H, W) float tensors in [0, 1]; no normalisation is applied.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "hysense/errors.hpp"
#include "hysense/image_io.hpp"
#include "hysense/manifest.hpp"
#include "hysense/rng.hpp"
#include "hysense/tensor.hpp"

namespace hysense {

using Image = Tensor<float>;  // (3, H, W)

struct Sample {
  Image image;
  int label = 0;
  ManifestRow meta;
};

inline Image image_to_tensor(const Image8& img) {
  Image t({3, img.height, img.width});
  auto d = t.data();
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) d[ch * plane + p] = img.rgb[p * 3 + ch] / 255.0f;
  return t;
}

namespace detail {

inline float bilinear_clamped(std::span<const float> plane, std::size_t h, std::size_t w, double y,
                              double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

// Bilinear resample of the window [top, top + win_h) x [left, left + win_w)
// (in pixel units, half-pixel centres) onto an out_h x out_w grid.
inline Image resample_window(const Image& img, double top, double left, double win_h, double win_w,
                             std::size_t out_h, std::size_t out_w) {
  require_rank(img, 3, "image");
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  Image out({ch, out_h, out_w});
  auto src = img.data();
  auto dst = out.data();
  const double sy = win_h / static_cast<double>(out_h), sx = win_w / static_cast<double>(out_w);
  for (std::size_t c = 0; c < ch; ++c) {
    auto plane = src.subspan(c * h * w, h * w);
    for (std::size_t r = 0; r < out_h; ++r)
      for (std::size_t q = 0; q < out_w; ++q)
        dst[(c * out_h + r) * out_w + q] =
            bilinear_clamped(plane, h, w, top + (r + 0.5) * sy - 0.5, left + (q + 0.5) * sx - 0.5);
  }
  return out;
}

}  // namespace detail

/// Separable bilinear resize with half-pixel centre alignment and edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  require_rank(img, 3, "image");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be at least 1x1");
  if (out_h == img.dim(1) && out_w == img.dim(2)) return img;
  return detail::resample_window(img, 0, 0, static_cast<double>(img.dim(1)),
                                 static_cast<double>(img.dim(2)), out_h, out_w);
}

inline Image flip_horizontal(const Image& img) {
  Image out = Image::zeros_like(img);
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto s = img.data();
  auto d = out.data();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q) d[(c * h + r) * w + q] = s[(c * h + r) * w + (w - 1 - q)];
  return out;
}

inline Image flip_vertical(const Image& img) {
  Image out = Image::zeros_like(img);
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto s = img.data();
  auto d = out.data();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(s.begin() + static_cast<std::ptrdiff_t>((c * h + (h - 1 - r)) * w), w,
                  d.begin() + static_cast<std::ptrdiff_t>((c * h + r) * w));
  return out;
}

/// Rotation about the image centre (counter-clockwise on screen for positive
/// angles) by inverse mapping; reads outside the image clamp to the border.
inline Image rotate(const Image& img, double degrees) {
  require_rank(img, 3, "image");
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  Image out = Image::zeros_like(img);
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t c = 0; c < ch; ++c) {
    auto plane = src.subspan(c * h * w, h * w);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q) {
        const double dx = static_cast<double>(q) - cx, dy = static_cast<double>(r) - cy;
        // Screen y points down, so a visual CCW rotation maps out -> src with +a.
        const double sx = cx + ca * dx - sa * dy;
        const double sy = cy + sa * dx + ca * dy;
        dst[(c * h + r) * w + q] = detail::bilinear_clamped(plane, h, w, sy, sx);
      }
  }
  return out;
}

struct AugmentConfig {
  double crop_area_min = 0.85;
  double crop_area_max = 1.0;
  double rotation_deg = 45.0;  // angle drawn from [-rotation_deg, rotation_deg]
  double p_crop = 0.5;
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rotate = 0.5;
  std::size_t target_h = 224;
  std::size_t target_w = 224;

  static AugmentConfig none(std::size_t h, std::size_t w) {
    AugmentConfig c;
    c.p_crop = c.p_hflip = c.p_vflip = c.p_rotate = 0.0;
    c.target_h = h;
    c.target_w = w;
    return c;
  }

  void validate() const {
    for (double p : {p_crop, p_hflip, p_vflip, p_rotate})
      if (!(p >= 0 && p <= 1)) throw ConfigError("augmentation probabilities must lie in [0, 1]");
    if (!(crop_area_min > 0 && crop_area_min <= crop_area_max && crop_area_max <= 1))
      throw ConfigError("crop area range must satisfy 0 < min <= max <= 1");
    if (rotation_deg < 0) throw ConfigError("rotation range must be non-negative");
    if (target_h < 1 || target_w < 1) throw ConfigError("augmentation target must be at least 1x1");
  }
};

// Which transforms fired, for frequency checks.
struct AugmentTrace {
  bool crop = false, hflip = false, vflip = false, rotate = false;
  double crop_area = 1.0, angle_deg = 0.0;
};

/// Crop, horizontal flip, vertical flip, rotation; each applied independently
/// with its own probability. The result is always target-sized.
inline Image augment_image(const Image& img, const AugmentConfig& cfg, Rng& rng,
                           AugmentTrace* trace = nullptr) {
  AugmentTrace t;
  Image x = img;
  if ((t.crop = rng.bernoulli(cfg.p_crop))) {
    t.crop_area = rng.uniform(cfg.crop_area_min, cfg.crop_area_max);
    const double side = std::sqrt(t.crop_area);
    const double ch = side * static_cast<double>(x.dim(1)), cw = side * static_cast<double>(x.dim(2));
    const double top = rng.uniform(0.0, static_cast<double>(x.dim(1)) - ch);
    const double left = rng.uniform(0.0, static_cast<double>(x.dim(2)) - cw);
    x = detail::resample_window(x, top, left, ch, cw, cfg.target_h, cfg.target_w);
  } else {
    x = resize_bilinear(x, cfg.target_h, cfg.target_w);
  }
  if ((t.hflip = rng.bernoulli(cfg.p_hflip))) x = flip_horizontal(x);
  if ((t.vflip = rng.bernoulli(cfg.p_vflip))) x = flip_vertical(x);
  if ((t.rotate = rng.bernoulli(cfg.p_rotate))) {
    t.angle_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
    x = rotate(x, t.angle_deg);
  }
  if (trace) *trace = t;
  return x;
}

inline Sample augment_sample(const Sample& s, const AugmentConfig& cfg, Rng& rng,
                             AugmentTrace* trace = nullptr) {
  return {augment_image(s.image, cfg, rng, trace), s.label, s.meta};
}

/// Loads every manifest image, resized to (h, w) when it differs.
inline std::vector<Sample> load_samples(const Manifest& m, std::size_t h, std::size_t w) {
  std::vector<Sample> out;
  out.reserve(m.rows.size());
  for (const auto& row : m.rows) {
    Image img = image_to_tensor(read_png(m.root / row.path));
    out.push_back({resize_bilinear(img, h, w), static_cast<int>(row.kudo), row});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct Fold {
  std::vector<std::size_t> train, val, test;
};

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

/// Per class, a seeded shuffle is cut into k chunks whose sizes differ by at
/// most one (larger chunks first); fold f tests on chunk f of every class.
/// The rest of each class is reshuffled and ceil(20%) of it becomes validation.
inline FoldPlan stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed,
                                 double val_fraction = 0.2) {
  if (k < 2) throw ConfigError("stratified k-fold needs k >= 2");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("validation fraction must lie in [0, 1)");
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw DataError("negative class label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  FoldPlan plan{k, seed, std::vector<Fold>(k)};
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < k)
      throw DataError("stratification error: class " + std::to_string(c) + " has " +
                      std::to_string(idx.size()) + " samples, fewer than k = " + std::to_string(k));
    Rng rng(derive_seed(seed, {c}));
    rng.shuffle(idx);
    const std::size_t base = idx.size() / k, extra = idx.size() % k;
    std::vector<std::vector<std::size_t>> chunks(k);
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const std::size_t len = base + (f < extra ? 1 : 0);
      chunks[f].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                       idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
    for (std::size_t f = 0; f < k; ++f) {
      auto& fold = plan.folds[f];
      fold.test.insert(fold.test.end(), chunks[f].begin(), chunks[f].end());
      std::vector<std::size_t> rest;
      for (std::size_t g = 0; g < k; ++g)
        if (g != f) rest.insert(rest.end(), chunks[g].begin(), chunks[g].end());
      Rng vrng(derive_seed(seed, {c, f + 1}));
      vrng.shuffle(rest);
      const auto n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(rest.size()) - 1e-9));
      fold.val.insert(fold.val.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
      fold.train.insert(fold.train.end(), rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
    }
  }
  for (auto& fold : plan.folds) {
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
  }
  return plan;
}

/// Single stratified 80/20 holdout: fold 0 of a 5-fold plan.
inline Fold holdout_split(std::span<const int> labels, std::uint64_t seed) {
  return stratified_kfold(labels, 5, seed).folds.front();
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor<float> images;  // (N, 3, H, W)
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

inline Tensor<float> stack_images(std::span<const Image* const> images) {
  if (images.empty()) throw ShapeError("cannot stack zero images");
  const Shape s = images.front()->shape();
  Tensor<float> out({images.size(), s[0], s[1], s[2]});
  const std::size_t each = images.front()->size();
  auto d = out.data();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("stack_images: inconsistent image shapes");
    std::copy(images[i]->data().begin(), images[i]->data().end(),
              d.begin() + static_cast<std::ptrdiff_t>(i * each));
  }
  return out;
}

/// Yields batches over `indices` in a seeded shuffled order (shuffle_seed 0
/// keeps the given order); the last batch may be short. When `augment` is set
/// each sample gets its own augmentation stream derived from the seed and the
/// sample index.
class BatchIterator {
 public:
  BatchIterator(const std::vector<Sample>& samples, std::vector<std::size_t> indices,
                std::size_t batch_size, std::uint64_t shuffle_seed,
                std::optional<AugmentConfig> augment = std::nullopt)
      : samples_(samples), order_(std::move(indices)), batch_size_(batch_size), seed_(shuffle_seed),
        augment_(std::move(augment)) {
    if (batch_size_ < 1) throw ConfigError("batch size must be at least 1");
    for (auto i : order_)
      if (i >= samples_.size()) throw DataError("batch index out of range");
    if (augment_) augment_->validate();
    if (seed_ != 0) {
      Rng rng(derive_seed(seed_, {0}));
      rng.shuffle(order_);
    }
  }

  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

  std::optional<Batch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(pos_ + batch_size_, order_.size());
    Batch b;
    std::vector<Image> owned;
    owned.reserve(end - pos_);
    std::vector<const Image*> ptrs;
    for (std::size_t p = pos_; p < end; ++p) {
      const std::size_t i = order_[p];
      if (augment_) {
        Rng rng(derive_seed(seed_, {1, i}));
        owned.push_back(augment_image(samples_[i].image, *augment_, rng));
        ptrs.push_back(&owned.back());
      } else {
        ptrs.push_back(&samples_[i].image);
      }
      b.labels.push_back(samples_[i].label);
      b.indices.push_back(i);
    }
    b.images = stack_images(ptrs);
    pos_ = end;
    return b;
  }

 private:
  const std::vector<Sample>& samples_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::optional<AugmentConfig> augment_;
  std::size_t pos_ = 0;
};

}  // namespace hysense

#pragma once

// Central finite-difference checks of every backward pass, in 64-bit.
//
// Each layer check uses the scalar loss L = sum(r * y) with fixed random r,
// whose gradient with respect to the layer output is r itself. The whole
// model check uses the softmax cross-entropy of a small reduced-width network.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hysense/layers.hpp"
#include "hysense/network.hpp"
#include "hysense/rng.hpp"
#include "hysense/tensor.hpp"

namespace hysense {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;
  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  double model_step = 1e-6;
  double layer_tolerance = 1e-4;
  double model_tolerance = 1e-3;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  std::size_t model_samples_per_tensor = 10;
  std::uint64_t seed = 7;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Compares `analytic` against central differences of `loss` taken by
/// perturbing each listed element of `x` in place.
inline void compare(GradCheckResult& res, const std::function<double()>& loss, std::span<double> x,
                    std::span<const double> analytic, const std::vector<std::size_t>& which, double h,
                    double floor, const std::function<bool(std::size_t)>& skip = {}) {
  for (std::size_t i : which) {
    if (skip && skip(i)) continue;
    const double orig = x[i];
    x[i] = orig + h;
    const double up = loss();
    x[i] = orig - h;
    const double down = loss();
    x[i] = orig;
    const double numeric = (up - down) / (2 * h);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i], numeric, floor));
    ++res.checked;
  }
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

inline GradCheckResult check_conv2d(const std::string& name, const ConvGeometry& g, const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {1, g.kernel, g.stride, g.padding, g.dilation}));
  auto x = detail::random_tensor({2, 3, 8, 8}, rng);
  auto w = detail::random_tensor({4, 3, g.kernel, g.kernel}, rng, 0.5);
  auto b = detail::random_tensor({4}, rng);
  const auto y = conv2d_forward(x, w, &b, g);
  const auto r = detail::random_tensor(y.shape(), rng);
  const auto grads = conv2d_backward(r, x, w, &b, g);
  auto loss = [&] { return detail::weighted_sum(conv2d_forward(x, w, &b, g), r); };
  GradCheckResult res{name, 0, o.layer_tolerance, 0};
  detail::compare(res, loss, x.data(), grads.grad_input.data(), detail::all_indices(x.size()), o.step, o.floor);
  detail::compare(res, loss, w.data(), grads.grad_weight.data(), detail::all_indices(w.size()), o.step, o.floor);
  detail::compare(res, loss, b.data(), grads.grad_bias.data(), detail::all_indices(b.size()), o.step, o.floor);
  return res;
}

inline GradCheckResult check_batchnorm2d(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {2}));
  auto x = detail::random_tensor({3, 4, 4, 4}, rng, 2.0);
  auto params = BatchNormParams<double>::identity(4);
  params.gamma = detail::random_tensor({4}, rng);
  params.beta = detail::random_tensor({4}, rng);
  BatchNormCache<double> cache;
  auto scratch = params;
  const auto y = batchnorm2d_forward(x, scratch, Mode::training, &cache);
  const auto r = detail::random_tensor(y.shape(), rng);
  const auto grads = batchnorm2d_backward(r, params, cache);
  auto loss = [&] {
    auto p = params;  // running statistics do not affect the training output
    return detail::weighted_sum(batchnorm2d_forward(x, p, Mode::training), r);
  };
  GradCheckResult res{"batchnorm2d", 0, o.layer_tolerance, 0};
  detail::compare(res, loss, x.data(), grads.grad_input.data(), detail::all_indices(x.size()), o.step, o.floor);
  detail::compare(res, loss, params.gamma.data(), grads.grad_gamma.data(), detail::all_indices(4), o.step, o.floor);
  detail::compare(res, loss, params.beta.data(), grads.grad_beta.data(), detail::all_indices(4), o.step, o.floor);
  return res;
}

inline GradCheckResult check_relu(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {3}));
  auto x = detail::random_tensor({2, 3, 4, 4}, rng);
  const auto r = detail::random_tensor(x.shape(), rng);
  const auto gx = relu_backward(r, x);
  auto loss = [&] { return detail::weighted_sum(relu_forward(x), r); };
  GradCheckResult res{"relu", 0, o.layer_tolerance, 0};
  // Finite differences straddling the kink are meaningless.
  detail::compare(res, loss, x.data(), gx.data(), detail::all_indices(x.size()), o.step, o.floor,
                  [&](std::size_t i) { return std::abs(x[i]) < 1e-3; });
  return res;
}

inline GradCheckResult check_adaptive_avgpool(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {4}));
  auto x = detail::random_tensor({2, 3, 7, 5}, rng);
  const auto y = adaptive_avgpool2d_forward(x, 3, 3);
  const auto r = detail::random_tensor(y.shape(), rng);
  const auto gx = adaptive_avgpool2d_backward(r, x.shape());
  auto loss = [&] { return detail::weighted_sum(adaptive_avgpool2d_forward(x, 3, 3), r); };
  GradCheckResult res{"adaptive_avgpool2d", 0, o.layer_tolerance, 0};
  detail::compare(res, loss, x.data(), gx.data(), detail::all_indices(x.size()), o.step, o.floor);
  return res;
}

inline GradCheckResult check_avgpool(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {5}));
  const ConvGeometry g{3, 2, 1, 1};
  auto x = detail::random_tensor({2, 3, 7, 7}, rng);
  const auto y = avgpool2d_forward(x, g);
  const auto r = detail::random_tensor(y.shape(), rng);
  const auto gx = avgpool2d_backward(r, x.shape(), g);
  auto loss = [&] { return detail::weighted_sum(avgpool2d_forward(x, g), r); };
  GradCheckResult res{"avgpool2d", 0, o.layer_tolerance, 0};
  detail::compare(res, loss, x.data(), gx.data(), detail::all_indices(x.size()), o.step, o.floor);
  return res;
}

inline GradCheckResult check_residual_add(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {6}));
  auto a = detail::random_tensor({2, 3, 4, 4}, rng);
  auto b = detail::random_tensor({2, 3, 4, 4}, rng);
  const auto r = detail::random_tensor(a.shape(), rng);
  const auto [ga, gb] = residual_add_backward(r);
  auto loss = [&] { return detail::weighted_sum(residual_add(a, b), r); };
  GradCheckResult res{"residual_add", 0, o.layer_tolerance, 0};
  detail::compare(res, loss, a.data(), ga.data(), detail::all_indices(a.size()), o.step, o.floor);
  detail::compare(res, loss, b.data(), gb.data(), detail::all_indices(b.size()), o.step, o.floor);
  return res;
}

inline GradCheckResult check_softmax_cross_entropy(const GradCheckOptions& o) {
  Rng rng(derive_seed(o.seed, {7}));
  auto z = detail::random_tensor({5, 4}, rng, 2.0);
  const std::vector<int> labels{0, 3, 1, 2, 3};
  const auto lr = softmax_cross_entropy(z, labels);
  auto loss = [&] { return softmax_cross_entropy(z, labels).loss; };
  GradCheckResult res{"softmax_cross_entropy", 0, o.layer_tolerance, 0};
  detail::compare(res, loss, z.data(), lr.grad_logits.data(), detail::all_indices(z.size()), o.step, o.floor);
  return res;
}

/// Reduced-width proposed model on 8x8 inputs with one block per module.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.input_height = c.input_width = 8;
  c.stem_stride = 1;
  c.stem_channels = {4, 4, 6};
  c.module_channels = {6, 8, 10};
  c.blocks_per_module = 1;
  return c;
}

/// Training-mode cross-entropy gradient of a whole model, compared at up to
/// `model_samples_per_tensor` sampled elements of every parameter tensor.
inline GradCheckResult check_model(const GradCheckOptions& o, ModelKind kind = ModelKind::proposed,
                                   const ModelConfig& cfg = gradcheck_model_config()) {
  Rng rng(derive_seed(o.seed, {8}));
  auto model = build_model<double>(kind, cfg, derive_seed(o.seed, {9}));
  // Small random shifts keep batch-norm and bias parameters away from their
  // symmetric initial values.
  for (auto& e : model.parameters())
    if (!e.buffer)
      for (auto& v : e.value->data()) v += 0.1 * rng.normal();
  const auto x = detail::random_tensor({3, cfg.input_channels, cfg.input_height, cfg.input_width}, rng);
  const std::vector<int> labels{0, 2, 3};
  auto loss = [&] { return softmax_cross_entropy(model.forward(x, Mode::training), labels).loss; };
  const auto lr = softmax_cross_entropy(model.forward(x, Mode::training), labels);
  const auto table = model.backward(lr.grad_logits);
  GradCheckResult res{"model", 0, o.model_tolerance, 0};
  for (auto& e : model.parameters()) {
    if (e.buffer || !e.trainable) continue;
    const Tensor<double> analytic = *table.at(e.name);
    std::vector<std::size_t> which;
    const std::size_t n = e.value->size();
    if (n <= o.model_samples_per_tensor) which = detail::all_indices(n);
    else
      for (std::size_t k = 0; k < o.model_samples_per_tensor; ++k) which.push_back(rng.below(n));
    detail::compare(res, loss, e.value->data(), analytic.data(), which, o.model_step, o.floor);
  }
  return res;
}

inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& o = {}) {
  return {
      check_conv2d("conv2d", ConvGeometry{3, 1, 1, 1}, o),
      check_conv2d("conv2d_dilated", ConvGeometry{3, 1, 2, 2}, o),
      check_conv2d("conv2d_strided", ConvGeometry{3, 2, 1, 1}, o),
      check_conv2d("conv2d_1x1", ConvGeometry{1, 2, 0, 1}, o),
      check_batchnorm2d(o),
      check_relu(o),
      check_adaptive_avgpool(o),
      check_avgpool(o),
      check_residual_add(o),
      check_softmax_cross_entropy(o),
      check_model(o),
  };
}

inline void print_gradcheck_table(std::ostream& os, const std::vector<GradCheckResult>& results) {
  os << "check                      max_rel_error  tolerance  checked  status\n";
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s %13.3e  %9.0e  %7zu  %s\n", r.name.c_str(), r.max_rel_error,
                  r.tolerance, r.checked, r.passed() ? "PASS" : "FAIL");
    os << line;
  }
}

}  // namespace hysense

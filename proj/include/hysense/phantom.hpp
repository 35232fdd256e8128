#pragma once

// Procedural polyp-phantom textures and their tactile-sensor rendering.
//
// Geometry is in micrometres. Heights are relative to the undeformed gel
// surface (0); pits are negative. Image coordinates: x grows with the column
// index, y with the row index, pixel (r, c) is centred at (c * pitch, r * pitch).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "hysense/errors.hpp"
#include "hysense/image_io.hpp"
#include "hysense/manifest.hpp"
#include "hysense/rng.hpp"

namespace hysense {

struct MaterialProfile {
  Material material;
  const char* shore_hardness;
  double imprint_scale;  // multiplies pit depth at the fixed contact force
};

inline constexpr std::array<MaterialProfile, 4> kDefaultMaterials{{
    {Material::DM400, "A 1-2", 0.55},
    {Material::DM600, "A 30-40", 0.75},
    {Material::A40, "A 40", 0.85},
    {Material::A70, "A 70", 1.00},
}};

struct ClassAxes {
  double major_um;
  double minor_um;
};

// Nominal pit axes. Asteroid axes are the outer star diameter. Gyrus ridges
// have no pit axes; their width follows from the band-pass wavelength.
inline ClassAxes default_axes(KudoClass k) {
  switch (k) {
    case KudoClass::R: return {400.0, 400.0};
    case KudoClass::A: return {450.0, 450.0};
    case KudoClass::O: return {500.0, 250.0};
    case KudoClass::G: return {300.0, 300.0};
  }
  return {400.0, 400.0};
}

struct PhantomSpec {
  KudoClass kudo = KudoClass::R;
  std::uint64_t variation_seed = 0;
  Material material = Material::A70;
  Orientation orientation = Orientation::full;
  double spacing_um = 600.0;
  double pit_depth_um = 500.0;
  double jitter_min_um = 100.0;
  double jitter_max_um = 150.0;
  double wall_um = 100.0;
  ClassAxes axes = default_axes(KudoClass::R);
  std::array<double, 4> imprint_scales{0.55, 0.75, 0.85, 1.00};  // indexed by Material

  static PhantomSpec make(KudoClass k, std::uint64_t seed, Material m = Material::A70,
                          Orientation o = Orientation::full) {
    PhantomSpec s;
    s.kudo = k;
    s.variation_seed = seed;
    s.material = m;
    s.orientation = o;
    s.axes = default_axes(k);
    return s;
  }

  double imprint_scale() const { return imprint_scales[static_cast<int>(material)]; }

  void validate() const {
    if (!(pit_depth_um > 0)) throw ConfigError("phantom: pit depth must be positive");
    if (!(spacing_um > 0)) throw ConfigError("phantom: spacing must be positive");
    if (kudo != KudoClass::G && !(spacing_um > axes.major_um))
      throw ConfigError("phantom: spacing must exceed the major axis");
    if (jitter_min_um < 0 || jitter_max_um < jitter_min_um || !(jitter_max_um < spacing_um / 2))
      throw ConfigError("phantom: jitter bounds must satisfy 0 <= min <= max < spacing/2");
    if (!(wall_um > 0)) throw ConfigError("phantom: wall width must be positive");
    for (std::size_t i = 1; i < imprint_scales.size(); ++i)
      if (!(imprint_scales[i - 1] < imprint_scales[i]) || !(imprint_scales[i - 1] > 0) ||
          imprint_scales[i] > 1.0)
        throw ConfigError("phantom: imprint scales must increase with hardness within (0, 1]");
  }
};

struct Heightmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double pixel_pitch_um = 25.0;
  std::vector<double> h;

  Heightmap() = default;
  Heightmap(std::size_t r, std::size_t c, double pitch) : rows(r), cols(c), pixel_pitch_um(pitch), h(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return h[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return h[r * cols + c]; }
  double min() const { return *std::min_element(h.begin(), h.end()); }

  Heightmap crop_center(std::size_t out_rows, std::size_t out_cols) const {
    if (out_rows > rows || out_cols > cols) throw ConfigError("heightmap crop larger than source");
    Heightmap out(out_rows, out_cols, pixel_pitch_um);
    const std::size_t r0 = (rows - out_rows) / 2, c0 = (cols - out_cols) / 2;
    for (std::size_t r = 0; r < out_rows; ++r)
      for (std::size_t c = 0; c < out_cols; ++c) out.at(r, c) = at(r0 + r, c0 + c);
    return out;
  }

  friend bool operator==(const Heightmap&, const Heightmap&) = default;
};

// A lattice site after jitter, exposed for geometry checks.
struct PitSite {
  double x_um, y_um;
  double major_um, minor_um;
  double angle_rad;
  int star_points;  // 0 for non-star pits
};

namespace detail {

// Depth fraction (0 at the rim, 1 on the floor) for a point that sits
// `inside_um` inward from the pit boundary, with a cosine wall.
inline double wall_profile(double inside_um, double wall_um) {
  if (inside_um <= 0.0) return 0.0;
  if (inside_um >= wall_um) return 1.0;
  return 0.5 - 0.5 * std::cos(std::numbers::pi * inside_um / wall_um);
}

// Radius of a k-pointed star polygon along direction phi (relative to the
// star's own rotation): straight edges between alternating outer and inner
// vertices.
inline double star_radius(double phi, int points, double outer, double inner) {
  const double sector = std::numbers::pi / points;
  double a = std::fmod(phi, 2.0 * sector);
  if (a < 0) a += 2.0 * sector;
  double r1 = outer, r2 = inner, a1 = 0.0, a2 = sector;
  if (a > sector) {
    r1 = inner;
    r2 = outer;
    a1 = sector;
    a2 = 2.0 * sector;
  }
  return r1 * r2 * std::sin(a2 - a1) / (r1 * std::sin(a - a1) + r2 * std::sin(a2 - a));
}

inline std::vector<double> gaussian_kernel(double sigma_px) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_px)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma_px * sigma_px));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable "valid" Gaussian blur: output shrinks by the kernel radius on each side.
inline std::vector<double> blur_valid(const std::vector<double>& in, std::size_t rows,
                                      std::size_t cols, const std::vector<double>& k,
                                      std::size_t out_rows, std::size_t out_cols,
                                      std::size_t offset) {
  const std::size_t radius = k.size() / 2;
  std::vector<double> tmp(rows * out_cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < out_cols; ++c) {
      double s = 0.0;
      const std::size_t base = c + offset - radius;
      for (std::size_t i = 0; i < k.size(); ++i) s += k[i] * in[r * cols + base + i];
      tmp[r * out_cols + c] = s;
    }
  std::vector<double> out(out_rows * out_cols, 0.0);
  for (std::size_t r = 0; r < out_rows; ++r)
    for (std::size_t c = 0; c < out_cols; ++c) {
      double s = 0.0;
      const std::size_t base = r + offset - radius;
      for (std::size_t i = 0; i < k.size(); ++i) s += k[i] * tmp[(base + i) * out_cols + c];
      out[r * out_cols + c] = s;
    }
  return out;
}

inline void check_resolution(const PhantomSpec& spec, std::size_t rows, std::size_t cols,
                             double pitch) {
  if (!(pitch > 0)) throw ConfigError("phantom: pixel pitch must be positive");
  if (pitch > 100.0)
    throw DataError("phantom sampling error: pixel pitch " + std::to_string(pitch) +
                    " um exceeds 100 um, pit features would alias");
  const double min_extent = 5.0 * spec.spacing_um;
  if (static_cast<double>(rows) * pitch < min_extent || static_cast<double>(cols) * pitch < min_extent)
    throw DataError("phantom sampling error: field of view must cover at least 5x5 feature spacings");
}

}  // namespace detail

/// Jittered lattice sites for the pit classes (R, A, O). Each site moves by
/// half a jitter draw in a random direction (so neighbour spacing deviates by
/// up to the full jitter) and its size changes by a signed jitter draw on the
/// major axis, with the minor axis scaled to keep the class aspect ratio.
inline std::vector<PitSite> lattice_sites(const PhantomSpec& spec, double width_um,
                                          double height_um) {
  Rng rng(derive_seed(spec.variation_seed, {1}));
  const double s = spec.spacing_um;
  const int nx = static_cast<int>(std::ceil(width_um / s)) + 1;
  const int ny = static_cast<int>(std::ceil(height_um / s)) + 1;
  std::vector<PitSite> sites;
  for (int j = -1; j < ny; ++j)
    for (int i = -1; i < nx; ++i) {
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double shift = 0.5 * rng.uniform(spec.jitter_min_um, spec.jitter_max_um);
      const double size_sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double size_jitter = size_sign * rng.uniform(spec.jitter_min_um, spec.jitter_max_um);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const int points = rng.bernoulli(0.5) ? 5 : 6;
      PitSite p;
      p.x_um = (i + 0.5) * s + shift * std::cos(dir);
      p.y_um = (j + 0.5) * s + shift * std::sin(dir);
      p.major_um = std::max(spec.axes.major_um + size_jitter, 2.0 * spec.wall_um);
      p.minor_um = p.major_um * spec.axes.minor_um / spec.axes.major_um;
      p.angle_rad = spec.kudo == KudoClass::R ? 0.0 : angle;
      p.star_points = spec.kudo == KudoClass::A ? points : 0;
      sites.push_back(p);
    }
  return sites;
}

/// Class-specific texture on a rows x cols grid. Pit floors sit at exactly
/// -pit_depth. Fully determined by the spec (including variation_seed).
inline Heightmap synthesize_heightmap(const PhantomSpec& spec, std::size_t rows, std::size_t cols,
                                      double pixel_pitch_um) {
  spec.validate();
  detail::check_resolution(spec, rows, cols, pixel_pitch_um);
  Heightmap hm(rows, cols, pixel_pitch_um);
  const double depth = spec.pit_depth_um;
  const double pitch = pixel_pitch_um;

  if (spec.kudo == KudoClass::G) {
    // Labyrinthine ridges: difference-of-Gaussians band-pass noise peaked at
    // wavelength = spacing, thresholded at its median.
    const double lambda_px = spec.spacing_um / pitch;
    const double sigma1 = lambda_px * std::sqrt(std::log(4.0) / 6.0) / std::numbers::pi;
    const double sigma2 = 2.0 * sigma1;
    const auto k1 = detail::gaussian_kernel(sigma1);
    const auto k2 = detail::gaussian_kernel(sigma2);
    const std::size_t pad = k2.size() / 2;
    const std::size_t pr = rows + 2 * pad, pc = cols + 2 * pad;
    Rng rng(derive_seed(spec.variation_seed, {2}));
    std::vector<double> noise(pr * pc);
    for (auto& v : noise) v = rng.normal();
    const auto b1 = detail::blur_valid(noise, pr, pc, k1, rows, cols, pad);
    const auto b2 = detail::blur_valid(noise, pr, pc, k2, rows, cols, pad);
    std::vector<double> f(rows * cols);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = b1[i] - b2[i];
    auto sorted = f;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];
    // Transition half-width chosen so the wall spans ~wall_um on average.
    double grad_sum = 0.0;
    std::size_t grad_n = 0;
    for (std::size_t r = 1; r + 1 < rows; ++r)
      for (std::size_t c = 1; c + 1 < cols; ++c) {
        const double gx = (f[r * cols + c + 1] - f[r * cols + c - 1]) / (2 * pitch);
        const double gy = (f[(r + 1) * cols + c] - f[(r - 1) * cols + c]) / (2 * pitch);
        grad_sum += std::hypot(gx, gy);
        ++grad_n;
      }
    const double tau = 0.5 * spec.wall_um * grad_sum / static_cast<double>(std::max<std::size_t>(grad_n, 1));
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double u = (tau - (f[i] - median)) / (2.0 * tau);
      hm.h[i] = -depth * detail::wall_profile(std::clamp(u, 0.0, 1.0), 1.0);
    }
    return hm;
  }

  const auto sites = lattice_sites(spec, cols * pitch, rows * pitch);
  for (const auto& p : sites) {
    const double half = p.major_um / 2.0;
    const double reach = half + pitch;
    const auto c0 = static_cast<long>(std::floor((p.x_um - reach) / pitch));
    const auto c1 = static_cast<long>(std::ceil((p.x_um + reach) / pitch));
    const auto r0 = static_cast<long>(std::floor((p.y_um - reach) / pitch));
    const auto r1 = static_cast<long>(std::ceil((p.y_um + reach) / pitch));
    const double ca = std::cos(p.angle_rad), sa = std::sin(p.angle_rad);
    for (long r = std::max(0L, r0); r <= std::min<long>(static_cast<long>(rows) - 1, r1); ++r)
      for (long c = std::max(0L, c0); c <= std::min<long>(static_cast<long>(cols) - 1, c1); ++c) {
        const double dx = c * pitch - p.x_um, dy = r * pitch - p.y_um;
        // rho: normalised radius, 1 on the pit boundary, level sets are
        // scaled copies of the outline.
        double rho;
        if (spec.kudo == KudoClass::A) {
          const double dist = std::hypot(dx, dy);
          const double phi = std::atan2(dy, dx) - p.angle_rad;
          rho = dist / detail::star_radius(phi, p.star_points, half, 0.45 * half);
        } else {
          const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
          const double b = p.minor_um / 2.0;
          rho = std::sqrt((u * u) / (half * half) + (v * v) / (b * b));
        }
        const double frac = detail::wall_profile(half * (1.0 - rho), spec.wall_um);
        if (frac > 0.0) {
          double& h = hm.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
          h = std::min(h, -depth * frac);
        }
      }
  }
  return hm;
}

/// Material and orientation effects at the fixed contact force. Full contact
/// scales heights by the material imprint scale. Partial contact further
/// multiplies by a half-plane ramp: zero over a seed-chosen 25-45% of the
/// image, rising linearly to full imprint across a band of 20% of the width.
inline Heightmap apply_contact(const Heightmap& hm, const PhantomSpec& spec) {
  Heightmap out = hm;
  const double scale = spec.imprint_scale();
  if (spec.orientation == Orientation::full) {
    if (scale != 1.0)
      for (auto& v : out.h) v *= scale;
    return out;
  }
  Rng rng(derive_seed(spec.variation_seed, {3}));
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double lost_fraction = rng.uniform(0.25, 0.45);
  const double ux = std::cos(theta), uy = std::sin(theta);
  std::vector<double> proj(hm.h.size());
  for (std::size_t r = 0; r < hm.rows; ++r)
    for (std::size_t c = 0; c < hm.cols; ++c)
      proj[r * hm.cols + c] = static_cast<double>(c) * ux + static_cast<double>(r) * uy;
  auto sorted = proj;
  const auto q = static_cast<std::size_t>(lost_fraction * static_cast<double>(sorted.size()));
  std::nth_element(sorted.begin(), sorted.begin() + q, sorted.end());
  const double edge = sorted[q];
  const double band = 0.2 * static_cast<double>(hm.cols);
  for (std::size_t i = 0; i < out.h.size(); ++i) {
    const double mask = std::clamp((proj[i] - edge) / band, 0.0, 1.0);
    out.h[i] *= scale * mask;
  }
  return out;
}

/// Three coloured directional lights (R, G, B) at distinct azimuths sharing
/// one elevation; single-bounce Lambertian shading.
struct RenderConfig {
  std::array<double, 3> light_azimuths_deg{0.0, 120.0, 240.0};
  double light_elevation_deg = 30.0;
  std::array<double, 3> ambient{0.25, 0.25, 0.25};
  double diffuse_gain = 0.6;

  void validate() const {
    const auto& a = light_azimuths_deg;
    if (a[0] == a[1] || a[1] == a[2] || a[0] == a[2])
      throw ConfigError("render: light azimuths must be distinct");
    for (double v : ambient)
      if (v < 0 || v > 1) throw ConfigError("render: ambient must lie in [0, 1]");
  }
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Image8 render_tactile_image(const Heightmap& hm, const RenderConfig& cfg) {
  cfg.validate();
  Image8 img(hm.rows, hm.cols);
  const double el = cfg.light_elevation_deg * std::numbers::pi / 180.0;
  std::array<std::array<double, 3>, 3> light{};
  for (int ch = 0; ch < 3; ++ch) {
    const double az = cfg.light_azimuths_deg[ch] * std::numbers::pi / 180.0;
    light[ch] = {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
  }
  auto derivative = [&](std::size_t i0, std::size_t i1, double v0, double v1) {
    return (v1 - v0) / (static_cast<double>(i1 - i0) * hm.pixel_pitch_um);
  };
  for (std::size_t r = 0; r < hm.rows; ++r)
    for (std::size_t c = 0; c < hm.cols; ++c) {
      const std::size_t cl = c > 0 ? c - 1 : c, cr = c + 1 < hm.cols ? c + 1 : c;
      const std::size_t ru = r > 0 ? r - 1 : r, rd = r + 1 < hm.rows ? r + 1 : r;
      const double hx = cr > cl ? derivative(cl, cr, hm.at(r, cl), hm.at(r, cr)) : 0.0;
      const double hy = rd > ru ? derivative(ru, rd, hm.at(ru, c), hm.at(rd, c)) : 0.0;
      const double norm = std::sqrt(hx * hx + hy * hy + 1.0);
      const double n[3] = {-hx / norm, -hy / norm, 1.0 / norm};
      for (int ch = 0; ch < 3; ++ch) {
        const double lambert = std::max(0.0, n[0] * light[ch][0] + n[1] * light[ch][1] + n[2] * light[ch][2]);
        img.at(r, c, ch) = quantize_unit(cfg.ambient[ch] + cfg.diffuse_gain * lambert);
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct GenConfig {
  std::array<std::size_t, 4> counts{57, 57, 55, 60};  // A, G, O, R
  std::size_t image_size = 224;
  double pixel_pitch_um = 0.0;  // 0: max(25, 3200 / image_size)
  std::uint64_t master_seed = 0;
  // Share of partial-contact samples; 80 of 229 by default.
  double partial_fraction = 80.0 / 229.0;
  std::vector<Material> materials{kAllMaterials.begin(), kAllMaterials.end()};
  std::array<double, 4> imprint_scales{0.55, 0.75, 0.85, 1.00};
  RenderConfig render;

  double effective_pitch() const {
    return pixel_pitch_um > 0 ? pixel_pitch_um : std::max(25.0, 3200.0 / static_cast<double>(image_size));
  }
  // Generation grid before the centre crop (256 for a 224 output).
  std::size_t generation_size() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(image_size) * 256.0 / 224.0));
  }
  std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
};

/// The PhantomSpec for sample `index` of a generation run. Samples are
/// ordered class-major (all A, then G, O, R); materials cycle round-robin and
/// partial-contact samples are spread evenly across the index range.
inline PhantomSpec sample_spec(const GenConfig& cfg, std::size_t index) {
  std::size_t k = 0, start = 0;
  while (k < 4 && index >= start + cfg.counts[k]) start += cfg.counts[k++];
  if (k == 4) throw ConfigError("sample index out of range");
  const std::size_t n = cfg.total();
  const auto partial_total = static_cast<std::size_t>(std::lround(cfg.partial_fraction * static_cast<double>(n)));
  const bool partial = (index + 1) * partial_total / n > index * partial_total / n;
  auto spec = PhantomSpec::make(kAllClasses[k], derive_seed(cfg.master_seed, {index}),
                                cfg.materials.at(index % cfg.materials.size()),
                                partial ? Orientation::partial : Orientation::full);
  spec.imprint_scales = cfg.imprint_scales;
  return spec;
}

inline Image8 render_sample(const GenConfig& cfg, const PhantomSpec& spec) {
  const std::size_t g = cfg.generation_size();
  auto hm = synthesize_heightmap(spec, g, g, cfg.effective_pitch());
  hm = apply_contact(hm, spec).crop_center(cfg.image_size, cfg.image_size);
  return render_tactile_image(hm, cfg.render);
}

/// Writes one PNG per sample plus manifest.csv into out_dir and returns the
/// manifest. Output is a pure function of the configuration.
inline Manifest generate_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir) {
  for (auto c : cfg.counts)
    if (c < 1) throw ConfigError("generate_dataset: every class needs at least one sample");
  if (cfg.materials.empty()) throw ConfigError("generate_dataset: no materials");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw IoError("cannot create output directory " + out_dir.string());
  Manifest m;
  m.root = out_dir;
  for (std::size_t i = 0; i < cfg.total(); ++i) {
    const auto spec = sample_spec(cfg, i);
    char name[64];
    std::snprintf(name, sizeof name, "img_%05zu_%c.png", i, class_letter(spec.kudo));
    write_png(out_dir / name, render_sample(cfg, spec));
    m.rows.push_back({name, spec.kudo, spec.material, spec.orientation, spec.variation_seed});
  }
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace hysense

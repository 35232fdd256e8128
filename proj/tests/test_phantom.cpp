#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hysense/phantom.hpp"
#include "oracles.hpp"

using namespace hysense;
using oracle::Component;
using oracle::components;
using oracle::interior_pits;
using oracle::mean_neighbour_spacing;
using oracle::median;
using oracle::pit_mask;
namespace fs = std::filesystem;

namespace {

Heightmap bilinear_rotate(const Heightmap& hm, double deg) {
  Heightmap out(hm.rows, hm.cols, hm.pixel_pitch_um);
  const double a = deg * std::numbers::pi / 180.0, ca = std::cos(a), sa = std::sin(a);
  const double cy = (static_cast<double>(hm.rows) - 1) / 2, cx = (static_cast<double>(hm.cols) - 1) / 2;
  for (std::size_t r = 0; r < hm.rows; ++r)
    for (std::size_t c = 0; c < hm.cols; ++c) {
      const double x = static_cast<double>(c) - cx, y = static_cast<double>(r) - cy;
      const double sx = ca * x + sa * y + cx, sy = -sa * x + ca * y + cy;
      const double fx = std::clamp(sx, 0.0, static_cast<double>(hm.cols - 1));
      const double fy = std::clamp(sy, 0.0, static_cast<double>(hm.rows - 1));
      const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
      const std::size_t x1 = std::min(x0 + 1, hm.cols - 1), y1 = std::min(y0 + 1, hm.rows - 1);
      const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
      out.at(r, c) = (1 - ty) * ((1 - tx) * hm.at(y0, x0) + tx * hm.at(y0, x1)) +
                     ty * ((1 - tx) * hm.at(y1, x0) + tx * hm.at(y1, x1));
    }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Heightmap, JitterFreeRoundPitsSitOnExactLattice) {
  auto spec = PhantomSpec::make(KudoClass::R, 1);
  spec.jitter_min_um = spec.jitter_max_um = 0;
  const auto hm = synthesize_heightmap(spec, 240, 240, 25.0);
  EXPECT_EQ(hm.min(), -500.0);
  for (std::size_t r = 12; r < 240; r += 24)
    for (std::size_t c = 12; c < 240; c += 24) EXPECT_EQ(hm.at(r, c), -500.0) << r << "," << c;
  const auto pits = components(pit_mask(hm, -250.0), hm.rows, hm.cols);
  EXPECT_EQ(pits.size(), 100u);
  for (const auto& p : pits) {
    EXPECT_NEAR(std::fmod(p.cx, 24.0), 12.0, 1e-9);
    EXPECT_NEAR(std::fmod(p.cy, 24.0), 12.0, 1e-9);
  }
  // Midway between pits the gel is untouched.
  EXPECT_EQ(hm.at(24, 24), 0.0);
}

TEST(Heightmap, PitFloorsAreExactlyAtPitDepth) {
  for (auto k : kAllClasses)
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto hm = synthesize_heightmap(PhantomSpec::make(k, seed), 256, 256, 25.0);
      EXPECT_EQ(hm.min(), -500.0) << class_letter(k);
      EXPECT_LE(*std::max_element(hm.h.begin(), hm.h.end()), 0.0);
      for (double v : hm.h) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(Heightmap, OvalPitsHaveTwoToOneAxes) {
  std::vector<double> ratios;
  for (std::uint64_t seed = 1; ratios.size() < 100; ++seed) {
    const auto hm = synthesize_heightmap(PhantomSpec::make(KudoClass::O, seed), 256, 256, 25.0);
    for (const auto& p : interior_pits(hm))
      ratios.push_back(p.axis_ratio());
  }
  const double med = median(ratios);
  EXPECT_NEAR(med, 2.0, 0.3) << ratios.size() << " pits";
}

TEST(Heightmap, RoundPitsAreIsotropicAndStarsAreNot) {
  std::vector<double> round_ratio, round_fill, star_fill;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const auto& p : interior_pits(synthesize_heightmap(PhantomSpec::make(KudoClass::R, seed), 256, 256, 25.0))) {
      round_ratio.push_back(p.axis_ratio());
      round_fill.push_back(p.fill());
    }
    for (const auto& p : interior_pits(synthesize_heightmap(PhantomSpec::make(KudoClass::A, seed), 256, 256, 25.0)))
      star_fill.push_back(p.fill());
  }
  EXPECT_LT(median(round_ratio), 1.1);
  EXPECT_GT(median(round_fill), 0.8);
  EXPECT_LT(median(star_fill), 0.65);
}

TEST(Heightmap, MeanSpacingNearSixHundredMicrons) {
  for (auto k : {KudoClass::R, KudoClass::A, KudoClass::O}) {
    double sum = 0;
    std::size_t pits = 0;
    const int seeds = 3;
    for (int seed = 1; seed <= seeds; ++seed) {
      const auto hm = synthesize_heightmap(PhantomSpec::make(k, static_cast<std::uint64_t>(seed)), 320, 320, 25.0);
      const auto found = interior_pits(hm);
      pits += found.size();
      sum += mean_neighbour_spacing(found, 320, 320, 40) * 25.0;
    }
    EXPECT_GE(pits, 100u);
    EXPECT_NEAR(sum / seeds, 600.0, 60.0) << class_letter(k);
  }
}

TEST(Heightmap, SameSeedIsBitIdenticalOtherSeedMovesPits) {
  for (auto k : kAllClasses) {
    const auto a = synthesize_heightmap(PhantomSpec::make(k, 5), 200, 200, 25.0);
    const auto b = synthesize_heightmap(PhantomSpec::make(k, 5), 200, 200, 25.0);
    const auto c = synthesize_heightmap(PhantomSpec::make(k, 6), 200, 200, 25.0);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
  }
  const auto s5 = lattice_sites(PhantomSpec::make(KudoClass::R, 5), 5000, 5000);
  const auto s6 = lattice_sites(PhantomSpec::make(KudoClass::R, 6), 5000, 5000);
  EXPECT_NE(s5[10].x_um, s6[10].x_um);
}

TEST(Heightmap, JitterStaysWithinBounds) {
  const auto spec = PhantomSpec::make(KudoClass::O, 9);
  for (const auto& p : lattice_sites(spec, 6000, 6000)) {
    const double dev = std::abs(p.major_um - spec.axes.major_um);
    EXPECT_GE(dev, spec.jitter_min_um - 1e-9);
    EXPECT_LE(dev, spec.jitter_max_um + 1e-9);
    EXPECT_NEAR(p.major_um / p.minor_um, 2.0, 1e-12);
  }
}

TEST(Heightmap, CoarseSamplingIsRejected) {
  const auto spec = PhantomSpec::make(KudoClass::R, 1);
  EXPECT_THROW(synthesize_heightmap(spec, 256, 256, 101.0), DataError);
  EXPECT_THROW(synthesize_heightmap(spec, 100, 100, 25.0), DataError);
  EXPECT_NO_THROW(synthesize_heightmap(spec, 40, 40, 100.0));
}

TEST(Heightmap, InvalidSpecsAreRejected) {
  auto spec = PhantomSpec::make(KudoClass::O, 1);
  spec.axes = {700, 350};
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = PhantomSpec::make(KudoClass::R, 1);
  spec.jitter_max_um = 300;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = PhantomSpec::make(KudoClass::R, 1);
  spec.imprint_scales = {0.9, 0.75, 0.85, 1.0};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Contact, HardestMaterialFullContactIsIdentity) {
  const auto spec = PhantomSpec::make(KudoClass::A, 3, Material::A70, Orientation::full);
  const auto hm = synthesize_heightmap(spec, 200, 200, 25.0);
  EXPECT_EQ(apply_contact(hm, spec), hm);
}

TEST(Contact, SofterMaterialsImprintMoreShallowly) {
  const auto base = synthesize_heightmap(PhantomSpec::make(KudoClass::R, 3), 200, 200, 25.0);
  double prev = 0;
  for (auto m : kAllMaterials) {
    const double depth = -apply_contact(base, PhantomSpec::make(KudoClass::R, 3, m)).min();
    EXPECT_GT(depth, prev) << material_name(m);
    prev = depth;
  }
  EXPECT_LT(-apply_contact(base, PhantomSpec::make(KudoClass::R, 3, Material::DM400)).min(), 500.0);
}

TEST(Contact, PartialContactLosesPartOfTheTexture) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto spec = PhantomSpec::make(KudoClass::G, seed, Material::A70, Orientation::partial);
    const auto before = synthesize_heightmap(spec, 200, 200, 25.0);
    const auto after = apply_contact(before, spec);
    std::size_t textured = 0, lost = 0;
    for (std::size_t i = 0; i < before.h.size(); ++i) {
      if (std::abs(before.h[i]) < 0.05 * spec.pit_depth_um) continue;
      ++textured;
      if (std::abs(after.h[i]) < 0.05 * spec.pit_depth_um) ++lost;
      ASSERT_LE(std::abs(after.h[i]), std::abs(before.h[i]));
    }
    const double frac = static_cast<double>(lost) / static_cast<double>(textured);
    EXPECT_GE(frac, 0.15) << seed;
    EXPECT_LE(frac, 0.60) << seed;
  }
}

TEST(Render, FlatHeightmapGivesUniformImage) {
  const Heightmap flat(32, 48, 25.0);
  const RenderConfig cfg;
  const auto img = render_tactile_image(flat, cfg);
  const double expected = 255.0 * std::clamp(0.25 + 0.6 * std::sin(30.0 * std::numbers::pi / 180.0), 0.0, 1.0);
  const auto v = static_cast<std::uint8_t>(std::lround(expected));
  EXPECT_EQ(v, 140);
  for (auto px : img.rgb) ASSERT_EQ(px, v);
}

TEST(Render, OppositeWallsOfAPitDifferInRed) {
  // A single cosine-walled round pit built directly, not by the generator.
  Heightmap hm(64, 64, 25.0);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      const double d = std::hypot(static_cast<double>(r) - 31.5, static_cast<double>(c) - 31.5) * 25.0;
      if (d < 100) hm.at(r, c) = -500;
      else if (d < 200) hm.at(r, c) = -250 * (1 + std::cos(std::numbers::pi * (d - 100) / 100));
    }
  const auto img = render_tactile_image(hm, RenderConfig{});
  double left = 0, right = 0;
  int n = 0;
  for (std::size_t r = 29; r <= 34; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      const double dx = (static_cast<double>(c) - 31.5) * 25.0;
      if (std::abs(dx) < 110 || std::abs(dx) > 190) continue;
      (dx < 0 ? left : right) += img.at(r, c, 0);
      n += dx < 0;
    }
  EXPECT_GT(std::abs(left - right) / n, 10.0);
}

TEST(Render, RotationBy120DegreesPermutesChannels) {
  // Fine sampling keeps the bilinear resampling error small against the texture scale.
  constexpr std::size_t N = 241;
  constexpr double mid = (N - 1) / 2.0;
  const auto hm = synthesize_heightmap(PhantomSpec::make(KudoClass::G, 4), N, N, 12.5);
  const auto rotated = bilinear_rotate(hm, 120.0);
  const auto img = render_tactile_image(hm, RenderConfig{});
  const auto img_rot = render_tactile_image(rotated, RenderConfig{});
  // Channel c of the rotated render equals channel c-1 (mod 3) of the
  // original render sampled at the back-rotated position.
  double diff = 0;
  std::size_t n = 0;
  for (int ch = 0; ch < 3; ++ch) {
    Heightmap plane(N, N, 12.5);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < N; ++c) plane.at(r, c) = img.at(r, c, (ch + 2) % 3);
    const auto plane_rot = bilinear_rotate(plane, 120.0);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < N; ++c) {
        if (std::hypot(static_cast<double>(r) - mid, static_cast<double>(c) - mid) > mid - 4) continue;
        diff += std::abs(plane_rot.at(r, c) - img_rot.at(r, c, ch));
        ++n;
      }
  }
  EXPECT_LT(diff / static_cast<double>(n), 3.0);
}

TEST(Render, DefaultSamplesRarelySaturate) {
  GenConfig cfg;
  cfg.image_size = 128;
  for (std::size_t i = 0; i < cfg.total(); i += 7) {
    const auto img = render_sample(cfg, sample_spec(cfg, i));
    const auto sat = std::count_if(img.rgb.begin(), img.rgb.end(), [](auto v) { return v == 0 || v == 255; });
    EXPECT_LE(static_cast<double>(sat) / static_cast<double>(img.rgb.size()), 0.20) << i;
  }
}

TEST(Render, RejectsDuplicateAzimuths) {
  RenderConfig cfg;
  cfg.light_azimuths_deg = {0, 0, 240};
  EXPECT_THROW(render_tactile_image(Heightmap(8, 8, 25.0), cfg), ConfigError);
}

TEST(Dataset, DefaultCompositionMatchesPublishedCounts) {
  const GenConfig cfg;
  EXPECT_EQ(cfg.total(), 229u);
  std::array<std::size_t, 4> per_class{}, per_material{};
  std::size_t partial = 0;
  for (std::size_t i = 0; i < cfg.total(); ++i) {
    const auto s = sample_spec(cfg, i);
    ++per_class[static_cast<int>(s.kudo)];
    ++per_material[static_cast<int>(s.material)];
    partial += s.orientation == Orientation::partial;
  }
  EXPECT_EQ(per_class, (std::array<std::size_t, 4>{57, 57, 55, 60}));
  EXPECT_EQ(partial, 80u);
  for (auto m : per_material) EXPECT_NEAR(static_cast<double>(m), 229.0 / 4, 1.0);
  EXPECT_EQ(cfg.generation_size(), 256u);
  EXPECT_EQ(cfg.effective_pitch(), 25.0);
}

TEST(Dataset, OnePerClassWritesFourFiles) {
  GenConfig cfg;
  cfg.counts = {1, 1, 1, 1};
  cfg.image_size = 64;
  const auto dir = fs::temp_directory_path() / "hysense_test_phantom" / "four";
  fs::remove_all(dir);
  const auto m = generate_dataset(cfg, dir);
  EXPECT_EQ(m.rows.size(), 4u);
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir)) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 4u);
  const auto back = read_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.rows[i].kudo, kAllClasses[i]);
    const auto img = read_png(dir / back.rows[i].path);
    EXPECT_EQ(img.height, 64u);
    EXPECT_EQ(img.width, 64u);
  }
  EXPECT_EQ(slurp(dir / "manifest.csv").rfind("path,class,material,orientation,seed\n", 0), 0u);
}

TEST(Dataset, ReproducibleFromMasterSeed) {
  GenConfig cfg;
  cfg.counts = {2, 2, 2, 2};
  cfg.image_size = 64;
  cfg.master_seed = 11;
  const auto root = fs::temp_directory_path() / "hysense_test_phantom";
  fs::remove_all(root / "a");
  fs::remove_all(root / "b");
  fs::remove_all(root / "c");
  const auto a = generate_dataset(cfg, root / "a");
  generate_dataset(cfg, root / "b");
  cfg.master_seed = 12;
  const auto c = generate_dataset(cfg, root / "c");
  EXPECT_EQ(slurp(root / "a" / "manifest.csv"), slurp(root / "b" / "manifest.csv"));
  bool any_differs = false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(slurp(root / "a" / a.rows[i].path), slurp(root / "b" / a.rows[i].path));
    any_differs |= slurp(root / "a" / a.rows[i].path) != slurp(root / "c" / c.rows[i].path);
  }
  EXPECT_TRUE(any_differs);
}

TEST(Dataset, UnwritableDirectoryIsAnIoError) {
  GenConfig cfg;
  cfg.counts = {1, 1, 1, 1};
  cfg.image_size = 64;
  const auto file = fs::temp_directory_path() / "hysense_test_phantom_file";
  std::ofstream(file) << "x";
  EXPECT_THROW(generate_dataset(cfg, file / "sub"), IoError);
}

// Hand-crafted statistics on the contact heightmap: gyrus valleys form one
// large connected labyrinth, oval pits are elongated, star pits fill little
// of their circumscribed disc.
TEST(Separability, SimpleShapeStatisticsSeparateTheClasses) {
  GenConfig cfg;
  cfg.counts = {50, 50, 50, 50};
  cfg.image_size = 224;
  cfg.master_seed = 3;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < cfg.total(); ++i) {
    const auto spec = sample_spec(cfg, i);
    const std::size_t g = cfg.generation_size();
    const auto hm = apply_contact(synthesize_heightmap(spec, g, g, cfg.effective_pitch()), spec)
                        .crop_center(cfg.image_size, cfg.image_size);
    const auto mask = pit_mask(hm, 0.5 * hm.min());
    const auto comps = components(mask, hm.rows, hm.cols);
    std::size_t largest = 0, total = 0;
    std::vector<double> ratio, fill;
    for (const auto& c : comps) {
      largest = std::max(largest, c.area);
      total += c.area;
      if (!c.touches_border && c.area >= 20) {
        ratio.push_back(c.axis_ratio());
        fill.push_back(c.fill());
      }
    }
    KudoClass guess;
    if (static_cast<double>(largest) > 0.2 * static_cast<double>(total) || ratio.empty()) guess = KudoClass::G;
    else if (median(ratio) > 1.5) guess = KudoClass::O;
    else if (median(fill) < 0.7) guess = KudoClass::A;
    else guess = KudoClass::R;
    correct += guess == spec.kudo;
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(cfg.total()), 0.95);
}

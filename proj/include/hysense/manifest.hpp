#pragma once

// Dataset index shared by the generator (writer) and the data pipeline
// (reader). CSV header: path,class,material,orientation,seed. Paths are
// relative to the manifest's directory.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hysense/errors.hpp"

namespace hysense {

// Class indices follow the alphabetical order A, G, O, R.
enum class KudoClass : int { A = 0, G = 1, O = 2, R = 3 };
inline constexpr std::size_t kClassCount = 4;
inline constexpr std::array<KudoClass, 4> kAllClasses{KudoClass::A, KudoClass::G, KudoClass::O,
                                                      KudoClass::R};

inline char class_letter(KudoClass k) { return "AGOR"[static_cast<int>(k)]; }

inline KudoClass parse_class(std::string_view s) {
  if (s.size() == 1)
    for (auto k : kAllClasses)
      if (s[0] == class_letter(k)) return k;
  throw DataError("unknown Kudo class '" + std::string(s) + "'");
}

// Oval (tubular) and gyrus patterns are the neoplastic ones.
inline bool is_neoplastic(KudoClass k) { return k == KudoClass::O || k == KudoClass::G; }

// Ordered from softest to hardest.
enum class Material : int { DM400 = 0, DM600 = 1, A40 = 2, A70 = 3 };
inline constexpr std::array<Material, 4> kAllMaterials{Material::DM400, Material::DM600,
                                                       Material::A40, Material::A70};

inline std::string material_name(Material m) {
  static const char* names[] = {"DM400", "DM600", "A40", "A70"};
  return names[static_cast<int>(m)];
}

inline Material parse_material(std::string_view s) {
  for (auto m : kAllMaterials)
    if (s == material_name(m)) return m;
  throw DataError("unknown material '" + std::string(s) + "'");
}

enum class Orientation : int { full = 0, partial = 1 };

inline std::string orientation_name(Orientation o) { return o == Orientation::full ? "full" : "partial"; }

inline Orientation parse_orientation(std::string_view s) {
  if (s == "full") return Orientation::full;
  if (s == "partial") return Orientation::partial;
  throw DataError("unknown orientation '" + std::string(s) + "'");
}

struct ManifestRow {
  std::string path;
  KudoClass kudo = KudoClass::A;
  Material material = Material::A70;
  Orientation orientation = Orientation::full;
  std::uint64_t seed = 0;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct Manifest {
  std::filesystem::path root;  // directory the row paths are relative to
  std::vector<ManifestRow> rows;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(static_cast<int>(r.kudo));
    return out;
  }
};

inline constexpr std::string_view kManifestHeader = "path,class,material,orientation,seed";

inline std::string manifest_csv(const Manifest& m) {
  std::ostringstream os;
  os << kManifestHeader << '\n';
  for (const auto& r : m.rows)
    os << r.path << ',' << class_letter(r.kudo) << ',' << material_name(r.material) << ','
       << orientation_name(r.orientation) << ',' << r.seed << '\n';
  return os.str();
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + file.string());
  out << manifest_csv(m);
  if (!out) throw IoError("short write to manifest " + file.string());
}

inline Manifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  Manifest m;
  m.root = file.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader)
    throw DataError("manifest " + file.string() + ": expected header '" +
                    std::string(kManifestHeader) + "'");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5)
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 5 fields");
    ManifestRow r;
    r.path = f[0];
    r.kudo = parse_class(f[1]);
    r.material = parse_material(f[2]);
    r.orientation = parse_orientation(f[3]);
    try {
      r.seed = std::stoull(f[4]);
    } catch (const std::exception&) {
      throw DataError("manifest line " + std::to_string(line_no) + ": bad seed '" + f[4] + "'");
    }
    m.rows.push_back(std::move(r));
  }
  return m;
}

}  // namespace hysense

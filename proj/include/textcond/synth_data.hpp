#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcond/image_io.hpp"
#include "textcond/text_condition.hpp"

namespace textcond {

/// Implant site in input pixels with the region its condition word names.
struct Annotation {
  double x = 0.0;
  double y = 0.0;
  Prompt region = Prompt::middle;
};

/// Dental arch drawn as the upper half of an ellipse, parameterised by
/// normalised arc length t in [0, 1] running from the image's right end
/// (t = 0) over the top to its left end (t = 1).
struct ArchSpec {
  int image_size = 128;
  double center_x = 64.0, center_y = 100.0;
  double radius_x = 44.0, radius_y = 64.0;
  int tooth_count = 15;
  double tooth_jitter = 0.08;      // position/size jitter, fraction of tooth spacing
  double tooth_scale = 1.0;        // < 1 renders thinner teeth (sparse dentition)
  std::vector<int> gaps;           // annotated missing teeth
  std::vector<int> extra_missing;  // missing but unannotated (terminal teeth)
  bool sparse = false;
  double noise = 0.04;
  double drift_x = 0.0, drift_y = 0.0;  // px per slice
  std::uint64_t seed = 0;

  /// Same arch translated to slice z; drift is consumed.
  ArchSpec at_slice(int z) const {
    ArchSpec s = *this;
    s.center_x += drift_x * z;
    s.center_y += drift_y * z;
    s.drift_x = s.drift_y = 0.0;
    return s;
  }
  bool operator==(const ArchSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ArchSpec& a) {
  j = {{"image_size", a.image_size}, {"center_x", a.center_x}, {"center_y", a.center_y}, {"radius_x", a.radius_x},
       {"radius_y", a.radius_y}, {"tooth_count", a.tooth_count}, {"tooth_jitter", a.tooth_jitter},
       {"tooth_scale", a.tooth_scale}, {"gaps", a.gaps}, {"extra_missing", a.extra_missing}, {"sparse", a.sparse},
       {"noise", a.noise}, {"drift_x", a.drift_x}, {"drift_y", a.drift_y}, {"seed", a.seed}};
}
inline void from_json(const nlohmann::json& j, ArchSpec& a) {
  ArchSpec d;
  a.image_size = j.value("image_size", d.image_size);
  a.center_x = j.value("center_x", d.center_x);
  a.center_y = j.value("center_y", d.center_y);
  a.radius_x = j.value("radius_x", d.radius_x);
  a.radius_y = j.value("radius_y", d.radius_y);
  a.tooth_count = j.value("tooth_count", d.tooth_count);
  a.tooth_jitter = j.value("tooth_jitter", d.tooth_jitter);
  a.tooth_scale = j.value("tooth_scale", d.tooth_scale);
  a.gaps = j.value("gaps", d.gaps);
  a.extra_missing = j.value("extra_missing", d.extra_missing);
  a.sparse = j.value("sparse", d.sparse);
  a.noise = j.value("noise", d.noise);
  a.drift_x = j.value("drift_x", d.drift_x);
  a.drift_y = j.value("drift_y", d.drift_y);
  a.seed = j.value("seed", d.seed);
}

/// Thirds of the arch; the middle third includes both boundaries.
inline Prompt region_from_parameter(double t) {
  if (t < 1.0 / 3.0) return Prompt::right;
  if (t > 2.0 / 3.0) return Prompt::left;
  return Prompt::middle;
}

/// Arc-length lookup table for one ArchSpec.
class ArchGeometry {
 public:
  static constexpr int kSamples = 1024;

  explicit ArchGeometry(const ArchSpec& spec) : spec_(spec) {
    pts_.resize(kSamples + 1);
    cum_.resize(kSamples + 1, 0.0);
    for (int i = 0; i <= kSamples; ++i) {
      const double theta = std::numbers::pi * i / kSamples;
      pts_[i] = {spec.center_x + spec.radius_x * std::cos(theta), spec.center_y - spec.radius_y * std::sin(theta)};
      if (i > 0) cum_[i] = cum_[i - 1] + std::hypot(pts_[i][0] - pts_[i - 1][0], pts_[i][1] - pts_[i - 1][1]);
    }
  }

  double length() const { return cum_.back(); }

  std::array<double, 2> point_at(double t) const {
    const auto [i, f] = locate(t);
    return {pts_[i][0] + f * (pts_[i + 1][0] - pts_[i][0]), pts_[i][1] + f * (pts_[i + 1][1] - pts_[i][1])};
  }

  /// Unit tangent in the direction of increasing t.
  std::array<double, 2> tangent_at(double t) const {
    const auto [i, f] = locate(t);
    const double dx = pts_[i + 1][0] - pts_[i][0], dy = pts_[i + 1][1] - pts_[i][1];
    const double n = std::hypot(dx, dy);
    return {dx / n, dy / n};
  }

  struct Nearest {
    double t = 0.0;
    double distance = 0.0;
  };

  /// Coarse vertex scan, then exact segment projection in a window around the best vertex.
  Nearest nearest(double x, double y) const {
    constexpr int kStep = 16;
    int coarse = 0;
    double coarse_d2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= kSamples; i += kStep) {
      const double d2 = (x - pts_[i][0]) * (x - pts_[i][0]) + (y - pts_[i][1]) * (y - pts_[i][1]);
      if (d2 < coarse_d2) coarse_d2 = d2, coarse = i;
    }
    Nearest best{0.0, std::numeric_limits<double>::infinity()};
    for (int i = std::max(0, coarse - 2 * kStep); i < std::min(kSamples, coarse + 2 * kStep); ++i) {
      const double ax = pts_[i][0], ay = pts_[i][1];
      const double bx = pts_[i + 1][0] - ax, by = pts_[i + 1][1] - ay;
      const double len2 = bx * bx + by * by;
      const double u = std::clamp(((x - ax) * bx + (y - ay) * by) / len2, 0.0, 1.0);
      const double d = std::hypot(x - (ax + u * bx), y - (ay + u * by));
      if (d < best.distance) best = {(cum_[i] + u * (cum_[i + 1] - cum_[i])) / length(), d};
    }
    return best;
  }

 private:
  std::pair<int, double> locate(double t) const {
    const double target = std::clamp(t, 0.0, 1.0) * length();
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), target);
    const int i = std::clamp(static_cast<int>(it - cum_.begin()) - 1, 0, kSamples - 1);
    const double seg = cum_[i + 1] - cum_[i];
    return {i, seg > 0 ? (target - cum_[i]) / seg : 0.0};
  }

  ArchSpec spec_;
  std::vector<std::array<double, 2>> pts_;
  std::vector<double> cum_;
};

class OffArchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Region of an image point: the arch parameter of its nearest arch point,
/// split into thirds. Points farther than `tolerance` px from the arch are rejected.
inline Prompt region_of(double x, double y, const ArchSpec& arch, double tolerance = -1.0) {
  if (tolerance < 0.0) tolerance = 0.15 * arch.image_size;
  const auto n = ArchGeometry(arch).nearest(x, y);
  if (n.distance > tolerance)
    throw OffArchError("region_of: point (" + std::to_string(x) + ", " + std::to_string(y) + ") is " +
                       std::to_string(n.distance) + " px from the arch");
  return region_from_parameter(n.t);
}

struct SampleRecord {
  std::string sample_id;
  std::string image_path;  // relative to the manifest directory
  GrayImage image;
  std::vector<Annotation> annotations;
  std::string case_id;
  int slice_z = 0;
  int fold = 0;
  std::optional<ArchSpec> arch;  // slice-level arch for synthetic samples

  std::vector<Annotation> annotations_in(Prompt region) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations)
      if (a.region == region) out.push_back(a);
    return out;
  }
  std::vector<Prompt> populated_regions() const {
    std::vector<Prompt> out;
    for (Prompt p : kAllPrompts)
      if (std::any_of(annotations.begin(), annotations.end(), [&](const Annotation& a) { return a.region == p; }))
        out.push_back(p);
    return out;
  }
};

/// Tooth centres in arch parameter, jittered once per case.
inline std::vector<double> tooth_parameters(const ArchSpec& spec) {
  std::mt19937_64 rng(spec.seed ^ 0x70074ULL);
  std::uniform_real_distribution<double> jit(-spec.tooth_jitter, spec.tooth_jitter);
  std::vector<double> t(spec.tooth_count);
  for (int i = 0; i < spec.tooth_count; ++i) t[i] = (i + 0.5 + jit(rng)) / spec.tooth_count;
  return t;
}

/// Ground-truth implant points of one slice.
inline std::vector<Annotation> gap_annotations(const ArchSpec& slice_arch) {
  const ArchGeometry geo(slice_arch);
  const auto t = tooth_parameters(slice_arch);
  std::vector<Annotation> out;
  for (int g : slice_arch.gaps) {
    const auto p = geo.point_at(t.at(g));
    out.push_back({p[0], p[1], region_from_parameter(t[g])});
  }
  return out;
}

namespace detail {

inline double smoothstep(double e0, double e1, double x) {
  const double u = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

}  // namespace detail

/// Renders one slice: textured background, gum band along the arch, teeth as
/// filled ellipses with a bright rim, missing teeth left as gum, Gaussian noise.
inline GrayImage render_slice(const ArchSpec& slice_arch, int z) {
  const int size = slice_arch.image_size;
  const ArchGeometry geo(slice_arch);
  const auto t = tooth_parameters(slice_arch);
  const double spacing = geo.length() / slice_arch.tooth_count;
  std::mt19937_64 case_rng(slice_arch.seed ^ 0xbac6ULL);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  struct Tooth {
    double cx, cy, tx, ty, a, b;
  };
  std::vector<Tooth> teeth;
  for (int i = 0; i < slice_arch.tooth_count; ++i) {
    const double size_jit = 1.0 + slice_arch.tooth_jitter * (2.0 * uni(case_rng) - 1.0);
    const bool missing = std::count(slice_arch.gaps.begin(), slice_arch.gaps.end(), i) > 0 ||
                         std::count(slice_arch.extra_missing.begin(), slice_arch.extra_missing.end(), i) > 0;
    if (missing) continue;
    const auto p = geo.point_at(t[i]);
    const auto tg = geo.tangent_at(t[i]);
    teeth.push_back({p[0], p[1], tg[0], tg[1], 0.42 * spacing * size_jit * slice_arch.tooth_scale,
                     0.62 * spacing * size_jit * slice_arch.tooth_scale});
  }
  // low-frequency background texture, fixed per case
  std::array<double, 8> wave{};
  for (auto& w : wave) w = uni(case_rng);

  std::mt19937_64 noise_rng(slice_arch.seed * 1000003ULL + static_cast<std::uint64_t>(z) * 7919ULL + 17ULL);
  std::normal_distribution<double> noise(0.0, slice_arch.noise);
  const double band = 0.95 * spacing;
  GrayImage img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      const double x = px + 0.5, y = py + 0.5;
      const double u = x / size, v = y / size;
      double val = 0.13 + 0.035 * std::sin(2 * std::numbers::pi * (1.5 * u + wave[0])) *
                              std::cos(2 * std::numbers::pi * (1.2 * v + wave[1])) +
                   0.02 * std::sin(2 * std::numbers::pi * (3.1 * u + 2.3 * v + wave[2]));
      const double d = geo.nearest(x, y).distance;
      val += 0.2 * (1.0 - detail::smoothstep(band - 1.5, band + 1.5, d));
      for (const auto& th : teeth) {
        const double dx = x - th.cx, dy = y - th.cy;
        if (std::abs(dx) > 2 * th.b + 2 || std::abs(dy) > 2 * th.b + 2) continue;
        const double along = dx * th.tx + dy * th.ty;
        const double across = -dx * th.ty + dy * th.tx;
        const double r = std::sqrt((along * along) / (th.a * th.a) + (across * across) / (th.b * th.b));
        const double inside = 1.0 - detail::smoothstep(1.0 - 0.6 / th.a, 1.0 + 0.6 / th.a, r);
        if (inside <= 0.0) continue;
        const double tooth_val = r > 0.7 ? 0.86 : 0.7;
        val = val * (1.0 - inside) + tooth_val * inside;
      }
      val += noise(noise_rng);
      img.pixels[static_cast<std::size_t>(py) * size + px] =
          static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

enum class CaseKind { single_gap, multi_gap, sparse };

inline std::string_view to_string(CaseKind k) {
  switch (k) {
    case CaseKind::single_gap: return "single_gap";
    case CaseKind::multi_gap: return "multi_gap";
    case CaseKind::sparse: return "sparse";
  }
  return "single_gap";
}

/// Tooth indices per region for a tooth count, restricted to interior teeth.
inline std::array<std::vector<int>, 3> interior_teeth_by_region(const ArchSpec& spec) {
  std::array<std::vector<int>, 3> out;
  const auto t = tooth_parameters(spec);
  for (int i = 1; i + 1 < spec.tooth_count; ++i) out[index_of(region_from_parameter(t[i]))].push_back(i);
  return out;
}

/// Random arch of the given kind. Gaps sit on interior teeth, never adjacent,
/// and multi-gap cases place each gap in a different region.
inline ArchSpec random_arch(CaseKind kind, std::uint64_t seed, int image_size = 128) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const double s = image_size / 128.0;
  ArchSpec a;
  a.image_size = image_size;
  a.seed = seed;
  a.center_x = image_size / 2.0 + 4.0 * s * uni(rng);
  a.center_y = 0.78 * image_size + 3.0 * s * uni(rng);
  a.radius_x = 0.34 * image_size * (1.0 + 0.06 * uni(rng));
  a.radius_y = 0.5 * image_size * (1.0 + 0.06 * uni(rng));
  a.drift_x = 1.2 * s * uni(rng);
  a.drift_y = 1.2 * s * uni(rng);
  a.noise = 0.04;
  const auto by_region = interior_teeth_by_region(a);
  auto pick = [&](const std::vector<int>& from) {
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
  };
  auto adjacent = [&](int i) {
    return std::any_of(a.gaps.begin(), a.gaps.end(), [&](int g) { return std::abs(g - i) <= 1; });
  };
  auto add_gaps_in_regions = [&](int count) {
    std::array<int, 3> order{0, 1, 2};
    std::shuffle(order.begin(), order.end(), rng);
    for (int k = 0; k < count; ++k) {
      int g;
      do {
        g = pick(by_region[order[k]]);
      } while (adjacent(g));
      a.gaps.push_back(g);
    }
  };
  switch (kind) {
    case CaseKind::single_gap:
      add_gaps_in_regions(1);
      break;
    case CaseKind::multi_gap:
      add_gaps_in_regions(std::uniform_real_distribution<double>(0, 1)(rng) < 0.3 ? 3 : 2);
      break;
    case CaseKind::sparse: {
      a.sparse = true;
      a.tooth_scale = 0.78;
      a.tooth_jitter = 0.12;
      // terminal teeth missing at one or both ends; gaps stay clear of them
      const bool right_end = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
      a.extra_missing.push_back(right_end ? 0 : a.tooth_count - 1);
      if (std::uniform_int_distribution<int>(0, 1)(rng)) a.extra_missing.push_back(right_end ? a.tooth_count - 1 : 0);
      add_gaps_in_regions(std::uniform_int_distribution<int>(1, 2)(rng));
      break;
    }
  }
  std::sort(a.gaps.begin(), a.gaps.end());
  return a;
}

/// Slices of one case; the arch (and hence every gap centre) drifts linearly
/// with z, so ground truth across slices is collinear in (x, y, z).
inline std::vector<SampleRecord> generate_case(const ArchSpec& spec, int n_slices, const std::string& case_id = "case") {
  if (spec.gaps.empty()) throw std::invalid_argument("generate_case: gap set is empty");
  if (n_slices <= 0) throw std::invalid_argument("generate_case: n_slices must be positive");
  for (int g : spec.gaps)
    if (g < 0 || g >= spec.tooth_count) throw std::invalid_argument("generate_case: gap index out of range");
  std::vector<SampleRecord> out;
  for (int z = 0; z < n_slices; ++z) {
    SampleRecord r;
    r.case_id = case_id;
    r.slice_z = z;
    r.sample_id = case_id + "_s" + std::to_string(z);
    r.image_path = "images/" + r.sample_id + ".png";
    const ArchSpec slice = spec.at_slice(z);
    r.image = render_slice(slice, z);
    r.annotations = gap_annotations(slice);
    r.arch = slice;
    out.push_back(std::move(r));
  }
  return out;
}

struct CaseMix {
  double single_gap = 0.2;
  double multi_gap = 0.6;
  double sparse = 0.2;

  void validate() const {
    if (single_gap < 0 || multi_gap < 0 || sparse < 0 || std::abs(single_gap + multi_gap + sparse - 1.0) > 1e-9)
      throw std::invalid_argument("case mix proportions must be non-negative and sum to 1");
  }
};

struct DatasetOptions {
  std::uint64_t seed = 7;
  int n_cases = 20;
  int n_slices = 4;
  int image_size = 128;
  int folds = 5;
  CaseMix mix;
};

struct Dataset {
  std::vector<SampleRecord> records;
  std::map<std::string, CaseKind> case_kinds;
};

/// Fold of every case: a seeded permutation of case indices dealt round-robin,
/// so fold sizes differ by at most one.
inline std::vector<int> assign_folds(int n_cases, int folds, std::uint64_t seed) {
  std::vector<int> order(n_cases);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0xf01dULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(n_cases);
  for (int pos = 0; pos < n_cases; ++pos) fold[order[pos]] = pos % folds;
  return fold;
}

inline std::string case_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%04d", index);
  return buf;
}

/// Case kinds by largest remainder, in case-index order.
inline std::vector<CaseKind> allocate_kinds(int n_cases, const CaseMix& mix) {
  mix.validate();
  const std::array<double, 3> p{mix.single_gap, mix.multi_gap, mix.sparse};
  std::array<int, 3> count{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = p[k] * n_cases;
    count[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - count[k];
    assigned += count[k];
  }
  while (assigned < n_cases) {
    const int k = static_cast<int>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++count[k];
    rem[k] = -1.0;
    ++assigned;
  }
  std::vector<CaseKind> kinds;
  for (int k = 0; k < 3; ++k) kinds.insert(kinds.end(), count[k], static_cast<CaseKind>(k));
  return kinds;
}

inline Dataset build_dataset(const DatasetOptions& opt) {
  opt.mix.validate();
  if (opt.n_cases <= 0 || opt.folds <= 0) throw std::invalid_argument("build_dataset: n_cases and folds must be positive");
  const auto kinds = allocate_kinds(opt.n_cases, opt.mix);
  const auto folds = assign_folds(opt.n_cases, opt.folds, opt.seed);
  Dataset ds;
  for (int c = 0; c < opt.n_cases; ++c) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(c)};
    std::array<std::uint64_t, 1> case_seed{};
    seq.generate(reinterpret_cast<std::uint32_t*>(case_seed.data()),
                 reinterpret_cast<std::uint32_t*>(case_seed.data() + 1));
    const std::string id = case_id_for(c);
    auto recs = generate_case(random_arch(kinds[c], case_seed[0], opt.image_size), opt.n_slices, id);
    for (auto& r : recs) {
      r.fold = folds[c];
      ds.records.push_back(std::move(r));
    }
    ds.case_kinds[id] = kinds[c];
  }
  return ds;
}

inline nlohmann::json to_manifest_json(const SampleRecord& r) {
  nlohmann::json anns = nlohmann::json::array();
  for (const auto& a : r.annotations) anns.push_back({{"x", a.x}, {"y", a.y}, {"region", to_string(a.region)}});
  nlohmann::json j = {{"sample_id", r.sample_id}, {"image", r.image_path}, {"annotations", anns},
                      {"case_id", r.case_id},     {"slice_z", r.slice_z},  {"fold", r.fold}};
  if (r.arch) j["arch"] = *r.arch;
  return j;
}

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes images/<sample_id>.png and manifest.jsonl under `dir`; returns the manifest path.
inline std::string write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  const fs::path manifest = fs::path(dir) / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw ManifestError("cannot write manifest '" + manifest.string() + "'");
  for (const auto& r : ds.records) {
    write_png((fs::path(dir) / r.image_path).string(), r.image);
    out << to_manifest_json(r).dump() << '\n';
  }
  return manifest.string();
}

/// Reads a JSON-lines manifest; image paths resolve against its directory.
/// Real annotation sets use the same schema (the "arch" key is optional).
inline std::vector<SampleRecord> load_manifest(const std::string& path, bool load_images = true) {
  namespace fs = std::filesystem;
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  std::vector<SampleRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SampleRecord r;
      r.sample_id = j.at("sample_id").get<std::string>();
      r.image_path = j.at("image").get<std::string>();
      r.case_id = j.value("case_id", r.sample_id);
      r.slice_z = j.value("slice_z", 0);
      r.fold = j.value("fold", 0);
      if (r.fold < 0) throw ManifestError("negative fold");
      for (const auto& a : j.at("annotations"))
        r.annotations.push_back({a.at("x").get<double>(), a.at("y").get<double>(),
                                 parse_prompt(a.at("region").get<std::string>())});
      if (j.contains("arch")) r.arch = j.at("arch").get<ArchSpec>();
      if (load_images) r.image = read_png((base / r.image_path).string());
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw ManifestError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace textcond

#include "mriclass/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "mriclass/error.hpp"
#include "mriclass/rng.hpp"

namespace mriclass {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::optional<double> parse_optional(const std::string& s, bool strictly_positive, int row) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v) || v < 0.0 ||
      (strictly_positive && v == 0.0)) {
    fail(Errc::MalformedRow, "row " + std::to_string(row) + ": bad number '" + s + "'");
  }
  return v;
}

/// Positions of each class, classes ascending.
std::map<int, std::vector<Index>> group_by_label(std::span<const int> labels) {
  std::map<int, std::vector<Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Index>(i));
  return groups;
}

Index holdout_count(Index n, double fraction) {
  auto k = static_cast<Index>(std::llround(static_cast<double>(n) * fraction));
  return std::clamp<Index>(k, 1, n - 1);
}

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string_view to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::AD: return "AD";
    case Diagnosis::CN: return "CN";
    case Diagnosis::SCD: return "SCD";
    case Diagnosis::MCIc: return "MCIc";
    case Diagnosis::MCInc: return "MCInc";
  }
  return "?";
}

Diagnosis parse_diagnosis(std::string_view s) {
  for (Diagnosis d : {Diagnosis::AD, Diagnosis::CN, Diagnosis::SCD, Diagnosis::MCIc, Diagnosis::MCInc}) {
    if (to_string(d) == s) return d;
  }
  fail(Errc::UnknownDiagnosis, std::string(s));
}

std::vector<SubjectRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(Errc::MalformedRow, path.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != kManifestHeader) fail(Errc::MalformedRow, path.string() + ": unexpected header '" + line + "'");

  const auto base = path.parent_path();
  std::vector<SubjectRecord> records;
  std::set<std::string> seen;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 6) fail(Errc::MalformedRow, "row " + std::to_string(row) + ": expected 6 fields");
    if (f[0].empty() || f[3].empty()) fail(Errc::MalformedRow, "row " + std::to_string(row) + ": empty id or path");
    SubjectRecord r;
    r.subject_id = f[0];
    r.cohort = f[1];
    r.diagnosis = parse_diagnosis(f[2]);
    r.volume_path = f[3];
    if (r.volume_path.is_relative()) r.volume_path = base / r.volume_path;
    r.icv_mm3 = parse_optional(f[4], true, row);
    r.followup_years = parse_optional(f[5], false, row);
    if (!seen.insert(r.subject_id).second) fail(Errc::DuplicateSubjectId, r.subject_id);
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& r : records) {
    out << r.subject_id << ',' << r.cohort << ',' << to_string(r.diagnosis) << ','
        << r.volume_path.generic_string() << ',' << (r.icv_mm3 ? format_number(*r.icv_mm3) : "") << ','
        << (r.followup_years ? format_number(*r.followup_years) : "") << '\n';
  }
  if (!out) fail(Errc::IoError, "write failed for " + path.string());
}

std::optional<int> Task::label_of(Diagnosis d) const {
  if (std::find(positive.begin(), positive.end(), d) != positive.end()) return 1;
  if (std::find(negative.begin(), negative.end(), d) != negative.end()) return 0;
  return std::nullopt;
}

SplitPlan stratified_splits(std::span<const int> labels, int iterations, double train_fraction,
                            std::uint64_t seed) {
  require(iterations >= 1, Errc::InvalidArgument, "iterations must be >= 1");
  require(train_fraction > 0.0 && train_fraction < 1.0, Errc::InvalidArgument, "train_fraction must be in (0,1)");
  auto groups = group_by_label(labels);
  for (const auto& [label, members] : groups) {
    if (members.size() < 2) fail(Errc::ClassTooSmall, "class " + std::to_string(label) + " has fewer than 2 subjects");
  }

  SplitPlan plan{seed, iterations, train_fraction, {}};
  const Seed root(seed);
  for (int j = 0; j < iterations; ++j) {
    Stream rng = root.stream("splits", static_cast<std::uint64_t>(j));
    Split s;
    for (auto [label, members] : groups) {
      rng.shuffle(std::span<Index>(members));
      Index n_test = holdout_count(static_cast<Index>(members.size()), 1.0 - train_fraction);
      s.test.insert(s.test.end(), members.begin(), members.begin() + n_test);
      s.train.insert(s.train.end(), members.begin() + n_test, members.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    plan.splits.push_back(std::move(s));
  }
  return plan;
}

std::pair<std::vector<Index>, std::vector<Index>> validation_split(std::span<const int> labels, double fraction,
                                                                   std::uint64_t seed) {
  require(fraction > 0.0 && fraction < 1.0, Errc::InvalidArgument, "validation fraction must be in (0,1)");
  auto groups = group_by_label(labels);
  Stream rng = Seed(seed).stream("valsplit");
  std::vector<Index> core, validation;
  for (auto [label, members] : groups) {
    if (members.size() < 2) {
      fail(Errc::ClassTooSmall, "class " + std::to_string(label) + " cannot populate both core and validation");
    }
    rng.shuffle(std::span<Index>(members));
    Index n_val = holdout_count(static_cast<Index>(members.size()), fraction);
    validation.insert(validation.end(), members.begin(), members.begin() + n_val);
    core.insert(core.end(), members.begin() + n_val, members.end());
  }
  std::sort(core.begin(), core.end());
  std::sort(validation.begin(), validation.end());
  return {std::move(core), std::move(validation)};
}

AugmentedSet mixup_augment(std::span<const LabeledVolume> samples, int target_per_class, double lambda,
                           std::uint64_t seed) {
  require(target_per_class >= 1, Errc::InvalidArgument, "target_per_class must be >= 1");
  require(lambda > 0.5 && lambda <= 1.0, Errc::InvalidArgument, "lambda must be in (0.5, 1]");
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  auto groups = group_by_label(labels);
  if (groups.empty()) fail(Errc::EmptyClass, "no samples to augment");
  for (std::size_t i = 1; i < samples.size(); ++i) check_same_geometry(samples[0].volume.geometry, samples[i].volume.geometry);

  AugmentedSet out;
  out.target_per_class = target_per_class;
  out.samples.reserve(groups.size() * static_cast<std::size_t>(target_per_class));
  for (const auto& [label, members] : groups) {
    Stream rng = Seed(seed).stream("mixup", static_cast<std::uint64_t>(static_cast<std::uint32_t>(label)));
    const auto n = static_cast<std::uint64_t>(members.size());
    for (int k = 0; k < target_per_class; ++k) {
      std::uint64_t a = rng.below(n);
      std::uint64_t b = a;
      if (n > 1) {
        b = rng.below(n - 1);
        if (b >= a) ++b;
      }
      const auto& first = samples[members[a]];
      const auto& second = samples[members[b]];
      AugmentedSample s;
      s.label = label;
      s.sources = {first.id, second.id};
      s.volume.geometry = first.volume.geometry;
      s.volume.data = (lambda * first.volume.data.cast<double>() + (1.0 - lambda) * second.volume.data.cast<double>())
                          .cast<float>();
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  bool contains(const std::array<double, 3>& u) const {
    double r = 0.0;
    for (int a = 0; a < 3; ++a) {
      double d = (u[a] - center[a]) / radii[a];
      r += d * d;
    }
    return r <= 1.0;
  }
};

constexpr Ellipsoid kBrain{{0.0, 0.0, 0.0}, {0.8, 0.85, 0.75}};
constexpr Ellipsoid kAtrophy{{0.3, -0.15, 0.1}, {0.3, 0.25, 0.28}};
constexpr double kReferenceIcv = 1.5e6;

/// Grid position mapped into (-1, 1) per axis.
std::array<double, 3> unit_coords(const Geometry& g, Index x, Index y, Index z) {
  std::array<Index, 3> p{x, y, z};
  std::array<double, 3> u;
  for (int a = 0; a < 3; ++a) u[a] = (2.0 * static_cast<double>(p[a]) + 1.0) / static_cast<double>(g.dims[a]) - 1.0;
  return u;
}

template <class Fn>
void for_each_voxel(const Geometry& g, Fn&& fn) {
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) fn(g.flat_index(x, y, z), unit_coords(g, x, y, z));
}

Mask ellipsoid_mask(const Geometry& g, const Ellipsoid& e) {
  Volume v = Volume::zeros(g);
  for_each_voxel(g, [&](Index i, const std::array<double, 3>& u) {
    if (e.contains(u)) v.data[i] = 1.0f;
  });
  return Mask::from_volume(v);
}

}  // namespace

Mask synth_brain_mask(const Geometry& g) { return ellipsoid_mask(g, kBrain); }
Mask synth_atrophy_region(const Geometry& g) { return ellipsoid_mask(g, kAtrophy); }

SynthOutput synth_cohort(const SynthParams& p, const std::filesystem::path& out_dir) {
  require(p.n_per_class >= 1, Errc::InvalidArgument, "n_per_class must be >= 1");
  for (Index d : p.dims) require(d >= 16, Errc::InvalidArgument, "synthetic dims must be >= 16 per axis");
  require(p.effect_size >= 0.0 && std::isfinite(p.effect_size), Errc::InvalidArgument, "effect_size must be >= 0");
  require(p.noise_sigma >= 0.0 && std::isfinite(p.noise_sigma), Errc::InvalidArgument, "noise_sigma must be >= 0");

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  if (ec) fail(Errc::IoError, "cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  Geometry g{p.dims, {1.5, 1.5, 1.5}};
  const Mask brain = synth_brain_mask(g);
  const Mask region = synth_atrophy_region(g);

  // Subject-independent gray-matter pattern inside the brain.
  Eigen::VectorXd base = Eigen::VectorXd::Zero(g.voxel_count());
  for_each_voxel(g, [&](Index i, const std::array<double, 3>& u) {
    if (brain.contains(i)) {
      base[i] = 0.6 + 0.15 * std::sin(1.5 * std::numbers::pi * u[0]) * std::cos(std::numbers::pi * u[1]) *
                          std::cos(0.5 * std::numbers::pi * u[2]);
    }
  });

  SynthOutput out{out_dir / "manifest.csv", out_dir / "manifest_minimal.csv", out_dir / "mask.json",
                  out_dir / "atrophy_region.json"};
  write_volume(brain.to_volume(), out.mask);
  write_volume(region.to_volume(), out.atrophy_region);

  std::vector<SubjectRecord> modulated, minimal;
  const Seed root(p.seed);
  const int n_total = 2 * p.n_per_class;
  for (int s = 0; s < n_total; ++s) {
    const bool patient = s >= p.n_per_class;
    Stream rng = root.stream("synth", static_cast<std::uint64_t>(s));
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04d", s + 1);

    const double icv = kReferenceIcv * (1.0 + 0.08 * rng.normal());
    const double tissue_offset = 0.03 * rng.normal();
    std::array<double, 3> jac_slope{0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal()};
    const double shift = 200.0 * rng.normal();
    const double gain = 1.0 + 0.2 * rng.uniform();
    std::array<double, 3> bias_slope{0.15 * rng.normal(), 0.15 * rng.normal(), 0.15 * rng.normal()};

    Volume prob = Volume::zeros(g);
    Volume jac = Volume::zeros(g);
    Eigen::VectorXd raw_noise(g.voxel_count());
    for_each_voxel(g, [&](Index i, const std::array<double, 3>& u) {
      double pv = 0.0;
      if (brain.contains(i)) {
        pv = base[i] + tissue_offset + p.noise_sigma * rng.normal();
        if (patient && region.contains(i)) pv -= p.effect_size;
        pv = std::clamp(pv, 0.0, 1.0);
      }
      prob.data[i] = static_cast<float>(pv);
      double field = 1.0 + jac_slope[0] * u[0] + jac_slope[1] * u[1] + jac_slope[2] * u[2];
      jac.data[i] = static_cast<float>(icv / kReferenceIcv * std::max(field, 0.5));
      raw_noise[i] = p.noise_sigma * rng.normal();
    });
    Volume mod = modulate(prob, jac);

    Volume raw = Volume::zeros(g);
    for_each_voxel(g, [&](Index i, const std::array<double, 3>& u) {
      double tissue = brain.contains(i) ? 100.0 + 300.0 * mod.data[i] : 0.0;
      double bias = 1.0 + bias_slope[0] * u[0] + bias_slope[1] * u[1] + bias_slope[2] * u[2];
      raw.data[i] = static_cast<float>(shift + gain * bias * tissue + 300.0 * raw_noise[i]);
    });

    const std::string stem = std::string("volumes/") + id;
    write_volume(mod, out_dir / (stem + "_gm.json"));
    write_volume(raw, out_dir / (stem + "_t1.json"));
    SubjectRecord r{id, "SYNTH", patient ? Diagnosis::AD : Diagnosis::CN, stem + "_gm.json", icv, std::nullopt};
    modulated.push_back(r);
    r.volume_path = stem + "_t1.json";
    minimal.push_back(r);
  }
  write_manifest(modulated, out.manifest);
  write_manifest(minimal, out.manifest_minimal);
  return out;
}

}  // namespace mriclass

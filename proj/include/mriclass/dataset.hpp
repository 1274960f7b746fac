#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mriclass/volume.hpp"

namespace mriclass {

enum class Diagnosis { AD, CN, SCD, MCIc, MCInc };

std::string_view to_string(Diagnosis d);
Diagnosis parse_diagnosis(std::string_view s);

struct SubjectRecord {
  std::string subject_id;
  std::string cohort;
  Diagnosis diagnosis = Diagnosis::CN;
  std::filesystem::path volume_path;
  std::optional<double> icv_mm3;
  std::optional<double> followup_years;
};

inline constexpr std::string_view kManifestHeader =
    "subject_id,cohort,diagnosis,volume_path,icv_mm3,followup_years";

/// Relative volume paths are resolved against the manifest's directory.
/// Volume files are not opened.
std::vector<SubjectRecord> load_manifest(const std::filesystem::path& path);
/// Writes volume paths verbatim.
void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path);

/// Binary task: which diagnoses form the positive (1) and negative (0) class.
struct Task {
  std::vector<Diagnosis> positive{Diagnosis::AD};
  std::vector<Diagnosis> negative{Diagnosis::CN};

  std::optional<int> label_of(Diagnosis d) const;
};

struct Split {
  std::vector<Index> train;
  std::vector<Index> test;
};

struct SplitPlan {
  std::uint64_t seed = 0;
  int iterations = 0;
  double train_fraction = 0.9;
  std::vector<Split> splits;
};

/// J stratified random train/test partitions of `labels`. Iteration j draws
/// from its own substream, so plans are reproducible per (seed, j).
SplitPlan stratified_splits(std::span<const int> labels, int iterations, double train_fraction,
                            std::uint64_t seed);

/// Stratified holdout of `fraction` of each class. Returns (core, validation)
/// as positions into `labels`, each ascending.
std::pair<std::vector<Index>, std::vector<Index>> validation_split(std::span<const int> labels,
                                                                   double fraction, std::uint64_t seed);

struct LabeledVolume {
  std::string id;
  int label = 0;
  Volume volume;
};

struct AugmentedSample {
  Volume volume;
  int label = 0;
  std::pair<std::string, std::string> sources;
};

struct AugmentedSet {
  std::vector<AugmentedSample> samples;
  int target_per_class = 0;
};

/// Same-class mixup: every output is lambda*v1 + (1-lambda)*v2 with v1, v2
/// drawn uniformly with replacement from one class (v1 != v2 when the class
/// has more than one member). Classes are emitted in ascending label order.
AugmentedSet mixup_augment(std::span<const LabeledVolume> samples, int target_per_class, double lambda,
                           std::uint64_t seed);

struct SynthParams {
  int n_per_class = 30;
  std::array<Index, 3> dims{24, 24, 24};
  double effect_size = 0.3;
  double noise_sigma = 0.05;
  std::uint64_t seed = 1;
};

struct SynthOutput {
  std::filesystem::path manifest;          // modulated gray-matter maps
  std::filesystem::path manifest_minimal;  // minimally processed intensity images
  std::filesystem::path mask;
  std::filesystem::path atrophy_region;
};

/// Writes a two-class synthetic cohort (CN = 0, AD = 1) under `out_dir`.
/// AD subjects lose `effect_size` of gray-matter probability inside a fixed
/// ellipsoid. The intensity images carry the same signal plus a per-subject
/// intensity shift, gain and smooth bias field.
SynthOutput synth_cohort(const SynthParams& params, const std::filesystem::path& out_dir);

/// Brain and atrophy ellipsoids used by synth_cohort for a given grid.
Mask synth_brain_mask(const Geometry& g);
Mask synth_atrophy_region(const Geometry& g);

}  // namespace mriclass

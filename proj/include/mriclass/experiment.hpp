#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mriclass/cnn/train.hpp"
#include "mriclass/dataset.hpp"
#include "mriclass/stats.hpp"
#include "mriclass/volume.hpp"

namespace mriclass {

enum class Classifier { Svm, Cnn };
enum class Pipeline { Minimal, Modulated };

std::string_view to_string(Classifier c);
std::string_view to_string(Pipeline p);
Classifier parse_classifier(std::string_view s);
Pipeline parse_pipeline(std::string_view s);

struct SvmSettings {
  std::vector<double> c_grid;
  int folds = 5;
  double alpha = 0.05;
};

struct CnnSettings {
  cnn::TrainConfig train{};
  int augment_per_class = 1000;
  double mixup_lambda = 0.8;
  double validation_fraction = 0.1;
};

struct StatsSettings {
  int bootstrap = 500;
  double level = 0.95;
  double alpha = 0.05;
  int comparisons = 4;
};

/// One experiment, fully described by a JSON file. Relative paths in the file
/// are resolved against its directory.
struct ExperimentConfig {
  Task task;
  std::vector<Classifier> classifiers{Classifier::Svm};
  std::vector<Pipeline> pipelines{Pipeline::Modulated};
  std::map<Pipeline, std::filesystem::path> manifests;
  std::filesystem::path mask;
  int iterations = 20;
  double train_fraction = 0.9;
  SvmSettings svm;
  CnnSettings cnn;
  StatsSettings stats;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  int workers = 0;  // CV iterations run concurrently; 0 uses every hardware thread

  // test
  std::vector<std::filesystem::path> models;
  std::map<Pipeline, std::filesystem::path> test_manifests;
  // map
  std::string map_kind;
  std::filesystem::path map_model;
  std::optional<std::filesystem::path> map_manifest;
  // synth
  SynthParams synth;
};

ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {},
                             std::optional<std::filesystem::path> out_override = {});

/// Subjects of a manifest that belong to the task, with their class labels.
struct Cohort {
  std::vector<SubjectRecord> records;
  std::vector<int> labels;
};

Cohort load_cohort(const std::filesystem::path& manifest, const Task& task);

/// Pipeline pre-processing of one subject. Minimal: in-mask z-scoring.
/// Modulated: division by ICV when recorded, then masking.
Volume preprocess(const SubjectRecord& r, Pipeline p, const Mask& mask);
std::vector<Volume> preprocess_all(const Cohort& c, Pipeline p, const Mask& mask);

void write_predictions(const stats::ScoredSet& s, const std::filesystem::path& path);
stats::ScoredSet read_predictions(const std::filesystem::path& path);
void write_training_log(const std::vector<cnn::EpochLog>& log, const std::filesystem::path& path);

/// Repeated stratified train/test evaluation of every configured
/// classifier × pipeline on one shared split plan. Returns summary.json.
nlohmann::json cmd_cv(const ExperimentConfig& config);
/// Trains one model on the whole task cohort and serializes it.
nlohmann::json cmd_train_full(const ExperimentConfig& config);
/// Scores saved models on an independent cohort with bootstrap intervals and
/// pairwise McNemar tests.
nlohmann::json cmd_external_test(const ExperimentConfig& config);
/// Exports an SVM p-map or a CNN saliency map with its thresholded mask.
nlohmann::json cmd_export_map(const ExperimentConfig& config);
nlohmann::json cmd_synth(const ExperimentConfig& config);

}  // namespace mriclass

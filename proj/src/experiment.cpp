#include "mriclass/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "mriclass/error.hpp"
#include "mriclass/model_io.hpp"
#include "mriclass/rng.hpp"
#include "mriclass/svm.hpp"

namespace mriclass {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Classifier c) { return c == Classifier::Svm ? "svm" : "cnn"; }
std::string_view to_string(Pipeline p) { return p == Pipeline::Minimal ? "minimal" : "modulated"; }

Classifier parse_classifier(std::string_view s) {
  if (s == "svm") return Classifier::Svm;
  if (s == "cnn") return Classifier::Cnn;
  fail(Errc::ConfigError, "unknown classifier '" + std::string(s) + "'");
}

Pipeline parse_pipeline(std::string_view s) {
  if (s == "minimal") return Pipeline::Minimal;
  if (s == "modulated") return Pipeline::Modulated;
  fail(Errc::ConfigError, "unknown pipeline '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  return j[key].get<T>();
}

std::vector<Diagnosis> parse_diagnoses(const json& j) {
  std::vector<Diagnosis> out;
  for (const auto& d : j) out.push_back(parse_diagnosis(d.get<std::string>()));
  return out;
}

std::map<Pipeline, fs::path> parse_manifest_map(const json& j, const fs::path& base, Pipeline fallback) {
  std::map<Pipeline, fs::path> out;
  if (j.is_string()) {
    out[fallback] = resolve(base, j.get<std::string>());
  } else {
    for (const auto& [k, v] : j.items()) out[parse_pipeline(k)] = resolve(base, v.get<std::string>());
  }
  return out;
}

template <class T, class Parse>
std::vector<T> one_or_many(const json& j, const char* single, const char* plural, std::vector<T> fallback, Parse parse) {
  if (j.contains(plural)) {
    std::vector<T> out;
    for (const auto& v : j[plural]) out.push_back(parse(v.get<std::string>()));
    if (out.empty()) fail(Errc::ConfigError, std::string(plural) + " must not be empty");
    return out;
  }
  if (j.contains(single)) return {parse(j[single].get<std::string>())};
  return fallback;
}

}  // namespace

ExperimentConfig parse_config(const json& j, const fs::path& base) {
  ExperimentConfig c;
  c.svm.c_grid = svm::default_c_grid();
  try {
    if (!j.is_object()) fail(Errc::ConfigError, "config must be a JSON object");
    if (j.contains("task")) {
      c.task.positive = parse_diagnoses(j["task"].at("positive"));
      c.task.negative = parse_diagnoses(j["task"].at("negative"));
    }
    c.classifiers = one_or_many<Classifier>(j, "classifier", "classifiers", c.classifiers, parse_classifier);
    c.pipelines = one_or_many<Pipeline>(j, "pipeline", "pipelines", c.pipelines, parse_pipeline);
    if (j.contains("manifests")) c.manifests = parse_manifest_map(j["manifests"], base, c.pipelines.front());
    if (j.contains("manifest")) c.manifests = parse_manifest_map(j["manifest"], base, c.pipelines.front());
    if (j.contains("mask")) c.mask = resolve(base, j["mask"].get<std::string>());
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.workers = get_or(j, "workers", 0);
    c.out_dir = resolve(base, get_or<std::string>(j, "out", "out"));

    if (j.contains("cv")) {
      c.iterations = get_or(j["cv"], "iterations", c.iterations);
      c.train_fraction = get_or(j["cv"], "train_fraction", c.train_fraction);
    }
    if (j.contains("svm")) {
      const auto& s = j["svm"];
      if (s.contains("c_grid")) c.svm.c_grid = s["c_grid"].get<std::vector<double>>();
      c.svm.folds = get_or(s, "folds", c.svm.folds);
      c.svm.alpha = get_or(s, "alpha", c.svm.alpha);
    }
    if (j.contains("cnn")) {
      const auto& s = j["cnn"];
      auto& t = c.cnn.train;
      t.learning_rate = get_or(s, "learning_rate", t.learning_rate);
      t.adam.epsilon = get_or(s, "epsilon", t.adam.epsilon);
      t.adam.beta1 = get_or(s, "beta1", t.adam.beta1);
      t.adam.beta2 = get_or(s, "beta2", t.adam.beta2);
      t.dropout_rate = get_or(s, "dropout_rate", t.dropout_rate);
      t.batch_size = get_or(s, "batch_size", t.batch_size);
      t.lr_halving_epochs = get_or(s, "lr_halving_epochs", t.lr_halving_epochs);
      t.patience = get_or(s, "patience", t.patience);
      t.max_epochs = get_or(s, "max_epochs", t.max_epochs);
      t.batchnorm.momentum = get_or(s, "bn_momentum", t.batchnorm.momentum);
      c.cnn.augment_per_class = get_or(s, "augment_per_class", c.cnn.augment_per_class);
      c.cnn.mixup_lambda = get_or(s, "mixup_lambda", c.cnn.mixup_lambda);
      c.cnn.validation_fraction = get_or(s, "validation_fraction", c.cnn.validation_fraction);
    }
    if (j.contains("stats")) {
      const auto& s = j["stats"];
      c.stats.bootstrap = get_or(s, "bootstrap", c.stats.bootstrap);
      c.stats.level = get_or(s, "level", c.stats.level);
      c.stats.alpha = get_or(s, "alpha", c.stats.alpha);
      c.stats.comparisons = get_or(s, "comparisons", c.stats.comparisons);
    }
    if (j.contains("test")) {
      const auto& s = j["test"];
      if (s.contains("models"))
        for (const auto& m : s["models"]) c.models.push_back(resolve(base, m.get<std::string>()));
      if (s.contains("model")) c.models.push_back(resolve(base, s["model"].get<std::string>()));
      if (s.contains("manifests")) c.test_manifests = parse_manifest_map(s["manifests"], base, c.pipelines.front());
      if (s.contains("manifest")) c.test_manifests = parse_manifest_map(s["manifest"], base, c.pipelines.front());
    }
    if (j.contains("map")) {
      const auto& s = j["map"];
      c.map_kind = get_or<std::string>(s, "kind", "");
      if (s.contains("model")) c.map_model = resolve(base, s["model"].get<std::string>());
      if (s.contains("manifest")) c.map_manifest = resolve(base, s["manifest"].get<std::string>());
    }
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      c.synth.n_per_class = get_or(s, "n_per_class", c.synth.n_per_class);
      if (s.contains("dims")) {
        auto d = s["dims"].get<std::vector<Index>>();
        if (d.size() != 3) fail(Errc::ConfigError, "synth.dims needs 3 entries");
        c.synth.dims = {d[0], d[1], d[2]};
      }
      c.synth.effect_size = get_or(s, "effect_size", c.synth.effect_size);
      c.synth.noise_sigma = get_or(s, "noise_sigma", c.synth.noise_sigma);
    }
  } catch (const json::exception& e) {
    fail(Errc::ConfigError, e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::UnknownDiagnosis) fail(Errc::ConfigError, e.message());
    throw;
  }
  c.synth.seed = c.seed;

  require(c.workers >= 0, Errc::ConfigError, "workers must be >= 0");
  require(c.iterations >= 1, Errc::ConfigError, "cv.iterations must be >= 1");
  require(c.train_fraction > 0.0 && c.train_fraction < 1.0, Errc::ConfigError, "cv.train_fraction must be in (0,1)");
  require(!c.svm.c_grid.empty(), Errc::ConfigError, "svm.c_grid must not be empty");
  for (double C : c.svm.c_grid) require(C > 0.0, Errc::ConfigError, "svm.c_grid entries must be > 0");
  require(c.svm.folds >= 2, Errc::ConfigError, "svm.folds must be >= 2");
  require(c.cnn.augment_per_class >= 1, Errc::ConfigError, "cnn.augment_per_class must be >= 1");
  require(c.cnn.mixup_lambda > 0.5 && c.cnn.mixup_lambda <= 1.0, Errc::ConfigError, "cnn.mixup_lambda must be in (0.5,1]");
  require(c.cnn.validation_fraction > 0.0 && c.cnn.validation_fraction < 1.0, Errc::ConfigError,
          "cnn.validation_fraction must be in (0,1)");
  require(c.stats.bootstrap >= 1 && c.stats.level > 0.0 && c.stats.level < 1.0 && c.stats.comparisons >= 1,
          Errc::ConfigError, "invalid stats settings");
  cnn::validate(c.cnn.train);
  return c;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override,
                             std::optional<fs::path> out_override) {
  std::ifstream in(path);
  if (!in) fail(Errc::ConfigError, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(Errc::ConfigError, path.string() + ": " + e.what());
  }
  ExperimentConfig c = parse_config(j, path.parent_path());
  if (seed_override) {
    c.seed = *seed_override;
    c.synth.seed = *seed_override;
  }
  if (out_override) c.out_dir = *out_override;
  return c;
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

namespace {

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty() || !fs::exists(p)) fail(Errc::ConfigError, what + " not found: " + p.string());
}

void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(Errc::ConfigError, "cannot create output directory " + dir.string());
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string iter_name(const char* prefix, int j, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%02d%s", prefix, j, ext);
  return buf;
}

void write_json_file(const json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) fail(Errc::IoError, "cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out) fail(Errc::IoError, "write failed for " + p.string());
}

json task_json(const Task& t) {
  json j;
  for (auto d : t.positive) j["positive"].push_back(std::string(to_string(d)));
  for (auto d : t.negative) j["negative"].push_back(std::string(to_string(d)));
  return j;
}

json ci_json(const stats::ConfidenceInterval& ci) {
  return {{"point", ci.point},
          {"lower", ci.lower},
          {"upper", ci.upper},
          {"level", ci.level},
          {"method", std::string(stats::to_string(ci.method))}};
}

svm::RowMatrix feature_matrix(const std::vector<Volume>& volumes, std::span<const Index> rows, const Mask& mask) {
  svm::RowMatrix X(static_cast<Index>(rows.size()), mask.count());
  for (std::size_t r = 0; r < rows.size(); ++r)
    X.row(static_cast<Index>(r)) = flatten_masked(volumes[static_cast<std::size_t>(rows[r])], mask).values.cast<double>().transpose();
  return X;
}

Eigen::VectorXd pm_labels(const std::vector<int>& labels, std::span<const Index> rows) {
  Eigen::VectorXd y(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) y[static_cast<Index>(r)] = labels[static_cast<std::size_t>(rows[r])] == 1 ? 1.0 : -1.0;
  return y;
}

std::vector<Index> all_rows(std::size_t n) {
  std::vector<Index> r(n);
  std::iota(r.begin(), r.end(), Index{0});
  return r;
}

cnn::CnnData<float> cnn_data(const std::vector<Volume>& volumes, const std::vector<int>& labels,
                             std::span<const Index> rows) {
  cnn::CnnData<float> d;
  if (!volumes.empty()) d.dims = volumes.front().geometry.dims;
  for (Index r : rows) {
    d.inputs.push_back(volumes[static_cast<std::size_t>(r)].data);
    d.labels.push_back(labels[static_cast<std::size_t>(r)]);
  }
  return d;
}

int smallest_class(std::span<const int> labels) {
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  int m = std::numeric_limits<int>::max();
  for (auto [l, n] : counts) m = std::min(m, n);
  return counts.empty() ? 0 : m;
}

svm::LinearSvmModel fit_svm(const svm::RowMatrix& X, const Eigen::VectorXd& y, const SvmSettings& s,
                            std::uint64_t seed) {
  std::vector<int> lab(static_cast<std::size_t>(y.size()));
  for (Index i = 0; i < y.size(); ++i) lab[static_cast<std::size_t>(i)] = y[i] > 0 ? 1 : 0;
  const int folds = std::min(s.folds, smallest_class(lab));
  const double C = s.c_grid.size() == 1 ? s.c_grid.front() : svm::select_C(X, y, s.c_grid, seed, std::max(folds, 2));
  svm::SolverOptions opts;
  opts.seed = seed;
  return svm::train_linear_svm(X, y, C, opts);
}

struct CnnFit {
  cnn::TrainResult<float> result;
};

/// Validation holdout on original subjects, same-class mixup of the rest,
/// normalization on the augmented set, then training with early stopping.
CnnFit fit_cnn(const std::vector<Volume>& volumes, const Cohort& cohort, std::span<const Index> rows,
               const CnnSettings& s, std::uint64_t seed) {
  std::vector<int> labels;
  for (Index r : rows) labels.push_back(cohort.labels[static_cast<std::size_t>(r)]);
  auto [core, val] = validation_split(labels, s.validation_fraction, seed);

  std::vector<LabeledVolume> core_samples;
  for (Index k : core) {
    const auto r = static_cast<std::size_t>(rows[static_cast<std::size_t>(k)]);
    core_samples.push_back({cohort.records[r].subject_id, cohort.labels[r], volumes[r]});
  }
  AugmentedSet aug = mixup_augment(core_samples, s.augment_per_class, s.mixup_lambda, seed);
  core_samples.clear();

  cnn::CnnData<float> train_set;
  train_set.dims = volumes.front().geometry.dims;
  for (auto& a : aug.samples) {
    train_set.inputs.push_back(std::move(a.volume.data));
    train_set.labels.push_back(a.label);
  }
  aug.samples.clear();
  std::vector<Index> val_rows;
  for (Index k : val) val_rows.push_back(rows[static_cast<std::size_t>(k)]);
  cnn::CnnData<float> val_set = cnn_data(volumes, cohort.labels, val_rows);

  auto model = cnn::init_model<float>(cnn::Architecture{}, Seed(seed).child("init").value());
  std::tie(model.input_mean, model.input_std) = cnn::fit_input_normalization(train_set);
  cnn::TrainConfig tc = s.train;
  tc.seed = seed;
  return {cnn::train(std::move(model), train_set, val_set, tc)};
}

stats::ScoredSet scored_set(const Cohort& cohort, std::span<const Index> rows, const Eigen::VectorXd& scores,
                            Classifier kind) {
  stats::ScoredSet s;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = static_cast<std::size_t>(rows[k]);
    const double score = scores[static_cast<Index>(k)];
    const int pred = kind == Classifier::Svm ? (svm::predicted_class(score) > 0 ? 1 : 0) : cnn::predicted_label(score);
    s.push_back({cohort.records[r].subject_id, cohort.labels[r], score, pred});
  }
  return s;
}

void check_same_subjects(const Cohort& a, const Cohort& b) {
  bool same = a.records.size() == b.records.size();
  for (std::size_t i = 0; same && i < a.records.size(); ++i)
    same = a.records[i].subject_id == b.records[i].subject_id && a.labels[i] == b.labels[i];
  if (!same) fail(Errc::ConfigError, "pipeline manifests must list the same subjects in the same order");
}

Mask load_mask_checked(const fs::path& p) {
  require_file(p, "mask");
  return read_mask(p);
}

const fs::path& manifest_for(const std::map<Pipeline, fs::path>& m, Pipeline p) {
  auto it = m.find(p);
  if (it == m.end()) fail(Errc::ConfigError, "no manifest configured for pipeline " + std::string(to_string(p)));
  require_file(it->second, "manifest");
  return it->second;
}

json model_meta(const ExperimentConfig& c, Classifier k, Pipeline p, const Mask& mask) {
  return {{"classifier", std::string(to_string(k))},
          {"pipeline", std::string(to_string(p))},
          {"task", task_json(c.task)},
          {"mask_voxels", mask.count()},
          {"dims", mask.geometry().dims},
          {"seed", c.seed}};
}

void check_model_grid(const json& meta, const Mask& mask) {
  if (meta.contains("mask_voxels") && meta["mask_voxels"].get<Index>() != mask.count()) {
    fail(Errc::FeatureMismatch, "model was trained on a mask with " + meta["mask_voxels"].dump() + " voxels, config mask has " +
                                    std::to_string(mask.count()));
  }
  if (meta.contains("dims") && meta["dims"].get<std::array<Index, 3>>() != mask.geometry().dims) {
    fail(Errc::FeatureMismatch, "model grid differs from the mask grid");
  }
}

struct IterationOutcome {
  stats::ScoredSet predictions;
  std::vector<cnn::EpochLog> log;
  json extra;
  double auc = 0.0;
  double accuracy = 0.0;
};

/// Runs fn(0..n-1) on up to `workers` threads (0: one per hardware thread).
/// The first failure in iteration order is rethrown with its iteration.
void run_iterations(int n, int workers, const std::function<void(int)>& fn, const std::string& context) {
  unsigned threads = workers > 0 ? static_cast<unsigned>(workers) : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, static_cast<unsigned>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int j = next++; j < n; j = next++) {
      try {
        fn(j);
      } catch (...) {
        errors[static_cast<std::size_t>(j)] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (int j = 0; j < n; ++j) {
    if (!errors[static_cast<std::size_t>(j)]) continue;
    try {
      std::rethrow_exception(errors[static_cast<std::size_t>(j)]);
    } catch (const Error& e) {
      throw Error(e.code(), context + " iteration " + std::to_string(j) + ": " + e.message());
    }
  }
}

}  // namespace

Cohort load_cohort(const fs::path& manifest, const Task& task) {
  Cohort c;
  for (auto& r : load_manifest(manifest)) {
    if (auto l = task.label_of(r.diagnosis)) {
      c.labels.push_back(*l);
      c.records.push_back(std::move(r));
    }
  }
  return c;
}

Volume preprocess(const SubjectRecord& r, Pipeline p, const Mask& mask) {
  Volume v = read_volume(r.volume_path);
  check_same_geometry(v.geometry, mask.geometry());
  if (p == Pipeline::Minimal) return normalize_in_mask(v, mask);
  if (r.icv_mm3) v = divide_by_icv(v, *r.icv_mm3);
  return apply_mask(v, mask);
}

std::vector<Volume> preprocess_all(const Cohort& c, Pipeline p, const Mask& mask) {
  std::vector<Volume> out;
  out.reserve(c.records.size());
  for (const auto& r : c.records) {
    try {
      out.push_back(preprocess(r, p, mask));
    } catch (const Error& e) {
      throw Error(e.code(), "subject " + r.subject_id + ": " + e.message());
    }
  }
  return out;
}

void write_predictions(const stats::ScoredSet& s, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << "subject_id,true_label,score,predicted_label\n";
  for (const auto& r : s)
    out << r.subject_id << ',' << r.true_label << ',' << format_double(r.score) << ',' << r.predicted_label << '\n';
  if (!out) fail(Errc::IoError, "write failed for " + path.string());
}

stats::ScoredSet read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "subject_id,true_label,score,predicted_label") fail(Errc::MalformedRow, path.string() + ": bad header");
  stats::ScoredSet s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string id, t, sc, p;
    if (!std::getline(is, id, ',') || !std::getline(is, t, ',') || !std::getline(is, sc, ',') || !std::getline(is, p)) {
      fail(Errc::MalformedRow, path.string() + ": '" + line + "'");
    }
    s.push_back({id, std::stoi(t), std::stod(sc), std::stoi(p)});
  }
  return s;
}

void write_training_log(const std::vector<cnn::EpochLog>& log, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << "epoch,train_loss,val_auc,lr\n";
  for (const auto& e : log)
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_auc) << ',' << format_double(e.lr)
        << '\n';
  if (!out) fail(Errc::IoError, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

json cmd_cv(const ExperimentConfig& config) {
  const Mask mask = load_mask_checked(config.mask);
  std::map<Pipeline, Cohort> cohorts;
  for (Pipeline p : config.pipelines) cohorts[p] = load_cohort(manifest_for(config.manifests, p), config.task);
  const Cohort& reference = cohorts.at(config.pipelines.front());
  for (const auto& [p, c] : cohorts) check_same_subjects(reference, c);
  prepare_out_dir(config.out_dir);

  // One plan for every classifier and pipeline.
  const SplitPlan plan = stratified_splits(reference.labels, config.iterations, config.train_fraction, config.seed);
  double n_train = 0.0, n_test = 0.0;
  for (const auto& s : plan.splits) {
    n_train += static_cast<double>(s.train.size());
    n_test += static_cast<double>(s.test.size());
  }
  n_train /= plan.iterations;
  n_test /= plan.iterations;

  json summary;
  summary["command"] = "cv";
  summary["seed"] = config.seed;
  summary["iterations"] = config.iterations;
  summary["train_fraction"] = config.train_fraction;
  summary["subjects"] = reference.records.size();
  summary["mean_train_size"] = n_train;
  summary["mean_test_size"] = n_test;
  summary["task"] = task_json(config.task);
  summary["results"] = json::array();

  for (Pipeline p : config.pipelines) {
    const Cohort& cohort = cohorts.at(p);
    const std::vector<Volume> volumes = preprocess_all(cohort, p, mask);
    for (Classifier k : config.classifiers) {
      const std::string combo = std::string(to_string(k)) + "_" + std::string(to_string(p));
      std::vector<IterationOutcome> outcomes(static_cast<std::size_t>(plan.iterations));
      auto run = [&](int j) {
        const Split& split = plan.splits[static_cast<std::size_t>(j)];
        const std::uint64_t seed = Seed(config.seed).child("iteration", static_cast<std::uint64_t>(j)).value();
        IterationOutcome& o = outcomes[static_cast<std::size_t>(j)];
        Eigen::VectorXd scores;
        if (k == Classifier::Svm) {
          const auto X = feature_matrix(volumes, split.train, mask);
          const auto model = fit_svm(X, pm_labels(cohort.labels, split.train), config.svm, seed);
          scores = svm::decision_scores(model, feature_matrix(volumes, split.test, mask));
          o.extra = {{"C", model.C}};
        } else {
          auto fit = fit_cnn(volumes, cohort, split.train, config.cnn, seed);
          scores = cnn::predict(fit.result.model, cnn_data(volumes, cohort.labels, split.test));
          o.extra = {{"best_epoch", fit.result.best_epoch},
                     {"best_val_auc", fit.result.best_auc},
                     {"epochs", fit.result.log.size()}};
          o.log = std::move(fit.result.log);
        }
        o.predictions = scored_set(cohort, split.test, scores, k);
        o.auc = stats::auc(o.predictions);
        o.accuracy = stats::accuracy(o.predictions);
      };
      run_iterations(plan.iterations, config.workers, run, combo);

      std::vector<double> aucs, accs;
      json extra = json::array();
      for (const auto& o : outcomes) {
        aucs.push_back(o.auc);
        accs.push_back(o.accuracy);
        extra.push_back(o.extra);
      }

      const fs::path dir = config.out_dir / combo;
      prepare_out_dir(dir);
      for (int j = 0; j < plan.iterations; ++j) {
        const auto& o = outcomes[static_cast<std::size_t>(j)];
        write_predictions(o.predictions, dir / iter_name("predictions_iter", j, ".csv"));
        if (k == Classifier::Cnn) write_training_log(o.log, dir / iter_name("training_log_iter", j, ".csv"));
      }

      json r;
      r["classifier"] = to_string(k);
      r["pipeline"] = to_string(p);
      r["iterations"] = extra;
      for (auto [metric, values] : {std::pair{stats::Metric::Auc, &aucs}, std::pair{stats::Metric::Accuracy, &accs}}) {
        json m;
        m["values"] = *values;
        m["J"] = plan.iterations;
        m["seed"] = config.seed;
        if (plan.iterations >= 2) {
          m["ci"] = ci_json(stats::corrected_resampled_ci(*values, n_train, n_test, config.stats.level));
        } else {
          m["ci"] = nullptr;
        }
        r["metrics"][std::string(stats::to_string(metric))] = m;
      }
      summary["results"].push_back(r);
    }
  }
  write_json_file(summary, config.out_dir / "summary.json");
  return summary;
}

json cmd_train_full(const ExperimentConfig& config) {
  if (config.classifiers.size() != 1 || config.pipelines.size() != 1) {
    fail(Errc::ConfigError, "train needs exactly one classifier and one pipeline");
  }
  const Classifier k = config.classifiers.front();
  const Pipeline p = config.pipelines.front();
  const Mask mask = load_mask_checked(config.mask);
  const Cohort cohort = load_cohort(manifest_for(config.manifests, p), config.task);
  prepare_out_dir(config.out_dir);
  const std::vector<Volume> volumes = preprocess_all(cohort, p, mask);
  const auto rows = all_rows(cohort.records.size());
  const std::uint64_t seed = Seed(config.seed).child("full").value();
  const json meta = model_meta(config, k, p, mask);

  json summary;
  summary["command"] = "train";
  summary["classifier"] = to_string(k);
  summary["pipeline"] = to_string(p);
  summary["subjects"] = cohort.records.size();
  summary["seed"] = config.seed;
  Eigen::VectorXd scores;
  if (k == Classifier::Svm) {
    const auto X = feature_matrix(volumes, rows, mask);
    const auto model = fit_svm(X, pm_labels(cohort.labels, rows), config.svm, seed);
    save_svm(model, config.out_dir / "model.json", meta);
    scores = svm::decision_scores(model, X);
    summary["C"] = model.C;
  } else {
    auto fit = fit_cnn(volumes, cohort, rows, config.cnn, seed);
    save_cnn(fit.result.model, config.out_dir / "model.json", meta);
    write_training_log(fit.result.log, config.out_dir / "training_log.csv");
    scores = cnn::predict(fit.result.model, cnn_data(volumes, cohort.labels, rows));
    summary["best_epoch"] = fit.result.best_epoch;
    summary["best_val_auc"] = fit.result.best_auc;
    summary["epochs"] = fit.result.log.size();
  }
  const auto train_scores = scored_set(cohort, rows, scores, k);
  write_predictions(train_scores, config.out_dir / "predictions_train.csv");
  summary["train_auc"] = stats::auc(train_scores);
  summary["train_accuracy"] = stats::accuracy(train_scores);
  write_json_file(summary, config.out_dir / "summary.json");
  return summary;
}

namespace {

struct LoadedModel {
  Classifier kind;
  Pipeline pipeline;
  json meta;
  std::optional<svm::LinearSvmModel> svm;
  std::optional<cnn::CnnModel<float>> cnn;
};

LoadedModel load_any_model(const fs::path& header) {
  require_file(header, "model");
  LoadedModel m{};
  const std::string kind = model_kind(header);
  if (kind == "svm") {
    auto [model, meta] = load_svm(header);
    m.kind = Classifier::Svm;
    m.svm = std::move(model);
    m.meta = std::move(meta);
  } else if (kind == "cnn") {
    auto [model, meta] = load_cnn(header);
    m.kind = Classifier::Cnn;
    m.cnn = std::move(model);
    m.meta = std::move(meta);
  } else {
    fail(Errc::IoError, header.string() + ": unknown model kind '" + kind + "'");
  }
  m.pipeline = parse_pipeline(m.meta.value("pipeline", "modulated"));
  return m;
}

Eigen::VectorXd score_model(const LoadedModel& m, const std::vector<Volume>& volumes, const Cohort& cohort,
                            const Mask& mask) {
  const auto rows = all_rows(cohort.records.size());
  if (m.kind == Classifier::Svm) {
    if (m.svm->feature_count() != mask.count()) {
      fail(Errc::FeatureMismatch, "model expects " + std::to_string(m.svm->feature_count()) + " features, mask yields " +
                                      std::to_string(mask.count()));
    }
    return svm::decision_scores(*m.svm, feature_matrix(volumes, rows, mask));
  }
  return cnn::predict(*m.cnn, cnn_data(volumes, cohort.labels, rows));
}

}  // namespace

json cmd_external_test(const ExperimentConfig& config) {
  if (config.models.empty()) fail(Errc::ConfigError, "test.models is empty");
  const Mask mask = load_mask_checked(config.mask);
  std::vector<LoadedModel> models;
  for (const auto& path : config.models) models.push_back(load_any_model(path));
  const auto& manifests = config.test_manifests.empty() ? config.manifests : config.test_manifests;
  for (const auto& m : models) manifest_for(manifests, m.pipeline);
  prepare_out_dir(config.out_dir);

  json summary;
  summary["command"] = "test";
  summary["seed"] = config.seed;
  summary["bootstrap"] = config.stats.bootstrap;
  summary["models"] = json::array();
  std::vector<stats::ScoredSet> predictions;
  std::map<Pipeline, std::pair<Cohort, std::vector<Volume>>> data;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    check_model_grid(m.meta, mask);
    if (!data.count(m.pipeline)) {
      Cohort c = load_cohort(manifest_for(manifests, m.pipeline), config.task);
      auto v = preprocess_all(c, m.pipeline, mask);
      data.emplace(m.pipeline, std::make_pair(std::move(c), std::move(v)));
    }
    const auto& [cohort, volumes] = data.at(m.pipeline);
    predictions.push_back(scored_set(cohort, all_rows(cohort.records.size()), score_model(m, volumes, cohort, mask), m.kind));
    const std::string name = iter_name("predictions_model", static_cast<int>(i), ".csv");
    write_predictions(predictions.back(), config.out_dir / name);

    json r;
    r["index"] = i;
    r["classifier"] = to_string(m.kind);
    r["pipeline"] = to_string(m.pipeline);
    r["predictions"] = name;
    r["subjects"] = cohort.records.size();
    const std::uint64_t seed = Seed(config.seed).child("model", i).value();
    for (auto metric : {stats::Metric::Auc, stats::Metric::Accuracy}) {
      json mj;
      mj["ci"] = ci_json(stats::bootstrap_ci(predictions.back(), metric, config.stats.bootstrap, config.stats.level, seed));
      mj["B"] = config.stats.bootstrap;
      mj["seed"] = config.seed;
      r["metrics"][std::string(stats::to_string(metric))] = mj;
    }
    summary["models"].push_back(r);
  }

  summary["comparisons"] = json::array();
  const double threshold = stats::bonferroni_threshold(config.stats.alpha, config.stats.comparisons);
  for (std::size_t a = 0; a < models.size(); ++a) {
    for (std::size_t b = a + 1; b < models.size(); ++b) {
      const auto t = stats::contingency_table(predictions[a], predictions[b]);
      json c;
      c["models"] = {a, b};
      c["table"] = {{"n00", t.n00}, {"n01", t.n01}, {"n10", t.n10}, {"n11", t.n11}};
      c["bonferroni_alpha"] = threshold;
      if (t.n01 + t.n10 == 0) {
        c["statistic"] = nullptr;
        c["p_value"] = nullptr;
        c["significant"] = false;
      } else {
        const auto r = stats::mcnemar(t);
        c["statistic"] = r.statistic;
        c["p_value"] = r.p_value;
        c["significant"] = r.p_value < threshold;
      }
      summary["comparisons"].push_back(c);
    }
  }
  write_json_file(summary, config.out_dir / "summary.json");
  return summary;
}

json cmd_export_map(const ExperimentConfig& config) {
  if (config.map_kind != "pmap" && config.map_kind != "saliency") {
    fail(Errc::ConfigError, "map.kind must be 'pmap' or 'saliency'");
  }
  const Mask mask = load_mask_checked(config.mask);
  const LoadedModel m = load_any_model(config.map_model);
  if ((config.map_kind == "pmap") != (m.kind == Classifier::Svm)) {
    fail(Errc::KindMismatch, config.map_kind + " maps need " + (config.map_kind == "pmap" ? "an SVM" : "a CNN") + " model");
  }
  check_model_grid(m.meta, mask);
  fs::path manifest = config.map_manifest ? *config.map_manifest : manifest_for(config.manifests, m.pipeline);
  require_file(manifest, "manifest");
  const Cohort cohort = load_cohort(manifest, config.task);
  prepare_out_dir(config.out_dir);
  const std::vector<Volume> volumes = preprocess_all(cohort, m.pipeline, mask);
  const auto rows = all_rows(cohort.records.size());

  json summary;
  summary["command"] = "map";
  summary["kind"] = config.map_kind;
  summary["pipeline"] = to_string(m.pipeline);
  summary["subjects"] = cohort.records.size();
  if (m.kind == Classifier::Svm) {
    if (m.svm->feature_count() != mask.count()) fail(Errc::FeatureMismatch, "model and mask feature counts differ");
    const auto Z = m.svm->standardizer.apply(feature_matrix(volumes, rows, mask));
    const auto pmap = svm::analytic_pmap(Z, pm_labels(cohort.labels, rows), config.svm.alpha);
    write_volume(unflatten(pmap.p, mask, 1.0f), config.out_dir / "map_p.json");
    write_volume(unflatten(pmap.significant.cast<float>().matrix(), mask, 0.0f), config.out_dir / "map_p_mask.json");
    summary["alpha"] = pmap.alpha;
    summary["significant_voxels"] = pmap.significant.count();
    summary["outputs"] = {"map_p.json", "map_p_mask.json"};
  } else {
    const auto sal = cnn::guided_backprop_saliency(*m.cnn, cnn_data(volumes, cohort.labels, rows));
    Volume map{mask.geometry(), sal.map.cast<float>()};
    Volume thr{mask.geometry(), sal.above_threshold.cast<float>().matrix()};
    write_volume(map, config.out_dir / "map_saliency.json");
    write_volume(thr, config.out_dir / "map_saliency_mask.json");
    summary["averaged_subjects"] = sal.subjects;
    summary["threshold_fraction_of_max"] = 1.0 / 3.0;
    summary["voxels_above_threshold"] = sal.above_threshold.count();
    summary["outputs"] = {"map_saliency.json", "map_saliency_mask.json"};
  }
  write_json_file(summary, config.out_dir / "summary.json");
  return summary;
}

json cmd_synth(const ExperimentConfig& config) {
  prepare_out_dir(config.out_dir);
  SynthParams p = config.synth;
  p.seed = config.seed;
  synth_cohort(p, config.out_dir);
  return {{"command", "synth"},
          {"subjects", 2 * p.n_per_class},
          {"dims", p.dims},
          {"effect_size", p.effect_size},
          {"noise_sigma", p.noise_sigma},
          {"seed", p.seed},
          {"outputs", {"manifest.csv", "manifest_minimal.csv", "mask.json", "atrophy_region.json"}}};
}

}  // namespace mriclass

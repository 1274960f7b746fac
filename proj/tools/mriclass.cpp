#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mriclass/error.hpp"
#include "mriclass/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MRI classification: linear SVM and 3D CNN with evaluation protocol"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  for (const char* name : {"cv", "train", "test", "map", "synth"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "override the output directory");
  }
  app.get_subcommand("cv")->description("repeated stratified train/test evaluation");
  app.get_subcommand("train")->description("train one model on the whole cohort");
  app.get_subcommand("test")->description("score saved models on an independent cohort");
  app.get_subcommand("map")->description("export an SVM p-map or a CNN saliency map");
  app.get_subcommand("synth")->description("generate a synthetic cohort");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    std::optional<std::filesystem::path> out_dir;
    if (out) out_dir = *out;
    const auto config = mriclass::load_config(config_path, seed, out_dir);
    nlohmann::json summary;
    if (cmd == "cv") summary = mriclass::cmd_cv(config);
    else if (cmd == "train") summary = mriclass::cmd_train_full(config);
    else if (cmd == "test") summary = mriclass::cmd_external_test(config);
    else if (cmd == "map") summary = mriclass::cmd_export_map(config);
    else summary = mriclass::cmd_synth(config);
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const mriclass::Error& e) {
    std::cerr << "mriclass " << cmd << ": " << e.what() << '\n';
    return mriclass::exit_code(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "mriclass " << cmd << ": config: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mriclass " << cmd << ": " << e.what() << '\n';
    return 3;
  }
}

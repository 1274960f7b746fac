#pragma once

#include <filesystem>
#include <utility>

#include <json.hpp>

#include "mriclass/cnn/model.hpp"
#include "mriclass/svm.hpp"

namespace mriclass {

/// Header JSON (C, b, feature_count, standardizer, caller metadata under
/// "meta") plus a little-endian f32 weight payload.
void save_svm(const svm::LinearSvmModel& model, const std::filesystem::path& header, const nlohmann::json& meta = {});
std::pair<svm::LinearSvmModel, nlohmann::json> load_svm(const std::filesystem::path& header);

/// Header JSON (architecture, tensor layout, input standardization, "meta")
/// plus the f32 payload: trainable tensors in layer order, then the batchnorm
/// running means and variances.
void save_cnn(const cnn::CnnModel<float>& model, const std::filesystem::path& header, const nlohmann::json& meta = {});
std::pair<cnn::CnnModel<float>, nlohmann::json> load_cnn(const std::filesystem::path& header);

/// "svm" or "cnn" from a saved header.
std::string model_kind(const std::filesystem::path& header);

}  // namespace mriclass

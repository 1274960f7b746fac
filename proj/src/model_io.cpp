#include "mriclass/model_io.hpp"

#include <fstream>

#include "mriclass/error.hpp"
#include "mriclass/volume.hpp"

namespace mriclass {

namespace {

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(Errc::IoError, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, p.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) fail(Errc::IoError, "cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out) fail(Errc::IoError, "write failed for " + p.string());
}

void write_floats(const std::vector<float>& v, const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(Errc::IoError, "cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!out) fail(Errc::IoError, "write failed for " + p.string());
}

std::vector<float> read_floats(const std::filesystem::path& p, std::size_t expected) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(Errc::MissingPayload, p.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes != expected * sizeof(float)) {
    fail(Errc::GeometryMismatch, p.string() + " holds " + std::to_string(bytes) + " bytes, expected " +
                                     std::to_string(expected * sizeof(float)));
  }
  std::vector<float> v(expected);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) fail(Errc::IoError, "short read on " + p.string());
  return v;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

std::string model_kind(const std::filesystem::path& header) {
  auto j = read_json(header);
  if (!j.contains("kind") || !j["kind"].is_string()) fail(Errc::IoError, header.string() + ": missing model kind");
  return j["kind"].get<std::string>();
}

void save_svm(const svm::LinearSvmModel& model, const std::filesystem::path& header, const nlohmann::json& meta) {
  nlohmann::json j;
  j["kind"] = "svm";
  j["C"] = model.C;
  j["b"] = model.b;
  j["feature_count"] = model.feature_count();
  j["standardizer"]["mean"] = to_std(model.standardizer.mean);
  j["standardizer"]["scale"] = to_std(model.standardizer.scale);
  std::vector<int> constant(static_cast<std::size_t>(model.feature_count()));
  for (Index i = 0; i < model.feature_count(); ++i) constant[i] = model.standardizer.constant[i] ? 1 : 0;
  j["standardizer"]["constant"] = constant;
  j["meta"] = meta;
  write_json(j, header);
  write_floats({model.w.data(), model.w.data() + model.w.size()}, payload_path(header));
}

std::pair<svm::LinearSvmModel, nlohmann::json> load_svm(const std::filesystem::path& header) {
  auto j = read_json(header);
  svm::LinearSvmModel m;
  try {
    if (j.at("kind") != "svm") fail(Errc::KindMismatch, header.string() + " is not an SVM model");
    m.C = j.at("C").get<double>();
    m.b = j.at("b").get<double>();
    const auto n = j.at("feature_count").get<Index>();
    auto mean = j.at("standardizer").at("mean").get<std::vector<double>>();
    auto scale = j.at("standardizer").at("scale").get<std::vector<double>>();
    auto constant = j.at("standardizer").at("constant").get<std::vector<int>>();
    if (static_cast<Index>(mean.size()) != n || static_cast<Index>(scale.size()) != n ||
        static_cast<Index>(constant.size()) != n) {
      fail(Errc::GeometryMismatch, header.string() + ": standardizer length differs from feature_count");
    }
    m.standardizer.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), n);
    m.standardizer.scale = Eigen::Map<Eigen::VectorXd>(scale.data(), n);
    m.standardizer.constant.resize(n);
    for (Index i = 0; i < n; ++i) m.standardizer.constant[i] = constant[static_cast<std::size_t>(i)] != 0;
    auto w = read_floats(payload_path(header), static_cast<std::size_t>(n));
    m.w = Eigen::Map<Eigen::VectorXf>(w.data(), n);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, header.string() + ": " + e.what());
  }
  return {std::move(m), j.value("meta", nlohmann::json::object())};
}

void save_cnn(const cnn::CnnModel<float>& model, const std::filesystem::path& header, const nlohmann::json& meta) {
  nlohmann::json j;
  j["kind"] = "cnn";
  j["architecture"]["input_channels"] = model.arch.input_channels;
  j["architecture"]["block_channels"] = model.arch.block_channels;
  j["architecture"]["classes"] = model.arch.classes;
  j["architecture"]["block"] = "conv3(s1)-dropout-bn-relu-conv3(s2)-dropout-bn-relu";
  j["architecture"]["head"] = "global_average_pool-affine-softmax";
  j["input_mean"] = model.input_mean;
  j["input_std"] = model.input_std;
  j["trainable_parameters"] = model.trainable_parameter_count();
  j["dtype"] = "f32le";
  j["meta"] = meta;

  std::vector<float> payload;
  model.params.for_each([&](cnn::ParamKind, const float* d, Index n) { payload.insert(payload.end(), d, d + n); });
  for (std::size_t l = 0; l < model.running_mean.size(); ++l) {
    payload.insert(payload.end(), model.running_mean[l].data(), model.running_mean[l].data() + model.running_mean[l].size());
    payload.insert(payload.end(), model.running_var[l].data(), model.running_var[l].data() + model.running_var[l].size());
  }
  write_json(j, header);
  write_floats(payload, payload_path(header));
}

std::pair<cnn::CnnModel<float>, nlohmann::json> load_cnn(const std::filesystem::path& header) {
  auto j = read_json(header);
  cnn::CnnModel<float> m;
  try {
    if (j.at("kind") != "cnn") fail(Errc::KindMismatch, header.string() + " is not a CNN model");
    const auto& a = j.at("architecture");
    m.arch.input_channels = a.at("input_channels").get<Index>();
    m.arch.block_channels = a.at("block_channels").get<std::vector<Index>>();
    m.arch.classes = a.at("classes").get<Index>();
    m.input_mean = j.at("input_mean").get<double>();
    m.input_std = j.at("input_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, header.string() + ": " + e.what());
  }
  m.params = cnn::Params<float>::zeros(m.arch);
  std::size_t total = static_cast<std::size_t>(m.params.count());
  for (Index l = 0; l < m.arch.conv_count(); ++l) total += 2 * static_cast<std::size_t>(m.arch.conv_out(l));
  const auto payload = read_floats(payload_path(header), total);
  std::size_t off = 0;
  m.params.for_each([&](cnn::ParamKind, float* d, Index n) {
    std::copy(payload.begin() + static_cast<std::ptrdiff_t>(off), payload.begin() + static_cast<std::ptrdiff_t>(off + n), d);
    off += static_cast<std::size_t>(n);
  });
  for (Index l = 0; l < m.arch.conv_count(); ++l) {
    const Index c = m.arch.conv_out(l);
    m.running_mean.push_back(Eigen::Map<const Eigen::VectorXf>(payload.data() + off, c));
    off += static_cast<std::size_t>(c);
    m.running_var.push_back(Eigen::Map<const Eigen::VectorXf>(payload.data() + off, c));
    off += static_cast<std::size_t>(c);
  }
  return {std::move(m), j.value("meta", nlohmann::json::object())};
}

}  // namespace mriclass

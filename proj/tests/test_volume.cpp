#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mriclass/error.hpp"
#include "mriclass/volume.hpp"

using namespace mriclass;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mriclass_test_volume_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::ConfigError;
}

Geometry grid(Index x, Index y, Index z) { return Geometry{{x, y, z}, {1.0, 1.0, 1.0}}; }

}  // namespace

TEST_CASE("write then read is bit exact") {
  const auto dir = scratch("roundtrip");
  Volume v = Volume::zeros(Geometry{{3, 4, 5}, {1.5, 1.0, 2.0}});
  for (Index i = 0; i < v.data.size(); ++i) v.data[i] = 0.1f * static_cast<float>(i) - 3.0f;
  write_volume(v, dir / "v.json");
  CHECK(fs::exists(dir / "v.raw"));
  CHECK(fs::file_size(dir / "v.raw") == 60 * 4);
  Volume r = read_volume(dir / "v.json");
  CHECK(r.geometry == v.geometry);
  CHECK(r.data == v.data);
}

TEST_CASE("x is the fastest axis") {
  Geometry g = grid(3, 2, 2);
  CHECK(g.flat_index(1, 0, 0) == 1);
  CHECK(g.flat_index(0, 1, 0) == 3);
  CHECK(g.flat_index(0, 0, 1) == 6);
}

TEST_CASE("read_volume reports missing and truncated payloads") {
  const auto dir = scratch("errors");
  write_volume(Volume::constant(grid(2, 2, 2), 1.0f), dir / "v.json");
  fs::remove(dir / "v.raw");
  CHECK(code_of([&] { read_volume(dir / "v.json"); }) == Errc::MissingPayload);

  write_volume(Volume::constant(grid(2, 2, 2), 1.0f), dir / "v.json");
  fs::resize_file(dir / "v.raw", 7 * 4);
  CHECK(code_of([&] { read_volume(dir / "v.json"); }) == Errc::GeometryMismatch);
}

TEST_CASE("read_volume rejects non-finite samples") {
  const auto dir = scratch("nan");
  Volume v = Volume::constant(grid(2, 1, 1), 1.0f);
  v.data[1] = std::numeric_limits<float>::quiet_NaN();
  write_volume(v, dir / "v.json");
  CHECK(code_of([&] { read_volume(dir / "v.json"); }) == Errc::NonFiniteData);
}

TEST_CASE("mask validation") {
  Volume v = Volume::zeros(grid(2, 2, 1));
  CHECK(code_of([&] { Mask::from_volume(v); }) == Errc::EmptyMask);
  v.data[2] = 0.5f;
  CHECK(code_of([&] { Mask::from_volume(v); }) == Errc::NotBinaryMask);
  v.data[2] = 1.0f;
  v.data[0] = 1.0f;
  Mask m = Mask::from_volume(v);
  CHECK(m.count() == 2);
  CHECK(m.indices() == std::vector<Index>{0, 2});
  CHECK(m.contains(2));
  CHECK_FALSE(m.contains(1));
  CHECK(m.to_volume().data == v.data);
}

TEST_CASE("normalize_in_mask maps {1,3} to {-1,+1} and zeroes the outside") {
  Volume v = Volume::zeros(grid(3, 1, 1));
  v.data << 1.0f, 3.0f, 100.0f;
  Volume mv = Volume::zeros(grid(3, 1, 1));
  mv.data << 1.0f, 1.0f, 0.0f;
  Volume n = normalize_in_mask(v, Mask::from_volume(mv));
  CHECK(n.data[0] == doctest::Approx(-1.0));
  CHECK(n.data[1] == doctest::Approx(1.0));
  CHECK(n.data[2] == 0.0f);
}

TEST_CASE("normalize_in_mask uses the population variance") {
  Volume v = Volume::zeros(grid(4, 1, 1));
  v.data << 1.0f, 2.0f, 3.0f, 4.0f;
  Volume n = normalize_in_mask(v, Mask::full(v.geometry));
  const double var = n.data.cast<double>().squaredNorm() / 4.0;
  CHECK(n.data.cast<double>().mean() == doctest::Approx(0.0).scale(1.0));
  CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("normalize_in_mask rejects constant interiors") {
  Volume v = Volume::constant(grid(2, 2, 2), 4.0f);
  CHECK(code_of([&] { normalize_in_mask(v, Mask::full(v.geometry)); }) == Errc::ZeroVariance);
}

TEST_CASE("modulation multiplies probability by the Jacobian") {
  Volume p = Volume::constant(grid(2, 1, 1), 0.5f);
  Volume j = Volume::zeros(grid(2, 1, 1));
  j.data << 2.0f, 0.5f;
  Volume m = modulate(p, j);
  CHECK(m.data[0] == 1.0f);
  CHECK(m.data[1] == 0.25f);

  j.data[1] = 0.0f;
  CHECK(code_of([&] { modulate(p, j); }) == Errc::NonPositiveJacobian);
  j.data[1] = 1.0f;
  p.data[0] = 1.5f;
  CHECK(code_of([&] { modulate(p, j); }) == Errc::ProbabilityOutOfRange);
  CHECK(code_of([&] { modulate(Volume::zeros(grid(3, 1, 1)), j); }) == Errc::GeometryMismatch);
}

TEST_CASE("icv division") {
  Volume v = Volume::constant(grid(2, 1, 1), 3.0f);
  CHECK(divide_by_icv(v, 1.5e6).data[0] == doctest::Approx(2e-6));
  CHECK(code_of([&] { divide_by_icv(v, 0.0); }) == Errc::NonPositiveIcv);
}

TEST_CASE("flatten_masked and unflatten are inverse on the mask") {
  Volume v = Volume::zeros(grid(3, 2, 1));
  for (Index i = 0; i < 6; ++i) v.data[i] = static_cast<float>(i + 1);
  Volume mv = Volume::zeros(grid(3, 2, 1));
  mv.data << 0.0f, 1.0f, 1.0f, 0.0f, 0.0f, 1.0f;
  Mask m = Mask::from_volume(mv);
  FeatureVector f = flatten_masked(v, m);
  CHECK(f.values == (Eigen::VectorXf(3) << 2.0f, 3.0f, 6.0f).finished());
  CHECK(f.voxel_index == std::vector<Index>{1, 2, 5});
  Volume back = unflatten(f, m, -1.0f);
  CHECK(back.data == (Eigen::VectorXf(6) << -1.0f, 2.0f, 3.0f, -1.0f, -1.0f, 6.0f).finished());
  CHECK(apply_mask(v, m).data == (Eigen::VectorXf(6) << 0.0f, 2.0f, 3.0f, 0.0f, 0.0f, 6.0f).finished());
  CHECK(code_of([&] { unflatten(Eigen::VectorXf::Zero(4), m); }) == Errc::DimensionMismatch);
}

TEST_CASE("volume header carries the format fields") {
  const auto dir = scratch("header");
  write_volume(Volume::zeros(Geometry{{2, 3, 4}, {1.0, 1.0, 1.0}}), dir / "v.json");
  std::ifstream in(dir / "v.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("dims") == nlohmann::json::array({2, 3, 4}));
  CHECK(j.at("dtype") == "f32le");
  CHECK(j.at("order") == "x-fastest");
}

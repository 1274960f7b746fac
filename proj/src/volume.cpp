#include "mriclass/volume.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mriclass/error.hpp"

namespace mriclass {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace {

std::string describe(const Geometry& g) {
  std::ostringstream os;
  os << g.dims[0] << "x" << g.dims[1] << "x" << g.dims[2];
  return os.str();
}

}  // namespace

void check_same_geometry(const Geometry& a, const Geometry& b) {
  if (!(a == b)) fail(Errc::GeometryMismatch, describe(a) + " vs " + describe(b));
}

void check_feature_count(Index got, Index expected) {
  if (got != expected) {
    fail(Errc::DimensionMismatch,
         "expected " + std::to_string(expected) + " features, got " + std::to_string(got));
  }
}

void check_finite(const Volume& v) {
  if (!v.data.allFinite()) fail(Errc::NonFiniteData, "volume contains NaN or Inf");
}

Mask Mask::from_volume(const Volume& v) {
  Mask m;
  m.geometry_ = v.geometry;
  m.inside_.resize(static_cast<std::size_t>(v.data.size()));
  for (Index i = 0; i < v.data.size(); ++i) {
    float x = v.data[i];
    if (x != 0.0f && x != 1.0f) fail(Errc::NotBinaryMask, "mask voxel " + std::to_string(i) + " is not 0 or 1");
    m.inside_[i] = x == 1.0f;
    if (m.inside_[i]) m.indices_.push_back(i);
  }
  if (m.indices_.empty()) fail(Errc::EmptyMask, "mask has no 1-voxels");
  return m;
}

Mask Mask::full(const Geometry& g) { return from_volume(Volume::constant(g, 1.0f)); }

Volume Mask::to_volume() const {
  Volume v = Volume::zeros(geometry_);
  for (Index i : indices_) v.data[i] = 1.0f;
  return v;
}

std::filesystem::path payload_path(const std::filesystem::path& header) {
  auto p = header;
  p.replace_extension(".raw");
  return p;
}

Volume read_volume(const std::filesystem::path& header) {
  std::ifstream hs(header);
  if (!hs) fail(Errc::IoError, "cannot open " + header.string());
  nlohmann::json j;
  try {
    hs >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, header.string() + ": " + e.what());
  }

  Volume v;
  try {
    auto dims = j.at("dims").get<std::vector<Index>>();
    auto spacing = j.at("spacing_mm").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) fail(Errc::IoError, header.string() + ": dims/spacing_mm need 3 entries");
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0 || !(spacing[a] > 0.0)) fail(Errc::IoError, header.string() + ": non-positive geometry");
      v.geometry.dims[a] = dims[a];
      v.geometry.spacing_mm[a] = spacing[a];
    }
    if (j.value("dtype", "f32le") != "f32le" || j.value("order", "x-fastest") != "x-fastest") {
      fail(Errc::IoError, header.string() + ": unsupported dtype/order");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, header.string() + ": " + e.what());
  }

  auto raw = payload_path(header);
  std::ifstream ps(raw, std::ios::binary);
  if (!ps) fail(Errc::MissingPayload, raw.string());
  ps.seekg(0, std::ios::end);
  auto bytes = static_cast<Index>(ps.tellg());
  ps.seekg(0);
  Index n = v.geometry.voxel_count();
  if (bytes != n * 4) {
    fail(Errc::GeometryMismatch, raw.string() + " holds " + std::to_string(bytes) + " bytes, expected " +
                                     std::to_string(n * 4));
  }
  v.data.resize(n);
  ps.read(reinterpret_cast<char*>(v.data.data()), bytes);
  if (!ps) fail(Errc::IoError, "short read on " + raw.string());
  check_finite(v);
  return v;
}

void write_volume(const Volume& v, const std::filesystem::path& header) {
  nlohmann::json j;
  j["dims"] = v.geometry.dims;
  j["spacing_mm"] = v.geometry.spacing_mm;
  j["dtype"] = "f32le";
  j["order"] = "x-fastest";

  std::ofstream hs(header);
  if (!hs) fail(Errc::IoError, "cannot write " + header.string());
  hs << j.dump(2) << '\n';
  auto raw = payload_path(header);
  std::ofstream ps(raw, std::ios::binary);
  if (!ps) fail(Errc::IoError, "cannot write " + raw.string());
  ps.write(reinterpret_cast<const char*>(v.data.data()), v.data.size() * 4);
  if (!hs || !ps) fail(Errc::IoError, "write failed for " + header.string());
}

Mask read_mask(const std::filesystem::path& header) { return Mask::from_volume(read_volume(header)); }

Volume normalize_in_mask(const Volume& v, const Mask& m) {
  check_same_geometry(v.geometry, m.geometry());
  const auto& idx = m.indices();
  double sum = 0.0;
  for (Index i : idx) sum += v.data[i];
  const double mean = sum / static_cast<double>(idx.size());
  double ss = 0.0;
  for (Index i : idx) {
    double d = v.data[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(idx.size()));
  if (!(sd > 0.0)) fail(Errc::ZeroVariance, "in-mask voxels are constant");

  Volume out = Volume::zeros(v.geometry);
  for (Index i : idx) out.data[i] = static_cast<float>((v.data[i] - mean) / sd);
  check_finite(out);
  return out;
}

Volume modulate(const Volume& prob, const Volume& jac_det) {
  check_same_geometry(prob.geometry, jac_det.geometry);
  if ((prob.data.array() < 0.0f).any() || (prob.data.array() > 1.0f).any()) {
    fail(Errc::ProbabilityOutOfRange, "probability map outside [0, 1]");
  }
  if (!(jac_det.data.array() > 0.0f).all()) fail(Errc::NonPositiveJacobian, "Jacobian determinant must be > 0");
  Volume out{prob.geometry, (prob.data.cast<double>().array() * jac_det.data.cast<double>().array()).cast<float>()};
  check_finite(out);
  return out;
}

Volume divide_by_icv(const Volume& v, double icv_mm3) {
  if (!(icv_mm3 > 0.0) || !std::isfinite(icv_mm3)) fail(Errc::NonPositiveIcv, "ICV must be a positive finite number");
  Volume out{v.geometry, (v.data.cast<double>() / icv_mm3).cast<float>()};
  check_finite(out);
  return out;
}

Volume apply_mask(const Volume& v, const Mask& m) {
  check_same_geometry(v.geometry, m.geometry());
  Volume out = Volume::zeros(v.geometry);
  for (Index i : m.indices()) out.data[i] = v.data[i];
  return out;
}

FeatureVector flatten_masked(const Volume& v, const Mask& m) {
  check_same_geometry(v.geometry, m.geometry());
  const auto& idx = m.indices();
  if (idx.empty()) fail(Errc::EmptyMask, "mask has no 1-voxels");
  FeatureVector f;
  f.voxel_index = idx;
  f.values.resize(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) f.values[static_cast<Index>(i)] = v.data[idx[i]];
  return f;
}

}  // namespace mriclass

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace mriclass {

/// Counter-based generator: the n-th draw is mix(key + n * gamma), so a stream
/// is fully described by its key and position.
class Stream {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer on [0, bound), unbiased. bound must be positive.
  std::uint64_t below(std::uint64_t bound);
  double normal();

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Root of the named-substream scheme. Every consumer ("splits", "mixup",
/// "valsplit", "synth", "dropout", "init", "bootstrap", "shuffle") derives its
/// own stream from (seed, name, index) so consumers never perturb each other.
class Seed {
 public:
  explicit Seed(std::uint64_t value) : value_(value) {}

  std::uint64_t value() const { return value_; }
  Stream stream(std::string_view name, std::uint64_t index = 0) const;
  Seed child(std::string_view name, std::uint64_t index = 0) const;

 private:
  std::uint64_t value_;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace mriclass

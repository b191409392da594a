#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace unialign {

/// Deterministic random substream keyed by (master seed, stream path).
///
/// The same key always replays the same sequence; different paths seed the
/// engine through independent seed sequences.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t stream_id);

  /// Child stream keyed by this stream's path plus `id`. Does not consume
  /// draws from the parent.
  RngStream substream(std::uint64_t id) const;

  std::uint64_t master_seed() const { return path_.front(); }
  std::uint64_t stream_id() const { return path_[1]; }

  double uniform();                    // [0, 1)
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);    // uniform over [0, n)
  bool bernoulli(double p);

  std::mt19937_64& engine() { return engine_; }

 private:
  explicit RngStream(std::vector<std::uint64_t> path);
  void seed();

  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
};

}  // namespace unialign

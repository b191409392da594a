#include "unialign/rng.hpp"

#include <utility>

#include "unialign/error.hpp"

namespace unialign {

RngStream::RngStream(std::uint64_t master_seed, std::uint64_t stream_id)
    : path_{master_seed, stream_id} {
  seed();
}

RngStream::RngStream(std::vector<std::uint64_t> path) : path_(std::move(path)) {
  seed();
}

void RngStream::seed() {
  std::vector<std::uint32_t> words;
  words.reserve(path_.size() * 2 + 1);
  words.push_back(static_cast<std::uint32_t>(path_.size()));
  for (std::uint64_t v : path_) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  engine_.seed(seq);
}

RngStream RngStream::substream(std::uint64_t id) const {
  auto path = path_;
  path.push_back(id);
  return RngStream(std::move(path));
}

double RngStream::uniform() {
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

double RngStream::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) fail(ErrorCode::kInvalidArgument, "RngStream::index: empty range");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

}  // namespace unialign

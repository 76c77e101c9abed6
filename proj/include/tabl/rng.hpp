#pragma once

#include <cstddef>
#include <cstdint>

namespace tabl {

// Deterministic random stream keyed by (seed, stream_id).
//
// Generation uses splitmix64 for keying and xoshiro256** for draws; uniform
// and normal variates are derived here rather than through <random>
// distributions, whose outputs differ between standard library vendors.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double sd);

  // Derives an independent child stream.
  RngStream fork(std::uint64_t child_id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);
// FNV-1a over a string, for stream ids derived from names.
std::uint64_t hash_name(const char* text, std::size_t length);

}  // namespace tabl

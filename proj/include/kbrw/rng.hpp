#pragma once

// Seeded random streams.
//
// Every Monte Carlo estimator in the library splits its replicas into fixed
// blocks of kBlockSize consecutive replica indices. Block b draws from the
// stream stream_for(seed, b). Which worker runs a block never influences the
// numbers it sees, so results are reproducible for any worker count.

#include <array>
#include <cstdint>
#include <random>
#include <string_view>

namespace kbrw {

/// mt19937_64 plus a cached standard normal source. Satisfies
/// UniformRandomBitGenerator, so std distributions accept it.
class Rng {
 public:
  using result_type = std::mt19937_64::result_type;

  Rng() = default;
  explicit Rng(std::seed_seq& seq) : engine_(seq) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double normal() { return normal_(engine_); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

/// Identifier of the seed splitting scheme; bump when stream_for changes.
inline constexpr std::string_view kSeedScheduleId = "splitmix64-mt19937_64-block1024-v1";

inline constexpr std::uint64_t kBlockSize = 1024;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Independent generator for stream `stream` of master seed `seed`.
inline Rng stream_for(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t state = seed ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  std::array<std::uint32_t, 8> words{};
  for (std::size_t i = 0; i < words.size(); i += 2) {
    const std::uint64_t v = splitmix64(state);
    words[i] = static_cast<std::uint32_t>(v);
    words[i + 1] = static_cast<std::uint32_t>(v >> 32);
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// Derive a sub-seed, e.g. for a second estimator inside one experiment.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t state = seed + 0x632BE59BD9B4E019ULL * (salt + 1);
  return splitmix64(state);
}

inline double uniform01(Rng& rng) {
  // 53 random bits in [0,1).
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace kbrw

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace icl {

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

// FNV-1a, stable across platforms (std::hash is not).
constexpr uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named stream ids so that call sites read as intent rather than magic numbers.
namespace streams {
inline constexpr uint64_t kLabels = 1;
inline constexpr uint64_t kBankM1 = 2;
inline constexpr uint64_t kBankM2 = 3;
inline constexpr uint64_t kInit = 4;
inline constexpr uint64_t kTrainData = 5;
inline constexpr uint64_t kEval = 6;
inline constexpr uint64_t kProbe = 7;
inline constexpr uint64_t kEncoderData = 8;
inline constexpr uint64_t kGradCheck = 9;
}  // namespace streams

class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) : engine_(derive_seed(seed, stream)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  // Uniform integer in [0, n).
  size_t index(size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(engine_); }
  uint64_t next() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace icl

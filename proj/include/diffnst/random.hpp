#pragma once

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cstdint>

namespace diffnst {

inline at::Generator make_generator(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

inline torch::Tensor seeded_randn(at::IntArrayRef shape, uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen, torch::kFloat32);
}

// SplitMix64 step; derives independent sub-seeds from (seed, counter).
inline uint64_t mix_seed(uint64_t seed, uint64_t counter) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace diffnst

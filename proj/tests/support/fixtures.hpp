#pragma once

// Small model, PEFT and scene configurations shared by the tests.

#include <random>
#include <string>
#include <vector>

#include "fpeft/model.hpp"
#include "fpeft/scene.hpp"

namespace fpeft_test {

using namespace fpeft;

inline ModelConfig toy_model() {
  ModelConfig m;
  m.C = 8;
  m.enc_layers = 2;
  m.dec_layers = 2;
  m.heads = 2;
  m.ffn_mult = 2;
  m.K = 2;
  m.H = 6;
  m.T = 6;
  m.P = 5;
  m.traj_hidden = 6;
  m.lane_hidden = 6;
  return m;
}

inline PeftConfig toy_peft() {
  PeftConfig p;
  p.n_prompt = 2;
  p.adapter_rank = 3;
  p.lora_rank = 2;
  return p;
}

inline Scene toy_scene(int seed) {
  GeneratorProfile prof = preset_profile("av2_like", 6, 6, 5);
  prof.n_agents = {2, 3};
  prof.n_lanes = {2, 2};
  return generate_scene(static_cast<std::uint64_t>(seed) + 1000, 0, prof);
}

// Moves every entry off its initial value so zero/identity initialisations
// do not hide gradient paths.
inline void jitter(ParameterStore& s, std::mt19937_64& rng, double amp = 0.3) {
  std::uniform_real_distribution<double> u(-amp, amp);
  for (auto& [_, p] : s)
    for (auto& x : p.value.data()) x += static_cast<Real>(u(rng));
}

inline std::vector<std::string> names_with_prefix(const ParameterStore& s, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& [n, _] : s)
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  return out;
}

inline std::vector<std::string> all_names(const ParameterStore& s) { return names_with_prefix(s, ""); }

}  // namespace fpeft_test

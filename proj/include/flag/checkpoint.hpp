#pragma once

// Training snapshot: named weights, optimizer moments, RNG stream, step
// counter and the digest of the configuration that produced them.
//
// File layout: "FLAGCKPT/1", one `key: json` line per header field, "---",
// then little-endian float64 weights in header order followed by the
// optimizer state.

#include <cstdint>
#include <string>
#include <vector>

#include "flag/autodiff.hpp"
#include "flag/model_common.hpp"
#include "flag/nn.hpp"
#include "flag/rng.hpp"

namespace flag::run {

struct Checkpoint {
  std::string mode;
  std::string config_hash;
  std::string config_json;  // effective configuration, for rebuilding the model
  std::uint64_t seed = 0;
  long step = 0;
  std::size_t n_genes = 0, visual_dim = 0, d_e = 0;
  std::vector<std::string> gene_names;

  std::vector<std::string> names;
  std::vector<ad::Shape> shapes;
  std::vector<std::vector<double>> values;

  std::uint64_t opt_steps = 0;
  std::vector<double> opt_state;
  std::string rng_state;  // textual engine state; empty when not captured

  static Checkpoint capture(const model::Generator& g, const nn::AdamW* opt, const Rng* rng);
  // Throws ContractError when names or shapes differ from the model.
  void restore_weights(model::Generator& g) const;
  void restore_optimizer(nn::AdamW& opt, const nn::ParamStore& ps) const;
  void restore_rng(Rng& rng) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace flag::run

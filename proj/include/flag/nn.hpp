#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flag/autodiff.hpp"
#include "flag/rng.hpp"

namespace flag::nn {

using ad::Shape;
using ad::Var;

// Named, insertion-ordered collection of trainable tensors.
class ParamStore {
 public:
  Var add(const std::string& name, Shape shape, std::vector<double> init);
  Var add_zeros(const std::string& name, Shape shape);
  Var add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);

  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Var>& params() const { return params_; }
  std::size_t count() const;  // total scalar parameters

  void zero_grad();
  // Sets every tensor whose name starts with `prefix` to zero.
  void zero_values(const std::string& prefix);
  double grad_norm() const;
  bool grads_finite() const;

  std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& v);

 private:
  std::vector<std::string> names_;
  std::vector<Var> params_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out], absent when constructed without bias

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true, double init_scale = 1.0);
  Var operator()(const Var& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

// W2 · (GELU(W_gate h) ⊙ (W_val h))
struct GegluFfn {
  Linear gate, value, out;
  GegluFfn() = default;
  GegluFfn(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inner, Rng& rng);
  Var operator()(const Var& h) const;
};

// Sinusoidal features of t ∈ [0,1] followed by Linear-SiLU-Linear.
struct TimestepEmbedder {
  Linear fc1, fc2;
  std::size_t freq_dim = 0;
  TimestepEmbedder() = default;
  TimestepEmbedder(ParamStore& ps, const std::string& name, std::size_t hidden, Rng& rng,
                   std::size_t freq_dim = 32);
  // t: one value per batch element -> [B, hidden]
  Var operator()(const std::vector<double>& t) const;
};

std::vector<double> sinusoidal_features(double t, std::size_t dim);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
};

// Decoupled weight-decay Adam. Owns first/second moment buffers keyed by
// parameter position in the store.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Clips, then applies one update. Returns the pre-clip gradient norm.
  double step(ParamStore& ps);

  const AdamWConfig& config() const { return cfg_; }
  AdamWConfig& config() { return cfg_; }
  std::uint64_t steps() const { return t_; }

  std::vector<double> flat_state() const;  // [m..., v...]
  void set_state(std::uint64_t t, const std::vector<double>& flat, const ParamStore& ps);

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace flag::nn

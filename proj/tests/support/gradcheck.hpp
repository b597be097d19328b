#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flag/autodiff.hpp"
#include "flag/nn.hpp"
#include "flag/rng.hpp"

namespace flag::testing {

struct GradCheckResult {
  double max_rel = 0;
  std::size_t checked = 0;
  std::string worst;
};

// Compares reverse-mode gradients of the scalar produced by `f` against
// central differences on up to `per_param` entries of each named leaf.
inline GradCheckResult grad_check(const std::function<ad::Var()>& f,
                                  const std::vector<std::pair<std::string, ad::Var>>& params, double h = 1e-5,
                                  std::size_t per_param = 8, std::uint64_t seed = 7, double floor = 1e-6) {
  for (auto& [name, p] : params) p.node()->grad.clear();
  ad::Var loss = f();
  ad::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& [name, p] : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.size(), 0.0);
  }
  Rng rng(seed);
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Var p = params[k].second;
    const std::size_t n = p.size();
    std::vector<std::size_t> idx;
    if (n <= per_param) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      auto perm = rng.permutation(n);
      idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(per_param));
    }
    for (std::size_t i : idx) {
      double& x = p.node()->value[i];
      const double orig = x;
      x = orig + h;
      const double up = f().item();
      x = orig - h;
      const double dn = f().item();
      x = orig;
      const double num = (up - dn) / (2 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      ++res.checked;
      if (rel > res.max_rel) {
        res.max_rel = rel;
        res.worst = params[k].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(num);
      }
    }
  }
  return res;
}

inline ad::Var random_param(ad::Shape s, Rng& rng, double scale = 1.0) {
  return ad::Var::parameter(s, rng.normal_vector(ad::numel(s), scale));
}

inline ad::Var random_const(ad::Shape s, Rng& rng, double scale = 1.0) {
  return ad::Var::constant(s, rng.normal_vector(ad::numel(s), scale));
}

// Contracts a tensor with fixed random weights so upstream gradients are generic.
inline ad::Var probe_sum(const ad::Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum_all(ad::mul(y, random_const(y.shape(), rng)));
}

// Every tensor of a store whose name starts with `prefix`.
inline std::vector<std::pair<std::string, ad::Var>> store_params(const nn::ParamStore& ps,
                                                                 const std::string& prefix = "") {
  std::vector<std::pair<std::string, ad::Var>> out;
  for (std::size_t i = 0; i < ps.names().size(); ++i)
    if (ps.names()[i].rfind(prefix, 0) == 0) out.emplace_back(ps.names()[i], ps.params()[i]);
  return out;
}

// Overwrites every entry with N(0, scale²) so that zero-initialised tensors are exercised too.
inline void randomize_store(nn::ParamStore& ps, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (const auto& p : ps.params()) {
    ad::Var v = p;
    for (double& x : v.mutable_data()) x = scale * rng.normal();
  }
}

// Relabels node axes: out[b, i, ...] = in[b, perm[i], ...] along axis 1, and
// also along axis 2 when `pair` is set ([B,N,N,...] tensors).
inline ad::Var permute_nodes(const ad::Var& v, const std::vector<std::size_t>& perm, bool pair) {
  const auto& s = v.shape();
  const std::size_t b = s[0], n = s[1];
  std::size_t tail = 1;
  for (std::size_t i = pair ? 3 : 2; i < s.size(); ++i) tail *= s[i];
  std::vector<double> out(v.size());
  const auto in = v.data();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t i = 0; i < n; ++i) {
      if (!pair) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((bb * n + perm[i]) * tail), tail,
                    out.begin() + static_cast<std::ptrdiff_t>((bb * n + i) * tail));
        continue;
      }
      for (std::size_t j = 0; j < n; ++j)
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(((bb * n + perm[i]) * n + perm[j]) * tail), tail,
                    out.begin() + static_cast<std::ptrdiff_t>(((bb * n + i) * n + j) * tail));
    }
  return ad::Var::constant(s, std::move(out));
}

inline double max_abs_diff(const ad::Var& a, const ad::Var& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_abs(const ad::Var& a) {
  double m = 0;
  for (double x : a.data()) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace flag::testing

#include "flag/nn.hpp"

#include <cmath>

#include "flag/errors.hpp"

namespace flag::nn {

Var ParamStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  Var v = Var::parameter(std::move(shape), std::move(init));
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(v);
  return v;
}

Var ParamStore::add_zeros(const std::string& name, Shape shape) {
  const std::size_t n = ad::numel(shape);
  return add(name, std::move(shape), std::vector<double>(n, 0.0));
}

Var ParamStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  const std::size_t n = ad::numel(shape);
  return add(name, std::move(shape), rng.normal_vector(n, stddev));
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const Var& p : params_) n += p.size();
  return n;
}

void ParamStore::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

void ParamStore::zero_values(const std::string& prefix) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (names_[i].rfind(prefix, 0) == 0)
      for (double& x : params_[i].mutable_data()) x = 0.0;
}

double ParamStore::grad_norm() const {
  double s = 0;
  for (const Var& p : params_)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

bool ParamStore::grads_finite() const {
  for (const Var& p : params_)
    for (double g : p.grad())
      if (!std::isfinite(g)) return false;
  return true;
}

std::vector<double> ParamStore::flat_values() const {
  std::vector<double> out;
  out.reserve(count());
  for (const Var& p : params_) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

void ParamStore::set_flat_values(const std::vector<double>& v) {
  if (v.size() != count()) throw ContractError("set_flat_values: size mismatch");
  std::size_t off = 0;
  for (Var& p : params_) {
    auto d = p.mutable_data();
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), d.size(), d.begin());
    off += d.size();
  }
}

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               bool with_bias, double init_scale) {
  weight = ps.add_normal(name + ".weight", {in, out}, init_scale / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) bias = ps.add_zeros(name + ".bias", {out});
}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, weight);
  return bias.valid() ? ad::add(y, bias) : y;
}

GegluFfn::GegluFfn(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inner,
                   Rng& rng)
    : gate(ps, name + ".gate", dim, inner, rng),
      value(ps, name + ".value", dim, inner, rng),
      out(ps, name + ".out", inner, dim, rng) {}

Var GegluFfn::operator()(const Var& h) const { return out(ad::gelu(gate(h)) * value(h)); }

std::vector<double> sinusoidal_features(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> f(dim, 0.0);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    f[k] = std::cos(arg);
    f[half + k] = std::sin(arg);
  }
  return f;
}

TimestepEmbedder::TimestepEmbedder(ParamStore& ps, const std::string& name, std::size_t hidden, Rng& rng,
                                   std::size_t freq_dim_)
    : fc1(ps, name + ".fc1", freq_dim_, hidden, rng), fc2(ps, name + ".fc2", hidden, hidden, rng),
      freq_dim(freq_dim_) {}

Var TimestepEmbedder::operator()(const std::vector<double>& t) const {
  std::vector<double> feats;
  feats.reserve(t.size() * freq_dim);
  for (double ti : t) {
    auto f = sinusoidal_features(ti, freq_dim);
    feats.insert(feats.end(), f.begin(), f.end());
  }
  Var x = Var::constant({t.size(), freq_dim}, std::move(feats));
  return fc2(ad::silu(fc1(x)));
}

double AdamW::step(ParamStore& ps) {
  const auto& params = ps.params();
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].size(), 0.0);
      v_[i].assign(params[i].size(), 0.0);
    }
  }
  const double norm = ps.grad_norm();
  const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / (norm + 1e-12) : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i];
    auto g = p.grad();
    if (g.empty()) continue;
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] -= cfg_.lr * (update + cfg_.weight_decay * w[j]);
    }
  }
  return norm;
}

std::vector<double> AdamW::flat_state() const {
  std::vector<double> out;
  for (const auto& m : m_) out.insert(out.end(), m.begin(), m.end());
  for (const auto& v : v_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

void AdamW::set_state(std::uint64_t t, const std::vector<double>& flat, const ParamStore& ps) {
  t_ = t;
  m_.clear();
  v_.clear();
  if (flat.empty()) return;
  if (flat.size() != 2 * ps.count()) throw ContractError("optimizer state size mismatch");
  std::size_t off = 0;
  for (auto* buf : {&m_, &v_}) {
    for (const Var& p : ps.params()) {
      buf->emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                        flat.begin() + static_cast<std::ptrdiff_t>(off + p.size()));
      off += p.size();
    }
  }
}

}  // namespace flag::nn

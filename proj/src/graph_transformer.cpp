#include "flag/graph_transformer.hpp"

#include <cmath>

#include "flag/errors.hpp"

namespace flag::model {

namespace {

constexpr double kModInit = 0.1;

Var broadcast_rows(const Var& m, std::size_t rank) {
  // [B, D] -> [B, 1, ..., 1, D] so that it broadcasts against a rank-`rank` tensor.
  ad::Shape s{m.dim(0)};
  for (std::size_t i = 2; i < rank; ++i) s.push_back(1);
  s.push_back(m.dim(1));
  return ad::reshape(m, s);
}

Var split_heads(const Var& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return ad::permute(ad::reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

Var to_head_major(const Var& e) { return ad::permute(e, {0, 3, 1, 2}); }  // [B,N,N,H] -> [B,H,N,N]

void check_rank(const Var& v, std::size_t rank, const char* what) {
  if (!v.valid() || v.rank() != rank)
    throw ContractError(std::string(what) + ": expected rank " + std::to_string(rank));
}

}  // namespace

void GraphBackboneConfig::validate() const {
  if (hidden == 0 || layers == 0 || heads == 0 || cond_dim == 0 || edge_dim == 0)
    throw ContractError("backbone dimensions must be positive");
  if (hidden % heads != 0) throw ContractError("hidden must be divisible by heads");
  if (dynamic && (node_in == 0 || edge_in == 0)) throw ContractError("dynamic mode needs node_in and edge_in");
  if (ffn_mult == 0) throw ContractError("ffn_mult must be positive");
}

std::pair<Var, Var> split_modulation(const Var& m) {
  const std::size_t d = m.shape().back() / 2;
  return {ad::slice_last(m, 0, d), ad::slice_last(m, d, d)};
}

Var adaln(const Var& h, const Var& gamma, const Var& beta, double eps) {
  Var ln = ad::layer_norm_last(h, eps);
  const std::size_t r = h.rank();
  return ad::add(ad::mul(ln, ad::add_scalar(broadcast_rows(gamma, r), 1.0)), broadcast_rows(beta, r));
}

GraphTransformer::GraphTransformer(nn::ParamStore& ps, const std::string& prefix, const GraphBackboneConfig& cfg,
                                   Rng& rng)
    : cfg_(cfg), prefix_(prefix) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden, we = cfg_.edge_width(), h = cfg_.heads;
  const std::string p = prefix + ".";
  if (cfg_.node_in) node_x_ = nn::Linear(ps, p + "node_x", cfg_.node_in, d, rng);
  node_v_ = nn::Linear(ps, p + "node_v", cfg_.cond_dim, d, rng);
  if (cfg_.dynamic) edge_embed_ = nn::Linear(ps, p + "edge_embed", cfg_.edge_in + cfg_.edge_dim, we, rng);
  time_ = nn::TimestepEmbedder(ps, p + "time", d, rng);
  fuse1_ = nn::Linear(ps, p + "fuse1", d + cfg_.cond_dim + cfg_.edge_dim, d, rng);
  fuse2_ = nn::Linear(ps, p + "fuse2", d, d, rng);

  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string b = p + "block" + std::to_string(l) + ".";
    BlockParams bp;
    bp.ada_x1 = nn::Linear(ps, b + "ada_x1", d, 2 * d, rng, true, kModInit);
    bp.ada_x2 = nn::Linear(ps, b + "ada_x2", d, 2 * d, rng, true, kModInit);
    bp.q = nn::Linear(ps, b + "q", d, d, rng);
    bp.k = nn::Linear(ps, b + "k", d, d, rng);
    bp.v = nn::Linear(ps, b + "v", d, d, rng);
    bp.out = nn::Linear(ps, b + "out", d, d, rng);
    bp.cond_gate = nn::Linear(ps, b + "cond_gate", cfg_.edge_dim, h, rng);
    bp.cond_bias = nn::Linear(ps, b + "cond_bias", cfg_.edge_dim, h, rng);
    bp.alpha = ps.add(b + "alpha", {1}, {cfg_.alpha_init});
    bp.gamma = ps.add(b + "gamma", {1}, {cfg_.gamma_init});
    bp.ffn_x = nn::GegluFfn(ps, b + "ffn_x", d, cfg_.ffn_mult * d, rng);
    if (cfg_.dynamic) {
      bp.ada_e1 = nn::Linear(ps, b + "ada_e1", d, 2 * we, rng, true, kModInit);
      bp.ada_e2 = nn::Linear(ps, b + "ada_e2", d, 2 * we, rng, true, kModInit);
      bp.edge_gate = nn::Linear(ps, b + "edge_gate", we, h, rng);
      bp.edge_bias = nn::Linear(ps, b + "edge_bias", we, h, rng);
      bp.edge_lin = nn::Linear(ps, b + "edge_lin", h, we, rng);
      bp.ffn_e = nn::GegluFfn(ps, b + "ffn_e", we, cfg_.ffn_mult * we, rng);
    }
    blocks_.push_back(std::move(bp));
  }

  if (cfg_.dynamic) {
    ada_final_x_ = nn::Linear(ps, p + "ada_final_x", d, 2 * d, rng, true, kModInit);
    ada_final_e_ = nn::Linear(ps, p + "ada_final_e", d, 2 * we, rng, true, kModInit);
    node_head_ = nn::Linear(ps, p + "node_head", d, cfg_.node_in, rng);
    edge_head_ = nn::Linear(ps, p + "edge_head", we, 1, rng);
  }
}

Var GraphTransformer::context(const std::vector<double>& t, const Var& cv, const Var& ce) const {
  check_rank(cv, 3, "context: cv");
  check_rank(ce, 4, "context: ce");
  if (t.size() != cv.dim(0)) throw ContractError("context: one t per batch element required");
  Var pool_v = ad::mean_axis(cv, 1);                      // [B, d_v]
  Var pool_e = ad::mean_axis(ad::mean_axis(ce, 1), 1);    // [B, C]
  Var f = ad::concat_last({time_(t), pool_v, pool_e});
  return fuse2_(ad::silu(fuse1_(f)));
}

Var GraphTransformer::embed_nodes(const Var& xt, const Var& cv) const {
  Var h = node_v_(cv);
  if (cfg_.node_in) {
    check_rank(xt, 3, "embed_nodes: xt");
    if (xt.dim(2) != cfg_.node_in) throw ContractError("embed_nodes: gene count mismatch");
    h = ad::add(h, node_x_(xt));
  }
  return h;
}

Var GraphTransformer::edge_modulated_attention(const BlockParams& b, const Var& hx_hat, const Var& he_hat,
                                               const Var& ce) const {
  const std::size_t h = cfg_.heads, dh = cfg_.hidden / h;
  Var q = split_heads(b.q(hx_hat), h);
  Var k = split_heads(b.k(hx_hat), h);
  Var logits = ad::mul_scalar(ad::bmm(q, ad::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));

  Var gate = ad::mul(b.alpha, to_head_major(b.cond_gate(ce)));
  Var bias = ad::mul(b.gamma, to_head_major(b.cond_bias(ce)));
  if (he_hat.valid()) {
    gate = ad::add(gate, to_head_major(b.edge_gate(he_hat)));
    bias = ad::add(bias, to_head_major(b.edge_bias(he_hat)));
  }
  return ad::add(ad::mul(logits, ad::add_scalar(gate, 1.0)), bias);
}

Var GraphTransformer::node_update(const BlockParams& b, const Var& hx, const Var& hx_hat, const Var& s) const {
  const std::size_t bs = hx.dim(0), n = hx.dim(1), d = cfg_.hidden;
  Var v = split_heads(b.v(hx_hat), cfg_.heads);
  Var o = ad::bmm(ad::softmax_last(s), v);  // [B,H,N,dh]
  o = ad::reshape(ad::permute(o, {0, 2, 1, 3}), {bs, n, d});
  return ad::add(hx, b.out(o));
}

Var GraphTransformer::edge_update(const BlockParams& b, const Var& he, const Var& s) const {
  return ad::add(he, b.edge_lin(ad::permute(s, {0, 2, 3, 1})));
}

std::pair<Var, Var> GraphTransformer::run_blocks(Var hx, Var he, const Var& z, const Var& ce) const {
  const double eps = cfg_.ln_eps;
  const bool edges = he.valid();
  for (const BlockParams& b : blocks_) {
    auto [gx1, bx1] = split_modulation(b.ada_x1(z));
    Var hx_hat = adaln(hx, gx1, bx1, eps);
    Var he_hat;
    if (edges) {
      auto [ge1, be1] = split_modulation(b.ada_e1(z));
      he_hat = adaln(he, ge1, be1, eps);
    }
    Var s = edge_modulated_attention(b, hx_hat, he_hat, ce);
    hx = node_update(b, hx, hx_hat, s);
    if (edges) he = edge_update(b, he, s);

    auto [gx2, bx2] = split_modulation(b.ada_x2(z));
    hx = ad::add(hx, b.ffn_x(adaln(hx, gx2, bx2, eps)));
    if (edges) {
      auto [ge2, be2] = split_modulation(b.ada_e2(z));
      he = ad::add(he, b.ffn_e(adaln(he, ge2, be2, eps)));
    }
  }
  return {hx, he};
}

GraphTransformer::DynamicOutput GraphTransformer::forward_dynamic(const Var& xt, const Var& at, const Var& cv,
                                                                  const Var& ce,
                                                                  const std::vector<double>& t) const {
  if (!cfg_.dynamic) throw ContractError("forward_dynamic on a static backbone");
  check_rank(xt, 3, "forward_dynamic: xt");
  check_rank(at, 4, "forward_dynamic: at");
  check_rank(cv, 3, "forward_dynamic: cv");
  check_rank(ce, 4, "forward_dynamic: ce");
  const std::size_t b = xt.dim(0), n = xt.dim(1);
  if (at.dim(0) != b || at.dim(1) != n || at.dim(2) != n || at.dim(3) != cfg_.edge_in)
    throw ContractError("forward_dynamic: at must be [B,N,N," + std::to_string(cfg_.edge_in) + "]");
  if (ce.dim(0) != b || ce.dim(1) != n || ce.dim(2) != n || ce.dim(3) != cfg_.edge_dim)
    throw ContractError("forward_dynamic: ce shape mismatch");
  if (cv.dim(0) != b || cv.dim(1) != n || cv.dim(2) != cfg_.cond_dim)
    throw ContractError("forward_dynamic: cv shape mismatch");

  Var z = context(t, cv, ce);
  Var hx = embed_nodes(xt, cv);
  Var he = edge_embed_(ad::concat_last({at, ce}));

  auto [hx_out, he_out] = run_blocks(std::move(hx), std::move(he), z, ce);
  hx = hx_out;
  he = he_out;
  const double eps = cfg_.ln_eps;

  DynamicOutput out;
  out.node_hidden = hx;
  auto [gfx, bfx] = split_modulation(ada_final_x_(z));
  auto [gfe, bfe] = split_modulation(ada_final_e_(z));
  out.node_out = node_head_(adaln(hx, gfx, bfx, eps));
  out.edge_out = ad::reshape(edge_head_(adaln(he, gfe, bfe, eps)), {b, n, n});
  return out;
}

Var GraphTransformer::forward_static(const Var& xt, const Var& ce, const Var& cv,
                                     const std::vector<double>& t) const {
  check_rank(cv, 3, "forward_static: cv");
  check_rank(ce, 4, "forward_static: ce");
  const std::size_t b = cv.dim(0), n = cv.dim(1);
  if (ce.dim(0) != b || ce.dim(1) != n || ce.dim(2) != n || ce.dim(3) != cfg_.edge_dim)
    throw ContractError("forward_static: ce shape mismatch");
  if (cv.dim(2) != cfg_.cond_dim) throw ContractError("forward_static: cv width mismatch");
  Var z = context(t, cv, ce);
  return run_blocks(embed_nodes(xt, cv), Var(), z, ce).first;
}

}  // namespace flag::model

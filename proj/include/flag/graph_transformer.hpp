#pragma once

// Spatial graph transformer shared by joint node–edge diffusion (dynamic mode,
// an evolving edge stream gates attention) and FLAG conditioning (static mode,
// attention modulated by the fixed edge condition only).
//
// Tensor layout: nodes [B,N,·], edges [B,N,N,·], attention [B,heads,N,N].

#include <string>
#include <utility>
#include <vector>

#include "flag/autodiff.hpp"
#include "flag/nn.hpp"

namespace flag::model {

using ad::Var;

struct GraphBackboneConfig {
  std::size_t node_in = 0;  // G; 0 disables the expression input (pure regressor)
  std::size_t hidden = 384;
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t cond_dim = 1024;  // d_v
  std::size_t edge_dim = 2;     // channels of C_e
  std::size_t edge_in = 1;      // channels of the noisy edge state A_t
  std::size_t edge_hidden = 0;  // width of the edge stream; 0 means `hidden`
  std::size_t ffn_mult = 2;     // GEGLU inner width = ffn_mult · width
  double alpha_init = 0.1;
  double gamma_init = 0.1;
  double ln_eps = 1e-5;
  bool dynamic = true;  // build the edge stream (mode 1)

  std::size_t edge_width() const { return edge_hidden ? edge_hidden : hidden; }
  void validate() const;
};

// (1 + γ) ⊙ LayerNorm(h) + β, with γ, β given per batch element as [B, D].
Var adaln(const Var& h, const Var& gamma, const Var& beta, double eps);

struct BlockParams {
  nn::Linear ada_x1, ada_x2;  // z -> (γ, β) for the node stream
  nn::Linear ada_e1, ada_e2;  // z -> (γ, β) for the edge stream
  nn::Linear q, k, v, out;
  nn::Linear edge_gate, edge_bias;  // Lin(Ĥ_e): edge width -> heads
  nn::Linear cond_gate, cond_bias;  // Lin(C_e): edge_dim -> heads
  Var alpha, gamma;                 // learnable scalars
  nn::Linear edge_lin;              // Lin_edge: heads -> edge width
  nn::GegluFfn ffn_x, ffn_e;
};

class GraphTransformer {
 public:
  GraphTransformer() = default;
  GraphTransformer(nn::ParamStore& ps, const std::string& prefix, const GraphBackboneConfig& cfg, Rng& rng);

  struct DynamicOutput {
    Var node_out;     // [B,N,G]   node score head
    Var edge_out;     // [B,N,N]   edge score head
    Var node_hidden;  // [B,N,hidden] final node stream
  };

  // xt [B,N,G], at [B,N,N,edge_in], cv [B,N,d_v], ce [B,N,N,edge_dim], one t per batch element.
  DynamicOutput forward_dynamic(const Var& xt, const Var& at, const Var& cv, const Var& ce,
                                const std::vector<double>& t) const;
  // Mode 2: no edge stream. Returns H_spatial [B,N,hidden].
  Var forward_static(const Var& xt, const Var& ce, const Var& cv, const std::vector<double>& t) const;

  // Global context z = MLP([t_emb, mean(C_v), mean(C_e)]) -> [B, hidden].
  Var context(const std::vector<double>& t, const Var& cv, const Var& ce) const;
  Var embed_nodes(const Var& xt, const Var& cv) const;

  // S = (QKᵀ/√d) ⊙ (1 + Lin(Ĥ_e) + α Lin(C_e)) + (Lin(Ĥ_e) + γ Lin(C_e)).
  // `he_hat` may be invalid (static mode): its terms are then dropped.
  Var edge_modulated_attention(const BlockParams& b, const Var& hx_hat, const Var& he_hat, const Var& ce) const;
  // Hx + Lin_out(softmax(S)·V)
  Var node_update(const BlockParams& b, const Var& hx, const Var& hx_hat, const Var& s) const;
  // He + Lin_edge(S) with heads mapped to edge channels
  Var edge_update(const BlockParams& b, const Var& he, const Var& s) const;

  const GraphBackboneConfig& config() const { return cfg_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  std::vector<BlockParams>& blocks() { return blocks_; }

 private:
  std::pair<Var, Var> run_blocks(Var hx, Var he, const Var& z, const Var& ce) const;

  GraphBackboneConfig cfg_;
  std::string prefix_;
  nn::Linear node_x_, node_v_, edge_embed_;
  nn::TimestepEmbedder time_;
  nn::Linear fuse1_, fuse2_;
  nn::Linear ada_final_x_, ada_final_e_, node_head_, edge_head_;
  std::vector<BlockParams> blocks_;
};

// Splits a [B, 2D] regression into (γ, β).
std::pair<Var, Var> split_modulation(const Var& m);

}  // namespace flag::model

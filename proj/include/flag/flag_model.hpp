#pragma once

// FLAG generator: a static-mode graph transformer summarises spot–spot
// context once, a gene-axis diffusion transformer models gene–gene
// dependencies per spot, and an intermediate DiT layer is aligned to frozen
// per-gene foundation-model embeddings.

#include <cstdint>
#include <optional>
#include <vector>

#include "flag/data.hpp"
#include "flag/graph_transformer.hpp"
#include "flag/model_common.hpp"
#include "flag/sde.hpp"

namespace flag::flagm {

using model::Matrix;
using model::SlideCondition;
using model::TrainSlide;
using model::Var;

struct DiTConfig {
  std::size_t n_genes = 0;
  std::size_t hidden = 384;
  std::size_t layers = 12;
  std::size_t heads = 6;
  double mlp_ratio = 4.0;
  std::size_t gene_dim = 512;
  std::size_t align_layer = 8;
  bool gene_positions = true;  // learned per-gene positional embedding
  double ln_eps = 1e-6;

  void validate() const;
};

struct DiTBlockParams {
  nn::Linear ada;  // c -> shift1, scale1, gate1, shift2, scale2, gate2
  nn::Linear q, k, v, proj;
  nn::Linear fc1, fc2;
};

// Transformer over gene tokens. Rows are independent samples (spots).
class GeneDiT {
 public:
  GeneDiT() = default;
  GeneDiT(nn::ParamStore& ps, const std::string& prefix, const DiTConfig& cfg, Rng& rng);

  struct Output {
    Var out;    // [R,G]
    Var inter;  // [R,G,hidden] after block `return_layer` (1-based), else invalid
  };
  // x: input values [R,G]; c: conditioning [R,hidden].
  Output forward(const Var& x, const Var& c, std::optional<std::size_t> return_layer = std::nullopt) const;
  Var embed_tokens(const Var& x) const;  // [R,G,hidden]

  const DiTConfig& config() const { return cfg_; }

 private:
  DiTConfig cfg_;
  nn::Linear value_embed_;  // 1 -> gene_dim
  Var gene_pos_;            // [G, gene_dim]
  nn::Linear token_proj_;   // gene_dim -> hidden
  std::vector<DiTBlockParams> blocks_;
  nn::Linear final_ada_, final_;
};

// Two-layer GELU MLP hidden -> hidden -> d_e applied per token.
struct Projector {
  nn::Linear fc1, fc2;
  Projector() = default;
  Projector(nn::ParamStore& ps, const std::string& name, std::size_t hidden, std::size_t d_e, Rng& rng);
  Var operator()(const Var& z) const { return fc2(ad::gelu(fc1(z))); }
};

// −mean over rows and valid genes of cos(p_{r,g}, F_g), with ε in the denominator.
// `proj` is [R,G,d_e] or [G,d_e].
Var align_loss(const Var& proj, const data::GfmEmbeddings& f, double eps = 1e-8);
Var align_loss(const Var& z_inter, const data::GfmEmbeddings& f, const Projector& projector, double eps = 1e-8);

struct FlagConfig {
  model::GraphBackboneConfig backbone;  // static; node_in = G
  DiTConfig dit;                        // n_genes = G
  std::size_t d_e = 0;                  // width of the GFM embeddings; 0: no alignment head
  double lambda_align = 0.5;
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  std::size_t batch = 2;       // slides (each with its own t) per step
  std::size_t spot_batch = 0;  // DiT rows per slide per step; 0 uses every spot
  std::size_t sample_chunk = 16;  // DiT rows per forward pass while sampling
};

struct FlagBatch {
  std::vector<const SlideCondition*> cond;
  std::vector<Matrix> x0, z;
  std::vector<double> t;
  std::vector<std::vector<std::size_t>> spots;  // DiT rows per slide
};

FlagBatch make_flag_batch(const std::vector<TrainSlide>& slides, std::size_t batch, std::size_t spot_batch, Rng& rng);

struct FlagLossReport {
  double l_diff = 0;
  double l_align = 0;
  double lambda_align = 0;
  double total = 0;
  double grad_norm = 0;
};

class FlagModel : public model::Generator {
 public:
  FlagModel(const FlagConfig& cfg, std::uint64_t seed);

  // H_spatial -> Lin_hid(SiLU(Lin_gene(H))) + t_emb per spot: [B,N,hidden_dit].
  Var spatial_condition(const Var& xt, const Var& ce, const Var& cv, const std::vector<double>& t) const;
  // ε̂ for selected spots, flattened to rows b·N + i, with optional intermediate states.
  GeneDiT::Output denoise_rows(const Var& xt, const Var& c_cond, const std::vector<double>& t,
                               const std::vector<std::size_t>& rows, std::optional<std::size_t> return_layer) const;

  struct Losses {
    Var total, l_diff, l_align;
  };
  Losses losses(const FlagBatch& b, const data::GfmEmbeddings* f, double lambda_align) const;

  void set_embeddings(data::GfmEmbeddings f);
  const data::GfmEmbeddings* embeddings() const { return gfm_ ? &*gfm_ : nullptr; }

  std::string mode() const override { return "flag"; }
  nn::ParamStore& params() override { return ps_; }
  const nn::ParamStore& params() const override { return ps_; }
  model::StepReport train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) override;
  Matrix sample(const SlideCondition& cond, int steps, std::uint64_t seed) const override;
  // Score for a whole slide at time t (N×G).
  Matrix score(const Matrix& x, const SlideCondition& cond, double t) const;

  const FlagConfig& config() const { return cfg_; }
  const sde::NoiseSchedule& schedule() const { return sched_; }
  const model::GraphTransformer& backbone() const { return net_; }
  const GeneDiT& dit() const { return dit_; }
  const Projector& projector() const { return projector_; }
  const nn::TimestepEmbedder& time_embedder() const { return time_; }

 private:
  FlagConfig cfg_;
  sde::NoiseSchedule sched_;
  nn::ParamStore ps_;
  model::GraphTransformer net_;
  nn::Linear cond1_, cond2_;
  nn::TimestepEmbedder time_;
  GeneDiT dit_;
  Projector projector_;
  std::optional<data::GfmEmbeddings> gfm_;
};

FlagLossReport flag_train_step(FlagModel& m, const FlagBatch& batch, const data::GfmEmbeddings* f,
                               double lambda_align, nn::AdamW& opt);
Matrix flag_sample(const FlagModel& m, const SlideCondition& cond, int steps, std::uint64_t seed);

}  // namespace flag::flagm

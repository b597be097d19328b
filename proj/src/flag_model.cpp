#include "flag/flag_model.hpp"

#include <algorithm>
#include <cmath>

#include "flag/errors.hpp"

namespace flag::flagm {

using model::input_scale;

namespace {

constexpr double kModInit = 0.1;

Var per_batch(const std::vector<double>& v) { return Var::constant({v.size(), 1, 1}, v); }

Var row_gate(const Var& g) { return ad::reshape(g, {g.dim(0), 1, g.dim(1)}); }

}  // namespace

void DiTConfig::validate() const {
  if (n_genes == 0 || hidden == 0 || layers == 0 || heads == 0 || gene_dim == 0 || !(mlp_ratio > 0))
    throw ContractError("DiT dimensions must be positive");
  if (hidden % heads != 0) throw ContractError("DiT hidden must be divisible by heads");
  if (align_layer < 1 || align_layer > layers) throw ContractError("align_layer must lie in [1, layers]");
}

// ------------------------------------------------------------------ GeneDiT

GeneDiT::GeneDiT(nn::ParamStore& ps, const std::string& prefix, const DiTConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden;
  const auto mlp = static_cast<std::size_t>(std::lround(cfg_.mlp_ratio * static_cast<double>(d)));
  const std::string p = prefix + ".";
  value_embed_ = nn::Linear(ps, p + "value_embed", 1, cfg_.gene_dim, rng);
  if (cfg_.gene_positions) gene_pos_ = ps.add_normal(p + "gene_pos", {cfg_.n_genes, cfg_.gene_dim}, 1.0, rng);
  token_proj_ = nn::Linear(ps, p + "token_proj", cfg_.gene_dim, d, rng);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string b = p + "block" + std::to_string(l) + ".";
    DiTBlockParams bp;
    bp.ada = nn::Linear(ps, b + "ada", d, 6 * d, rng, true, kModInit);
    bp.q = nn::Linear(ps, b + "q", d, d, rng);
    bp.k = nn::Linear(ps, b + "k", d, d, rng);
    bp.v = nn::Linear(ps, b + "v", d, d, rng);
    bp.proj = nn::Linear(ps, b + "proj", d, d, rng);
    bp.fc1 = nn::Linear(ps, b + "fc1", d, mlp, rng);
    bp.fc2 = nn::Linear(ps, b + "fc2", mlp, d, rng);
    blocks_.push_back(std::move(bp));
  }
  final_ada_ = nn::Linear(ps, p + "final_ada", d, 2 * d, rng, true, kModInit);
  final_ = nn::Linear(ps, p + "final", d, 1, rng);
}

Var GeneDiT::embed_tokens(const Var& x) const {
  if (x.rank() != 2 || x.dim(1) != cfg_.n_genes)
    throw ContractError("dit: expected input [R," + std::to_string(cfg_.n_genes) + "]");
  Var tok = value_embed_(ad::reshape(x, {x.dim(0), x.dim(1), 1}));
  if (gene_pos_.valid()) tok = ad::add(tok, gene_pos_);
  return token_proj_(tok);
}

GeneDiT::Output GeneDiT::forward(const Var& x, const Var& c, std::optional<std::size_t> return_layer) const {
  if (return_layer && (*return_layer < 1 || *return_layer > cfg_.layers))
    throw ContractError("return_layer out of range");
  if (c.rank() != 2 || c.dim(0) != x.dim(0) || c.dim(1) != cfg_.hidden)
    throw ContractError("dit: conditioning must be [R,hidden]");
  const std::size_t r = x.dim(0), g = x.dim(1), d = cfg_.hidden, nh = cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / nh));
  const Var cs = ad::silu(c);

  Output out;
  Var h = embed_tokens(x);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const DiTBlockParams& b = blocks_[l];
    Var m = b.ada(cs);
    auto part = [&](std::size_t i) { return ad::slice_last(m, i * d, d); };

    Var xm = model::adaln(h, part(1), part(0), cfg_.ln_eps);
    Var a = b.proj(ad::multihead_attention(b.q(xm), b.k(xm), b.v(xm), nh, scale));
    h = ad::add(h, ad::mul(row_gate(part(2)), a));

    Var hm = model::adaln(h, part(4), part(3), cfg_.ln_eps);
    h = ad::add(h, ad::mul(row_gate(part(5)), b.fc2(ad::gelu(b.fc1(hm)))));
    if (return_layer && *return_layer == l + 1) out.inter = h;
  }
  auto [scale_f, shift_f] = model::split_modulation(final_ada_(cs));
  out.out = ad::reshape(final_(model::adaln(h, scale_f, shift_f, cfg_.ln_eps)), {r, g});
  return out;
}

// ---------------------------------------------------------------- alignment

Projector::Projector(nn::ParamStore& ps, const std::string& name, std::size_t hidden, std::size_t d_e, Rng& rng)
    : fc1(ps, name + ".fc1", hidden, hidden, rng), fc2(ps, name + ".fc2", hidden, d_e, rng) {}

Var align_loss(const Var& proj, const data::GfmEmbeddings& f, double eps) {
  f.validate();
  const std::size_t g = static_cast<std::size_t>(f.f.rows()), de = static_cast<std::size_t>(f.f.cols());
  if (proj.rank() < 2 || proj.shape().back() != de || proj.dim(proj.rank() - 2) != g)
    throw ContractError("align_loss: projection must end in [G,d_e] matching the embeddings");
  const std::size_t nv = f.n_valid();
  if (nv == 0) throw ContractError("align_loss: no valid genes");

  std::vector<double> fv(g * de), fn(g), mask(g);
  for (std::size_t i = 0; i < g; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < de; ++j) {
      const double x = f.f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      fv[i * de + j] = x;
      s += x * x;
    }
    fn[i] = std::sqrt(s);
    mask[i] = f.valid[i] ? 1.0 : 0.0;
  }
  const Var F = Var::constant({g, de}, std::move(fv));
  const Var Fn = Var::constant({g, 1}, std::move(fn));
  const Var M = Var::constant({g, 1}, std::move(mask));

  Var dot = ad::sum_last(ad::mul(proj, F));
  Var pn = ad::sqrt(ad::sum_last(ad::square(proj)));
  Var cos = ad::div(dot, ad::add_scalar(ad::mul(pn, Fn), eps));
  const std::size_t rows = proj.size() / (g * de);
  return ad::mul_scalar(ad::sum_all(ad::mul(cos, M)), -1.0 / static_cast<double>(rows * nv));
}

Var align_loss(const Var& z_inter, const data::GfmEmbeddings& f, const Projector& projector, double eps) {
  return align_loss(projector(z_inter), f, eps);
}

// ---------------------------------------------------------------- FlagModel

FlagBatch make_flag_batch(const std::vector<TrainSlide>& slides, std::size_t batch, std::size_t spot_batch,
                          Rng& rng) {
  const model::BatchPlan plan = model::plan_batch(slides.size(), batch, rng);
  FlagBatch b;
  for (std::size_t i = 0; i < batch; ++i) {
    const TrainSlide& s = slides[plan.slide[i]];
    b.cond.push_back(&s.cond);
    b.x0.push_back(s.x0);
    b.t.push_back(plan.t[i]);
    b.z.push_back(rng.normal_matrix(s.x0.rows(), s.x0.cols()));
    const std::size_t n = static_cast<std::size_t>(s.x0.rows());
    std::vector<std::size_t> spots;
    if (spot_batch == 0 || spot_batch >= n) {
      for (std::size_t j = 0; j < n; ++j) spots.push_back(j);
    } else {
      auto perm = rng.permutation(n);
      spots.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spot_batch));
      std::sort(spots.begin(), spots.end());
    }
    b.spots.push_back(std::move(spots));
  }
  return b;
}

FlagModel::FlagModel(const FlagConfig& cfg, std::uint64_t seed) : cfg_(cfg), sched_(cfg.sigma_min, cfg.sigma_max) {
  cfg_.backbone.dynamic = false;
  if (cfg_.dit.n_genes == 0) cfg_.dit.n_genes = cfg_.backbone.node_in;
  if (cfg_.backbone.node_in == 0) cfg_.backbone.node_in = cfg_.dit.n_genes;
  if (cfg_.backbone.node_in != cfg_.dit.n_genes) throw ContractError("backbone node_in must equal DiT n_genes");
  if (cfg_.lambda_align < 0) throw ContractError("lambda_align must be >= 0");
  Rng rng(derive_seed(seed, 0x303));
  net_ = model::GraphTransformer(ps_, "backbone", cfg_.backbone, rng);
  cond1_ = nn::Linear(ps_, "cond1", cfg_.backbone.hidden, cfg_.dit.gene_dim, rng);
  cond2_ = nn::Linear(ps_, "cond2", cfg_.dit.gene_dim, cfg_.dit.hidden, rng);
  time_ = nn::TimestepEmbedder(ps_, "time", cfg_.dit.hidden, rng);
  dit_ = GeneDiT(ps_, "dit", cfg_.dit, rng);
  if (cfg_.d_e) projector_ = Projector(ps_, "projector", cfg_.dit.hidden, cfg_.d_e, rng);
}

void FlagModel::set_embeddings(data::GfmEmbeddings f) {
  f.validate();
  if (static_cast<std::size_t>(f.f.rows()) != cfg_.dit.n_genes || static_cast<std::size_t>(f.f.cols()) != cfg_.d_e)
    throw ContractError("GFM embeddings must be [G, d_e] matching the model");
  gfm_ = std::move(f);
}

Var FlagModel::spatial_condition(const Var& xt, const Var& ce, const Var& cv, const std::vector<double>& t) const {
  std::vector<double> cin;
  for (double ti : t) cin.push_back(input_scale(sched_, ti));
  Var h = net_.forward_static(ad::mul(xt, per_batch(cin)), ce, cv, t);
  Var cg = cond2_(ad::silu(cond1_(h)));
  Var te = time_(t);
  return ad::add(cg, ad::reshape(te, {te.dim(0), 1, te.dim(1)}));
}

GeneDiT::Output FlagModel::denoise_rows(const Var& xt, const Var& c_cond, const std::vector<double>& t,
                                        const std::vector<std::size_t>& rows,
                                        std::optional<std::size_t> return_layer) const {
  const std::size_t b = xt.dim(0), n = xt.dim(1), g = xt.dim(2);
  std::vector<double> cin;
  for (double ti : t) cin.push_back(input_scale(sched_, ti));
  Var xs = ad::take_rows(ad::reshape(ad::mul(xt, per_batch(cin)), {b * n, g}), rows);
  Var cs = ad::take_rows(ad::reshape(c_cond, {b * n, c_cond.dim(2)}), rows);
  return dit_.forward(xs, cs, return_layer);
}

FlagModel::Losses FlagModel::losses(const FlagBatch& b, const data::GfmEmbeddings* f, double lambda_align) const {
  const std::size_t bs = b.t.size();
  if (bs == 0) throw ContractError("losses: empty batch");
  if (lambda_align < 0) throw ContractError("lambda_align must be >= 0");
  const std::size_t n = static_cast<std::size_t>(b.x0[0].rows()), g = static_cast<std::size_t>(b.x0[0].cols());
  std::vector<double> sg;
  for (double ti : b.t) sg.push_back(sched_.sigma(ti));
  Var z = model::stack(b.z);
  Var xt = ad::add(model::stack(b.x0), ad::mul(per_batch(sg), z));

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < bs; ++i)
    for (std::size_t s : b.spots[i]) rows.push_back(i * n + s);

  const bool align = f != nullptr && cfg_.d_e > 0;
  if (f && !align) throw ContractError("model was built without an alignment projector (d_e = 0)");
  Var c = spatial_condition(xt, model::stack_edges(b.cond), model::stack_visual(b.cond), b.t);
  auto out = denoise_rows(xt, c, b.t, rows, align ? std::optional<std::size_t>(cfg_.dit.align_layer) : std::nullopt);

  Losses l;
  l.l_diff = ad::mean_all(ad::square(ad::sub(ad::take_rows(ad::reshape(z, {bs * n, g}), rows), out.out)));
  l.total = l.l_diff;
  if (align) {
    l.l_align = align_loss(out.inter, *f, projector_);
    if (lambda_align > 0) l.total = ad::add(l.l_diff, ad::mul_scalar(l.l_align, lambda_align));
  }
  return l;
}

FlagLossReport flag_train_step(FlagModel& m, const FlagBatch& batch, const data::GfmEmbeddings* f,
                               double lambda_align, nn::AdamW& opt) {
  nn::ParamStore& ps = m.params();
  ps.zero_grad();
  auto l = m.losses(batch, f, lambda_align);
  ad::backward(l.total);
  FlagLossReport r;
  r.l_diff = l.l_diff.item();
  r.l_align = l.l_align.valid() ? l.l_align.item() : 0.0;
  r.lambda_align = lambda_align;
  r.total = l.total.item();
  model::check_finite_step(r.total, ps, static_cast<long>(opt.steps()));
  r.grad_norm = opt.step(ps);
  return r;
}

model::StepReport FlagModel::train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) {
  FlagBatch b = make_flag_batch(slides, cfg_.batch, cfg_.spot_batch, rng);
  FlagLossReport r = flag_train_step(*this, b, embeddings(), embeddings() ? cfg_.lambda_align : 0.0, opt);
  return {r.total, {{"l_diff", r.l_diff}, {"l_align", r.l_align}}, r.grad_norm};
}

Matrix FlagModel::score(const Matrix& x, const SlideCondition& cond, double t) const {
  const std::vector<const SlideCondition*> conds{&cond};
  const std::size_t n = static_cast<std::size_t>(x.rows());
  Var xt = model::tile(x, 1);
  Var c = spatial_condition(xt, model::stack_edges(conds), model::stack_visual(conds), {t});
  Matrix eps(x.rows(), x.cols());
  const std::size_t chunk = std::max<std::size_t>(1, cfg_.sample_chunk);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
    Var e = denoise_rows(xt, c, {t}, rows, std::nullopt).out;
    const auto d = e.data();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        eps(static_cast<Eigen::Index>(rows[r]), j) = d[r * static_cast<std::size_t>(x.cols()) + static_cast<std::size_t>(j)];
  }
  return -eps / sched_.sigma(t);
}

Matrix flag_sample(const FlagModel& m, const SlideCondition& cond, int steps, std::uint64_t seed) {
  if (steps < 1) throw ContractError("flag_sample: K must be >= 1");
  ad::NoGradGuard no_grad;
  Rng rng(seed);
  const auto n = static_cast<Eigen::Index>(cond.n());
  const auto g = static_cast<Eigen::Index>(m.config().dit.n_genes);
  Matrix x = m.schedule().sigma_max() * rng.normal_matrix(n, g);
  auto score_fn = [&](const Matrix& xs, double t) { return m.score(xs, cond, t); };
  return sde::heun_integrate(x, score_fn, m.schedule(), steps);
}

Matrix FlagModel::sample(const SlideCondition& cond, int steps, std::uint64_t seed) const {
  return flag_sample(*this, cond, steps, seed);
}

}  // namespace flag::flagm

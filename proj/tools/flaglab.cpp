// flaglab: train, sample, evaluate, experiment, select-genes, synth, report, inspect.
//
// Exit codes: 0 success, 2 usage/config, 3 numeric failure, 4 I/O failure.
// Failures print one JSON line on stderr: {"error": <code>, "exit": n, "message": ...}.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flag/checkpoint.hpp"
#include "flag/curse_lab.hpp"
#include "flag/data.hpp"
#include "flag/errors.hpp"
#include "flag/flag_model.hpp"
#include "flag/metrics.hpp"
#include "flag/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flag;

namespace {

enum Exit { kOk = 0, kUsage = 2, kNumeric = 3, kIo = 4 };

int fail(const char* code, int exit_code, const std::string& msg, const json& extra = json::object()) {
  json j{{"error", code}, {"exit", exit_code}, {"message", msg}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  std::cerr << j.dump() << "\n";
  return exit_code;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(10);
  os << x;
  return os.str();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  data::write_text_file(path, text);
}

// Paths may be redirected through the environment; nothing else is.
std::string out_dir_or_env(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("FLAGLAB_OUT_DIR")) return env;
  throw ContractError("--out-dir is required (or set FLAGLAB_OUT_DIR)");
}

std::string provenance_header(const std::string& hash, std::uint64_t seed) {
  return "# config_hash: " + hash + "\n# seed: " + std::to_string(seed) + "\n";
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config, mode, out_dir, resume, gfm;
  std::vector<std::string> slides;
  long steps = -1;
  double lr = -1;
  long long seed = -1;
  bool force = false;
};

void log_step(std::ostream& log, long step, const model::StepReport& r) {
  log << "step: " << step << " total: " << fmt(r.total);
  for (const auto& [k, v] : r.terms) log << " " << k << ": " << fmt(v);
  log << " grad_norm: " << fmt(r.grad_norm) << "\n";
}

std::string checkpoint_config_json(const run::RunConfig& cfg) { return cfg.to_json(); }

int cmd_train(const TrainArgs& a) {
  run::RunConfig cfg = a.config.empty() ? run::RunConfig{} : run::RunConfig::load(a.config);
  if (!a.config.empty()) {
    // data paths in a config file are relative to that file
    const fs::path base = fs::path(a.config).parent_path();
    for (auto& p : cfg.data.train)
      if (fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
    if (!cfg.data.gfm.empty() && fs::path(cfg.data.gfm).is_relative())
      cfg.data.gfm = (base / cfg.data.gfm).lexically_normal().string();
  }
  if (!a.mode.empty()) cfg.mode = a.mode;
  if (a.steps >= 0) cfg.train.steps = a.steps;
  if (a.lr >= 0) cfg.train.lr = a.lr;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (!a.slides.empty()) cfg.data.train = a.slides;
  if (!a.gfm.empty()) cfg.data.gfm = a.gfm;
  cfg.validate();
  if (cfg.data.train.empty()) throw ContractError("no training slides (use --slides or data.train)");
  const std::string out_dir = out_dir_or_env(a.out_dir);
  ensure_dir(out_dir);
  const std::string hash = cfg.config_hash();

  std::vector<SlideSample> samples;
  for (const auto& p : cfg.data.train) samples.push_back(data::load_slide(p));
  const auto& first = samples.front();
  std::vector<model::TrainSlide> train;
  for (const auto& s : samples) {
    if (s.gene_names != first.gene_names || s.visual_dim() != first.visual_dim())
      throw ContractError("slide '" + s.slide_id + "' differs in gene panel or visual width from '" + first.slide_id +
                          "'");
    train.push_back({model::SlideCondition::from_sample(s), s.expr});
  }
  std::optional<data::GfmEmbeddings> gfm;
  if (!cfg.data.gfm.empty()) gfm = data::load_gfm_embeddings(cfg.data.gfm).aligned_to(first.gene_names);
  const std::size_t d_e = gfm ? static_cast<std::size_t>(gfm->f.cols()) : 0;
  auto model = run::build_generator(cfg, first.n_genes(), first.visual_dim(), d_e, gfm ? &*gfm : nullptr);

  nn::AdamWConfig oc;
  oc.lr = cfg.train.lr;
  oc.weight_decay = cfg.train.weight_decay;
  oc.grad_clip = cfg.train.grad_clip;
  nn::AdamW opt(oc);
  Rng rng(derive_seed(cfg.seed, 1));
  long step = 0;

  const std::string log_path = (fs::path(out_dir) / "train_log.txt").string();
  std::ofstream log;
  if (!a.resume.empty()) {
    const auto ck = run::Checkpoint::load(a.resume);
    if (ck.config_hash != hash && !a.force)
      return fail("config_mismatch", kUsage,
                  "checkpoint config_hash " + ck.config_hash + " differs from " + hash + "; pass --force to resume",
                  {{"checkpoint_hash", ck.config_hash}, {"config_hash", hash}});
    ck.restore_weights(*model);
    ck.restore_optimizer(opt, model->params());
    ck.restore_rng(rng);
    step = ck.step;
    log.open(log_path, std::ios::app);
    log << "resume_step: " << step << "\n";
  } else {
    log.open(log_path, std::ios::trunc);
    log << "config_hash: " << hash << "\nseed: " << cfg.seed << "\nmode: " << cfg.mode << "\nconfig: "
        << json::parse(cfg.to_json()).dump() << "\nparameters: " << model->params().count() << "\n";
  }
  if (!log) throw IoError("cannot write '" + log_path + "'");

  auto save = [&](const std::string& path) {
    auto ck = run::Checkpoint::capture(*model, &opt, &rng);
    ck.config_hash = hash;
    ck.config_json = checkpoint_config_json(cfg);
    ck.seed = cfg.seed;
    ck.step = step;
    ck.n_genes = first.n_genes();
    ck.visual_dim = first.visual_dim();
    ck.d_e = d_e;
    ck.gene_names = first.gene_names;
    ck.save(path);
  };

  try {
    while (step < cfg.train.steps) {
      const auto r = model->train_step(train, opt, rng);
      ++step;
      log_step(log, step, r);
      if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 && step < cfg.train.steps)
        save((fs::path(out_dir) / ("checkpoint_step" + std::to_string(step) + ".ckpt")).string());
    }
  } catch (const NumericError& e) {
    log << "numeric_failure: " << json(e.what()).dump() << "\n";
    log.flush();
    return fail("numeric", kNumeric, e.what(), {{"step", e.step()}, {"config_hash", hash}, {"seed", cfg.seed}});
  }
  const std::string ck_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
  save(ck_path);
  log << "final_step: " << step << "\ncheckpoint: checkpoint.ckpt\n";
  std::cout << "trained " << cfg.mode << " to step " << step << " -> " << ck_path << "\n";
  return kOk;
}

// ------------------------------------------------------------------ sample

struct SampleArgs {
  std::string checkpoint, slide, out;
  int steps = -1;
  long long seed = -1;
};

std::unique_ptr<model::Generator> load_model(const run::Checkpoint& ck, run::RunConfig& cfg) {
  cfg = run::RunConfig::from_json(ck.config_json);
  auto m = run::build_generator(cfg, ck.n_genes, ck.visual_dim, ck.d_e, nullptr);
  ck.restore_weights(*m);
  return m;
}

int cmd_sample(const SampleArgs& a) {
  const auto ck = run::Checkpoint::load(a.checkpoint);
  run::RunConfig cfg;
  auto model = load_model(ck, cfg);
  const auto slide = data::load_slide(a.slide);
  if (slide.visual_dim() != ck.visual_dim)
    throw ContractError("slide visual width " + std::to_string(slide.visual_dim()) + " differs from the model's " +
                        std::to_string(ck.visual_dim));
  const int steps = a.steps > 0 ? a.steps : cfg.sample.steps;
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : cfg.seed;
  const auto pred = model->sample(model::SlideCondition::from_sample(slide), steps, seed);
  if (!pred.allFinite()) return fail("numeric", kNumeric, "sampler produced non-finite values");
  data::Predictions p;
  p.slide_id = slide.slide_id;
  p.gene_names = ck.gene_names;
  p.expr = pred;
  p.provenance = {ck.mode, seed, steps, ck.config_hash};
  const auto parent = fs::path(a.out).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  data::save_predictions(a.out, p);
  std::cout << "sampled " << pred.rows() << "x" << pred.cols() << " (K=" << steps << ", seed=" << seed << ") -> "
            << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string pred, gt, out;
  std::size_t k = kDefaultNeighbors;
  std::string labels;
};

std::vector<int> read_labels(const std::string& path) {
  std::istringstream is(data::read_text_file(path));
  std::vector<int> out;
  int v;
  while (is >> v) out.push_back(v);
  if (!is.eof()) throw ParseError("labels", "expected whitespace-separated integers");
  return out;
}

int cmd_evaluate(const EvaluateArgs& a) {
  const auto gt = data::load_slide(a.gt);
  data::Predictions p;
  const std::string head = data::read_text_file(a.pred).substr(0, 16);
  if (head.rfind("FLAGSLIDE", 0) == 0) {
    const auto s = data::load_slide(a.pred);
    p.slide_id = s.slide_id;
    p.gene_names = s.gene_names;
    p.expr = s.expr;
  } else {
    p = data::load_predictions(a.pred);
  }
  if (p.gene_names != gt.gene_names) throw ContractError("prediction and ground truth gene panels differ");
  metrics::EvaluateOptions opts;
  opts.k = a.k;
  if (!a.labels.empty()) opts.domain_labels = read_labels(a.labels);
  auto report = metrics::evaluate(p.expr, gt.expr, gt.coords, opts);
  report.config_hash = p.provenance.config_hash.empty() ? run::fnv1a_hex(a.pred + "|" + a.gt) : p.provenance.config_hash;
  report.seed = p.provenance.seed;
  emit(a.out, report.to_text());
  return kOk;
}

// -------------------------------------------------------------- experiment

Eigen::MatrixXd a_star_for(const std::string& kind, std::size_t n, double length_scale) {
  data::SyntheticSpec spec;
  spec.n_spots = n;
  spec.cov_kind = data::parse_cov_kind(kind);
  spec.length_scale = length_scale;
  const auto coords = data::grid_coords(n, spec.spacing);
  return data::build_covariance(spec, coords, data::quadrant_labels(coords));
}

struct ExperimentArgs {
  std::string kind, out, cov = "identity";
  std::size_t n = 2;
  std::vector<std::size_t> g_values;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  double length_scale = 150.0;
  std::size_t bins = 40;
  // sweep / ablation
  std::vector<std::string> methods;
  long steps = -1;
  int sample_steps = -1;
  std::size_t n_spots = 0, n_genes = 0;
  bool uninformative = false;
};

int cmd_experiment(const ExperimentArgs& a) {
  json params{{"experiment", a.kind}, {"seed", a.seed}};
  auto progress = [](const std::string& s) { std::cerr << s << "\n"; };
  std::string table;
  if (a.kind == "gram" || a.kind == "fisher" || a.kind == "hist") {
    std::vector<std::size_t> gs = a.g_values;
    if (gs.empty()) gs = a.kind == "fisher" ? std::vector<std::size_t>{64, 128, 256, 512}
                                            : std::vector<std::size_t>{32, 64, 128, 256, 512, 1024, 2048};
    const std::size_t trials = a.trials ? a.trials : (a.kind == "gram" ? 10000 : a.kind == "fisher" ? 2000 : 500);
    const auto astar = a_star_for(a.cov, a.n, a.length_scale);
    params.update({{"N", a.n}, {"G", gs}, {"trials", trials}, {"cov", a.cov}, {"length_scale", a.length_scale}});
    if (a.kind == "gram") {
      table = curse::gram_error_experiment(a.n, gs, trials, astar, a.seed).to_table();
    } else if (a.kind == "fisher") {
      table = curse::fisher_scaling(a.n, gs, trials, astar, a.seed).to_table();
    } else {
      params["bins"] = a.bins;
      table = curse::offdiag_histogram(a.n, gs, trials, astar, a.seed, a.bins).to_table();
    }
  } else if (a.kind == "sweep") {
    curse::SweepConfig c;
    if (!a.g_values.empty()) c.g_values = a.g_values;
    if (!a.methods.empty()) c.methods = a.methods;
    if (a.steps >= 0) c.steps = a.steps;
    if (a.sample_steps > 0) c.sample_steps = a.sample_steps;
    if (a.n_spots) c.n_spots = a.n_spots;
    c.seed = a.seed;
    params.update({{"G", c.g_values}, {"methods", c.methods}, {"steps", c.steps}, {"sample_steps", c.sample_steps},
                   {"n_spots", c.n_spots}});
    table = curse::dimension_sweep(c, progress).to_table();
  } else if (a.kind == "ablation") {
    curse::AblationConfig c;
    if (a.steps >= 0) c.steps = a.steps;
    if (a.n_spots) c.n_spots = a.n_spots;
    if (a.n_genes) c.n_genes = a.n_genes;
    c.informative_visual = !a.uninformative;
    c.seed = a.seed;
    params.update({{"steps", c.steps}, {"n_spots", c.n_spots}, {"n_genes", c.n_genes},
                   {"informative_visual", c.informative_visual}});
    table = curse::edge_ablation(c, progress).to_table();
  } else {
    throw ContractError("unknown experiment '" + a.kind + "' (gram|fisher|hist|sweep|ablation)");
  }
  emit(a.out, provenance_header(run::fnv1a_hex(params.dump()), a.seed) + "# params: " + params.dump() + "\n" + table);
  return kOk;
}

// ------------------------------------------------------------ select-genes

struct SelectArgs {
  std::vector<std::string> slides;
  std::size_t target = 0;
  std::string out;
  bool log1p = false;
};

int cmd_select_genes(const SelectArgs& a) {
  std::vector<SlideSample> ss;
  Eigen::Index rows = 0;
  for (const auto& p : a.slides) {
    ss.push_back(data::load_slide(p));
    if (ss.back().gene_names != ss.front().gene_names) throw ContractError("slides must share one gene list");
    rows += ss.back().expr.rows();
  }
  Eigen::MatrixXd all(rows, ss.front().expr.cols());
  Eigen::Index r = 0;
  for (const auto& s : ss) {
    all.middleRows(r, s.expr.rows()) = s.expr;
    r += s.expr.rows();
  }
  if (a.log1p) all = data::log1p_normalize(all);
  auto panel = data::hmhvg_select(all, ss.front().gene_names, a.target);
  json params{{"slides", a.slides}, {"target", a.target}, {"log1p", a.log1p}};
  panel.config_hash = run::fnv1a_hex(params.dump());
  panel.seed = 0;
  emit(a.out, panel.to_json());
  return kOk;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string out_dir, cov = "spatial_rbf";
  std::size_t n_spots = 64, n_genes = 50, visual_dim = 64, count = 1;
  double length_scale = 150.0, noise = 0.1;
  std::uint64_t seed = 0;
  bool uninformative = false;
};

int cmd_synth(const SynthArgs& a) {
  const std::string dir = out_dir_or_env(a.out_dir);
  ensure_dir(dir);
  data::SyntheticSpec spec;
  spec.n_spots = a.n_spots;
  spec.n_genes = a.n_genes;
  spec.cov_kind = data::parse_cov_kind(a.cov);
  spec.length_scale = a.length_scale;
  spec.visual_dim = a.visual_dim;
  spec.visual_noise = a.noise;
  spec.informative_visual = !a.uninformative;
  spec.sketch_seed = derive_seed(a.seed, 0x5e7c);
  json params{{"n_spots", a.n_spots}, {"n_genes", a.n_genes}, {"cov", a.cov}, {"length_scale", a.length_scale},
              {"visual_dim", a.visual_dim}, {"noise", a.noise}, {"count", a.count},
              {"informative_visual", !a.uninformative}, {"seed", a.seed}};
  const std::string hash = run::fnv1a_hex(params.dump());
  json files = json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    spec.seed = derive_seed(a.seed, i);
    auto sl = data::synth_slide(spec);
    sl.sample.slide_id = "synth_" + std::to_string(a.seed) + "_" + std::to_string(i);
    const std::string base = "slide_" + std::to_string(i);
    data::save_slide((fs::path(dir) / (base + ".slide")).string(), sl.sample);
    std::ostringstream astar;
    astar << provenance_header(hash, a.seed);
    astar.precision(17);
    for (Eigen::Index r = 0; r < sl.a_star.rows(); ++r) {
      for (Eigen::Index c = 0; c < sl.a_star.cols(); ++c) astar << (c ? " " : "") << sl.a_star(r, c);
      astar << "\n";
    }
    data::write_text_file((fs::path(dir) / (base + "_a_star.txt")).string(), astar.str());
    files.push_back({{"slide", base + ".slide"}, {"a_star", base + "_a_star.txt"}, {"domains", sl.domains}});
  }
  json manifest{{"config_hash", hash}, {"seed", a.seed}, {"params", params}, {"slides", files}};
  data::write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  std::cout << "wrote " << a.count << " slide(s) to " << dir << "\n";
  return kOk;
}

// ------------------------------------------------------------------ report

// Reads experiment tables and prints a structured summary.
int cmd_report(const std::vector<std::string>& files, const std::string& out) {
  std::ostringstream os;
  for (const auto& path : files) {
    std::istringstream is(data::read_text_file(path));
    std::string line, header;
    std::vector<std::vector<std::string>> rows;
    std::string meta;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (line[0] == '#') {
        meta += line + "\n";
        continue;
      }
      std::vector<std::string> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (header.empty())
        header = line;
      else
        rows.push_back(cells);
    }
    os << "file: " << path << "\n" << meta << "columns: " << header << "\nrows: " << rows.size() << "\n";
    if (header.rfind("method,G,pcc", 0) == 0 && !rows.empty()) {
      std::map<std::string, std::map<std::size_t, double>> pcc;
      for (const auto& r : rows) pcc[r.at(0)][std::stoul(r.at(1))] = std::stod(r.at(2));
      for (const auto& [m, by_g] : pcc) {
        os << "pcc[" << m << "]:";
        for (const auto& [g, v] : by_g) os << " G" << g << "=" << fmt(v);
        os << "\n";
      }
      if (pcc.count("joint")) {
        const auto& j = pcc["joint"];
        os << "joint_pcc_drops: " << (j.rbegin()->second < j.begin()->second ? "yes" : "no") << "\n";
        if (pcc.count("flag") && pcc["flag"].count(j.rbegin()->first))
          os << "flag_beats_joint_at_max_G: " << (pcc["flag"][j.rbegin()->first] > j.rbegin()->second ? "yes" : "no")
             << "\n";
      }
    } else if (header.rfind("edge_set,pcc", 0) == 0 && rows.size() == 3) {
      const double img = std::stod(rows[0][1]), dist = std::stod(rows[1][1]), oracle = std::stod(rows[2][1]);
      os << "ordering_within_0.02: " << (oracle >= dist - 0.02 && dist >= img - 0.02 ? "yes" : "no") << "\n";
    }
    os << "\n";
  }
  emit(out, os.str());
  return kOk;
}

// ----------------------------------------------------------------- inspect

int cmd_inspect(const std::string& path) {
  const auto ck = run::Checkpoint::load(path);
  std::string bytes;
  for (const auto& v : ck.values)
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  std::size_t scalars = 0;
  for (const auto& v : ck.values) scalars += v.size();
  std::cout << "mode: " << ck.mode << "\nstep: " << ck.step << "\nconfig_hash: " << ck.config_hash
            << "\nseed: " << ck.seed << "\ntensors: " << ck.names.size() << "\nparameters: " << scalars
            << "\nweights_digest: " << run::fnv1a_hex(bytes) << "\noptimizer_steps: " << ck.opt_steps << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flaglab: spatial transcriptomics generation by joint graph diffusion and FLAG"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a generator (flag, joint or node_only)");
  train->add_option("--config", ta.config, "JSON run configuration")->check(CLI::ExistingFile);
  train->add_option("--mode", ta.mode, "flag | joint | node_only");
  train->add_option("--slides", ta.slides, "training slide files");
  train->add_option("--gfm", ta.gfm, "gene foundation-model embedding file");
  train->add_option("--steps", ta.steps, "target step count");
  train->add_option("--lr", ta.lr, "learning rate");
  train->add_option("--seed", ta.seed, "seed");
  train->add_option("--out-dir", ta.out_dir, "output directory");
  train->add_option("--resume", ta.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_flag("--force", ta.force, "resume even if the configuration digest differs");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate expression for a slide");
  sample->add_option("--checkpoint", sa.checkpoint)->required()->check(CLI::ExistingFile);
  sample->add_option("--slide", sa.slide, "slide with coordinates and visual features")->required()->check(CLI::ExistingFile);
  sample->add_option("--out", sa.out, "prediction file")->required();
  sample->add_option("--steps", sa.steps, "Heun steps K");
  sample->add_option("--seed", sa.seed, "sampling seed");

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against a ground-truth slide");
  evaluate->add_option("--pred", ea.pred, "prediction or slide file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--gt", ea.gt, "ground-truth slide")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", ea.out, "report path ('-' for stdout)");
  evaluate->add_option("--k", ea.k, "k-NN neighbours for Moran's I");
  evaluate->add_option("--labels", ea.labels, "domain labels, one integer per spot")->check(CLI::ExistingFile);

  ExperimentArgs xa;
  auto* experiment = app.add_subcommand("experiment", "Gene-dimension experiments");
  experiment->add_option("kind", xa.kind, "gram | fisher | hist | sweep | ablation")->required();
  experiment->add_option("--N", xa.n, "spots for the Monte-Carlo experiments");
  experiment->add_option("--G", xa.g_values, "gene counts");
  experiment->add_option("--trials", xa.trials);
  experiment->add_option("--cov", xa.cov, "identity | spatial_rbf | block");
  experiment->add_option("--length-scale", xa.length_scale);
  experiment->add_option("--bins", xa.bins);
  experiment->add_option("--methods", xa.methods, "sweep methods");
  experiment->add_option("--steps", xa.steps, "training steps per cell");
  experiment->add_option("--sample-steps", xa.sample_steps);
  experiment->add_option("--n-spots", xa.n_spots);
  experiment->add_option("--n-genes", xa.n_genes);
  experiment->add_flag("--uninformative", xa.uninformative, "ablation with visuals independent of expression");
  experiment->add_option("--seed", xa.seed);
  experiment->add_option("--out", xa.out, "CSV output ('-' for stdout)");

  SelectArgs ga;
  auto* select = app.add_subcommand("select-genes", "Highly-mean-and-variable gene selection");
  select->add_option("--slides", ga.slides)->required()->check(CLI::ExistingFile);
  select->add_option("--target", ga.target, "panel size")->required();
  select->add_option("--out", ga.out, "panel JSON ('-' for stdout)");
  select->add_flag("--log1p", ga.log1p, "log1p-normalize counts first");

  SynthArgs ya;
  auto* synth = app.add_subcommand("synth", "Write synthetic slides with their ground-truth covariance");
  synth->add_option("--out-dir", ya.out_dir);
  synth->add_option("--n-spots", ya.n_spots);
  synth->add_option("--n-genes", ya.n_genes);
  synth->add_option("--cov", ya.cov, "identity | spatial_rbf | block");
  synth->add_option("--length-scale", ya.length_scale);
  synth->add_option("--visual-dim", ya.visual_dim);
  synth->add_option("--noise", ya.noise);
  synth->add_option("--count", ya.count);
  synth->add_option("--seed", ya.seed);
  synth->add_flag("--uninformative", ya.uninformative);

  std::vector<std::string> report_files;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Summarize experiment tables");
  report->add_option("files", report_files)->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out);

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print checkpoint metadata and a digest of its weights");
  inspect->add_option("checkpoint", inspect_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", kUsage, e.what());
  }

  try {
    if (*train) return cmd_train(ta);
    if (*sample) return cmd_sample(sa);
    if (*evaluate) return cmd_evaluate(ea);
    if (*experiment) return cmd_experiment(xa);
    if (*select) return cmd_select_genes(ga);
    if (*synth) return cmd_synth(ya);
    if (*report) return cmd_report(report_files, report_out);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const ParseError& e) {
    return fail("parse", kUsage, e.what(), {{"field", e.field()}});
  } catch (const ContractError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const DomainError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", kNumeric, e.what(), {{"step", e.step()}});
  } catch (const UndefinedError& e) {
    return fail("numeric", kNumeric, e.what());
  } catch (const IoError& e) {
    return fail("io", kIo, e.what());
  } catch (const std::exception& e) {
    return fail("internal", kNumeric, e.what());
  }
  return kUsage;
}

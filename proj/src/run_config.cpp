#include "flag/run_config.hpp"

#include <cstdio>
#include <functional>
#include <set>

#include <json.hpp>

#include "flag/errors.hpp"
#include "flag/flag_model.hpp"
#include "flag/joint_diffusion.hpp"

namespace flag::run {

using nlohmann::json;

namespace {

// Reads the fields of one JSON object, rejecting keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError(path_.empty() ? "config" : path_, "expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(field(key), e.what());
    }
  }

  void sub(const std::string& key, const std::function<void(Section&)>& f) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Section s(j_.at(key), field(key));
    f(s);
    s.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ParseError(field(k), "unknown configuration key");
  }

 private:
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_tree(const RunConfig& c, bool for_hash) {
  json model{{"hidden", c.model.hidden},         {"layers", c.model.layers},
             {"heads", c.model.heads},           {"edge_hidden", c.model.edge_hidden},
             {"ffn_mult", c.model.ffn_mult},     {"dit_hidden", c.model.dit_hidden},
             {"dit_layers", c.model.dit_layers}, {"dit_heads", c.model.dit_heads},
             {"mlp_ratio", c.model.mlp_ratio},   {"gene_dim", c.model.gene_dim},
             {"align_layer", c.model.align_layer}, {"gene_positions", c.model.gene_positions}};
  json train{{"batch", c.train.batch},
             {"spot_batch", c.train.spot_batch},
             {"lr", c.train.lr},
             {"weight_decay", c.train.weight_decay},
             {"grad_clip", c.train.grad_clip},
             {"lambda_align", c.train.lambda_align},
             {"lambda_c", c.train.lambda_c},
             {"checkpoint_every", c.train.checkpoint_every}};
  json t{{"mode", c.mode},
         {"seed", c.seed},
         {"model", model},
         {"train", train},
         {"schedule", {{"sigma_min", c.schedule.sigma_min}, {"sigma_max", c.schedule.sigma_max}}},
         {"sample", {{"steps", c.sample.steps}, {"chunk", c.sample.chunk}}}};
  if (!for_hash) {
    t["train"]["steps"] = c.train.steps;
    t["device"] = c.device;
    t["data"] = {{"train", c.data.train}, {"gfm", c.data.gfm}};
  }
  return t;
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError("config", e.what());
  }
  RunConfig c;
  Section root(j, "");
  root.get("mode", c.mode);
  root.get("seed", c.seed);
  root.get("device", c.device);
  root.sub("model", [&](Section& s) {
    s.get("hidden", c.model.hidden);
    s.get("layers", c.model.layers);
    s.get("heads", c.model.heads);
    s.get("edge_hidden", c.model.edge_hidden);
    s.get("ffn_mult", c.model.ffn_mult);
    s.get("dit_hidden", c.model.dit_hidden);
    s.get("dit_layers", c.model.dit_layers);
    s.get("dit_heads", c.model.dit_heads);
    s.get("mlp_ratio", c.model.mlp_ratio);
    s.get("gene_dim", c.model.gene_dim);
    s.get("align_layer", c.model.align_layer);
    s.get("gene_positions", c.model.gene_positions);
  });
  root.sub("train", [&](Section& s) {
    s.get("steps", c.train.steps);
    s.get("batch", c.train.batch);
    s.get("spot_batch", c.train.spot_batch);
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("grad_clip", c.train.grad_clip);
    s.get("lambda_align", c.train.lambda_align);
    s.get("lambda_c", c.train.lambda_c);
    s.get("checkpoint_every", c.train.checkpoint_every);
  });
  root.sub("schedule", [&](Section& s) {
    s.get("sigma_min", c.schedule.sigma_min);
    s.get("sigma_max", c.schedule.sigma_max);
  });
  root.sub("sample", [&](Section& s) {
    s.get("steps", c.sample.steps);
    s.get("chunk", c.sample.chunk);
  });
  root.sub("data", [&](Section& s) {
    s.get("train", c.data.train);
    s.get("gfm", c.data.gfm);
  });
  root.finish();
  return c;
}

RunConfig RunConfig::load(const std::string& path) { return from_json(data::read_text_file(path)); }

std::string RunConfig::to_json() const { return to_tree(*this, false).dump(2) + "\n"; }

void RunConfig::validate() const {
  if (mode != "flag" && mode != "joint" && mode != "node_only")
    throw ContractError("mode must be flag, joint or node_only (got '" + mode + "')");
  if (device != "cpu") throw ContractError("only device 'cpu' is available");
  if (train.steps < 0) throw ContractError("train.steps must be >= 0");
  if (train.batch == 0) throw ContractError("train.batch must be >= 1");
  if (!(train.lr >= 0) || !(train.weight_decay >= 0)) throw ContractError("train.lr and weight_decay must be >= 0");
  if (train.lambda_align < 0 || train.lambda_c < 0) throw ContractError("loss weights must be >= 0");
  if (train.checkpoint_every < 0) throw ContractError("train.checkpoint_every must be >= 0");
  if (!(schedule.sigma_min > 0) || !(schedule.sigma_max > schedule.sigma_min))
    throw ContractError("schedule needs 0 < sigma_min < sigma_max");
  if (sample.steps < 1 || sample.chunk == 0) throw ContractError("sample.steps and sample.chunk must be >= 1");
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : bytes) h = (h ^ ch) * 1099511628211ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::config_hash() const { return fnv1a_hex(to_tree(*this, true).dump()); }

std::unique_ptr<model::Generator> build_generator(const RunConfig& cfg, std::size_t n_genes, std::size_t visual_dim,
                                                  std::size_t d_e, const data::GfmEmbeddings* gfm) {
  cfg.validate();
  if (gfm && static_cast<std::size_t>(gfm->f.cols()) != d_e)
    throw ContractError("GFM embeddings have " + std::to_string(gfm->f.cols()) + " columns, expected " +
                        std::to_string(d_e));
  if (gfm && cfg.mode != "flag") throw ContractError("GFM embeddings are only used by mode flag");
  model::GraphBackboneConfig bb;
  bb.node_in = n_genes;
  bb.hidden = cfg.model.hidden;
  bb.layers = cfg.model.layers;
  bb.heads = cfg.model.heads;
  bb.cond_dim = visual_dim;
  bb.edge_hidden = cfg.model.edge_hidden;
  bb.ffn_mult = cfg.model.ffn_mult;
  if (cfg.mode == "joint") {
    joint::JointConfig jc;
    jc.backbone = bb;
    jc.lambda_c = cfg.train.lambda_c;
    jc.sigma_min = cfg.schedule.sigma_min;
    jc.sigma_max = cfg.schedule.sigma_max;
    jc.batch = cfg.train.batch;
    return std::make_unique<joint::JointModel>(jc, cfg.seed);
  }
  if (cfg.mode == "node_only") {
    joint::NodeOnlyConfig nc;
    nc.backbone = bb;
    nc.sigma_min = cfg.schedule.sigma_min;
    nc.sigma_max = cfg.schedule.sigma_max;
    nc.batch = cfg.train.batch;
    return std::make_unique<joint::NodeOnlyModel>(nc, cfg.seed);
  }
  flagm::FlagConfig fc;
  fc.backbone = bb;
  fc.dit.n_genes = n_genes;
  fc.dit.hidden = cfg.model.dit_hidden;
  fc.dit.layers = cfg.model.dit_layers;
  fc.dit.heads = cfg.model.dit_heads;
  fc.dit.mlp_ratio = cfg.model.mlp_ratio;
  fc.dit.gene_dim = cfg.model.gene_dim;
  fc.dit.align_layer = cfg.model.align_layer;
  fc.dit.gene_positions = cfg.model.gene_positions;
  fc.d_e = d_e;
  fc.lambda_align = cfg.train.lambda_align;
  fc.sigma_min = cfg.schedule.sigma_min;
  fc.sigma_max = cfg.schedule.sigma_max;
  fc.batch = cfg.train.batch;
  fc.spot_batch = cfg.train.spot_batch;
  fc.sample_chunk = cfg.sample.chunk;
  auto m = std::make_unique<flagm::FlagModel>(fc, cfg.seed);
  if (gfm) m->set_embeddings(*gfm);
  return m;
}

}  // namespace flag::run

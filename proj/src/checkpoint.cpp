#include "flag/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include <json.hpp>

#include "flag/data.hpp"
#include "flag/errors.hpp"

namespace flag::run {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written little-endian");

namespace {

constexpr const char* kMagic = "FLAGCKPT/1";
constexpr const char* kEnd = "---";

void append(std::string& out, const std::vector<double>& v) {
  const std::size_t off = out.size();
  out.resize(off + v.size() * sizeof(double));
  std::memcpy(out.data() + off, v.data(), v.size() * sizeof(double));
}

std::vector<double> take(const std::string& payload, std::size_t& pos, std::size_t n, const std::string& field) {
  if (payload.size() < pos + n * sizeof(double)) throw ParseError(field, "payload truncated");
  std::vector<double> v(n);
  std::memcpy(v.data(), payload.data() + pos, n * sizeof(double));
  pos += n * sizeof(double);
  return v;
}

}  // namespace

Checkpoint Checkpoint::capture(const model::Generator& g, const nn::AdamW* opt, const Rng* rng) {
  Checkpoint c;
  c.mode = g.mode();
  const auto& ps = g.params();
  c.names = ps.names();
  for (const auto& p : ps.params()) {
    c.shapes.push_back(p.shape());
    c.values.emplace_back(p.data().begin(), p.data().end());
  }
  if (opt) {
    c.opt_steps = opt->steps();
    c.opt_state = opt->flat_state();
  }
  if (rng) {
    std::ostringstream os;
    os << rng->engine();
    c.rng_state = os.str();
  }
  return c;
}

void Checkpoint::restore_weights(model::Generator& g) const {
  if (g.mode() != mode) throw ContractError("checkpoint holds a '" + mode + "' model, not '" + g.mode() + "'");
  auto& ps = g.params();
  if (ps.names() != names) throw ContractError("checkpoint parameter names differ from the model");
  for (std::size_t i = 0; i < names.size(); ++i) {
    ad::Var p = ps.params()[i];
    if (p.shape() != shapes[i])
      throw ContractError("checkpoint tensor '" + names[i] + "' has shape " + ad::shape_str(shapes[i]) +
                          ", model expects " + ad::shape_str(p.shape()));
    std::copy(values[i].begin(), values[i].end(), p.mutable_data().begin());
  }
}

void Checkpoint::restore_optimizer(nn::AdamW& opt, const nn::ParamStore& ps) const {
  opt.set_state(opt_steps, opt_state, ps);
}

void Checkpoint::restore_rng(Rng& rng) const {
  if (rng_state.empty()) return;
  std::istringstream is(rng_state);
  is >> rng.engine();
  if (!is) throw ParseError("rng", "bad engine state");
}

void Checkpoint::save(const std::string& path) const {
  json tensors = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) tensors.push_back({{"name", names[i]}, {"shape", shapes[i]}});
  const std::vector<std::pair<std::string, json>> fields{
      {"mode", mode},
      {"config_hash", config_hash},
      {"seed", seed},
      {"step", step},
      {"n_genes", n_genes},
      {"visual_dim", visual_dim},
      {"d_e", d_e},
      {"gene_names", gene_names},
      {"config", config_json},
      {"dtype", "float64-le"},
      {"tensors", tensors},
      {"optimizer", {{"steps", opt_steps}, {"size", opt_state.size()}}},
      {"rng", rng_state}};
  std::string out = std::string(kMagic) + "\n";
  for (const auto& [k, v] : fields) out += k + ": " + v.dump() + "\n";
  out += std::string(kEnd) + "\n";
  for (const auto& v : values) append(out, v);
  append(out, opt_state);
  data::write_text_file(path, out);
}

Checkpoint Checkpoint::load(const std::string& path) {
  const std::string bytes = data::read_text_file(path);
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) return false;
    line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != kMagic) throw ParseError("magic", std::string("expected '") + kMagic + "'");
  json h = json::object();
  bool closed = false;
  while (next_line(line)) {
    if (line == kEnd) {
      closed = true;
      break;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError(line, "header line is not 'key: value'");
    const std::string key = line.substr(0, colon);
    try {
      h[key] = json::parse(line.substr(colon + 1));
    } catch (const json::exception& e) {
      throw ParseError(key, e.what());
    }
  }
  if (!closed) throw ParseError("header", "missing '---' terminator");

  Checkpoint c;
  std::string field;
  try {
    for (const auto& [k, v] : h.items())
      if (k != "mode" && k != "config_hash" && k != "seed" && k != "step" && k != "n_genes" && k != "visual_dim" &&
          k != "d_e" && k != "gene_names" && k != "config" && k != "dtype" && k != "tensors" && k != "optimizer" &&
          k != "rng")
        throw ParseError(k, "unknown header field");
    field = "dtype";
    if (h.at("dtype").get<std::string>() != "float64-le") throw ParseError("dtype", "expected float64-le");
    field = "mode";
    c.mode = h.at("mode").get<std::string>();
    field = "config_hash";
    c.config_hash = h.at("config_hash").get<std::string>();
    field = "seed";
    c.seed = h.at("seed").get<std::uint64_t>();
    field = "step";
    c.step = h.at("step").get<long>();
    field = "n_genes";
    c.n_genes = h.at("n_genes").get<std::size_t>();
    field = "visual_dim";
    c.visual_dim = h.at("visual_dim").get<std::size_t>();
    field = "d_e";
    c.d_e = h.at("d_e").get<std::size_t>();
    field = "gene_names";
    c.gene_names = h.at("gene_names").get<std::vector<std::string>>();
    field = "config";
    c.config_json = h.at("config").get<std::string>();
    field = "tensors";
    for (const auto& t : h.at("tensors")) {
      c.names.push_back(t.at("name").get<std::string>());
      c.shapes.push_back(t.at("shape").get<ad::Shape>());
    }
    field = "optimizer";
    c.opt_steps = h.at("optimizer").at("steps").get<std::uint64_t>();
    const auto opt_size = h.at("optimizer").at("size").get<std::size_t>();
    field = "rng";
    c.rng_state = h.at("rng").get<std::string>();

    const std::string payload = bytes.substr(pos);
    std::size_t off = 0;
    for (std::size_t i = 0; i < c.names.size(); ++i)
      c.values.push_back(take(payload, off, ad::numel(c.shapes[i]), c.names[i]));
    c.opt_state = take(payload, off, opt_size, "optimizer");
    if (off != payload.size()) throw ParseError("payload", "trailing bytes after the optimizer state");
  } catch (const json::exception& e) {
    throw ParseError(field, e.what());
  }
  return c;
}

}  // namespace flag::run

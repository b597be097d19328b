#include "flag/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flag/errors.hpp"
#include "flag/rng.hpp"

namespace flag::data {

using nlohmann::json;

// ------------------------------------------------------------------ panel

namespace {

// Gene indices ordered by descending value, ties by name.
std::vector<std::size_t> rank_desc(const std::vector<double>& v, const std::vector<std::string>& names) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return names[a] < names[b];
  });
  return idx;
}

}  // namespace

GenePanel hmhvg_select(const Matrix& train_expr, const std::vector<std::string>& names, std::size_t target_g) {
  const auto g_all = static_cast<std::size_t>(train_expr.cols());
  if (names.size() != g_all) throw ContractError("hmhvg_select: names length differs from column count");
  if (target_g == 0 || target_g > g_all)
    throw ContractError("hmhvg_select: target " + std::to_string(target_g) + " exceeds the " + std::to_string(g_all) +
                        " common genes");
  if (train_expr.rows() < 2) throw ContractError("hmhvg_select: need at least 2 training spots");
  const double n = static_cast<double>(train_expr.rows());
  std::vector<double> mean(g_all), sd(g_all);
  for (std::size_t g = 0; g < g_all; ++g) {
    const auto col = train_expr.col(static_cast<Eigen::Index>(g));
    mean[g] = col.mean();
    sd[g] = std::sqrt((col.array() - mean[g]).square().sum() / (n - 1));
  }
  const auto by_mean = rank_desc(mean, names);
  const auto by_sd = rank_desc(sd, names);
  std::vector<std::size_t> pos_sd(g_all);
  for (std::size_t r = 0; r < g_all; ++r) pos_sd[by_sd[r]] = r;

  GenePanel panel;
  std::vector<std::size_t> chosen;
  for (std::size_t k = target_g; k <= g_all; ++k) {
    chosen.clear();
    // walk the mean ranking so that `chosen` is already in descending-mean order
    for (std::size_t r = 0; r < k; ++r)
      if (pos_sd[by_mean[r]] < k) chosen.push_back(by_mean[r]);
    if (chosen.size() >= target_g) {
      panel.k_search = k;
      break;
    }
  }
  panel.truncated = chosen.size() > target_g;
  chosen.resize(target_g);
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t g : chosen) {
    panel.indices.push_back(g);
    panel.names.push_back(names[g]);
    panel.means.push_back(mean[g]);
    panel.stds.push_back(sd[g]);
  }
  return panel;
}

std::string GenePanel::to_json() const {
  json j{{"names", names}, {"indices", indices}, {"means", means}, {"stds", stds},
         {"k_search", k_search}, {"truncated", truncated}};
  if (!config_hash.empty()) {
    j["config_hash"] = config_hash;
    j["seed"] = seed;
  }
  return j.dump(2) + "\n";
}

GenePanel GenePanel::from_json(const std::string& text) {
  GenePanel p;
  try {
    const json j = json::parse(text);
    p.names = j.at("names").get<std::vector<std::string>>();
    p.indices = j.at("indices").get<std::vector<std::size_t>>();
    p.means = j.at("means").get<std::vector<double>>();
    p.stds = j.at("stds").get<std::vector<double>>();
    p.k_search = j.at("k_search").get<std::size_t>();
    p.truncated = j.at("truncated").get<bool>();
    if (j.contains("config_hash")) {
      p.config_hash = j.at("config_hash").get<std::string>();
      p.seed = j.value("seed", std::uint64_t{0});
    }
  } catch (const json::exception& e) {
    throw ParseError("gene_panel", e.what());
  }
  if (p.names.size() != p.indices.size()) throw ParseError("indices", "length differs from names");
  return p;
}

Matrix apply_panel(const Matrix& expr, const GenePanel& panel) {
  Matrix out(expr.rows(), static_cast<Eigen::Index>(panel.indices.size()));
  for (std::size_t j = 0; j < panel.indices.size(); ++j) {
    if (panel.indices[j] >= static_cast<std::size_t>(expr.cols())) throw ContractError("panel index out of range");
    out.col(static_cast<Eigen::Index>(j)) = expr.col(static_cast<Eigen::Index>(panel.indices[j]));
  }
  return out;
}

SlideSample apply_panel(const SlideSample& s, const GenePanel& panel) {
  // resolve by name so slides with different column orders share one panel
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < s.gene_names.size(); ++i) pos[s.gene_names[i]] = i;
  SlideSample out = s;
  out.expr.resize(s.expr.rows(), static_cast<Eigen::Index>(panel.names.size()));
  for (std::size_t j = 0; j < panel.names.size(); ++j) {
    auto it = pos.find(panel.names[j]);
    if (it == pos.end()) throw ContractError("slide '" + s.slide_id + "' lacks panel gene " + panel.names[j]);
    out.expr.col(static_cast<Eigen::Index>(j)) = s.expr.col(static_cast<Eigen::Index>(it->second));
  }
  out.gene_names = panel.names;
  return out;
}

Matrix log1p_normalize(const Matrix& raw_counts) {
  if ((raw_counts.array() < 0).any()) throw ContractError("log1p_normalize: negative counts");
  return raw_counts.array().log1p().matrix();
}

// ------------------------------------------------------------- synthetic

CovKind parse_cov_kind(const std::string& s) {
  if (s == "identity") return CovKind::Identity;
  if (s == "spatial_rbf") return CovKind::SpatialRbf;
  if (s == "block") return CovKind::Block;
  throw ContractError("unknown cov_kind '" + s + "' (identity|spatial_rbf|block)");
}

std::string to_string(CovKind k) {
  switch (k) {
    case CovKind::Identity: return "identity";
    case CovKind::SpatialRbf: return "spatial_rbf";
    case CovKind::Block: return "block";
  }
  return "?";
}

Matrix grid_coords(std::size_t n, double spacing) {
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  Matrix c(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    c(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i % cols) * spacing;
    c(static_cast<Eigen::Index>(i), 1) = static_cast<double>(i / cols) * spacing;
  }
  return c;
}

std::vector<int> quadrant_labels(const Matrix& coords) {
  const double cx = 0.5 * (coords.col(0).minCoeff() + coords.col(0).maxCoeff());
  const double cy = 0.5 * (coords.col(1).minCoeff() + coords.col(1).maxCoeff());
  std::vector<int> out(static_cast<std::size_t>(coords.rows()));
  for (Eigen::Index i = 0; i < coords.rows(); ++i)
    out[static_cast<std::size_t>(i)] = (coords(i, 0) > cx ? 1 : 0) + (coords(i, 1) > cy ? 2 : 0);
  return out;
}

Matrix build_covariance(const SyntheticSpec& spec, const Matrix& coords, const std::vector<int>& domains) {
  const auto n = coords.rows();
  switch (spec.cov_kind) {
    case CovKind::Identity:
      return Matrix::Identity(n, n);
    case CovKind::SpatialRbf:
      if (!(spec.length_scale > 0)) throw ContractError("length_scale must be positive");
      return distance_kernel(coords, spec.length_scale);
    case CovKind::Block: {
      Matrix a(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          a(i, j) = i == j ? 1.0 : (domains[static_cast<std::size_t>(i)] == domains[static_cast<std::size_t>(j)] ? spec.block_rho : 0.0);
      return a;
    }
  }
  throw ContractError("bad cov_kind");
}

SyntheticSlide synth_slide(const SyntheticSpec& spec) {
  if (spec.n_spots < 2 || spec.n_genes < 1 || spec.visual_dim < 1) throw ContractError("synthetic spec has empty dimensions");
  const auto n = static_cast<Eigen::Index>(spec.n_spots);
  const auto g = static_cast<Eigen::Index>(spec.n_genes);
  SyntheticSlide out;
  out.sample.coords = grid_coords(spec.n_spots, spec.spacing);
  out.domains = quadrant_labels(out.sample.coords);
  const Matrix base = build_covariance(spec, out.sample.coords, out.domains);

  Eigen::LLT<Matrix> llt;
  for (double jitter : {1e-6, 1e-4}) {
    out.a_star = base + jitter * Matrix::Identity(n, n);
    llt.compute(out.a_star);
    if (llt.info() == Eigen::Success) break;
  }
  if (llt.info() != Eigen::Success) throw NumericError("synthetic covariance is not positive definite after jitter");

  Rng rng(derive_seed(spec.seed, 1));
  const Matrix z = rng.normal_matrix(n, g);
  out.sample.expr = llt.matrixL() * z;

  const auto dv = static_cast<Eigen::Index>(spec.visual_dim);
  Rng noise_rng(derive_seed(spec.seed, 2));
  if (spec.informative_visual) {
    Rng sketch_rng(derive_seed(spec.sketch_seed, 3));
    const Matrix m = sketch_rng.normal_matrix(dv, g) / std::sqrt(static_cast<double>(g));
    out.sample.visual = out.sample.expr * m.transpose() + spec.visual_noise * noise_rng.normal_matrix(n, dv);
  } else {
    out.sample.visual = noise_rng.normal_matrix(n, dv);
  }
  out.sample.gene_names.reserve(spec.n_genes);
  for (std::size_t j = 0; j < spec.n_genes; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "gene_%05zu", j);
    out.sample.gene_names.emplace_back(buf);
  }
  out.sample.slide_id = "synth_" + std::to_string(spec.seed);
  return out;
}

// ------------------------------------------------------------ binary helpers

namespace {

void put_f32(std::string& buf, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

void append_matrix(std::string& buf, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f32(buf, m(i, j));
}

Matrix read_matrix(const std::string& payload, std::size_t& off, std::size_t rows, std::size_t cols, const std::string& block) {
  const std::size_t need = rows * cols * 4;
  if (off + need > payload.size())
    throw ParseError(block, "truncated payload: need " + std::to_string(need) + " bytes at offset " + std::to_string(off) +
                                ", have " + std::to_string(payload.size() - off));
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data() + off);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = get_f32(p + 4 * (i * cols + j));
  off += need;
  return m;
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

constexpr const char* kHeaderEnd = "---";

struct HeaderFile {
  std::string magic;
  std::vector<std::pair<std::string, json>> fields;
  std::string payload;

  const json& get(const std::string& key) const {
    for (const auto& [k, v] : fields)
      if (k == key) return v;
    throw ParseError(key, "missing header field");
  }
};

std::string format_header(const std::string& magic, const std::vector<std::pair<std::string, json>>& fields) {
  std::string h = magic + "\n";
  for (const auto& [k, v] : fields) h += k + ": " + v.dump() + "\n";
  h += std::string(kHeaderEnd) + "\n";
  return h;
}

HeaderFile parse_header_file(const std::string& bytes, const std::string& magic,
                             const std::set<std::string>& allowed) {
  HeaderFile f;
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) return false;
    line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != magic) throw ParseError("magic", "expected '" + magic + "'");
  bool closed = false;
  while (next_line(line)) {
    if (line == kHeaderEnd) {
      closed = true;
      break;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError(line, "header line is not 'key: value'");
    const std::string key = line.substr(0, colon);
    if (!allowed.count(key)) throw ParseError(key, "unknown header field");
    try {
      f.fields.emplace_back(key, json::parse(line.substr(colon + 1)));
    } catch (const json::exception& e) {
      throw ParseError(key, e.what());
    }
  }
  if (!closed) throw ParseError("header", "missing '---' terminator");
  f.magic = magic;
  f.payload = bytes.substr(pos);
  return f;
}

template <typename T>
T field_as(const HeaderFile& f, const std::string& key) {
  try {
    return f.get(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(key, e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------- slides

constexpr const char* kSlideMagic = "FLAGSLIDE/1";
constexpr const char* kPredMagic = "FLAGPRED/1";

void save_slide(const std::string& path, const SlideSample& s) {
  s.validate();
  std::string bytes = format_header(kSlideMagic, {{"slide_id", s.slide_id},
                                                  {"n_spots", s.n_spots()},
                                                  {"n_genes", s.n_genes()},
                                                  {"visual_dim", s.visual_dim()},
                                                  {"gene_names", s.gene_names},
                                                  {"blocks", json::array({"coords", "visual", "expr"})},
                                                  {"dtype", "float32-le"}});
  append_matrix(bytes, s.coords);
  append_matrix(bytes, s.visual);
  append_matrix(bytes, s.expr);
  write_file_bytes(path, bytes);
}

SlideSample load_slide(const std::string& path) {
  const HeaderFile f = parse_header_file(
      read_file_bytes(path), kSlideMagic,
      {"slide_id", "n_spots", "n_genes", "visual_dim", "gene_names", "blocks", "dtype"});
  if (field_as<std::string>(f, "dtype") != "float32-le") throw ParseError("dtype", "only float32-le is supported");
  if (field_as<std::vector<std::string>>(f, "blocks") != std::vector<std::string>{"coords", "visual", "expr"})
    throw ParseError("blocks", "expected [coords, visual, expr]");
  SlideSample s;
  s.slide_id = field_as<std::string>(f, "slide_id");
  const auto n = field_as<std::size_t>(f, "n_spots");
  const auto g = field_as<std::size_t>(f, "n_genes");
  const auto dv = field_as<std::size_t>(f, "visual_dim");
  if (n == 0) throw ParseError("n_spots", "empty slide");
  s.gene_names = field_as<std::vector<std::string>>(f, "gene_names");
  if (s.gene_names.size() != g)
    throw ParseError("gene_names", "declares " + std::to_string(s.gene_names.size()) + " names but n_genes is " + std::to_string(g));
  std::size_t off = 0;
  s.coords = read_matrix(f.payload, off, n, 2, "coords");
  s.visual = read_matrix(f.payload, off, n, dv, "visual");
  s.expr = read_matrix(f.payload, off, n, g, "expr");
  if (off != f.payload.size()) throw ParseError("payload", "trailing bytes after expr block");
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw ParseError("slide", e.what());
  }
  return s;
}

void save_predictions(const std::string& path, const Predictions& p) {
  if (static_cast<std::size_t>(p.expr.cols()) != p.gene_names.size()) throw ContractError("prediction width differs from gene names");
  json prov{{"model", p.provenance.model},
            {"seed", p.provenance.seed},
            {"K", p.provenance.steps},
            {"config_hash", p.provenance.config_hash}};
  std::string bytes = format_header(kPredMagic, {{"slide_id", p.slide_id},
                                                 {"n_spots", static_cast<std::size_t>(p.expr.rows())},
                                                 {"n_genes", p.gene_names.size()},
                                                 {"gene_names", p.gene_names},
                                                 {"blocks", json::array({"expr"})},
                                                 {"dtype", "float32-le"},
                                                 {"provenance", prov}});
  append_matrix(bytes, p.expr);
  write_file_bytes(path, bytes);
}

Predictions load_predictions(const std::string& path) {
  const HeaderFile f = parse_header_file(read_file_bytes(path), kPredMagic,
                                         {"slide_id", "n_spots", "n_genes", "gene_names", "blocks", "dtype", "provenance"});
  if (field_as<std::string>(f, "dtype") != "float32-le") throw ParseError("dtype", "only float32-le is supported");
  Predictions p;
  p.slide_id = field_as<std::string>(f, "slide_id");
  const auto n = field_as<std::size_t>(f, "n_spots");
  const auto g = field_as<std::size_t>(f, "n_genes");
  if (n == 0) throw ParseError("n_spots", "empty prediction");
  p.gene_names = field_as<std::vector<std::string>>(f, "gene_names");
  if (p.gene_names.size() != g) throw ParseError("gene_names", "count differs from n_genes");
  const json prov = f.get("provenance");
  try {
    p.provenance.model = prov.at("model").get<std::string>();
    p.provenance.seed = prov.at("seed").get<std::uint64_t>();
    p.provenance.steps = prov.at("K").get<int>();
    p.provenance.config_hash = prov.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError("provenance", e.what());
  }
  std::size_t off = 0;
  p.expr = read_matrix(f.payload, off, n, g, "expr");
  if (off != f.payload.size()) throw ParseError("payload", "trailing bytes after expr block");
  return p;
}

// ------------------------------------------------------------ GFM table

std::size_t GfmEmbeddings::n_valid() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

void GfmEmbeddings::validate() const {
  if (f.cols() == 0) throw ContractError("GFM embedding dimension must be positive");
  if (static_cast<std::size_t>(f.rows()) != valid.size()) throw ContractError("GFM validity mask length mismatch");
  if (!gene_names.empty() && gene_names.size() != valid.size()) throw ContractError("GFM gene name count mismatch");
  for (std::size_t g = 0; g < valid.size(); ++g)
    if (!valid[g] && !f.row(static_cast<Eigen::Index>(g)).isZero(0.0))
      throw ContractError("masked GFM row " + std::to_string(g) + " is not all-zero");
}

GfmEmbeddings GfmEmbeddings::aligned_to(const std::vector<std::string>& names) const {
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < gene_names.size(); ++i) pos[gene_names[i]] = i;
  GfmEmbeddings out;
  out.f = Matrix::Zero(static_cast<Eigen::Index>(names.size()), f.cols());
  out.valid.assign(names.size(), false);
  out.gene_names = names;
  out.source_tag = source_tag;
  for (std::size_t j = 0; j < names.size(); ++j) {
    auto it = pos.find(names[j]);
    if (it != pos.end() && valid[it->second]) {
      out.f.row(static_cast<Eigen::Index>(j)) = f.row(static_cast<Eigen::Index>(it->second));
      out.valid[j] = true;
    }
  }
  return out;
}

GfmEmbeddings random_gfm_embeddings(const std::vector<std::string>& names, std::size_t d_e, std::uint64_t seed,
                                    double masked_fraction) {
  Rng rng(derive_seed(seed, 17));
  GfmEmbeddings e;
  e.gene_names = names;
  e.source_tag = "synthetic-gaussian";
  e.f = rng.normal_matrix(static_cast<Eigen::Index>(names.size()), static_cast<Eigen::Index>(d_e));
  e.valid.assign(names.size(), true);
  for (std::size_t g = 0; g < names.size(); ++g)
    if (rng.uniform() < masked_fraction) {
      e.valid[g] = false;
      e.f.row(static_cast<Eigen::Index>(g)).setZero();
    }
  return e;
}

void save_gfm_embeddings(const std::string& path, const GfmEmbeddings& e) {
  e.validate();
  std::string bytes;
  append_matrix(bytes, e.f);
  write_file_bytes(path, bytes);
  json side{{"n_genes", static_cast<std::size_t>(e.f.rows())},
            {"d_e", static_cast<std::size_t>(e.f.cols())},
            {"gene_names", e.gene_names},
            {"source_tag", e.source_tag}};
  write_file_bytes(path + ".json", side.dump(2) + "\n");
}

GfmEmbeddings load_gfm_embeddings(const std::string& path) {
  json side;
  try {
    side = json::parse(read_file_bytes(path + ".json"));
  } catch (const json::exception& e) {
    throw ParseError("sidecar", e.what());
  }
  GfmEmbeddings e;
  std::size_t g = 0, d = 0;
  try {
    g = side.at("n_genes").get<std::size_t>();
    d = side.at("d_e").get<std::size_t>();
    e.gene_names = side.at("gene_names").get<std::vector<std::string>>();
    e.source_tag = side.at("source_tag").get<std::string>();
  } catch (const json::exception& ex) {
    throw ParseError("sidecar", ex.what());
  }
  if (d == 0) throw ParseError("d_e", "embedding width must be positive");
  if (e.gene_names.size() != g) throw ParseError("gene_names", "count differs from n_genes");
  const std::string payload = read_file_bytes(path);
  if (payload.size() != g * d * 4)
    throw ParseError("payload", "expected " + std::to_string(g * d * 4) + " bytes, found " + std::to_string(payload.size()));
  std::size_t off = 0;
  e.f = read_matrix(payload, off, g, d, "payload");
  e.valid.resize(g);
  for (std::size_t i = 0; i < g; ++i) e.valid[i] = !e.f.row(static_cast<Eigen::Index>(i)).isZero(0.0);
  return e;
}

// ------------------------------------------------------------------ misc

void save_matrix_text(const std::string& path, const Matrix& m) {
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
  write_file_bytes(path, os.str());
}

void write_text_file(const std::string& path, const std::string& content) { write_file_bytes(path, content); }
std::string read_text_file(const std::string& path) { return read_file_bytes(path); }

}  // namespace flag::data

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flag/spatial_graph.hpp"

namespace flag::data {

using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------- gene panel

struct GenePanel {
  std::vector<std::string> names;
  std::vector<std::size_t> indices;  // columns of the source matrix, ascending
  std::vector<double> means, stds;   // statistics of the selected genes
  std::size_t k_search = 0;
  bool truncated = false;  // intersection overshot the target and was cut by mean
  std::string config_hash;  // provenance, written only when non-empty
  std::uint64_t seed = 0;

  std::string to_json() const;
  static GenePanel from_json(const std::string& text);
};

// Smallest K such that top-K by mean ∩ top-K by std holds at least target_g
// genes. Ranks are descending with ties broken by gene name; any overshoot is
// trimmed by descending mean (ties by name). Statistics come from the given
// training spots only.
GenePanel hmhvg_select(const Matrix& train_expr, const std::vector<std::string>& names, std::size_t target_g);

Matrix apply_panel(const Matrix& expr, const GenePanel& panel);
SlideSample apply_panel(const SlideSample& s, const GenePanel& panel);

Matrix log1p_normalize(const Matrix& raw_counts);

// ----------------------------------------------------------- synthetic slides

enum class CovKind { Identity, SpatialRbf, Block };
CovKind parse_cov_kind(const std::string& s);
std::string to_string(CovKind k);

struct SyntheticSpec {
  std::size_t n_spots = 64;
  std::size_t n_genes = 50;
  CovKind cov_kind = CovKind::SpatialRbf;
  double length_scale = 150.0;  // pixels, for SpatialRbf
  std::uint64_t seed = 0;

  double spacing = 100.0;          // grid pitch in pixels
  std::size_t visual_dim = 1024;   // d_v
  double visual_noise = 0.1;       // std of η in v = M·x + η
  bool informative_visual = true;  // false: visual features independent of expression
  std::uint64_t sketch_seed = 1234;  // seeds M, shared by every slide of a benchmark
  double block_rho = 0.5;          // within-domain correlation for Block
};

struct SyntheticSlide {
  SlideSample sample;
  Matrix a_star;            // N×N spot covariance actually used (jitter included)
  std::vector<int> domains; // grid quadrant per spot
};

Matrix grid_coords(std::size_t n, double spacing);
std::vector<int> quadrant_labels(const Matrix& coords);
Matrix build_covariance(const SyntheticSpec& spec, const Matrix& coords, const std::vector<int>& domains);

// Columns y_g ~ N(0, A*) i.i.d.; v_s = M·x_s + η with fixed M (d_v×G).
SyntheticSlide synth_slide(const SyntheticSpec& spec);

// ------------------------------------------------------------ GFM embeddings

struct GfmEmbeddings {
  Matrix f;  // G×d_e, masked rows are zero
  std::vector<bool> valid;
  std::vector<std::string> gene_names;
  std::string source_tag;

  std::size_t n_valid() const;
  void validate() const;
  // Rows reordered to `names`; genes absent from the table become masked zero rows.
  GfmEmbeddings aligned_to(const std::vector<std::string>& names) const;
};

// Gaussian per-gene vectors with a given fraction of rows masked out.
GfmEmbeddings random_gfm_embeddings(const std::vector<std::string>& names, std::size_t d_e, std::uint64_t seed,
                                    double masked_fraction = 0.0);

// Binary little-endian float32 G×d_e at `path`, JSON sidecar at `path + ".json"`.
void save_gfm_embeddings(const std::string& path, const GfmEmbeddings& e);
GfmEmbeddings load_gfm_embeddings(const std::string& path);

// ------------------------------------------------------------------ slide I/O

void save_slide(const std::string& path, const SlideSample& s);
SlideSample load_slide(const std::string& path);

struct Provenance {
  std::string model;
  std::uint64_t seed = 0;
  int steps = 0;
  std::string config_hash;
};

struct Predictions {
  std::string slide_id;
  std::vector<std::string> gene_names;
  Matrix expr;
  Provenance provenance;
};

void save_predictions(const std::string& path, const Predictions& p);
Predictions load_predictions(const std::string& path);

void save_matrix_text(const std::string& path, const Matrix& m);  // whitespace table
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace flag::data

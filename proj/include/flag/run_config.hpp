#pragma once

// Run configuration shared by the command-line tool and the bindings: a nested
// JSON tree with defaults, strict key checking and a content digest, plus the
// factory that turns it into a generator.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "flag/data.hpp"
#include "flag/model_common.hpp"

namespace flag::run {

struct ModelSection {
  std::size_t hidden = 384;
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t edge_hidden = 0;
  std::size_t ffn_mult = 2;
  std::size_t dit_hidden = 384;
  std::size_t dit_layers = 12;
  std::size_t dit_heads = 6;
  double mlp_ratio = 4.0;
  std::size_t gene_dim = 512;
  std::size_t align_layer = 8;
  bool gene_positions = true;
};

struct TrainSection {
  long steps = 1000;
  std::size_t batch = 2;
  std::size_t spot_batch = 0;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double lambda_align = 0.5;
  double lambda_c = 1.0;
  long checkpoint_every = 0;  // 0: only the final checkpoint
};

struct ScheduleSection {
  double sigma_min = 0.01;
  double sigma_max = 10.0;
};

struct SampleSection {
  int steps = 100;
  std::size_t chunk = 16;
};

struct DataSection {
  std::vector<std::string> train;  // slide files
  std::string gfm;                 // optional embedding file
};

struct RunConfig {
  std::string mode = "flag";  // flag | joint | node_only
  std::uint64_t seed = 0;
  std::string device = "cpu";
  ModelSection model;
  TrainSection train;
  ScheduleSection schedule;
  SampleSection sample;
  DataSection data;

  // Throws ParseError on unknown keys or ill-typed values.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_json() const;  // canonical: sorted keys, every field present

  // Checks ranges and cross-field consistency; throws ContractError.
  void validate() const;

  // 16 hex digits of FNV-1a over the canonical form, excluding the step
  // target and data paths so that a run can be resumed with a new target.
  std::string config_hash() const;
};

// Generator for `cfg.mode` sized for G genes and d_v visual features. A FLAG
// model gets an alignment head of width d_e when d_e > 0; `gfm`, if given,
// must have d_e columns and is attached for training.
std::unique_ptr<model::Generator> build_generator(const RunConfig& cfg, std::size_t n_genes, std::size_t visual_dim,
                                                  std::size_t d_e = 0, const data::GfmEmbeddings* gfm = nullptr);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace flag::run

#pragma once

#include "ulda/encoders.hpp"
#include "ulda/toyworld.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace ulda {

struct EncoderSection {
  std::string kind = "toy";  // "toy" | "external"
  int feature_dim = 16;
  int hidden_dim = 16;
  double output_scale = 2.0;
  int stride = 4;
  std::uint64_t seed = 11;
};

struct DomainEntry {
  std::string id;
  std::string description;
};

struct Stage1Section {
  int steps = 100;
  double lr = 1.0;
  double momentum = 0.9;
  double lambda_hc = 1.0;
  double lambda_dc = 1.0;
  double lambda_seg = 0.5;
  double lambda_r = 0.5;
  double lambda_p = 0.5;
  double tau = 0.1;
  double eps = 1e-5;
  double sigma_floor = 1e-4;
};

// Pre-training of the segmentation head on unshifted source features. The
// result is the frozen head used by the Stage-1 segmentation term, the
// starting point for Stage-2, and the source-only baseline.
struct SourceSection {
  int iterations = 1500;
  double lr = 0.1;
  double momentum = 0.9;
  int batch_size = 4;
  int hidden_dim = 32;
};

struct Stage2Section {
  int iterations = 2000;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 4;
  bool rectifier = true;
  double beta_init = 0.1;
  bool freeze_beta = false;
};

// Relative paths are resolved against the output root.
struct PathsSection {
  std::string dataset = "data";
  std::string source_checkpoint = "stage1/source_head.ckpt";
  std::string style_bank = "stage1/style_bank.bin";
  std::string stage1_log = "stage1/stage1.log";
  std::string checkpoint = "stage2/checkpoint.ckpt";
  std::string stage2_log = "stage2/stage2.log";
  std::string report = "eval/report.json";
  std::string baseline_report = "eval/baseline_report.json";
};

struct RunConfig {
  EncoderSection encoder;
  std::vector<DomainEntry> domains;
  std::vector<std::string> classes;
  std::string class_pattern = std::string(kDefaultClassPattern);
  bool prompt_templates = true;
  Stage1Section stage1;
  SourceSection source;
  Stage2Section stage2;
  ToySpec toy;
  PathsSection paths;
  std::uint64_t seed = 7;

  void validate() const;
  std::vector<std::string> domain_ids() const;
  std::filesystem::path resolve(const std::filesystem::path& out, const std::string& rel) const;
};

// Toy-world defaults: road/car/vegetation/sky under night, fog and rain.
RunConfig default_config();

nlohmann::json config_to_json(const RunConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
// Applies --seed: the run seed and the toy dataset seed.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

// Digest of every semantic field (paths excluded).
std::string config_digest(const RunConfig& cfg);
// Digest of the fields that determine the style bank.
std::string stage1_digest(const RunConfig& cfg);

}  // namespace ulda

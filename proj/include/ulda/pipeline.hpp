#pragma once

#include "ulda/config.hpp"
#include "ulda/encoders.hpp"
#include "ulda/segmentation.hpp"
#include "ulda/simulation.hpp"
#include "ulda/tdr.hpp"
#include "ulda/toyworld.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace ulda {

struct Stage1Components {
  double hc = 0.0;
  double dc = 0.0;
  double seg = 0.0;
};

// lambda_hc * hc + lambda_dc * dc + lambda_seg * seg. Throws naming the first
// non-finite component.
double stage1_total_loss(const Stage1Components& c, const Stage1Section& w);

// Toy encoder (domain vocabulary calibrated on cfg.toy) or the external
// adapter named by ULDA_ENCODER_DIR.
EncoderPair build_encoder(const RunConfig& cfg);

// One TextEmbeddingSet per configured domain, in config order.
std::vector<TextEmbeddingSet> encode_domain_texts(const RunConfig& cfg, const EncoderPair& enc);

struct EncodedSource {
  std::vector<std::string> ids;
  std::vector<FeatureMap> features;
  std::vector<LabelMap> labels;  // label resolution
};

EncodedSource encode_source(const EncoderPair& enc, const SourceDataset& source);

using LogSink = std::function<void(const std::string& line)>;

// Momentum gradient descent on seg_loss over unshifted source features.
SegHead train_source_head(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src,
                          const LogSink& log = {});

// Stage-1 objective for one image: every domain is simulated with its own
// style, HCA is summed over domains, DCRL couples the domains, and the frozen
// head contributes the segmentation term (summed over domains).
class Stage1Objective {
 public:
  Stage1Objective(const RunConfig& cfg, const EncodedSource& src, std::vector<TextEmbeddingSet> texts,
                  const SegHead& head, int stride);

  ObjectiveValue operator()(std::size_t image, std::span<const StyleParams> styles, std::span<StyleGrad> grads) const;
  ObjectiveValue evaluate(std::size_t image, std::span<const StyleParams> styles, std::vector<StyleGrad>* grads) const;

 private:
  const RunConfig& cfg_;
  const EncodedSource& src_;
  std::vector<TextEmbeddingSet> texts_;
  const SegHead& head_;
  std::vector<Mat> z_;
  std::vector<LabelMap> y_feat_;
};

struct Stage1Result {
  StyleBank bank;
  double mean_initial_dc = 0.0;
  double mean_final_dc = 0.0;
  double mean_initial_scene = 0.0;
  double mean_final_scene = 0.0;
};

Stage1Result run_stage1(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src, const SegHead& head,
                        const LogSink& log = {});

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  SegHead head;
  std::optional<RectifierParams> rectifier;
  std::string config_digest;
  int iteration = 0;
  std::string rng_state;
};

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Stage2Result {
  Checkpoint checkpoint;
  std::vector<double> losses;  // per iteration, mean over the batch
};

// Fine-tunes `head` on PIN-stylized (and, if enabled, rectified) source
// features drawn uniformly from the bank. Style parameters are read only.
Stage2Result run_stage2(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src, const StyleBank& bank,
                        const SegHead& head, const LogSink& log = {});

// Inference path. Holds only the encoder and the head; an image is the sole input.
class DomainBlindPredictor {
 public:
  DomainBlindPredictor(EncoderPair enc, SegHead head) : enc_(std::move(enc)), head_(std::move(head)) {}
  LabelMap predict(const Image& image) const;
  int classes() const { return head_.classes(); }

 private:
  EncoderPair enc_;
  SegHead head_;
};

struct EvalResult {
  MetricsReport report;
  std::vector<std::pair<std::string, LabelMap>> predictions;  // by sample id, split order
};

// Domain ids are used only to bucket confusion counts after prediction.
EvalResult evaluate(const DomainBlindPredictor& model, const EvalSplit& split, int n_classes);

inline constexpr int kReportFormatVersion = 1;
nlohmann::json report_document(const MetricsReport& report, const std::string& model, const std::string& config_digest);

// File-level commands behind the CLI. `out` is the output root.
struct CommandOptions {
  std::filesystem::path out = "run";
  bool force = false;
  LogSink log;
};

void cmd_make_toy_data(const RunConfig& cfg, const CommandOptions& opt);
void cmd_stage1(const RunConfig& cfg, const CommandOptions& opt);
void cmd_stage2(const RunConfig& cfg, const CommandOptions& opt);
// baseline = evaluate the source-only head instead of the Stage-2 checkpoint.
MetricsReport cmd_eval(const RunConfig& cfg, const CommandOptions& opt, bool baseline);

}  // namespace ulda

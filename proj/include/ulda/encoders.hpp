#pragma once

#include "ulda/core.hpp"

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ulda {

// Frozen image encoder. Implementations are immutable after construction.
class VisionEncoder {
 public:
  virtual ~VisionEncoder() = default;
  virtual FeatureMap encode_features(const Image& image) const = 0;
  virtual int stride() const = 0;
  virtual int channels() const = 0;
  virtual int feature_dim() const = 0;
};

// Frozen text encoder. encode_text returns a unit vector already projected to
// the vision feature dimension.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Vec encode_text(std::string_view prompt, std::span<const std::string> templates) const = 0;
  virtual int text_dim() const = 0;
  virtual int output_dim() const = 0;
};

struct EncoderPair {
  std::shared_ptr<const VisionEncoder> vision;
  std::shared_ptr<const TextEncoder> text;
  int feature_dim = 0;
  int text_dim = 0;
  std::string descriptor;  // "toy" | "external-adapter"

  FeatureMap encode_image_features(const Image& image) const;
  Vec pool(const FeatureMap& f) const;
  Vec encode_text(std::string_view prompt, std::span<const std::string> templates) const;
};

// Mean pooling followed by L2 normalization.
Vec pool_scene(const FeatureMap& f);
// dL/dfeatures given dL/dpooled.
Mat pool_scene_backward(const FeatureMap& f, const Vec& g_pooled);

struct PromptSet {
  std::string domain_prompt;
  std::vector<std::string> class_prompts;
  std::vector<std::string> templates;
};

inline constexpr std::string_view kDefaultClassPattern = "the {class} in {domain}";

// The 80 ImageNet prompt templates; "{}" marks the prompt slot.
const std::vector<std::string>& imagenet_templates();

// Last word of a domain description ("driving under rain" -> "rain").
std::string domain_suffix(std::string_view description);

PromptSet build_prompt_set(std::span<const std::string> class_names, std::string_view domain_description,
                           std::string_view pattern = kDefaultClassPattern,
                           std::vector<std::string> templates = imagenet_templates());

TextEmbeddingSet encode_class_text(const EncoderPair& enc, const PromptSet& prompts,
                                   std::string domain_id = {});

// Lowercased words with surrounding punctuation stripped.
std::vector<std::string> tokenize(std::string_view text);

// Two-layer patch convolution: stride x stride patches -> hidden (leaky relu)
// -> feature_dim, applied at every patch position.
struct PatchConvWeights {
  int stride = 4;
  int channels = 3;
  Mat w1;  // hidden x (stride*stride*channels), patch order (dy, dx, ch)
  Vec b1;
  Mat w2;  // feature_dim x hidden
  Vec b2;
  double leak = 0.2;
};

class PatchConvEncoder final : public VisionEncoder {
 public:
  explicit PatchConvEncoder(PatchConvWeights weights);
  FeatureMap encode_features(const Image& image) const override;
  int stride() const override { return weights_.stride; }
  int channels() const override { return weights_.channels; }
  int feature_dim() const override { return static_cast<int>(weights_.w2.rows()); }
  const PatchConvWeights& weights() const { return weights_; }

 private:
  PatchConvWeights weights_;
};

struct ToyEncoderConfig {
  int feature_dim = 16;
  int hidden_dim = 16;
  int stride = 4;
  int channels = 3;
  double output_scale = 2.0;  // multiplies the second layer
  std::uint64_t seed = 11;
};

PatchConvWeights make_toy_vision_weights(const ToyEncoderConfig& cfg);

// Images showing one domain, keyed by the word that names it in prompts.
struct DomainCalibration {
  std::string keyword;
  std::vector<Image> images;
};

// Bag-of-registered-tokens text encoder. Domain tokens carry calibrated
// vectors; class tokens are seeded random unit vectors. A string holding both
// embeds as normalize(0.5 * class + 0.5 * domain). Unregistered words carry no
// signal; a string with no registered token embeds to a hash-seeded vector.
class ToyTextEncoder final : public TextEncoder {
 public:
  ToyTextEncoder(int dim, std::uint64_t seed, std::span<const std::string> class_tokens,
                 std::vector<std::pair<std::string, Vec>> domain_tokens);
  Vec encode_text(std::string_view prompt, std::span<const std::string> templates) const override;
  int text_dim() const override { return dim_; }
  int output_dim() const override { return dim_; }

  Vec embed_string(std::string_view text) const;
  const Vec* class_token(const std::string& token) const;
  const Vec* domain_token(const std::string& token) const;

 private:
  int dim_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Vec>> classes_;
  std::vector<std::pair<std::string, Vec>> domains_;
};

// Builds the toy pair: seeded patch-conv vision encoder, and a text encoder
// whose domain tokens are the normalized mean pooled feature of each
// calibration set.
EncoderPair make_toy_encoder(const ToyEncoderConfig& cfg, std::span<const std::string> class_names,
                             std::span<const DomainCalibration> calibration);

// Token-table text encoder with a frozen text_dim -> feature_dim projection.
class ProjectedTableTextEncoder final : public TextEncoder {
 public:
  ProjectedTableTextEncoder(std::vector<std::string> vocab, Mat token_table, Mat projection);
  Vec encode_text(std::string_view prompt, std::span<const std::string> templates) const override;
  int text_dim() const override { return static_cast<int>(table_.cols()); }
  int output_dim() const override { return static_cast<int>(projection_.rows()); }

 private:
  std::vector<std::string> vocab_;
  Mat table_;       // vocab x text_dim
  Mat projection_;  // feature_dim x text_dim
};

inline constexpr const char* kEncoderDirEnv = "ULDA_ENCODER_DIR";

struct ExternalEncoderFiles {
  PatchConvWeights vision;
  std::vector<std::string> vocab;
  Mat token_table;
  Mat projection;
};

// Directory layout: encoder.txt (key=value header), vision.f64, text.f64, vocab.txt.
void save_external_encoder(const std::filesystem::path& dir, const ExternalEncoderFiles& files);
EncoderPair load_external_encoder(const std::filesystem::path& dir);
// Reads the directory from ULDA_ENCODER_DIR; throws if unset or incomplete.
EncoderPair load_external_encoder_from_env();

}  // namespace ulda

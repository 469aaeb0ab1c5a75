#pragma once

#include "ulda/core.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace ulda {

// pixel' = gain * pixel + bias + noise * N(0, 1), per channel.
struct DomainShift {
  Vec gain;
  Vec bias;
  double noise = 0.0;
};

struct ToySpec {
  int n_classes = 4;
  int image_size = 32;
  int channels = 3;
  int n_train = 40;
  int n_eval_per_domain = 10;
  int n_calibration = 8;
  std::vector<std::pair<std::string, DomainShift>> domain_shifts;
  std::uint64_t seed = 7;

  void validate() const;
  const DomainShift& shift(const std::string& domain_id) const;
  std::vector<std::string> domain_ids() const;
};

// night, fog and rain analogues.
ToySpec default_toy_spec();

struct Sample {
  std::string id;
  Image image;
  LabelMap labels;
};

// Labelled source-domain data; the only dataset type the training stages accept.
struct SourceDataset {
  std::vector<Sample> samples;
};

// Shifted target-domain data for evaluation only. Kept as a distinct type so
// training entry points cannot be handed it.
struct EvalSplit {
  struct Domain {
    std::string domain_id;
    std::vector<Sample> samples;
  };
  std::vector<Domain> domains;
};

// Base colour of class k (class 0 is background).
Vec class_color(int k, int channels, std::uint64_t seed);

Sample generate_sample(const ToySpec& spec, std::uint64_t seed, std::string id);
SourceDataset generate_source(const ToySpec& spec);
Image apply_domain_shift(const Image& img, const std::string& domain_id, const ToySpec& spec,
                         std::uint64_t noise_seed);
EvalSplit make_eval_split(const ToySpec& spec);
// Shifted samples from a third seed stream, used only to build the toy text
// encoder's vocabulary.
std::vector<Sample> make_calibration_samples(const ToySpec& spec, const std::string& domain_id);

struct SeparabilityReport {
  double min_centroid_distance = 0.0;
  double max_within_std = 0.0;
  double ratio() const { return max_within_std > 0 ? min_centroid_distance / max_within_std : 0.0; }
};

// Centroid distances between domains (source plus every shifted domain) of a
// pooled image embedding, against the largest within-domain spread
// (root mean squared distance to the centroid).
SeparabilityReport domain_separability(const SourceDataset& source, const EvalSplit& split,
                                       const std::function<Vec(const Image&)>& embed);

inline constexpr int kToyDataFormatVersion = 1;

// manifest.txt plus flat little-endian arrays: train_images.f64, train_labels.u8,
// eval_<domain>_images.f64, eval_<domain>_labels.u8.
void save_toy_dataset(const std::filesystem::path& dir, const ToySpec& spec, const SourceDataset& source,
                      const EvalSplit& split);
ToySpec load_toy_spec(const std::filesystem::path& dir);
SourceDataset load_source(const std::filesystem::path& dir);
EvalSplit load_eval_split(const std::filesystem::path& dir);

}  // namespace ulda

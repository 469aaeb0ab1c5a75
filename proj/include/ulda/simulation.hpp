#pragma once

#include "ulda/core.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ulda {

inline constexpr double kDefaultEps = 1e-5;

struct ChannelStats {
  Vec mean;
  Vec std;  // sqrt(population variance + eps)
};

ChannelStats channel_stats(const FeatureMap& f, double eps = kDefaultEps);

// dL/df given dL/dmean and dL/dstd.
Mat channel_stats_backward(const FeatureMap& f, const ChannelStats& stats, const Vec& g_mean, const Vec& g_std);

// Per-channel (f - mean) / std.
Mat standardize(const FeatureMap& f, double eps = kDefaultEps);
// dL/df given dL/dz, where z = standardize(f) and std are the stats used.
Mat standardize_backward(const Mat& z, const Vec& std, const Mat& g_z);

struct StyleParams {
  Vec mu;
  Vec sigma;
  std::string domain_id;  // bookkeeping only; never read on the inference path
};

StyleParams style_from_stats(const ChannelStats& s, std::string domain_id = {});

// Prompt-driven instance normalization: sigma * (f - mean(f)) / std(f) + mu.
FeatureMap pin(const FeatureMap& f, const StyleParams& style, double eps = kDefaultEps);
// Same transform applied to an already standardized map.
Mat pin_standardized(const Mat& z, const StyleParams& style);

struct StyleGrad {
  Vec mu;
  Vec sigma;
};

// Gradient with respect to (mu, sigma) given dL/d(pin output); z is the
// standardized source map.
StyleGrad pin_backward(const Mat& z, const Mat& g_out);

// 1 - cosine(pooled, trg_emb). Throws on zero vectors.
double scene_alignment_loss(const Vec& pooled, const Vec& trg_emb, Vec* g_pooled = nullptr);

struct MiningConfig {
  int steps = 100;
  double lr = 1.0;
  double momentum = 0.9;
  double sigma_floor = 1e-4;
  double eps = kDefaultEps;
};

// Objective over the m styles of one image (one per domain, in domain order).
// Fills grads (same length as styles) and returns the total plus per-domain
// scene alignment losses for bookkeeping.
struct ObjectiveValue {
  double total = 0.0;
  std::vector<double> scene;  // per domain
  std::vector<std::pair<std::string, double>> components;
};

using StyleObjective =
    std::function<ObjectiveValue(std::size_t image, std::span<const StyleParams> styles, std::span<StyleGrad> grads)>;

using MiningLog = std::function<void(std::size_t image, int step, const ObjectiveValue& value)>;

enum class EntryStatus : std::uint8_t { ok = 0, non_finite = 1 };

struct StyleBankEntry {
  std::string domain_id;
  std::string image_id;
  StyleParams style;
  double initial_alignment_loss = 0.0;
  double final_alignment_loss = 0.0;
  EntryStatus status = EntryStatus::ok;
};

struct StyleBank {
  int feature_dim = 0;
  std::string config_digest;
  std::vector<std::string> domains;
  std::vector<StyleBankEntry> entries;  // image-major, domain-minor

  std::vector<const StyleBankEntry*> usable_entries() const;
};

// Mines one StyleParams per (image, domain). Every image starts all m styles
// from its own channel statistics and optimizes them jointly with momentum
// gradient descent; sigma is floored after each step.
StyleBank mine_styles(std::span<const FeatureMap> features, std::span<const std::string> image_ids,
                      std::span<const std::string> domains, const StyleObjective& objective,
                      const MiningConfig& cfg, const MiningLog& log = {});

inline constexpr int kStyleBankFormatVersion = 1;

std::string serialize_style_bank(const StyleBank& bank);
StyleBank deserialize_style_bank(const std::string& bytes);
void save_style_bank(const StyleBank& bank, const std::filesystem::path& path);
StyleBank load_style_bank(const std::filesystem::path& path);

}  // namespace ulda

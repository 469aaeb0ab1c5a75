#pragma once

#include "ulda/core.hpp"

#include <vector>

namespace ulda {

inline constexpr double kDefaultTau = 0.1;

// Binary class masks over the flattened label grid.
struct MaskSet {
  int n = 0;
  int pixels = 0;
  std::vector<std::uint8_t> masks;  // n * pixels, class-major
  std::vector<int> counts;
  std::vector<bool> present;

  bool at(int k, int p) const { return masks[static_cast<std::size_t>(k) * pixels + p] != 0; }
};

MaskSet label_to_masks(const LabelMap& y, int n);

// Majority vote over factor x factor blocks, ignoring IGNORE pixels; ties go
// to the smaller class id, all-IGNORE blocks stay IGNORE.
LabelMap downsample_labels(const LabelMap& y, int factor);

struct PrototypeSet {
  Mat protos;  // n x d, zero rows where absent
  std::vector<bool> present;
  std::string domain_id;
};

PrototypeSet masked_average_pool(const FeatureMap& f, const MaskSet& m);
Mat masked_average_pool_backward(const MaskSet& m, const Mat& g_protos);

// S[i][j] = cosine(protos[i], class_embs[j]); rows of absent classes are zero.
Mat similarity_matrix(const PrototypeSet& c, const TextEmbeddingSet& t);
// dL/dprotos given dL/dS.
Mat similarity_matrix_backward(const PrototypeSet& c, const TextEmbeddingSet& t, const Mat& s, const Mat& g_s);

// Prototype-to-text contrastive loss over present classes, summed over rows.
LossResult regional_loss(const Mat& s, const std::vector<bool>& present, double tau, Mat* g_s = nullptr);

// P[p][i] = cosine(f[p], class_embs[i]); zero-norm pixels give a zero row.
Mat pixel_logits(const FeatureMap& f, const TextEmbeddingSet& t);
Mat pixel_logits_backward(const FeatureMap& f, const TextEmbeddingSet& t, const Mat& p, const Mat& g_p);

// Softmax cross-entropy over rows of P / tau, averaged over non-IGNORE pixels.
LossResult pixel_loss(const Mat& p, const LabelMap& y, double tau, Mat* g_p = nullptr);

struct HcaWeights {
  double regional = 0.5;
  double pixel = 0.5;
};

struct HcaLoss {
  double total = 0.0;
  double regional = 0.0;
  double pixel = 0.0;
  double scene = 0.0;
  Mat grad_features;  // filled when requested
  Vec grad_pooled;
};

// lambda_r * L_r + lambda_p * L_p + (1 - cos(pooled, domain_emb)).
// y must be at feature resolution.
HcaLoss hca_loss(const FeatureMap& f_st, const Vec& pooled, const TextEmbeddingSet& t, const LabelMap& y,
                 HcaWeights weights, double tau, bool with_grad = false);

}  // namespace ulda

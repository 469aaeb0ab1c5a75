#pragma once

#include "ulda/core.hpp"
#include "ulda/simulation.hpp"

namespace ulda {

inline constexpr double kRectifierBetaInit = 0.1;

// Learnable residual rectifier. The linear map takes a d-dim text embedding to
// 2d outputs: the first d are the rectifying mean, the last d the rectifying
// standard deviation.
struct RectifierParams {
  double beta = kRectifierBetaInit;
  Mat weight;  // 2d x d
  Vec bias;    // 2d

  int dim() const { return static_cast<int>(weight.cols()); }
};

// weight ~ U(-1/sqrt(d), 1/sqrt(d)) from a seeded stream, bias zero.
RectifierParams make_rectifier(int d, std::uint64_t seed, double beta_init = kRectifierBetaInit);
RectifierParams zero_rectifier_like(const RectifierParams& p);

struct TextStats {
  Vec mu;
  Vec sigma;
};

TextStats text_to_stats(const Vec& text_emb, const RectifierParams& params);
// Accumulates weight/bias gradients into grad.
void text_to_stats_backward(const Vec& text_emb, const Vec& g_mu, const Vec& g_sigma, RectifierParams& grad);

// beta * (sigma_t * (f - mean(f)) / std(f) + mu_t) + f
FeatureMap rectify(const FeatureMap& f_st, const Vec& mu_t, const Vec& sigma_t, double beta, double eps = kDefaultEps);

struct RectifyGrad {
  Mat features;
  Vec mu;
  Vec sigma;
  double beta = 0.0;
};

RectifyGrad rectify_backward(const FeatureMap& f_st, const Vec& mu_t, const Vec& sigma_t, double beta, double eps,
                             const Mat& g_out);

// z * (beta * sigma_t + sigma) + (beta * mu_t + mu), with z the eps = 0
// standardization of f_s. Equal to rectify(pin(f_s, style), ...) at eps = 0.
FeatureMap rectified_closed_form(const FeatureMap& f_s, const StyleParams& style, const Vec& mu_t, const Vec& sigma_t,
                                 double beta);

}  // namespace ulda

#include "ulda/tdr.hpp"

#include <cmath>
#include <stdexcept>

namespace ulda {

RectifierParams make_rectifier(int d, std::uint64_t seed, double beta_init) {
  if (d <= 0) throw std::invalid_argument("make_rectifier: d must be positive");
  Rng rng(mix_seed(seed, 0x74647200ULL));
  RectifierParams p;
  p.beta = beta_init;
  p.weight.resize(2 * d, d);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (int r = 0; r < 2 * d; ++r)
    for (int c = 0; c < d; ++c) p.weight(r, c) = rng.uniform(-bound, bound);
  p.bias = Vec::Zero(2 * d);
  return p;
}

RectifierParams zero_rectifier_like(const RectifierParams& p) {
  RectifierParams z;
  z.beta = 0.0;
  z.weight = Mat::Zero(p.weight.rows(), p.weight.cols());
  z.bias = Vec::Zero(p.bias.size());
  return z;
}

TextStats text_to_stats(const Vec& text_emb, const RectifierParams& params) {
  const int d = params.dim();
  if (text_emb.size() != d || params.weight.rows() != 2 * d || params.bias.size() != 2 * d) {
    throw std::invalid_argument("text_to_stats: dimension mismatch");
  }
  const Vec out = params.weight * text_emb + params.bias;
  return TextStats{out.head(d), out.tail(d)};
}

void text_to_stats_backward(const Vec& text_emb, const Vec& g_mu, const Vec& g_sigma, RectifierParams& grad) {
  const auto d = text_emb.size();
  Vec g(2 * d);
  g << g_mu, g_sigma;
  grad.weight += g * text_emb.transpose();
  grad.bias += g;
}

FeatureMap rectify(const FeatureMap& f_st, const Vec& mu_t, const Vec& sigma_t, double beta, double eps) {
  if (mu_t.size() != f_st.dim() || sigma_t.size() != f_st.dim()) {
    throw std::invalid_argument("rectify: statistics dimension mismatch");
  }
  const Mat z = standardize(f_st, eps);
  Mat r = z.array().rowwise() * sigma_t.transpose().array();
  r.rowwise() += mu_t.transpose();
  return FeatureMap(f_st.h, f_st.w, beta * r + f_st.data);
}

RectifyGrad rectify_backward(const FeatureMap& f_st, const Vec& mu_t, const Vec& sigma_t, double beta, double eps,
                             const Mat& g_out) {
  const ChannelStats s = channel_stats(f_st, eps);
  const Mat z = standardize(f_st, eps);
  RectifyGrad g;
  g.mu = beta * g_out.colwise().sum().transpose();
  g.sigma = beta * (g_out.array() * z.array()).colwise().sum().transpose();
  Mat inner = z.array().rowwise() * sigma_t.transpose().array();
  inner.rowwise() += mu_t.transpose();
  g.beta = (g_out.array() * inner.array()).sum();
  const Mat g_z = beta * (g_out.array().rowwise() * sigma_t.transpose().array()).matrix();
  g.features = g_out + standardize_backward(z, s.std, g_z);
  return g;
}

FeatureMap rectified_closed_form(const FeatureMap& f_s, const StyleParams& style, const Vec& mu_t, const Vec& sigma_t,
                                 double beta) {
  if (style.mu.size() != f_s.dim() || mu_t.size() != f_s.dim() || sigma_t.size() != f_s.dim()) {
    throw std::invalid_argument("rectified_closed_form: dimension mismatch");
  }
  const Mat z = standardize(f_s, 0.0);
  const Vec scale = beta * sigma_t + style.sigma;
  const Vec shift = beta * mu_t + style.mu;
  Mat out = z.array().rowwise() * scale.transpose().array();
  out.rowwise() += shift.transpose();
  return FeatureMap(f_s.h, f_s.w, std::move(out));
}

}  // namespace ulda

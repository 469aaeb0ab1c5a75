#include "ulda/hca.hpp"

#include "ulda/simulation.hpp"

#include <cmath>
#include <stdexcept>

namespace ulda {

MaskSet label_to_masks(const LabelMap& y, int n) {
  if (n <= 0 || n >= kIgnoreLabel) throw std::invalid_argument("label_to_masks: class count out of range");
  validate_labels(y, n);
  MaskSet m;
  m.n = n;
  m.pixels = y.pixels();
  m.masks.assign(static_cast<std::size_t>(n) * m.pixels, 0);
  m.counts.assign(n, 0);
  for (int p = 0; p < m.pixels; ++p) {
    const auto v = y.labels[p];
    if (v == kIgnoreLabel) continue;
    m.masks[static_cast<std::size_t>(v) * m.pixels + p] = 1;
    ++m.counts[v];
  }
  m.present.resize(n);
  for (int k = 0; k < n; ++k) m.present[k] = m.counts[k] > 0;
  return m;
}

LabelMap downsample_labels(const LabelMap& y, int factor) {
  if (factor <= 0 || y.h % factor != 0 || y.w % factor != 0) {
    throw std::invalid_argument("downsample_labels: size not divisible by factor");
  }
  LabelMap out(y.h / factor, y.w / factor);
  std::vector<int> votes(256);
  for (int by = 0; by < out.h; ++by) {
    for (int bx = 0; bx < out.w; ++bx) {
      std::fill(votes.begin(), votes.end(), 0);
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) ++votes[y.at(by * factor + dy, bx * factor + dx)];
      int best = kIgnoreLabel;
      int best_count = 0;
      for (int k = 0; k < kIgnoreLabel; ++k) {
        if (votes[k] > best_count) {
          best = k;
          best_count = votes[k];
        }
      }
      out.at(by, bx) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

PrototypeSet masked_average_pool(const FeatureMap& f, const MaskSet& m) {
  if (f.pixels() != m.pixels) throw std::invalid_argument("masked_average_pool: mask length != feature pixels");
  PrototypeSet c;
  c.protos = Mat::Zero(m.n, f.dim());
  c.present = m.present;
  for (int k = 0; k < m.n; ++k) {
    if (!m.present[k]) continue;
    for (int p = 0; p < m.pixels; ++p)
      if (m.at(k, p)) c.protos.row(k) += f.data.row(p);
    c.protos.row(k) /= static_cast<double>(m.counts[k]);
  }
  return c;
}

Mat masked_average_pool_backward(const MaskSet& m, const Mat& g_protos) {
  Mat g = Mat::Zero(m.pixels, g_protos.cols());
  for (int k = 0; k < m.n; ++k) {
    if (!m.present[k]) continue;
    const auto row = g_protos.row(k) / static_cast<double>(m.counts[k]);
    for (int p = 0; p < m.pixels; ++p)
      if (m.at(k, p)) g.row(p) += row;
  }
  return g;
}

Mat similarity_matrix(const PrototypeSet& c, const TextEmbeddingSet& t) {
  const auto n = c.protos.rows();
  if (t.class_embs.rows() != n || t.class_embs.cols() != c.protos.cols()) {
    throw std::invalid_argument("similarity_matrix: shape mismatch");
  }
  Mat s = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!c.present[i]) continue;
    const Vec ci = c.protos.row(i).transpose();
    if (ci.norm() == 0.0) throw std::invalid_argument("similarity_matrix: zero-norm present prototype");
    for (Eigen::Index j = 0; j < n; ++j) s(i, j) = cosine(ci, t.class_embs.row(j).transpose());
  }
  return s;
}

Mat similarity_matrix_backward(const PrototypeSet& c, const TextEmbeddingSet& t, const Mat& s, const Mat& g_s) {
  const auto n = c.protos.rows();
  Mat g = Mat::Zero(n, c.protos.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!c.present[i]) continue;
    const Vec ci = c.protos.row(i).transpose();
    const double norm = ci.norm();
    const Vec ch = ci / norm;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (g_s(i, j) == 0.0) continue;
      const Vec tj = t.class_embs.row(j).transpose().normalized();
      g.row(i) += (g_s(i, j) * (tj - s(i, j) * ch) / norm).transpose();
    }
  }
  return g;
}

LossResult regional_loss(const Mat& s, const std::vector<bool>& present, double tau, Mat* g_s) {
  if (tau <= 0.0) throw std::invalid_argument("regional_loss: tau must be > 0");
  const auto n = s.rows();
  if (s.cols() != n || static_cast<Eigen::Index>(present.size()) != n) {
    throw std::invalid_argument("regional_loss: shape mismatch");
  }
  if (g_s) *g_s = Mat::Zero(n, n);
  LossResult r;
  bool any = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!present[i]) continue;
    any = true;
    double mx = -INFINITY;
    for (Eigen::Index k = 0; k < n; ++k)
      if (present[k]) mx = std::max(mx, s(i, k) / tau);
    double sum = 0.0;
    for (Eigen::Index k = 0; k < n; ++k)
      if (present[k]) sum += std::exp(s(i, k) / tau - mx);
    const double lse = mx + std::log(sum);
    r.value += lse - s(i, i) / tau;
    if (g_s) {
      for (Eigen::Index k = 0; k < n; ++k) {
        if (!present[k]) continue;
        const double p = std::exp(s(i, k) / tau - lse);
        (*g_s)(i, k) = (p - (k == i ? 1.0 : 0.0)) / tau;
      }
    }
  }
  if (!any) r.status = LossStatus::empty_support;
  return r;
}

Mat pixel_logits(const FeatureMap& f, const TextEmbeddingSet& t) {
  if (t.class_embs.cols() != f.dim()) throw std::invalid_argument("pixel_logits: dimension mismatch");
  const Vec norms = f.data.rowwise().norm();
  Mat unit = f.data;
  for (Eigen::Index p = 0; p < unit.rows(); ++p) {
    if (norms[p] > 0.0) unit.row(p) /= norms[p];
    else unit.row(p).setZero();
  }
  Mat t_unit = t.class_embs;
  for (Eigen::Index i = 0; i < t_unit.rows(); ++i) t_unit.row(i).normalize();
  return unit * t_unit.transpose();
}

Mat pixel_logits_backward(const FeatureMap& f, const TextEmbeddingSet& t, const Mat& p, const Mat& g_p) {
  Mat t_unit = t.class_embs;
  for (Eigen::Index i = 0; i < t_unit.rows(); ++i) t_unit.row(i).normalize();
  Mat g = Mat::Zero(f.pixels(), f.dim());
  for (Eigen::Index q = 0; q < f.data.rows(); ++q) {
    const double norm = f.data.row(q).norm();
    if (norm == 0.0) continue;
    const auto fh = f.data.row(q) / norm;
    // sum_i g_pi (t_i - P_pi fh) / |f|
    g.row(q) = (g_p.row(q) * t_unit - g_p.row(q).dot(p.row(q)) * fh) / norm;
  }
  return g;
}

LossResult pixel_loss(const Mat& p, const LabelMap& y, double tau, Mat* g_p) {
  if (tau <= 0.0) throw std::invalid_argument("pixel_loss: tau must be > 0");
  if (p.rows() != y.pixels()) throw std::invalid_argument("pixel_loss: row count != label pixels");
  const int n = static_cast<int>(p.cols());
  validate_labels(y, n);
  if (g_p) *g_p = Mat::Zero(p.rows(), p.cols());
  int valid = 0;
  for (std::uint8_t v : y.labels)
    if (v != kIgnoreLabel) ++valid;
  LossResult r;
  if (valid == 0) {
    r.status = LossStatus::empty_support;
    return r;
  }
  for (Eigen::Index q = 0; q < p.rows(); ++q) {
    const auto label = y.labels[q];
    if (label == kIgnoreLabel) continue;
    const Eigen::RowVectorXd z = p.row(q) / tau;
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    r.value += lse - z[label];
    if (g_p) {
      Eigen::RowVectorXd prob = (z.array() - lse).exp();
      prob[label] -= 1.0;
      g_p->row(q) = prob / (tau * valid);
    }
  }
  r.value /= valid;
  return r;
}

HcaLoss hca_loss(const FeatureMap& f_st, const Vec& pooled, const TextEmbeddingSet& t, const LabelMap& y,
                 HcaWeights weights, double tau, bool with_grad) {
  if (y.pixels() != f_st.pixels()) throw std::invalid_argument("hca_loss: labels not at feature resolution");
  if (t.dim() != f_st.dim() || pooled.size() != f_st.dim()) throw std::invalid_argument("hca_loss: dimension mismatch");
  const int n = t.classes();
  HcaLoss out;

  const MaskSet masks = label_to_masks(y, n);
  const PrototypeSet protos = masked_average_pool(f_st, masks);
  const Mat s = similarity_matrix(protos, t);
  Mat g_s;
  out.regional = regional_loss(s, protos.present, tau, with_grad ? &g_s : nullptr).value;

  const Mat p = pixel_logits(f_st, t);
  Mat g_p;
  out.pixel = pixel_loss(p, y, tau, with_grad ? &g_p : nullptr).value;

  Vec g_pooled;
  out.scene = scene_alignment_loss(pooled, t.domain_emb, with_grad ? &g_pooled : nullptr);

  out.total = weights.regional * out.regional + weights.pixel * out.pixel + out.scene;

  if (with_grad) {
    const Mat g_c = similarity_matrix_backward(protos, t, s, weights.regional * g_s);
    out.grad_features = masked_average_pool_backward(masks, g_c);
    out.grad_features += pixel_logits_backward(f_st, t, p, weights.pixel * g_p);
    out.grad_pooled = g_pooled;
  }
  return out;
}

}  // namespace ulda

#include "ulda/segmentation.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ulda {

SegHead make_seg_head(int d, int hidden, int n, int upsample, std::uint64_t seed) {
  if (d <= 0 || hidden <= 0 || n < 2 || upsample <= 0) throw std::invalid_argument("make_seg_head: bad dimensions");
  Rng rng(mix_seed(seed, 0x68656164ULL));
  SegHead h;
  h.upsample = upsample;
  h.w1.resize(hidden, d);
  h.w2.resize(n, hidden);
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (int r = 0; r < hidden; ++r)
    for (int c = 0; c < d; ++c) h.w1(r, c) = rng.uniform(-b1, b1);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < hidden; ++c) h.w2(r, c) = rng.uniform(-b2, b2);
  h.b1 = Vec::Zero(hidden);
  h.b2 = Vec::Zero(n);
  h.in_shift = Vec::Zero(d);
  h.in_scale = Vec::Ones(d);
  return h;
}

namespace {

constexpr double kHiddenLeak = 0.01;

Mat unit_rows(const Mat& m) {
  Mat u = m;
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    const double n = u.row(r).norm();
    if (n == 0.0) throw std::invalid_argument("seg head: zero feature vector");
    u.row(r) /= n;
  }
  return u;
}

}  // namespace

void fit_input_normalization(SegHead& head, std::span<const FeatureMap> features) {
  const int d = head.in_dim();
  Vec sum = Vec::Zero(d);
  Vec sq = Vec::Zero(d);
  double count = 0.0;
  for (const auto& f : features) {
    if (f.dim() != d) throw std::invalid_argument("fit_input_normalization: feature dimension mismatch");
    const Mat fd = unit_rows(f.data);
    sum += fd.colwise().sum().transpose();
    sq += fd.array().square().matrix().colwise().sum().transpose();
    count += static_cast<double>(f.pixels());
  }
  if (count == 0.0) throw std::invalid_argument("fit_input_normalization: no features");
  head.in_shift = sum / count;
  const Vec var = (sq / count - head.in_shift.cwiseProduct(head.in_shift)).cwiseMax(0.0);
  head.in_scale = (var.array() + 1e-12).sqrt().matrix();
}

SegHead zero_head_like(const SegHead& h) {
  SegHead z;
  z.upsample = h.upsample;
  z.in_shift = h.in_shift;
  z.in_scale = h.in_scale;
  z.w1 = Mat::Zero(h.w1.rows(), h.w1.cols());
  z.b1 = Vec::Zero(h.b1.size());
  z.w2 = Mat::Zero(h.w2.rows(), h.w2.cols());
  z.b2 = Vec::Zero(h.b2.size());
  return z;
}

Vec head_parameters(const SegHead& h) {
  Vec v(static_cast<Eigen::Index>(h.parameter_count()));
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < h.w1.rows(); ++r)
    for (Eigen::Index c = 0; c < h.w1.cols(); ++c) v[k++] = h.w1(r, c);
  for (Eigen::Index i = 0; i < h.b1.size(); ++i) v[k++] = h.b1[i];
  for (Eigen::Index r = 0; r < h.w2.rows(); ++r)
    for (Eigen::Index c = 0; c < h.w2.cols(); ++c) v[k++] = h.w2(r, c);
  for (Eigen::Index i = 0; i < h.b2.size(); ++i) v[k++] = h.b2[i];
  return v;
}

std::string head_hash(const SegHead& h) {
  std::ostringstream os(std::ios::binary);
  io::write_u32(os, static_cast<std::uint32_t>(h.upsample));
  io::write_vec(os, h.in_shift);
  io::write_vec(os, h.in_scale);
  io::write_vec(os, head_parameters(h));
  return sha256_hex(os.str());
}

Mat head_forward(const FeatureMap& f, const SegHead& head, HeadCache* cache) {
  if (f.dim() != head.in_dim()) throw std::invalid_argument("head_forward: feature dimension != head input dimension");
  Mat x = (unit_rows(f.data).rowwise() - head.in_shift.transpose()).array().rowwise() / head.in_scale.transpose().array();
  Mat hidden = (x * head.w1.transpose()).rowwise() + head.b1.transpose();
  hidden = hidden.array().max(kHiddenLeak * hidden.array());
  const Mat coarse = (hidden * head.w2.transpose()).rowwise() + head.b2.transpose();
  if (cache) {
    cache->input = std::move(x);
    cache->hidden = std::move(hidden);
  }
  const int s = head.upsample;
  const int fw = f.w;
  const int lw = f.w * s;
  Mat out(static_cast<Eigen::Index>(f.h) * s * lw, head.classes());
  for (int y = 0; y < f.h * s; ++y)
    for (int x = 0; x < lw; ++x) out.row(y * lw + x) = coarse.row((y / s) * fw + x / s);
  return out;
}

Mat head_backward(const FeatureMap& f, const SegHead& head, const HeadCache& cache, const Mat& g_logits,
                  SegHead* g_params) {
  const int s = head.upsample;
  const int lw = f.w * s;
  Mat g_coarse = Mat::Zero(f.pixels(), head.classes());
  for (int y = 0; y < f.h * s; ++y)
    for (int x = 0; x < lw; ++x) g_coarse.row((y / s) * f.w + x / s) += g_logits.row(y * lw + x);
  if (g_params) {
    g_params->w2 += g_coarse.transpose() * cache.hidden;
    g_params->b2 += g_coarse.colwise().sum().transpose();
  }
  const Mat g_hidden = g_coarse * head.w2;
  const Mat g_pre = g_hidden.array() * (cache.hidden.array() > 0.0).select(1.0, Mat::Constant(g_hidden.rows(), g_hidden.cols(), kHiddenLeak)).array();
  if (g_params) {
    g_params->w1 += g_pre.transpose() * cache.input;
    g_params->b1 += g_pre.colwise().sum().transpose();
  }
  // Through the standardization, then the per-position L2 normalization.
  Mat g = (g_pre * head.w1).array().rowwise() / head.in_scale.transpose().array();
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    const double n = f.data.row(r).norm();
    const double along = g.row(r).dot(f.data.row(r)) / n;
    g.row(r) = (g.row(r) - along * f.data.row(r) / n) / n;
  }
  return g;
}

LossResult seg_loss(const Mat& logits, const LabelMap& y, Mat* g_logits) {
  if (logits.rows() != y.pixels()) throw std::invalid_argument("seg_loss: logits rows != label pixels");
  const int n = static_cast<int>(logits.cols());
  validate_labels(y, n);
  if (g_logits) *g_logits = Mat::Zero(logits.rows(), logits.cols());
  int valid = 0;
  for (std::uint8_t v : y.labels)
    if (v != kIgnoreLabel) ++valid;
  LossResult r;
  if (valid == 0) {
    r.status = LossStatus::empty_support;
    return r;
  }
  for (Eigen::Index q = 0; q < logits.rows(); ++q) {
    const auto label = y.labels[q];
    if (label == kIgnoreLabel) continue;
    const auto z = logits.row(q);
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    r.value += lse - z[label];
    if (g_logits) {
      Eigen::RowVectorXd p = (z.array() - lse).exp();
      p[label] -= 1.0;
      g_logits->row(q) = p / static_cast<double>(valid);
    }
  }
  r.value /= valid;
  return r;
}

LabelMap predict_labels(const Mat& logits, int h, int w) {
  if (logits.rows() != static_cast<Eigen::Index>(h) * w) throw std::invalid_argument("predict_labels: shape mismatch");
  LabelMap out(h, w);
  for (Eigen::Index q = 0; q < logits.rows(); ++q) {
    Eigen::Index best = 0;
    logits.row(q).maxCoeff(&best);
    out.labels[q] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void accumulate_confusion(const LabelMap& pred, const LabelMap& truth, ConfusionMatrix& acc) {
  if (pred.h != truth.h || pred.w != truth.w) throw std::invalid_argument("accumulate_confusion: shape mismatch");
  const int n = acc.classes();
  for (std::size_t p = 0; p < truth.labels.size(); ++p) {
    const auto t = truth.labels[p];
    if (t == kIgnoreLabel) continue;
    const auto q = pred.labels[p];
    if (t >= n || q >= n) throw std::invalid_argument("accumulate_confusion: label out of range");
    ++acc.at(t, q);
  }
}

MetricsReport compute_metrics(const std::vector<std::pair<std::string, ConfusionMatrix>>& per_domain) {
  if (per_domain.empty()) throw std::invalid_argument("compute_metrics: no domains");
  MetricsReport report;
  double sum = 0.0;
  for (const auto& [id, cm] : per_domain) {
    const int n = cm.classes();
    if (n < 2) throw std::invalid_argument("compute_metrics: need at least 2 classes");
    if (cm.total() == 0) throw std::invalid_argument("compute_metrics: empty confusion matrix for domain " + id);
    DomainMetrics dm;
    dm.domain_id = id;
    dm.confusion = cm;
    dm.per_class_iou.assign(n, std::nan(""));
    double iou_sum = 0.0;
    int iou_count = 0;
    double acc_sum = 0.0;
    int acc_count = 0;
    for (int k = 0; k < n; ++k) {
      std::uint64_t row = 0;
      std::uint64_t col = 0;
      for (int j = 0; j < n; ++j) {
        row += cm.at(k, j);
        col += cm.at(j, k);
      }
      const auto tp = cm.at(k, k);
      const auto uni = row + col - tp;
      if (uni > 0) {
        dm.per_class_iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
        iou_sum += dm.per_class_iou[k];
        ++iou_count;
      }
      if (row > 0) {
        acc_sum += static_cast<double>(tp) / static_cast<double>(row);
        ++acc_count;
      }
    }
    dm.miou = 100.0 * iou_sum / iou_count;
    dm.macc = 100.0 * acc_sum / acc_count;
    sum += dm.miou;
    report.per_domain.push_back(std::move(dm));
  }
  report.mean_miou = sum / static_cast<double>(report.per_domain.size());
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["mean_miou"] = mean_miou;
  j["domains"] = nlohmann::json::array();
  for (const auto& dm : per_domain) {
    nlohmann::json d;
    d["id"] = dm.domain_id;
    d["miou"] = dm.miou;
    d["macc"] = dm.macc;
    nlohmann::json ious = nlohmann::json::array();
    for (double v : dm.per_class_iou) ious.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    d["per_class_iou"] = ious;
    nlohmann::json conf = nlohmann::json::array();
    for (int t = 0; t < dm.confusion.classes(); ++t) {
      nlohmann::json row = nlohmann::json::array();
      for (int p = 0; p < dm.confusion.classes(); ++p) row.push_back(dm.confusion.at(t, p));
      conf.push_back(row);
    }
    d["confusion"] = conf;
    j["domains"].push_back(d);
  }
  return j;
}

}  // namespace ulda

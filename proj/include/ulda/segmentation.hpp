#pragma once

#include "ulda/core.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace ulda {

// Per-position classifier: each feature vector is scaled to unit length and
// standardized with fixed constants, then 1x1 projection, leaky ReLU, 1x1
// classifier, and nearest-neighbour upsampling by `upsample` to the label
// grid. The standardization constants are set once from source features and
// never trained. Unit length matches what the cosine-based stage-1 losses
// can constrain: feature direction, not norm.
struct SegHead {
  Vec in_shift;  // d
  Vec in_scale;  // d, positive
  Mat w1;  // hidden x d
  Vec b1;
  Mat w2;  // n x hidden
  Vec b2;
  int upsample = 1;

  int in_dim() const { return static_cast<int>(w1.cols()); }
  int hidden() const { return static_cast<int>(w1.rows()); }
  int classes() const { return static_cast<int>(w2.rows()); }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
  }
};

SegHead make_seg_head(int d, int hidden, int n, int upsample, std::uint64_t seed);
// Shift and scale of the learnable layers' input: per-channel mean and
// standard deviation of the unit-length feature vectors at all positions.
void fit_input_normalization(SegHead& head, std::span<const FeatureMap> features);
// Gradient accumulator with the same shapes; copies the normalization.
SegHead zero_head_like(const SegHead& h);
// Flattened learnable parameters in (w1, b1, w2, b2) order.
Vec head_parameters(const SegHead& h);
std::string head_hash(const SegHead& h);

struct HeadCache {
  Mat input;   // standardized unit-length features
  Mat hidden;  // activations, (h*w) x hidden
};

// Logits at label resolution: (h*upsample * w*upsample) x n, row-major over the label grid.
Mat head_forward(const FeatureMap& f, const SegHead& head, HeadCache* cache = nullptr);

// Accumulates parameter gradients into g_params (if given) and returns dL/dfeatures.
Mat head_backward(const FeatureMap& f, const SegHead& head, const HeadCache& cache, const Mat& g_logits,
                  SegHead* g_params);

// Softmax cross-entropy averaged over non-IGNORE pixels.
LossResult seg_loss(const Mat& logits, const LabelMap& y, Mat* g_logits = nullptr);

// Arg-max labels (ties resolve to the lower class id).
LabelMap predict_labels(const Mat& logits, int h, int w);

// Row = ground truth, column = prediction.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int n) : n_(n), counts_(static_cast<std::size_t>(n) * n, 0) {}

  int classes() const { return n_; }
  std::uint64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * n_ + pred]; }
  std::uint64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * n_ + pred]; }
  std::uint64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

void accumulate_confusion(const LabelMap& pred, const LabelMap& truth, ConfusionMatrix& acc);

struct DomainMetrics {
  std::string domain_id;
  double miou = 0.0;  // percent
  double macc = 0.0;  // percent
  std::vector<double> per_class_iou;  // fraction; NaN where the union is empty
  ConfusionMatrix confusion;
};

struct MetricsReport {
  std::vector<DomainMetrics> per_domain;
  double mean_miou = 0.0;  // percent

  nlohmann::json to_json() const;
};

// IoU_k = tp / (row + col - tp), averaged over classes with a non-empty union;
// mAcc averages per-class recall over classes with ground truth; mean_miou
// averages mIoU across domains.
MetricsReport compute_metrics(const std::vector<std::pair<std::string, ConfusionMatrix>>& per_domain);

}  // namespace ulda

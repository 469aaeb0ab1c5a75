#include "doctest.h"

#include "oracles.hpp"
#include "ulda/segmentation.hpp"

#include <cmath>

using namespace ulda;

namespace {

LabelMap labels(int h, int w, std::vector<int> v) {
  LabelMap y(h, w);
  for (std::size_t i = 0; i < v.size(); ++i) y.labels[i] = v[i] < 0 ? kIgnoreLabel : static_cast<std::uint8_t>(v[i]);
  return y;
}

FeatureMap random_map(Rng& rng, int h, int w, int d) {
  FeatureMap f(h, w, d);
  for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = rng.uniform(-1.0, 1.0);
  return f;
}

}  // namespace

TEST_CASE("head_forward: shape, determinism and zero classifier") {
  Rng rng(1);
  const FeatureMap f = random_map(rng, 3, 4, 6);
  SegHead head = make_seg_head(6, 8, 4, 2, 99);
  const Mat a = head_forward(f, head);
  CHECK(a.rows() == 6 * 8);
  CHECK(a.cols() == 4);
  CHECK(a == head_forward(f, head));
  CHECK(head.parameter_count() == static_cast<std::size_t>(8 * 6 + 8 + 4 * 8 + 4));

  head.w2.setZero();
  head.b2.setConstant(0.7);
  const Mat z = head_forward(f, head);
  CHECK((z.array() - 0.7).abs().maxCoeff() == 0.0);
}

TEST_CASE("head input normalization uses unit-length source features") {
  Rng rng(2);
  std::vector<FeatureMap> feats{random_map(rng, 2, 3, 4), random_map(rng, 3, 2, 4)};
  SegHead head = make_seg_head(4, 5, 3, 1, 1);
  fit_input_normalization(head, feats);
  oracle::Grid all;
  for (const auto& f : feats)
    for (int p = 0; p < f.pixels(); ++p) {
      const double n = f.data.row(p).norm();
      all.push_back({f.data(p, 0) / n, f.data(p, 1) / n, f.data(p, 2) / n, f.data(p, 3) / n});
    }
  for (int c = 0; c < 4; ++c) {
    CHECK(head.in_shift[c] == doctest::Approx(oracle::mean(oracle::channel(all, c))).epsilon(1e-12));
    CHECK(head.in_scale[c] == doctest::Approx(oracle::population_std(oracle::channel(all, c), 1e-12)).epsilon(1e-12));
  }
  // Feature norm does not reach the classifier.
  FeatureMap scaled = feats[0];
  scaled.data *= 7.5;
  CHECK((head_forward(scaled, head) - head_forward(feats[0], head)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("seg_loss: uniform, saturated and two-pixel oracle") {
  const Mat uniform = Mat::Constant(3, 4, 0.25);
  CHECK(seg_loss(uniform, labels(1, 3, {0, 3, 2})).value == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  Mat sat = Mat::Zero(2, 3);
  sat(0, 1) = 800.0;
  sat(1, 2) = 800.0;
  CHECK(seg_loss(sat, labels(1, 2, {1, 2})).value <= 1e-300);

  Mat two(2, 3);
  two << 0.3, -1.2, 2.0, 1.5, 0.1, -0.4;
  const double expect = 0.5 * (oracle::softmax_ce({0.3, -1.2, 2.0}, 0) + oracle::softmax_ce({1.5, 0.1, -0.4}, 2));
  CHECK(std::abs(seg_loss(two, labels(1, 2, {0, 2})).value - expect) <= 1e-12);
  CHECK(seg_loss(two, labels(1, 2, {-1, -1})).status == LossStatus::empty_support);
}

TEST_CASE("predict_labels: arg-max with ties to the lower id") {
  Mat l(2, 3);
  l << 1, 5, 5, 0, 0, -1;
  const LabelMap y = predict_labels(l, 1, 2);
  CHECK(y.labels[0] == 1);
  CHECK(y.labels[1] == 0);
}

TEST_CASE("accumulate_confusion: diagonal, ignore and hand tally") {
  ConfusionMatrix cm(3);
  accumulate_confusion(labels(1, 3, {0, 1, 2}), labels(1, 3, {0, 1, 2}), cm);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(cm.at(i, j) == (i == j ? 1u : 0u));

  ConfusionMatrix ig(3);
  accumulate_confusion(labels(1, 2, {0, 1}), labels(1, 2, {-1, -1}), ig);
  CHECK(ig.total() == 0);

  ConfusionMatrix hand(2);
  accumulate_confusion(labels(2, 2, {0, 1, 1, 1}), labels(2, 2, {0, 0, 1, -1}), hand);
  CHECK(hand.at(0, 0) == 1);
  CHECK(hand.at(0, 1) == 1);
  CHECK(hand.at(1, 1) == 1);
  CHECK(hand.at(1, 0) == 0);
  CHECK(hand.total() == 3);
}

TEST_CASE("compute_metrics: perfect, hand IoU, empty union and mean") {
  ConfusionMatrix perfect(3);
  for (int k = 0; k < 3; ++k) perfect.at(k, k) = 10;
  const MetricsReport p = compute_metrics({{"a", perfect}});
  CHECK(p.per_domain[0].miou == doctest::Approx(100.0));
  CHECK(p.per_domain[0].macc == doctest::Approx(100.0));
  CHECK(p.mean_miou == p.per_domain[0].miou);

  ConfusionMatrix h(2);
  h.at(0, 0) = 2;
  h.at(0, 1) = 1;
  h.at(1, 0) = 1;
  h.at(1, 1) = 2;
  const MetricsReport r = compute_metrics({{"a", h}, {"b", perfect}});
  CHECK(r.per_domain[0].per_class_iou[0] == doctest::Approx(0.5));
  CHECK(r.per_domain[0].per_class_iou[1] == doctest::Approx(0.5));
  CHECK(r.per_domain[0].miou == doctest::Approx(50.0));
  CHECK(std::abs(r.mean_miou - 75.0) <= 1e-9);

  ConfusionMatrix gap(3);
  gap.at(0, 0) = 4;
  gap.at(1, 1) = 2;
  gap.at(1, 0) = 2;
  const MetricsReport g = compute_metrics({{"a", gap}});
  CHECK(std::isnan(g.per_domain[0].per_class_iou[2]));
  CHECK(g.per_domain[0].miou == doctest::Approx(100.0 * (4.0 / 6.0 + 2.0 / 4.0) / 2.0));
  CHECK(g.per_domain[0].macc == doctest::Approx(100.0 * (1.0 + 0.5) / 2.0));

  const auto j = r.to_json();
  CHECK(j.contains("mean_miou"));
  CHECK(j["domains"].size() == 2);
}

TEST_CASE("head parameters and hash track every learnable value") {
  SegHead a = make_seg_head(4, 5, 3, 2, 11);
  const SegHead b = make_seg_head(4, 5, 3, 2, 11);
  CHECK(head_hash(a) == head_hash(b));
  CHECK(head_parameters(a).size() == static_cast<Eigen::Index>(a.parameter_count()));
  a.b2[1] += 1e-12;
  CHECK(head_hash(a) != head_hash(b));
  const SegHead z = zero_head_like(b);
  CHECK(head_parameters(z).isZero());
  CHECK(z.in_scale == b.in_scale);
}

#include "doctest.h"

#include "oracles.hpp"
#include "ulda/dcrl.hpp"
#include "ulda/simulation.hpp"
#include "ulda/tdr.hpp"

#include <cmath>

using namespace ulda;

namespace {

PrototypeSet protos(Mat rows, std::string domain) {
  PrototypeSet p;
  p.protos = std::move(rows);
  p.present.assign(p.protos.rows(), true);
  p.domain_id = std::move(domain);
  return p;
}

TextEmbeddingSet texts(Mat rows, std::string domain) {
  TextEmbeddingSet t;
  t.class_embs = std::move(rows);
  t.domain_emb = Vec::Unit(t.class_embs.cols(), 0);
  t.domain_id = std::move(domain);
  return t;
}

StackedEmbeddings stack(std::vector<PrototypeSet> p) { return stack_domains(std::span<const PrototypeSet>(p)); }
StackedEmbeddings stack(std::vector<TextEmbeddingSet> t) { return stack_domains(std::span<const TextEmbeddingSet>(t)); }

FeatureMap one_channel(std::vector<double> px) {
  FeatureMap f(1, static_cast<int>(px.size()), 1);
  for (std::size_t i = 0; i < px.size(); ++i) f.data(i, 0) = px[i];
  return f;
}

}  // namespace

TEST_CASE("stack_domains: domain-major order and metadata") {
  const auto s = stack({protos(Mat::Random(3, 4), "d1"), protos(Mat::Random(3, 4), "d2")});
  REQUIRE(s.rows.rows() == 6);
  CHECK(s.meta[0].domain_id == "d1");
  CHECK(s.meta[0].class_id == 0);
  CHECK(s.meta[5].domain_id == "d2");
  CHECK(s.meta[5].class_id == 2);
  CHECK(s.kind == StackKind::prototype);

  const Mat single = Mat::Random(3, 4);
  CHECK(stack({protos(single, "d1")}).rows == single);
  CHECK(stack({texts(single, "d1")}).kind == StackKind::text);
  CHECK_THROWS_AS(stack({protos(Mat::Random(3, 4), "a"), protos(Mat::Random(3, 5), "b")}), std::invalid_argument);
}

TEST_CASE("gram: symmetric, unit diagonal, hand example") {
  const auto s = stack({protos(Mat::Random(4, 5), "a"), protos(Mat::Random(4, 5), "b")});
  const Mat g = gram(s);
  CHECK((g - g.transpose()).cwiseAbs().maxCoeff() == 0.0);
  for (Eigen::Index i = 0; i < g.rows(); ++i) CHECK(std::abs(g(i, i) - 1.0) <= 1e-10);

  const Mat ortho = gram(stack({protos(Mat::Identity(3, 3), "a")}));
  CHECK(ortho(0, 1) == doctest::Approx(0.0));
  const Mat hand = gram(stack({protos((Mat(2, 2) << 1, 0, 1, 1).finished(), "a")}));
  CHECK(hand(0, 1) == doctest::Approx(0.70711).epsilon(1e-5));
}

TEST_CASE("dcrl_loss: scale invariance, identity and hand example") {
  const Mat t = Mat::Random(3, 4);
  Mat scaled = t;
  scaled.row(0) *= 3.0;
  scaled.row(2) *= 0.25;
  CHECK(std::abs(dcrl_loss(stack({protos(scaled, "a")}), stack({texts(t, "a")})).value) <= 1e-12);
  CHECK(dcrl_loss(stack({protos(t, "a")}), stack({texts(t, "a")})).value == 0.0);

  const double hand = dcrl_loss(stack({protos((Mat(2, 2) << 1, 0, 0, 1).finished(), "a")}),
                                stack({texts((Mat(2, 2) << 1, 0, 1, 0).finished(), "a")}))
                          .value;
  CHECK(hand == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("dcrl_loss matches the Gram-MSE oracle and skips absent rows") {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    auto c1 = protos(Mat::Random(3, 4), "a");
    auto c2 = protos(Mat::Random(3, 4), "b");
    const auto t1 = texts(Mat::Random(3, 4), "a");
    const auto t2 = texts(Mat::Random(3, 4), "b");
    const int drop = rng.uniform_int(0, 2);
    c2.present[drop] = false;
    c2.protos.row(drop).setZero();
    const double got = dcrl_loss(stack({c1, c2}), stack({t1, t2})).value;

    oracle::Grid cg, tg;
    for (int d = 0; d < 2; ++d)
      for (int k = 0; k < 3; ++k) {
        if (d == 1 && k == drop) continue;
        const Mat& cm = d == 0 ? c1.protos : c2.protos;
        const Mat& tm = d == 0 ? t1.class_embs : t2.class_embs;
        cg.push_back({cm(k, 0), cm(k, 1), cm(k, 2), cm(k, 3)});
        tg.push_back({tm(k, 0), tm(k, 1), tm(k, 2), tm(k, 3)});
      }
    CHECK(got == doctest::Approx(oracle::gram_mse(cg, tg)).epsilon(1e-12));
  }
}

TEST_CASE("dcrl_loss: fewer than two common rows is an empty support") {
  auto c = protos(Mat::Random(2, 3), "a");
  c.present = {true, false};
  const LossResult r = dcrl_loss(stack({c}), stack({texts(Mat::Random(2, 3), "a")}));
  CHECK(r.value == 0.0);
  CHECK(r.status == LossStatus::empty_support);
}

TEST_CASE("rectifier initialization and text_to_stats") {
  const RectifierParams p = make_rectifier(8, 3);
  CHECK(p.beta == 0.1);
  CHECK(p.weight.rows() == 16);
  CHECK(p.weight.cols() == 8);
  CHECK(p.bias.isZero());
  CHECK(p.weight.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(8.0));
  CHECK(make_rectifier(8, 3).weight == p.weight);

  Rng rng(2);
  const Vec e = random_unit_vector(8, rng);
  const TextStats zero = text_to_stats(e, zero_rectifier_like(p));
  CHECK(zero.mu.isZero());
  CHECK(zero.sigma.isZero());

  RectifierParams ident = zero_rectifier_like(p);
  ident.weight.topRows(8) = Mat::Identity(8, 8);
  ident.weight.bottomRows(8) = Mat::Identity(8, 8);
  const TextStats id = text_to_stats(e, ident);
  CHECK(id.mu == e);
  CHECK(id.sigma == e);
  CHECK(text_to_stats(e, p).mu == text_to_stats(e, p).mu);
}

TEST_CASE("rectify: beta zero is exact identity; hand example") {
  FeatureMap f(3, 3, 4);
  f.data = Mat::Random(9, 4);
  const Vec mu = Vec::Random(4), sigma = Vec::Random(4);
  CHECK(rectify(f, mu, sigma, 0.0).data == f.data);

  const FeatureMap r = rectify(one_channel({0.0, 2.0}), Vec::Constant(1, 4.0), Vec::Constant(1, 2.0), 0.5, 0.0);
  CHECK(r.data(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.data(1, 0) == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("rectified_closed_form: agrees with the composition and reduces to pin") {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    FeatureMap f(4, 3, 5);
    for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = rng.uniform(-2.0, 2.0);
    StyleParams s{Vec(5), Vec(5), {}};
    Vec mu_t(5), sigma_t(5);
    for (int c = 0; c < 5; ++c) {
      s.mu[c] = rng.uniform(-1.0, 1.0);
      s.sigma[c] = rng.uniform(0.2, 2.0);
      mu_t[c] = rng.uniform(-1.0, 1.0);
      sigma_t[c] = rng.uniform(0.0, 1.0);
    }
    const double beta = rng.uniform(0.0, 1.0);
    const FeatureMap closed = rectified_closed_form(f, s, mu_t, sigma_t, beta);
    CHECK((closed.data - rectify(pin(f, s, 0.0), mu_t, sigma_t, beta, 0.0).data).cwiseAbs().maxCoeff() < 1e-10);
    const FeatureMap plain = pin(f, s, 0.0);
    CHECK((rectified_closed_form(f, s, mu_t, sigma_t, 0.0).data - plain.data).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((rectified_closed_form(f, s, Vec::Zero(5), Vec::Zero(5), beta).data - plain.data).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

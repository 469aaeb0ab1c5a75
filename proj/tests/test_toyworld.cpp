#include "doctest.h"

#include "oracles.hpp"
#include "ulda/config.hpp"
#include "ulda/pipeline.hpp"
#include "ulda/toyworld.hpp"

#include <filesystem>
#include <set>

using namespace ulda;

namespace {

std::vector<double> channel_means(const Image& img) {
  std::vector<double> m(img.c, 0.0);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < img.c; ++c) m[c] += img.at(y, x, c);
  for (auto& v : m) v /= static_cast<double>(img.h * img.w);
  return m;
}

}  // namespace

TEST_CASE("default spec shape") {
  const ToySpec spec = default_toy_spec();
  CHECK(spec.n_classes == 4);
  CHECK(spec.image_size == 32);
  CHECK(spec.n_train == 40);
  CHECK(spec.domain_ids() == std::vector<std::string>{"night", "fog", "rain"});
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("generate_source: count, label range, determinism") {
  const ToySpec spec = default_toy_spec();
  const SourceDataset a = generate_source(spec);
  const SourceDataset b = generate_source(spec);
  REQUIRE(a.samples.size() == 40);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    for (auto l : a.samples[i].labels.labels) CHECK(l < spec.n_classes);
    CHECK(a.samples[i].image.px == b.samples[i].image.px);
    CHECK(a.samples[i].labels.labels == b.samples[i].labels.labels);
  }
  ToySpec other = spec;
  other.seed = spec.seed + 1;
  CHECK(generate_source(other).samples[0].image.px != a.samples[0].image.px);
}

TEST_CASE("apply_domain_shift: identity, night gain, labels untouched") {
  ToySpec spec = default_toy_spec();
  spec.domain_shifts.push_back({"identity", DomainShift{Vec::Ones(3), Vec::Zero(3), 0.0}});
  const Sample s = generate_sample(spec, 5, "x");
  CHECK(apply_domain_shift(s.image, "identity", spec, 1).px == s.image.px);

  const DomainShift& night = spec.shift("night");
  const auto before = channel_means(s.image);
  const auto after = channel_means(apply_domain_shift(s.image, "night", spec, 1));
  for (int c = 0; c < 3; ++c) {
    // noise averages over 1024 pixels: 4 standard errors
    CHECK(std::abs(after[c] - (0.3 * before[c] + night.bias[c])) <= 4.0 * night.noise / 32.0);
  }
  CHECK_THROWS(apply_domain_shift(s.image, "unknown", spec, 1));
}

TEST_CASE("make_eval_split: counts, disjoint ids, shift moments") {
  const ToySpec spec = default_toy_spec();
  const EvalSplit split = make_eval_split(spec);
  std::size_t total = 0;
  std::set<std::string> ids;
  for (const auto& d : split.domains) {
    total += d.samples.size();
    for (const auto& s : d.samples) ids.insert(s.id);
  }
  CHECK(total == 30);
  for (const auto& s : generate_source(spec).samples) CHECK(ids.count(s.id) == 0);

  // Per-class pixel means should sit at gain * palette colour + bias.
  for (const auto& d : split.domains) {
    const DomainShift& sh = spec.shift(d.domain_id);
    double worst = 0.0;
    for (const auto& s : d.samples) {
      for (int k = 0; k < spec.n_classes; ++k) {
        const Vec base = class_color(k, 3, spec.seed);
        std::vector<double> acc(3, 0.0);
        int count = 0;
        for (int p = 0; p < s.labels.pixels(); ++p) {
          if (s.labels.labels[p] != k) continue;
          ++count;
          for (int c = 0; c < 3; ++c) acc[c] += s.image.px[p * 3 + c];
        }
        if (count < 64) continue;
        for (int c = 0; c < 3; ++c) {
          const double expect = sh.gain[c] * base[c] + sh.bias[c];
          worst = std::max(worst, std::abs(acc[c] / count - expect));
        }
      }
    }
    // per-image colour jitter (0.02) times gain plus averaged noise
    CHECK(worst <= 4.0 * 0.02 * sh.gain.maxCoeff() + 0.02);
  }
}

TEST_CASE("toy domains are separable in the encoder's pooled space") {
  const RunConfig cfg = default_config();
  const EncoderPair enc = build_encoder(cfg);
  const SeparabilityReport r = domain_separability(generate_source(cfg.toy), make_eval_split(cfg.toy), [&](const Image& i) {
    return enc.pool(enc.encode_image_features(i));
  });
  CHECK(r.ratio() > 5.0);
}

TEST_CASE("dataset files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ulda_test_toy_dataset";
  std::filesystem::remove_all(dir);
  ToySpec spec = default_toy_spec();
  spec.n_train = 3;
  spec.n_eval_per_domain = 2;
  const SourceDataset src = generate_source(spec);
  const EvalSplit split = make_eval_split(spec);
  save_toy_dataset(dir, spec, src, split);
  const ToySpec back = load_toy_spec(dir);
  CHECK(back.n_train == 3);
  CHECK(back.domain_ids() == spec.domain_ids());
  CHECK(back.shift("fog").bias == spec.shift("fog").bias);
  const SourceDataset s2 = load_source(dir);
  REQUIRE(s2.samples.size() == 3);
  CHECK(s2.samples[2].image.px == src.samples[2].image.px);
  const EvalSplit e2 = load_eval_split(dir);
  CHECK(e2.domains[1].samples[1].labels.labels == split.domains[1].samples[1].labels.labels);
  CHECK(e2.domains[1].samples[1].id == split.domains[1].samples[1].id);
  std::filesystem::remove_all(dir);
}

TEST_CASE("spec validation rejects bad shifts") {
  ToySpec spec = default_toy_spec();
  spec.domain_shifts.push_back(spec.domain_shifts.front());
  CHECK_THROWS(spec.validate());
  ToySpec bad = default_toy_spec();
  bad.domain_shifts[0].second.gain = Vec::Ones(2);
  CHECK_THROWS(bad.validate());
}

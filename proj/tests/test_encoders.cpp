#include "doctest.h"

#include "oracles.hpp"
#include "ulda/config.hpp"
#include "ulda/encoders.hpp"
#include "ulda/pipeline.hpp"
#include "ulda/toyworld.hpp"

#include <cstdlib>
#include <filesystem>
#include <set>

using namespace ulda;

namespace {

EncoderPair default_encoder() {
  static const EncoderPair enc = build_encoder(default_config());
  return enc;
}

FeatureMap map_from(int h, int w, std::vector<std::vector<double>> rows) {
  FeatureMap f(h, w, static_cast<int>(rows.front().size()));
  for (std::size_t p = 0; p < rows.size(); ++p)
    for (std::size_t c = 0; c < rows[p].size(); ++c) f.data(p, c) = rows[p][c];
  return f;
}

}  // namespace

TEST_CASE("prompt set follows the class pattern") {
  const std::vector<std::string> bus{"bus"};
  CHECK(build_prompt_set(bus, "driving under rain").class_prompts.front() == "the bus in rain");
  const std::vector<std::string> road{"road"};
  CHECK(build_prompt_set(road, "driving in snow").class_prompts.front() == "the road in snow");

  const std::vector<std::string> classes{"road", "car", "sky"};
  const PromptSet p = build_prompt_set(classes, "driving at night");
  CHECK(p.class_prompts.size() == 3);
  CHECK(std::set<std::string>(p.class_prompts.begin(), p.class_prompts.end()).size() == 3);
  CHECK(p.domain_prompt == "driving at night");
  CHECK(p.templates.size() == 80);
}

TEST_CASE("prompt set rejects bad class lists") {
  const std::vector<std::string> none;
  CHECK_THROWS_AS(build_prompt_set(none, "driving at night"), std::invalid_argument);
  const std::vector<std::string> dup{"car", "car"};
  CHECK_THROWS_AS(build_prompt_set(dup, "driving at night"), std::invalid_argument);
}

TEST_CASE("text embeddings are unit length and repeatable") {
  const EncoderPair enc = default_encoder();
  const auto& tmpl = imagenet_templates();
  for (const char* prompt : {"driving at night", "the car in fog", "something unrelated", "the sky in rain"}) {
    const Vec a = enc.encode_text(prompt, tmpl);
    const Vec b = enc.encode_text(prompt, tmpl);
    CHECK(std::abs(a.norm() - 1.0) <= 1e-6);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("class text rows are unit length, distinct, and repeat for repeated prompts") {
  const RunConfig cfg = default_config();
  const EncoderPair enc = default_encoder();
  const PromptSet p = build_prompt_set(cfg.classes, cfg.domains.front().description);
  const TextEmbeddingSet t = encode_class_text(enc, p, cfg.domains.front().id);
  REQUIRE(t.classes() == static_cast<int>(cfg.classes.size()));
  for (int i = 0; i < t.classes(); ++i) {
    CHECK(std::abs(t.class_embs.row(i).norm() - 1.0) <= 1e-6);
    for (int j = i + 1; j < t.classes(); ++j) CHECK(t.class_embs.row(i).dot(t.class_embs.row(j)) < 1.0 - 1e-3);
  }

  PromptSet twice = p;
  twice.class_prompts = {p.class_prompts[0], p.class_prompts[0]};
  const TextEmbeddingSet tt = encode_class_text(enc, twice);
  CHECK((tt.class_embs.row(0) - tt.class_embs.row(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("domain prompt lands on the mean pooled feature of its calibration images") {
  ToySpec spec = default_toy_spec();
  spec.domain_shifts.push_back({"nightshift", DomainShift{Vec::Constant(3, 0.25), Vec::Constant(3, 0.1), 0.02}});
  const ToyEncoderConfig ecfg;
  const std::vector<std::string> classes{"road", "car"};
  const std::vector<DomainCalibration> cal{{"nightshift", [&] {
                                              std::vector<Image> imgs;
                                              for (const auto& s : make_calibration_samples(spec, "nightshift"))
                                                imgs.push_back(s.image);
                                              return imgs;
                                            }()}};
  const EncoderPair enc = make_toy_encoder(ecfg, classes, cal);

  // Independent target: average of pooled features of freshly shifted images.
  Vec target = Vec::Zero(ecfg.feature_dim);
  const auto source = generate_source(spec);
  for (std::size_t i = 0; i < source.samples.size(); ++i) {
    const Image shifted = apply_domain_shift(source.samples[i].image, "nightshift", spec, 1000 + i);
    target += enc.pool(enc.encode_image_features(shifted));
  }
  const Vec v = enc.encode_text("driving at nightshift", imagenet_templates());
  CHECK(cosine(v, target) >= 0.95);
}

TEST_CASE("vision features have the documented shape and are frozen") {
  const EncoderPair enc = default_encoder();
  Image zero(32, 32, 3), one(32, 32, 3);
  std::fill(one.px.begin(), one.px.end(), 1.0);
  const FeatureMap a = enc.encode_image_features(one);
  const FeatureMap b = enc.encode_image_features(one);
  CHECK(a.h == 8);
  CHECK(a.w == 8);
  CHECK(a.dim() == 16);
  CHECK((a.data - b.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK((enc.encode_image_features(zero).data - a.data).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("pool_scene: mean then normalize") {
  const FeatureMap two = map_from(1, 2, {{1.0, 0.0}, {0.0, 1.0}});
  const Vec p = pool_scene(two);
  CHECK(p[0] == doctest::Approx(0.70710678).epsilon(1e-8));
  CHECK(p[1] == doctest::Approx(0.70710678).epsilon(1e-8));

  const FeatureMap constant = map_from(2, 2, {{3, 4, 0}, {3, 4, 0}, {3, 4, 0}, {3, 4, 0}});
  const Vec c = pool_scene(constant);
  CHECK(c[0] == doctest::Approx(0.6));
  CHECK(c[1] == doctest::Approx(0.8));
  CHECK(std::abs(c.norm() - 1.0) <= 1e-6);
}

TEST_CASE("tokenize lowercases and strips punctuation") {
  const auto t = tokenize("  The CAR, in fog! domain:night ");
  const std::vector<std::string> expect{"the", "car", "in", "fog", "domain:night"};
  CHECK(t == expect);
  CHECK(domain_suffix("driving under rain") == "rain");
}

TEST_CASE("external adapter: missing weights give a descriptive error") {
  const char* old = std::getenv(kEncoderDirEnv);
  const std::string saved = old ? old : "";
  unsetenv(kEncoderDirEnv);
  CHECK_THROWS_WITH_AS(load_external_encoder_from_env(), doctest::Contains(kEncoderDirEnv), std::runtime_error);
  setenv(kEncoderDirEnv, "/nonexistent/ulda-weights", 1);
  CHECK_THROWS(load_external_encoder_from_env());
  RunConfig cfg = default_config();
  cfg.encoder.kind = "external";
  CHECK_THROWS(build_encoder(cfg));
  if (old) setenv(kEncoderDirEnv, saved.c_str(), 1); else unsetenv(kEncoderDirEnv);
}

TEST_CASE("external adapter round-trips through its directory") {
  const auto dir = std::filesystem::temp_directory_path() / "ulda_test_external_encoder";
  std::filesystem::remove_all(dir);
  ToyEncoderConfig ecfg;
  ExternalEncoderFiles files;
  files.vision = make_toy_vision_weights(ecfg);
  files.vocab = {"night", "car", "road"};
  files.token_table = Mat::Random(3, 6);
  files.projection = Mat::Random(ecfg.feature_dim, 6);
  save_external_encoder(dir, files);
  const EncoderPair enc = load_external_encoder(dir);
  CHECK(enc.descriptor == "external-adapter");
  CHECK(enc.feature_dim == ecfg.feature_dim);
  CHECK(enc.text_dim == 6);
  const Vec v = enc.encode_text("the car at night", imagenet_templates());
  CHECK(std::abs(v.norm() - 1.0) <= 1e-6);
  Image img(32, 32, 3);
  const PatchConvEncoder direct(files.vision);
  CHECK((enc.encode_image_features(img).data - direct.encode_features(img).data).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}

#include "ulda/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

namespace ulda {

FeatureMap EncoderPair::encode_image_features(const Image& image) const {
  return vision->encode_features(image);
}

Vec EncoderPair::pool(const FeatureMap& f) const { return pool_scene(f); }

Vec EncoderPair::encode_text(std::string_view prompt, std::span<const std::string> templates) const {
  return text->encode_text(prompt, templates);
}

Vec pool_scene(const FeatureMap& f) {
  if (f.pixels() == 0 || f.dim() == 0) throw std::invalid_argument("pool_scene: empty feature map");
  const Vec mean = f.data.colwise().mean().transpose();
  const double n = mean.norm();
  if (n == 0.0) throw std::invalid_argument("pool_scene: mean feature has zero norm");
  return mean / n;
}

Mat pool_scene_backward(const FeatureMap& f, const Vec& g_pooled) {
  const Vec mean = f.data.colwise().mean().transpose();
  const double n = mean.norm();
  const Vec u = mean / n;
  const Vec g_mean = (g_pooled - u * u.dot(g_pooled)) / n;
  Mat g = g_mean.transpose().replicate(f.pixels(), 1);
  return g / static_cast<double>(f.pixels());
}

const std::vector<std::string>& imagenet_templates() {
  static const std::vector<std::string> kTemplates = {
      "a bad photo of a {}.",
      "a photo of many {}.",
      "a sculpture of a {}.",
      "a photo of the hard to see {}.",
      "a low resolution photo of the {}.",
      "a rendering of a {}.",
      "graffiti of a {}.",
      "a bad photo of the {}.",
      "a cropped photo of the {}.",
      "a tattoo of a {}.",
      "the embroidered {}.",
      "a photo of a hard to see {}.",
      "a bright photo of a {}.",
      "a photo of a clean {}.",
      "a photo of a dirty {}.",
      "a dark photo of the {}.",
      "a drawing of a {}.",
      "a photo of my {}.",
      "the plastic {}.",
      "a photo of the cool {}.",
      "a close-up photo of a {}.",
      "a black and white photo of the {}.",
      "a painting of the {}.",
      "a painting of a {}.",
      "a pixelated photo of the {}.",
      "a sculpture of the {}.",
      "a bright photo of the {}.",
      "a cropped photo of a {}.",
      "a plastic {}.",
      "a photo of the dirty {}.",
      "a jpeg corrupted photo of a {}.",
      "a blurry photo of the {}.",
      "a photo of the {}.",
      "a good photo of the {}.",
      "a rendering of the {}.",
      "a {} in a video game.",
      "a photo of one {}.",
      "a doodle of a {}.",
      "a close-up photo of the {}.",
      "a photo of a {}.",
      "the origami {}.",
      "the {} in a video game.",
      "a sketch of a {}.",
      "a doodle of the {}.",
      "a origami {}.",
      "a low resolution photo of a {}.",
      "the toy {}.",
      "a rendition of the {}.",
      "a photo of the clean {}.",
      "a photo of a large {}.",
      "a rendition of a {}.",
      "a photo of a nice {}.",
      "a photo of a weird {}.",
      "a blurry photo of a {}.",
      "a cartoon {}.",
      "art of a {}.",
      "a sketch of the {}.",
      "a embroidered {}.",
      "a pixelated photo of a {}.",
      "itap of the {}.",
      "a jpeg corrupted photo of the {}.",
      "a good photo of a {}.",
      "a plushie {}.",
      "a photo of the nice {}.",
      "a photo of the small {}.",
      "a photo of the weird {}.",
      "the cartoon {}.",
      "art of the {}.",
      "a drawing of the {}.",
      "a photo of the large {}.",
      "a black and white photo of a {}.",
      "the plushie {}.",
      "a dark photo of a {}.",
      "itap of a {}.",
      "graffiti of the {}.",
      "a toy {}.",
      "itap of my {}.",
      "a photo of a cool {}.",
      "a photo of a small {}.",
      "a tattoo of the {}.",
  };
  return kTemplates;
}

namespace {

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

std::string fill_template(std::string_view tmpl, std::string_view prompt) {
  std::string out(tmpl);
  const auto pos = out.find("{}");
  if (pos == std::string::npos) return out + " " + std::string(prompt);
  out.replace(pos, 2, prompt);
  return out;
}

bool is_strippable(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) && c != ':' && c != '-' && c != '_';
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    std::size_t b = 0;
    std::size_t e = cur.size();
    while (b < e && is_strippable(cur[b])) ++b;
    while (e > b && is_strippable(cur[e - 1])) --e;
    if (e > b) out.push_back(cur.substr(b, e - b));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

std::string domain_suffix(std::string_view description) {
  const auto toks = tokenize(description);
  if (toks.empty()) throw std::invalid_argument("domain description has no words");
  return toks.back();
}

PromptSet build_prompt_set(std::span<const std::string> class_names, std::string_view domain_description,
                           std::string_view pattern, std::vector<std::string> templates) {
  if (class_names.empty()) throw std::invalid_argument("build_prompt_set: empty class list");
  if (templates.empty()) throw std::invalid_argument("build_prompt_set: empty template list");
  std::set<std::string> seen;
  for (const auto& c : class_names) {
    if (c.empty()) throw std::invalid_argument("build_prompt_set: empty class name");
    if (!seen.insert(c).second) throw std::invalid_argument("build_prompt_set: duplicate class name '" + c + "'");
  }
  const std::string suffix = domain_suffix(domain_description);
  PromptSet p;
  p.domain_prompt = std::string(domain_description);
  p.templates = std::move(templates);
  for (const auto& c : class_names) {
    std::string s = replace_all(std::string(pattern), "{class}", c);
    p.class_prompts.push_back(replace_all(std::move(s), "{domain}", suffix));
  }
  return p;
}

TextEmbeddingSet encode_class_text(const EncoderPair& enc, const PromptSet& prompts, std::string domain_id) {
  const int n = static_cast<int>(prompts.class_prompts.size());
  if (n == 0) throw std::invalid_argument("encode_class_text: no class prompts");
  TextEmbeddingSet out;
  out.domain_id = std::move(domain_id);
  out.class_embs.resize(n, enc.feature_dim);
  for (int i = 0; i < n; ++i) {
    out.class_embs.row(i) = enc.encode_text(prompts.class_prompts[i], prompts.templates).transpose();
  }
  out.domain_emb = enc.encode_text(prompts.domain_prompt, prompts.templates);
  return out;
}

// ---------------------------------------------------------------- vision

PatchConvEncoder::PatchConvEncoder(PatchConvWeights weights) : weights_(std::move(weights)) {
  const int in = weights_.stride * weights_.stride * weights_.channels;
  if (weights_.stride <= 0 || weights_.channels <= 0 || weights_.w1.cols() != in ||
      weights_.b1.size() != weights_.w1.rows() || weights_.w2.cols() != weights_.w1.rows() ||
      weights_.b2.size() != weights_.w2.rows()) {
    throw std::invalid_argument("PatchConvEncoder: inconsistent weight shapes");
  }
}

FeatureMap PatchConvEncoder::encode_features(const Image& image) const {
  const int s = weights_.stride;
  if (image.c != weights_.channels) throw std::invalid_argument("encode_features: channel count mismatch");
  if (image.h <= 0 || image.w <= 0 || image.h % s != 0 || image.w % s != 0) {
    throw std::invalid_argument("encode_features: image size " + std::to_string(image.h) + "x" +
                                std::to_string(image.w) + " not divisible by stride " + std::to_string(s));
  }
  const int fh = image.h / s;
  const int fw = image.w / s;
  FeatureMap f(fh, fw, feature_dim());
  Vec patch(s * s * image.c);
  for (int by = 0; by < fh; ++by) {
    for (int bx = 0; bx < fw; ++bx) {
      int k = 0;
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx)
          for (int ch = 0; ch < image.c; ++ch) patch[k++] = image.at(by * s + dy, bx * s + dx, ch);
      Vec u = weights_.w1 * patch + weights_.b1;
      for (Eigen::Index i = 0; i < u.size(); ++i)
        if (u[i] < 0.0) u[i] *= weights_.leak;
      f.data.row(by * fw + bx) = (weights_.w2 * u + weights_.b2).transpose();
    }
  }
  return f;
}

PatchConvWeights make_toy_vision_weights(const ToyEncoderConfig& cfg) {
  if (cfg.feature_dim <= 0 || cfg.hidden_dim <= 0 || cfg.stride <= 0 || cfg.channels <= 0 ||
      !(cfg.output_scale > 0.0)) {
    throw std::invalid_argument("toy encoder: dimensions must be positive");
  }
  Rng rng(mix_seed(cfg.seed, 0x76697369ULL));
  PatchConvWeights w;
  w.stride = cfg.stride;
  w.channels = cfg.channels;
  const int in = cfg.stride * cfg.stride * cfg.channels;
  w.w1.resize(cfg.hidden_dim, in);
  w.b1.resize(cfg.hidden_dim);
  w.w2.resize(cfg.feature_dim, cfg.hidden_dim);
  w.b2.resize(cfg.feature_dim);
  // Every hidden and feature unit is tied to one colour channel. First-layer
  // weights and biases are positive, so pre-activations stay on the linear
  // side of the leaky ReLU for non-negative images, and a per-channel affine
  // pixel shift with a common gain becomes a per-feature affine shift of the
  // feature map.
  const int pp = cfg.stride * cfg.stride;
  for (int h = 0; h < cfg.hidden_dim; ++h) {
    const int c = h % cfg.channels;
    w.w1.row(h).setZero();
    const double g = rng.uniform(0.5, 1.5);
    for (int p = 0; p < pp; ++p) w.w1(h, p * cfg.channels + c) = g * rng.uniform(0.8, 1.2) / pp;
    w.b1[h] = rng.uniform(0.05, 0.2);
  }
  for (int i = 0; i < cfg.feature_dim; ++i) {
    const int c = i % cfg.channels;
    w.w2.row(i).setZero();
    for (int h = c; h < cfg.hidden_dim; h += cfg.channels) w.w2(i, h) = rng.normal();
    w.b2[i] = rng.uniform(-2.0, 2.0);
  }
  w.w2 *= cfg.output_scale;
  w.b2 *= cfg.output_scale;
  return w;
}

// ---------------------------------------------------------------- text

ToyTextEncoder::ToyTextEncoder(int dim, std::uint64_t seed, std::span<const std::string> class_tokens,
                               std::vector<std::pair<std::string, Vec>> domain_tokens)
    : dim_(dim), seed_(seed), domains_(std::move(domain_tokens)) {
  if (dim <= 0) throw std::invalid_argument("ToyTextEncoder: dimension must be positive");
  for (auto& [tok, v] : domains_) {
    if (v.size() != dim || v.norm() == 0.0) throw std::invalid_argument("ToyTextEncoder: bad domain vector");
    v /= v.norm();
    const auto toks = tokenize(tok);
    if (toks.size() != 1) throw std::invalid_argument("ToyTextEncoder: domain token must be a single word");
    tok = toks.front();
  }
  for (const auto& name : class_tokens) {
    const auto toks = tokenize(name);
    if (toks.size() != 1) throw std::invalid_argument("ToyTextEncoder: class token must be a single word: " + name);
    Rng rng(mix_seed(seed_, hash_string(toks.front())));
    classes_.emplace_back(toks.front(), random_unit_vector(dim_, rng));
  }
}

const Vec* ToyTextEncoder::class_token(const std::string& token) const {
  for (const auto& [t, v] : classes_)
    if (t == token) return &v;
  return nullptr;
}

const Vec* ToyTextEncoder::domain_token(const std::string& token) const {
  for (const auto& [t, v] : domains_)
    if (t == token) return &v;
  return nullptr;
}

Vec ToyTextEncoder::embed_string(std::string_view text) const {
  const auto toks = tokenize(text);
  Vec cls = Vec::Zero(dim_);
  Vec dom = Vec::Zero(dim_);
  int nc = 0;
  int nd = 0;
  for (const auto& t : toks) {
    if (const Vec* v = domain_token(t)) {
      dom += *v;
      ++nd;
    } else if (const Vec* c = class_token(t)) {
      cls += *c;
      ++nc;
    }
  }
  Vec out;
  if (nc > 0 && nd > 0) {
    out = 0.5 * cls.normalized() + 0.5 * dom.normalized();
  } else if (nd > 0) {
    out = dom;
  } else if (nc > 0) {
    out = cls;
  } else {
    std::string joined;
    for (const auto& t : toks) joined += t + " ";
    Rng rng(mix_seed(seed_, hash_string(joined)));
    return random_unit_vector(dim_, rng);
  }
  const double n = out.norm();
  if (n == 0.0) throw std::runtime_error("toy text embedding collapsed to zero");
  return out / n;
}

Vec ToyTextEncoder::encode_text(std::string_view prompt, std::span<const std::string> templates) const {
  if (tokenize(prompt).empty()) throw std::invalid_argument("encode_text: empty prompt");
  if (templates.empty()) throw std::invalid_argument("encode_text: empty template list");
  Vec acc = Vec::Zero(dim_);
  for (const auto& t : templates) acc += embed_string(fill_template(t, prompt));
  return acc / acc.norm();
}

EncoderPair make_toy_encoder(const ToyEncoderConfig& cfg, std::span<const std::string> class_names,
                             std::span<const DomainCalibration> calibration) {
  const std::uint64_t text_seed = mix_seed(cfg.seed, 0x74657874ULL);
  auto vision = std::make_shared<PatchConvEncoder>(make_toy_vision_weights(cfg));
  std::vector<std::pair<std::string, Vec>> domain_tokens;
  for (const auto& cal : calibration) {
    if (cal.images.empty()) throw std::invalid_argument("toy calibration for '" + cal.keyword + "' has no images");
    Vec acc = Vec::Zero(cfg.feature_dim);
    for (const auto& img : cal.images) acc += pool_scene(vision->encode_features(img));
    domain_tokens.emplace_back(cal.keyword, acc / static_cast<double>(cal.images.size()));
  }
  EncoderPair pair;
  pair.vision = vision;
  pair.text = std::make_shared<ToyTextEncoder>(cfg.feature_dim, text_seed, class_names, std::move(domain_tokens));
  pair.feature_dim = cfg.feature_dim;
  pair.text_dim = cfg.feature_dim;
  pair.descriptor = "toy";
  return pair;
}

ProjectedTableTextEncoder::ProjectedTableTextEncoder(std::vector<std::string> vocab, Mat token_table,
                                                     Mat projection)
    : vocab_(std::move(vocab)), table_(std::move(token_table)), projection_(std::move(projection)) {
  if (static_cast<Eigen::Index>(vocab_.size()) != table_.rows() || projection_.cols() != table_.cols() ||
      vocab_.empty()) {
    throw std::invalid_argument("ProjectedTableTextEncoder: inconsistent table shapes");
  }
}

Vec ProjectedTableTextEncoder::encode_text(std::string_view prompt, std::span<const std::string> templates) const {
  if (tokenize(prompt).empty()) throw std::invalid_argument("encode_text: empty prompt");
  if (templates.empty()) throw std::invalid_argument("encode_text: empty template list");
  Vec acc = Vec::Zero(output_dim());
  for (const auto& t : templates) {
    Vec e = Vec::Zero(table_.cols());
    for (const auto& tok : tokenize(fill_template(t, prompt))) {
      const auto it = std::find(vocab_.begin(), vocab_.end(), tok);
      if (it != vocab_.end()) e += table_.row(it - vocab_.begin()).transpose();
    }
    if (e.norm() == 0.0) continue;
    const Vec p = projection_ * e;
    if (p.norm() > 0.0) acc += p.normalized();
  }
  if (acc.norm() == 0.0) throw std::invalid_argument("encode_text: no known tokens in prompt");
  return acc.normalized();
}

// ---------------------------------------------------------------- external adapter

void save_external_encoder(const std::filesystem::path& dir, const ExternalEncoderFiles& f) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "encoder.txt", std::ios::binary);
    io::write_header(os, "ULDA-ENCODER",
                     {{"format_version", "1"},
                      {"feature_dim", std::to_string(f.vision.w2.rows())},
                      {"hidden_dim", std::to_string(f.vision.w1.rows())},
                      {"text_dim", std::to_string(f.token_table.cols())},
                      {"vocab_size", std::to_string(f.vocab.size())},
                      {"stride", std::to_string(f.vision.stride)},
                      {"channels", std::to_string(f.vision.channels)},
                      {"leak", io::format_double(f.vision.leak)}});
  }
  {
    std::ofstream os(dir / "vision.f64", std::ios::binary);
    io::write_mat(os, f.vision.w1);
    io::write_vec(os, f.vision.b1);
    io::write_mat(os, f.vision.w2);
    io::write_vec(os, f.vision.b2);
  }
  {
    std::ofstream os(dir / "text.f64", std::ios::binary);
    io::write_mat(os, f.token_table);
    io::write_mat(os, f.projection);
  }
  std::ofstream os(dir / "vocab.txt");
  for (const auto& v : f.vocab) os << v << '\n';
}

EncoderPair load_external_encoder(const std::filesystem::path& dir) {
  for (const char* name : {"encoder.txt", "vision.f64", "text.f64", "vocab.txt"}) {
    if (!std::filesystem::exists(dir / name)) {
      throw std::runtime_error("external encoder: missing '" + (dir / name).string() +
                               "'; expected encoder.txt, vision.f64, text.f64 and vocab.txt");
    }
  }
  std::ifstream hs(dir / "encoder.txt", std::ios::binary);
  const auto h = io::read_header(hs, "ULDA-ENCODER");
  if (io::header_get(h, "format_version") != "1") throw std::runtime_error("external encoder: unsupported format_version");
  const int d = std::stoi(io::header_get(h, "feature_dim"));
  const int hidden = std::stoi(io::header_get(h, "hidden_dim"));
  const int text_dim = std::stoi(io::header_get(h, "text_dim"));
  const int vocab_size = std::stoi(io::header_get(h, "vocab_size"));
  PatchConvWeights w;
  w.stride = std::stoi(io::header_get(h, "stride"));
  w.channels = std::stoi(io::header_get(h, "channels"));
  w.leak = std::stod(io::header_get(h, "leak"));
  {
    std::ifstream is(dir / "vision.f64", std::ios::binary);
    w.w1 = io::read_mat(is, hidden, w.stride * w.stride * w.channels);
    w.b1 = io::read_vec(is, hidden);
    w.w2 = io::read_mat(is, d, hidden);
    w.b2 = io::read_vec(is, d);
  }
  Mat table;
  Mat projection;
  {
    std::ifstream is(dir / "text.f64", std::ios::binary);
    table = io::read_mat(is, vocab_size, text_dim);
    projection = io::read_mat(is, d, text_dim);
  }
  std::vector<std::string> vocab;
  std::ifstream vs(dir / "vocab.txt");
  for (std::string line; std::getline(vs, line);)
    if (!line.empty()) vocab.push_back(line);
  if (static_cast<int>(vocab.size()) != vocab_size) throw std::runtime_error("external encoder: vocab size mismatch");

  EncoderPair pair;
  pair.vision = std::make_shared<PatchConvEncoder>(std::move(w));
  pair.text = std::make_shared<ProjectedTableTextEncoder>(std::move(vocab), std::move(table), std::move(projection));
  pair.feature_dim = d;
  pair.text_dim = text_dim;
  pair.descriptor = "external-adapter";
  return pair;
}

EncoderPair load_external_encoder_from_env() {
  const char* dir = std::getenv(kEncoderDirEnv);
  if (dir == nullptr || *dir == '\0') {
    throw std::runtime_error(std::string("external encoder requested but ") + kEncoderDirEnv +
                             " is not set; point it at a directory of exported encoder weights");
  }
  return load_external_encoder(dir);
}

}  // namespace ulda

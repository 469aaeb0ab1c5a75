#include "ulda/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace ulda {

using nlohmann::json;

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw std::invalid_argument("config: '" + name_ + "' must be an object");
  }
  ~Section() = default;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + name_ + "." + key + "': " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw std::invalid_argument("config: unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }
std::vector<double> from_vec(const Vec& v) { return {v.data(), v.data() + v.size()}; }

json toy_to_json(const ToySpec& t) {
  json shifts = json::array();
  for (const auto& [id, s] : t.domain_shifts) {
    shifts.push_back({{"id", id}, {"gain", from_vec(s.gain)}, {"bias", from_vec(s.bias)}, {"noise", s.noise}});
  }
  return {{"n_classes", t.n_classes}, {"image_size", t.image_size}, {"channels", t.channels},
          {"n_train", t.n_train},     {"n_eval_per_domain", t.n_eval_per_domain},
          {"n_calibration", t.n_calibration}, {"seed", t.seed}, {"shifts", shifts}};
}

json semantic_json(const RunConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("paths");
  return j;
}

}  // namespace

void RunConfig::validate() const {
  if (domains.empty()) throw std::invalid_argument("config: domains must be non-empty");
  std::set<std::string> ids;
  for (const auto& d : domains) {
    if (d.id.empty() || d.id.find(',') != std::string::npos || !ids.insert(d.id).second) {
      throw std::invalid_argument("config: domain ids must be unique, non-empty and comma-free");
    }
    if (d.description.empty()) throw std::invalid_argument("config: domain '" + d.id + "' needs a description");
  }
  if (classes.size() < 2) throw std::invalid_argument("config: need at least 2 classes");
  std::set<std::string> names(classes.begin(), classes.end());
  if (names.size() != classes.size()) throw std::invalid_argument("config: duplicate class names");
  const auto& s1 = stage1;
  for (double l : {s1.lambda_hc, s1.lambda_dc, s1.lambda_seg, s1.lambda_r, s1.lambda_p}) {
    if (!(l >= 0.0)) throw std::invalid_argument("config: lambda values must be >= 0");
  }
  if (!(s1.tau > 0.0)) throw std::invalid_argument("config: stage1.tau must be > 0");
  if (!(s1.eps >= 0.0)) throw std::invalid_argument("config: stage1.eps must be >= 0");
  if (s1.steps < 0 || !(s1.lr > 0.0) || !(s1.sigma_floor > 0.0)) throw std::invalid_argument("config: bad stage1 optimizer");
  if (stage2.iterations < 1) throw std::invalid_argument("config: stage2.iterations must be >= 1");
  if (stage2.batch_size < 1 || source.batch_size < 1) throw std::invalid_argument("config: batch sizes must be >= 1");
  if (source.iterations < 0 || source.hidden_dim < 1) throw std::invalid_argument("config: bad source section");
  if (encoder.kind != "toy" && encoder.kind != "external") {
    throw std::invalid_argument("config: encoder.kind must be 'toy' or 'external'");
  }
  if (encoder.feature_dim < 1 || encoder.hidden_dim < 1 || encoder.stride < 1 ||
      !(encoder.output_scale > 0.0)) {
    throw std::invalid_argument("config: encoder dimensions must be positive");
  }
  toy.validate();
  if (toy.n_classes != static_cast<int>(classes.size())) {
    throw std::invalid_argument("config: toy.n_classes must equal the number of classes");
  }
  if (toy.image_size % encoder.stride != 0) throw std::invalid_argument("config: toy.image_size must be divisible by encoder.stride");
  for (const auto& d : domains) toy.shift(d.id);
}

std::vector<std::string> RunConfig::domain_ids() const {
  std::vector<std::string> out;
  for (const auto& d : domains) out.push_back(d.id);
  return out;
}

std::filesystem::path RunConfig::resolve(const std::filesystem::path& out, const std::string& rel) const {
  const std::filesystem::path p(rel);
  return p.is_absolute() ? p : out / p;
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.domains = {{"night", "driving at night"}, {"fog", "driving in fog"}, {"rain", "driving under rain"}};
  cfg.classes = {"road", "car", "vegetation", "sky"};
  cfg.toy = default_toy_spec();
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  json domains = json::array();
  for (const auto& d : cfg.domains) domains.push_back({{"id", d.id}, {"description", d.description}});
  const auto& e = cfg.encoder;
  const auto& s1 = cfg.stage1;
  const auto& src = cfg.source;
  const auto& s2 = cfg.stage2;
  const auto& p = cfg.paths;
  return {
      {"seed", cfg.seed},
      {"encoder", {{"kind", e.kind}, {"feature_dim", e.feature_dim}, {"hidden_dim", e.hidden_dim},
                   {"output_scale", e.output_scale}, {"stride", e.stride}, {"seed", e.seed}}},
      {"domains", domains},
      {"classes", cfg.classes},
      {"prompts", {{"class_pattern", cfg.class_pattern}, {"templates", cfg.prompt_templates}}},
      {"stage1",
       {{"steps", s1.steps}, {"lr", s1.lr}, {"momentum", s1.momentum}, {"lambda_hc", s1.lambda_hc},
        {"lambda_dc", s1.lambda_dc}, {"lambda_seg", s1.lambda_seg}, {"lambda_r", s1.lambda_r},
        {"lambda_p", s1.lambda_p}, {"tau", s1.tau}, {"eps", s1.eps}, {"sigma_floor", s1.sigma_floor}}},
      {"source",
       {{"iterations", src.iterations}, {"lr", src.lr}, {"momentum", src.momentum}, {"batch_size", src.batch_size},
        {"hidden_dim", src.hidden_dim}}},
      {"stage2",
       {{"iterations", s2.iterations}, {"lr", s2.lr}, {"momentum", s2.momentum}, {"batch_size", s2.batch_size},
        {"rectifier", s2.rectifier}, {"beta_init", s2.beta_init}, {"freeze_beta", s2.freeze_beta}}},
      {"toy", toy_to_json(cfg.toy)},
      {"paths",
       {{"dataset", p.dataset}, {"source_checkpoint", p.source_checkpoint}, {"style_bank", p.style_bank},
        {"stage1_log", p.stage1_log}, {"checkpoint", p.checkpoint}, {"stage2_log", p.stage2_log},
        {"report", p.report}, {"baseline_report", p.baseline_report}}},
  };
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg = default_config();
  Section root(j, "config");
  root.get("seed", cfg.seed);
  if (const json* e = root.child("encoder")) {
    Section s(*e, "encoder");
    s.get("kind", cfg.encoder.kind);
    s.get("feature_dim", cfg.encoder.feature_dim);
    s.get("hidden_dim", cfg.encoder.hidden_dim);
    s.get("output_scale", cfg.encoder.output_scale);
    s.get("stride", cfg.encoder.stride);
    s.get("seed", cfg.encoder.seed);
    s.finish();
  }
  if (const json* d = root.child("domains")) {
    if (!d->is_array()) throw std::invalid_argument("config: 'domains' must be an array");
    cfg.domains.clear();
    for (const auto& item : *d) {
      Section s(item, "domains[]");
      DomainEntry de;
      s.get("id", de.id);
      s.get("description", de.description);
      s.finish();
      cfg.domains.push_back(de);
    }
  }
  root.get("classes", cfg.classes);
  if (const json* p = root.child("prompts")) {
    Section s(*p, "prompts");
    s.get("class_pattern", cfg.class_pattern);
    s.get("templates", cfg.prompt_templates);
    s.finish();
  }
  if (const json* s1 = root.child("stage1")) {
    Section s(*s1, "stage1");
    auto& t = cfg.stage1;
    s.get("steps", t.steps);
    s.get("lr", t.lr);
    s.get("momentum", t.momentum);
    s.get("lambda_hc", t.lambda_hc);
    s.get("lambda_dc", t.lambda_dc);
    s.get("lambda_seg", t.lambda_seg);
    s.get("lambda_r", t.lambda_r);
    s.get("lambda_p", t.lambda_p);
    s.get("tau", t.tau);
    s.get("eps", t.eps);
    s.get("sigma_floor", t.sigma_floor);
    s.finish();
  }
  if (const json* src = root.child("source")) {
    Section s(*src, "source");
    auto& t = cfg.source;
    s.get("iterations", t.iterations);
    s.get("lr", t.lr);
    s.get("momentum", t.momentum);
    s.get("batch_size", t.batch_size);
    s.get("hidden_dim", t.hidden_dim);
    s.finish();
  }
  if (const json* s2 = root.child("stage2")) {
    Section s(*s2, "stage2");
    auto& t = cfg.stage2;
    s.get("iterations", t.iterations);
    s.get("lr", t.lr);
    s.get("momentum", t.momentum);
    s.get("batch_size", t.batch_size);
    s.get("rectifier", t.rectifier);
    s.get("beta_init", t.beta_init);
    s.get("freeze_beta", t.freeze_beta);
    s.finish();
  }
  if (const json* toy = root.child("toy")) {
    Section s(*toy, "toy");
    auto& t = cfg.toy;
    s.get("n_classes", t.n_classes);
    s.get("image_size", t.image_size);
    s.get("channels", t.channels);
    s.get("n_train", t.n_train);
    s.get("n_eval_per_domain", t.n_eval_per_domain);
    s.get("n_calibration", t.n_calibration);
    s.get("seed", t.seed);
    if (const json* shifts = s.child("shifts")) {
      if (!shifts->is_array()) throw std::invalid_argument("config: 'toy.shifts' must be an array");
      t.domain_shifts.clear();
      for (const auto& item : *shifts) {
        Section ss(item, "toy.shifts[]");
        std::string id;
        std::vector<double> gain, bias;
        DomainShift sh;
        ss.get("id", id);
        ss.get("gain", gain);
        ss.get("bias", bias);
        ss.get("noise", sh.noise);
        ss.finish();
        sh.gain = to_vec(gain);
        sh.bias = to_vec(bias);
        t.domain_shifts.emplace_back(id, std::move(sh));
      }
    }
    s.finish();
  }
  if (const json* p = root.child("paths")) {
    Section s(*p, "paths");
    auto& t = cfg.paths;
    s.get("dataset", t.dataset);
    s.get("source_checkpoint", t.source_checkpoint);
    s.get("style_bank", t.style_bank);
    s.get("stage1_log", t.stage1_log);
    s.get("checkpoint", t.checkpoint);
    s.get("stage2_log", t.stage2_log);
    s.get("report", t.report);
    s.get("baseline_report", t.baseline_report);
    s.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is, nullptr, true, true);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.toy.seed = seed;
}

std::string config_digest(const RunConfig& cfg) { return sha256_hex(semantic_json(cfg).dump()); }

std::string stage1_digest(const RunConfig& cfg) {
  json j = semantic_json(cfg);
  j.erase("stage2");
  return sha256_hex(j.dump());
}

}  // namespace ulda

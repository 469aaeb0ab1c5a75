#include "ulda/pipeline.hpp"

#include "ulda/dcrl.hpp"
#include "ulda/hca.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ulda {

namespace {

void momentum_step(Mat& p, Mat& v, const Mat& g, double lr, double mom) {
  v = mom * v + g;
  p -= lr * v;
}

void momentum_step(Vec& p, Vec& v, const Vec& g, double lr, double mom) {
  v = mom * v + g;
  p -= lr * v;
}

void head_step(SegHead& h, SegHead& v, const SegHead& g, double lr, double mom) {
  momentum_step(h.w1, v.w1, g.w1, lr, mom);
  momentum_step(h.b1, v.b1, g.b1, lr, mom);
  momentum_step(h.w2, v.w2, g.w2, lr, mom);
  momentum_step(h.b2, v.b2, g.b2, lr, mom);
}

void scale_head(SegHead& g, double s) {
  g.w1 *= s;
  g.b1 *= s;
  g.w2 *= s;
  g.b2 *= s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << bytes;
  if (!os) throw std::runtime_error("write failed: " + p.string());
}

LogSink file_log(const std::filesystem::path& p, const LogSink& echo) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto os = std::make_shared<std::ofstream>(p, std::ios::app);
  if (!*os) throw std::runtime_error("cannot open log " + p.string());
  return [os, echo](const std::string& line) {
    *os << line << '\n';
    os->flush();
    if (echo) echo(line);
  };
}

void check_dataset_matches(const RunConfig& cfg, const std::filesystem::path& dir) {
  const ToySpec on_disk = load_toy_spec(dir);
  RunConfig a = cfg;
  RunConfig b = cfg;
  b.toy = on_disk;
  if (config_to_json(a)["toy"] != config_to_json(b)["toy"]) {
    throw std::runtime_error("dataset at " + dir.string() + " was generated from a different toy spec; rerun make-toy-data");
  }
}

}  // namespace

double stage1_total_loss(const Stage1Components& c, const Stage1Section& w) {
  if (!std::isfinite(c.hc)) throw std::runtime_error("stage1_total_loss: non-finite L_HC");
  if (!std::isfinite(c.dc)) throw std::runtime_error("stage1_total_loss: non-finite L_DC");
  if (!std::isfinite(c.seg)) throw std::runtime_error("stage1_total_loss: non-finite L_seg");
  return w.lambda_hc * c.hc + w.lambda_dc * c.dc + w.lambda_seg * c.seg;
}

EncoderPair build_encoder(const RunConfig& cfg) {
  if (cfg.encoder.kind == "external") {
    EncoderPair enc = load_external_encoder_from_env();
    if (enc.vision->channels() != cfg.toy.channels) throw std::runtime_error("external encoder channel count mismatch");
    return enc;
  }
  ToyEncoderConfig ec;
  ec.feature_dim = cfg.encoder.feature_dim;
  ec.hidden_dim = cfg.encoder.hidden_dim;
  ec.stride = cfg.encoder.stride;
  ec.output_scale = cfg.encoder.output_scale;
  ec.channels = cfg.toy.channels;
  ec.seed = cfg.encoder.seed;
  std::vector<DomainCalibration> cal;
  for (const auto& d : cfg.domains) {
    DomainCalibration c{domain_suffix(d.description), {}};
    for (auto& s : make_calibration_samples(cfg.toy, d.id)) c.images.push_back(std::move(s.image));
    cal.push_back(std::move(c));
  }
  return make_toy_encoder(ec, cfg.classes, cal);
}

std::vector<TextEmbeddingSet> encode_domain_texts(const RunConfig& cfg, const EncoderPair& enc) {
  std::vector<std::string> templates = cfg.prompt_templates ? imagenet_templates() : std::vector<std::string>{"{}"};
  std::vector<TextEmbeddingSet> out;
  for (const auto& d : cfg.domains) {
    const PromptSet ps = build_prompt_set(cfg.classes, d.description, cfg.class_pattern, templates);
    out.push_back(encode_class_text(enc, ps, d.id));
  }
  return out;
}

EncodedSource encode_source(const EncoderPair& enc, const SourceDataset& source) {
  EncodedSource out;
  for (const auto& s : source.samples) {
    out.ids.push_back(s.id);
    out.features.push_back(enc.encode_image_features(s.image));
    out.labels.push_back(s.labels);
  }
  return out;
}

SegHead train_source_head(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src, const LogSink& log) {
  if (src.features.empty()) throw std::invalid_argument("train_source_head: empty source");
  const auto& sc = cfg.source;
  SegHead head = make_seg_head(enc.feature_dim, sc.hidden_dim, static_cast<int>(cfg.classes.size()),
                               enc.vision->stride(), mix_seed(cfg.seed, hash_string("seg-head")));
  fit_input_normalization(head, src.features);
  SegHead vel = zero_head_like(head);
  Rng rng(mix_seed(cfg.seed, hash_string("source-head")));
  const int n_img = static_cast<int>(src.features.size());
  for (int it = 0; it < sc.iterations; ++it) {
    SegHead g = zero_head_like(head);
    double loss = 0.0;
    for (int b = 0; b < sc.batch_size; ++b) {
      const int i = rng.uniform_int(0, n_img - 1);
      HeadCache cache;
      const Mat logits = head_forward(src.features[i], head, &cache);
      Mat gl;
      loss += seg_loss(logits, src.labels[i], &gl).value;
      head_backward(src.features[i], head, cache, gl, &g);
    }
    scale_head(g, 1.0 / sc.batch_size);
    head_step(head, vel, g, sc.lr, sc.momentum);
    if (log && (it % 100 == 0 || it + 1 == sc.iterations)) {
      log("source iter=" + std::to_string(it) + " seg_loss=" + fmt(loss / sc.batch_size));
    }
  }
  return head;
}

Stage1Objective::Stage1Objective(const RunConfig& cfg, const EncodedSource& src, std::vector<TextEmbeddingSet> texts,
                                 const SegHead& head, int stride)
    : cfg_(cfg), src_(src), texts_(std::move(texts)), head_(head) {
  for (std::size_t i = 0; i < src.features.size(); ++i) {
    z_.push_back(standardize(src.features[i], cfg.stage1.eps));
    y_feat_.push_back(downsample_labels(src.labels[i], stride));
  }
}

ObjectiveValue Stage1Objective::operator()(std::size_t image, std::span<const StyleParams> styles,
                                           std::span<StyleGrad> grads) const {
  std::vector<StyleGrad> g;
  ObjectiveValue v = evaluate(image, styles, &g);
  for (std::size_t j = 0; j < grads.size(); ++j) grads[j] = std::move(g[j]);
  return v;
}

ObjectiveValue Stage1Objective::evaluate(std::size_t image, std::span<const StyleParams> styles,
                                         std::vector<StyleGrad>* grads) const {
  const auto& s1 = cfg_.stage1;
  const std::size_t m = styles.size();
  if (m != texts_.size()) throw std::invalid_argument("Stage1Objective: style count != domain count");
  const FeatureMap& f = src_.features[image];
  const Mat& z = z_[image];
  const LabelMap& y = y_feat_[image];
  const LabelMap& y_full = src_.labels[image];
  const int n = texts_.front().classes();
  const bool want = grads != nullptr;

  std::vector<FeatureMap> fst(m);
  std::vector<Mat> g_f(m);
  Stage1Components comp;
  ObjectiveValue out;
  const HcaWeights hw{s1.lambda_r, s1.lambda_p};
  for (std::size_t j = 0; j < m; ++j) {
    fst[j] = FeatureMap(f.h, f.w, pin_standardized(z, styles[j]));
    const Vec pooled = pool_scene(fst[j]);
    const HcaLoss l = hca_loss(fst[j], pooled, texts_[j], y, hw, s1.tau, want);
    comp.hc += l.total;
    out.scene.push_back(l.scene);
    if (want) g_f[j] = s1.lambda_hc * (l.grad_features + pool_scene_backward(fst[j], l.grad_pooled));

    HeadCache cache;
    const Mat logits = head_forward(fst[j], head_, &cache);
    Mat gl;
    comp.seg += seg_loss(logits, y_full, want ? &gl : nullptr).value;
    if (want) g_f[j] += s1.lambda_seg * head_backward(fst[j], head_, cache, gl, nullptr);
  }

  if (m >= 2) {
    const MaskSet masks = label_to_masks(y, n);
    std::vector<PrototypeSet> protos;
    for (std::size_t j = 0; j < m; ++j) {
      protos.push_back(masked_average_pool(fst[j], masks));
      protos.back().domain_id = texts_[j].domain_id;
    }
    const StackedEmbeddings c = stack_domains(std::span<const PrototypeSet>(protos));
    const StackedEmbeddings t = stack_domains(std::span<const TextEmbeddingSet>(texts_));
    Mat g_c;
    comp.dc = dcrl_loss(c, t, want ? &g_c : nullptr).value;
    if (want) {
      for (std::size_t j = 0; j < m; ++j) {
        const Mat block = g_c.middleRows(static_cast<Eigen::Index>(j) * n, n);
        g_f[j] += s1.lambda_dc * masked_average_pool_backward(masks, block);
      }
    }
  }

  out.total = stage1_total_loss(comp, s1);
  out.components = {{"hc", comp.hc}, {"dc", comp.dc}, {"seg", comp.seg}};
  if (want) {
    grads->clear();
    for (std::size_t j = 0; j < m; ++j) grads->push_back(pin_backward(z, g_f[j]));
  }
  return out;
}

Stage1Result run_stage1(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src, const SegHead& head,
                        const LogSink& log) {
  if (src.features.empty()) throw std::invalid_argument("run_stage1: empty source");
  const std::string head_before = head_hash(head);
  const Stage1Objective objective(cfg, src, encode_domain_texts(cfg, enc), head, enc.vision->stride());

  MiningConfig mc;
  mc.steps = cfg.stage1.steps;
  mc.lr = cfg.stage1.lr;
  mc.momentum = cfg.stage1.momentum;
  mc.sigma_floor = cfg.stage1.sigma_floor;
  mc.eps = cfg.stage1.eps;

  Stage1Result res;
  const auto domains = cfg.domain_ids();
  auto component = [](const ObjectiveValue& v, const char* name) {
    for (const auto& [k, x] : v.components)
      if (k == name) return x;
    return 0.0;
  };
  MiningLog mining_log = [&](std::size_t image, int step, const ObjectiveValue& v) {
    const double dc = component(v, "dc");
    if (step == 0) res.mean_initial_dc += dc;
    if (step == mc.steps) res.mean_final_dc += dc;
    if (log) {
      double scene = 0.0;
      for (double s : v.scene) scene += s;
      log("stage1 image=" + src.ids[image] + " step=" + std::to_string(step) + " total=" + fmt(v.total) +
          " hc=" + fmt(component(v, "hc")) + " dc=" + fmt(dc) + " seg=" + fmt(component(v, "seg")) +
          " scene_mean=" + fmt(scene / static_cast<double>(v.scene.size())));
    }
  };
  res.bank = mine_styles(src.features, src.ids, domains,
                         [&](std::size_t i, std::span<const StyleParams> s, std::span<StyleGrad> g) {
                           return objective(i, s, g);
                         },
                         mc, mining_log);
  res.bank.config_digest = stage1_digest(cfg);
  const double n_img = static_cast<double>(src.features.size());
  res.mean_initial_dc /= n_img;
  res.mean_final_dc /= n_img;
  for (const auto& e : res.bank.entries) {
    res.mean_initial_scene += e.initial_alignment_loss;
    res.mean_final_scene += e.final_alignment_loss;
  }
  res.mean_initial_scene /= static_cast<double>(res.bank.entries.size());
  res.mean_final_scene /= static_cast<double>(res.bank.entries.size());
  if (head_hash(head) != head_before) throw std::logic_error("run_stage1 modified the segmentation head");
  return res;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  std::ostringstream os(std::ios::binary);
  const SegHead& h = c.head;
  io::write_header(os, "ULDA-CHECKPOINT",
                   {{"format_version", std::to_string(kCheckpointFormatVersion)},
                    {"config_digest", c.config_digest},
                    {"iteration", std::to_string(c.iteration)},
                    {"rng_state", c.rng_state},
                    {"feature_dim", std::to_string(h.in_dim())},
                    {"hidden_dim", std::to_string(h.hidden())},
                    {"classes", std::to_string(h.classes())},
                    {"upsample", std::to_string(h.upsample)},
                    {"rectifier", c.rectifier ? "1" : "0"},
                    {"encoding", "little-endian float64, row-major"}});
  io::write_vec(os, h.in_shift);
  io::write_vec(os, h.in_scale);
  io::write_mat(os, h.w1);
  io::write_vec(os, h.b1);
  io::write_mat(os, h.w2);
  io::write_vec(os, h.b2);
  if (c.rectifier) {
    if (c.rectifier->dim() != h.in_dim()) throw std::invalid_argument("checkpoint: rectifier dimension mismatch");
    io::write_f64(os, c.rectifier->beta);
    io::write_mat(os, c.rectifier->weight);
    io::write_vec(os, c.rectifier->bias);
  }
  return os.str();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  const io::Header hd = io::read_header(is, "ULDA-CHECKPOINT");
  if (std::stoi(io::header_get(hd, "format_version")) != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format_version");
  }
  Checkpoint c;
  c.config_digest = io::header_get(hd, "config_digest");
  c.iteration = std::stoi(io::header_get(hd, "iteration"));
  c.rng_state = io::header_get(hd, "rng_state");
  const int d = std::stoi(io::header_get(hd, "feature_dim"));
  const int hidden = std::stoi(io::header_get(hd, "hidden_dim"));
  const int n = std::stoi(io::header_get(hd, "classes"));
  c.head.upsample = std::stoi(io::header_get(hd, "upsample"));
  c.head.in_shift = io::read_vec(is, d);
  c.head.in_scale = io::read_vec(is, d);
  if ((c.head.in_scale.array() <= 0.0).any()) throw std::runtime_error("checkpoint: non-positive input scale");
  c.head.w1 = io::read_mat(is, hidden, d);
  c.head.b1 = io::read_vec(is, hidden);
  c.head.w2 = io::read_mat(is, n, hidden);
  c.head.b2 = io::read_vec(is, n);
  if (io::header_get(hd, "rectifier") == "1") {
    RectifierParams r;
    r.beta = io::read_f64(is);
    r.weight = io::read_mat(is, 2 * d, d);
    r.bias = io::read_vec(is, 2 * d);
    c.rectifier = std::move(r);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { write_file(path, serialize_checkpoint(c)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

Stage2Result run_stage2(const RunConfig& cfg, const EncoderPair& enc, const EncodedSource& src, const StyleBank& bank,
                        const SegHead& head, const LogSink& log) {
  const auto& s2 = cfg.stage2;
  const double eps = cfg.stage1.eps;
  if (bank.config_digest != stage1_digest(cfg)) {
    throw std::runtime_error("style bank digest does not match the configuration; rerun stage1");
  }
  const auto entries = bank.usable_entries();
  if (entries.empty()) throw std::runtime_error("run_stage2: style bank has no usable entries");
  if (src.features.empty()) throw std::invalid_argument("run_stage2: empty source");
  if (bank.feature_dim != enc.feature_dim) throw std::runtime_error("run_stage2: bank feature_dim mismatch");

  const auto texts = encode_domain_texts(cfg, enc);
  auto domain_emb = [&](const std::string& id) -> const Vec& {
    for (const auto& t : texts)
      if (t.domain_id == id) return t.domain_emb;
    throw std::runtime_error("bank entry has unknown domain " + id);
  };

  Stage2Result res;
  Checkpoint& ck = res.checkpoint;
  ck.head = head;
  SegHead head_vel = zero_head_like(head);
  RectifierParams rect_vel;
  if (s2.rectifier) {
    ck.rectifier = make_rectifier(enc.feature_dim, mix_seed(cfg.seed, hash_string("rectifier")), s2.beta_init);
    rect_vel = zero_rectifier_like(*ck.rectifier);
  }
  Rng rng(mix_seed(cfg.seed, hash_string("stage2")));
  const int n_img = static_cast<int>(src.features.size());
  const int n_entries = static_cast<int>(entries.size());

  for (int it = 0; it < s2.iterations; ++it) {
    SegHead g_head = zero_head_like(ck.head);
    RectifierParams g_rect;
    if (ck.rectifier) g_rect = zero_rectifier_like(*ck.rectifier);
    double loss = 0.0;
    for (int b = 0; b < s2.batch_size; ++b) {
      const int i = rng.uniform_int(0, n_img - 1);
      const StyleBankEntry& e = *entries[rng.uniform_int(0, n_entries - 1)];
      const FeatureMap f_st = pin(src.features[i], e.style, eps);
      FeatureMap f_in = f_st;
      TextStats ts;
      const Vec* emb = nullptr;
      if (ck.rectifier) {
        emb = &domain_emb(e.domain_id);
        ts = text_to_stats(*emb, *ck.rectifier);
        f_in = rectify(f_st, ts.mu, ts.sigma, ck.rectifier->beta, eps);
      }
      HeadCache cache;
      const Mat logits = head_forward(f_in, ck.head, &cache);
      Mat gl;
      loss += seg_loss(logits, src.labels[i], &gl).value;
      const Mat g_in = head_backward(f_in, ck.head, cache, gl, &g_head);
      if (ck.rectifier) {
        const RectifyGrad rg = rectify_backward(f_st, ts.mu, ts.sigma, ck.rectifier->beta, eps, g_in);
        text_to_stats_backward(*emb, rg.mu, rg.sigma, g_rect);
        g_rect.beta += rg.beta;
      }
    }
    const double inv = 1.0 / s2.batch_size;
    scale_head(g_head, inv);
    head_step(ck.head, head_vel, g_head, s2.lr, s2.momentum);
    if (ck.rectifier) {
      RectifierParams& r = *ck.rectifier;
      momentum_step(r.weight, rect_vel.weight, inv * g_rect.weight, s2.lr, s2.momentum);
      momentum_step(r.bias, rect_vel.bias, inv * g_rect.bias, s2.lr, s2.momentum);
      if (!s2.freeze_beta) {
        rect_vel.beta = s2.momentum * rect_vel.beta + inv * g_rect.beta;
        r.beta -= s2.lr * rect_vel.beta;
      }
    }
    const double mean_loss = loss * inv;
    if (!std::isfinite(mean_loss)) throw std::runtime_error("run_stage2: non-finite loss at iteration " + std::to_string(it));
    res.losses.push_back(mean_loss);
    if (log) {
      log("stage2 iter=" + std::to_string(it) + " seg_loss=" + fmt(mean_loss) +
          (ck.rectifier ? " beta=" + fmt(ck.rectifier->beta) : std::string()));
    }
  }
  ck.iteration = s2.iterations;
  ck.rng_state = rng.state_summary();
  ck.config_digest = config_digest(cfg);
  return res;
}

LabelMap DomainBlindPredictor::predict(const Image& image) const {
  const FeatureMap f = enc_.encode_image_features(image);
  return predict_labels(head_forward(f, head_), f.h * head_.upsample, f.w * head_.upsample);
}

EvalResult evaluate(const DomainBlindPredictor& model, const EvalSplit& split, int n_classes) {
  if (model.classes() != n_classes) throw std::invalid_argument("evaluate: head class count does not match config");
  EvalResult res;
  std::vector<std::pair<std::string, ConfusionMatrix>> per_domain;
  for (const auto& d : split.domains) {
    ConfusionMatrix cm(n_classes);
    for (const auto& s : d.samples) {
      validate_labels(s.labels, n_classes);
      LabelMap pred = model.predict(s.image);
      accumulate_confusion(pred, s.labels, cm);
      res.predictions.emplace_back(s.id, std::move(pred));
    }
    per_domain.emplace_back(d.domain_id, std::move(cm));
  }
  res.report = compute_metrics(per_domain);
  return res;
}

nlohmann::json report_document(const MetricsReport& report, const std::string& model, const std::string& digest) {
  nlohmann::json j;
  j["format_version"] = kReportFormatVersion;
  j["model"] = model;
  j["config_digest"] = digest;
  j["metrics"] = report.to_json();
  return j;
}

void cmd_make_toy_data(const RunConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const auto dir = cfg.resolve(opt.out, cfg.paths.dataset);
  if (std::filesystem::exists(dir / "manifest.txt") && !opt.force) {
    throw std::runtime_error("dataset already exists at " + dir.string() + " (use --force to overwrite)");
  }
  const SourceDataset source = generate_source(cfg.toy);
  const EvalSplit split = make_eval_split(cfg.toy);
  if (cfg.encoder.kind == "toy") {
    const EncoderPair enc = build_encoder(cfg);
    const SeparabilityReport sep =
        domain_separability(source, split, [&](const Image& img) { return enc.pool(enc.encode_image_features(img)); });
    if (opt.log) opt.log("separability ratio=" + fmt(sep.ratio()));
    if (!(sep.ratio() > 5.0)) {
      throw std::runtime_error("toy domains are not separable enough (ratio " + fmt(sep.ratio()) + " <= 5)");
    }
  }
  save_toy_dataset(dir, cfg.toy, source, split);
  if (opt.log) opt.log("wrote dataset to " + dir.string());
}

void cmd_stage1(const RunConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const auto data = cfg.resolve(opt.out, cfg.paths.dataset);
  check_dataset_matches(cfg, data);
  const auto bank_path = cfg.resolve(opt.out, cfg.paths.style_bank);
  const std::string digest = stage1_digest(cfg);
  if (std::filesystem::exists(bank_path) && !opt.force) {
    const StyleBank existing = load_style_bank(bank_path);
    if (existing.config_digest != digest) {
      throw std::runtime_error("existing style bank at " + bank_path.string() +
                               " was built from a different config (use --force to overwrite)");
    }
  }
  const LogSink log = file_log(cfg.resolve(opt.out, cfg.paths.stage1_log), opt.log);
  const EncoderPair enc = build_encoder(cfg);
  const EncodedSource src = encode_source(enc, load_source(data));

  Checkpoint source_ckpt;
  source_ckpt.head = train_source_head(cfg, enc, src, log);
  source_ckpt.config_digest = digest;
  source_ckpt.iteration = cfg.source.iterations;
  source_ckpt.rng_state = "source";
  save_checkpoint(source_ckpt, cfg.resolve(opt.out, cfg.paths.source_checkpoint));

  const Stage1Result r = run_stage1(cfg, enc, src, source_ckpt.head, log);
  save_style_bank(r.bank, bank_path);
  log("stage1 summary entries=" + std::to_string(r.bank.entries.size()) + " scene_initial=" +
      fmt(r.mean_initial_scene) + " scene_final=" + fmt(r.mean_final_scene) + " dc_initial=" + fmt(r.mean_initial_dc) +
      " dc_final=" + fmt(r.mean_final_dc));
}

void cmd_stage2(const RunConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const auto data = cfg.resolve(opt.out, cfg.paths.dataset);
  check_dataset_matches(cfg, data);
  const StyleBank bank = load_style_bank(cfg.resolve(opt.out, cfg.paths.style_bank));
  if (bank.config_digest != stage1_digest(cfg)) {
    throw std::runtime_error("style bank was built from a different config; rerun stage1");
  }
  const Checkpoint source_ckpt = load_checkpoint(cfg.resolve(opt.out, cfg.paths.source_checkpoint));
  if (source_ckpt.config_digest != bank.config_digest) throw std::runtime_error("source head does not match the style bank");
  const auto ckpt_path = cfg.resolve(opt.out, cfg.paths.checkpoint);
  if (std::filesystem::exists(ckpt_path) && !opt.force) {
    if (load_checkpoint(ckpt_path).config_digest != config_digest(cfg)) {
      throw std::runtime_error("existing checkpoint at " + ckpt_path.string() +
                               " was built from a different config (use --force to overwrite)");
    }
  }
  const LogSink log = file_log(cfg.resolve(opt.out, cfg.paths.stage2_log), opt.log);
  const EncoderPair enc = build_encoder(cfg);
  const EncodedSource src = encode_source(enc, load_source(data));
  const Stage2Result r = run_stage2(cfg, enc, src, bank, source_ckpt.head, log);
  save_checkpoint(r.checkpoint, ckpt_path);
}

MetricsReport cmd_eval(const RunConfig& cfg, const CommandOptions& opt, bool baseline) {
  cfg.validate();
  const auto data = cfg.resolve(opt.out, cfg.paths.dataset);
  check_dataset_matches(cfg, data);
  Checkpoint ck;
  if (baseline) {
    ck = load_checkpoint(cfg.resolve(opt.out, cfg.paths.source_checkpoint));
    if (ck.config_digest != stage1_digest(cfg)) throw std::runtime_error("source head does not match the config");
  } else {
    ck = load_checkpoint(cfg.resolve(opt.out, cfg.paths.checkpoint));
    if (ck.config_digest != config_digest(cfg)) throw std::runtime_error("checkpoint does not match the config");
  }
  const DomainBlindPredictor model(build_encoder(cfg), ck.head);
  const EvalResult r = evaluate(model, load_eval_split(data), static_cast<int>(cfg.classes.size()));
  const auto path = cfg.resolve(opt.out, baseline ? cfg.paths.baseline_report : cfg.paths.report);
  write_file(path, report_document(r.report, baseline ? "source-only" : "ulda", config_digest(cfg)).dump(2) + "\n");
  if (opt.log) opt.log("mean_miou=" + fmt(r.report.mean_miou) + " report=" + path.string());
  return r.report;
}

}  // namespace ulda

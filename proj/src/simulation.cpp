#include "ulda/simulation.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ulda {

ChannelStats channel_stats(const FeatureMap& f, double eps) {
  const int n = f.pixels();
  if (n < 2) throw std::invalid_argument("channel_stats: need at least 2 spatial positions");
  if (eps < 0.0) throw std::invalid_argument("channel_stats: eps must be >= 0");
  ChannelStats s;
  s.mean = f.data.colwise().mean().transpose();
  const Mat centered = f.data.rowwise() - s.mean.transpose();
  const Vec var = centered.colwise().squaredNorm().transpose() / static_cast<double>(n);
  s.std = (var.array() + eps).sqrt().matrix();
  return s;
}

Mat channel_stats_backward(const FeatureMap& f, const ChannelStats& stats, const Vec& g_mean, const Vec& g_std) {
  const double n = f.pixels();
  const Mat centered = f.data.rowwise() - stats.mean.transpose();
  Mat g = centered.array().rowwise() * (g_std.array() / (n * stats.std.array())).transpose();
  g.rowwise() += (g_mean / n).transpose();
  return g;
}

Mat standardize(const FeatureMap& f, double eps) {
  const ChannelStats s = channel_stats(f, eps);
  if ((s.std.array() == 0.0).any()) {
    throw std::invalid_argument("standardize: zero standard deviation (constant channel with eps = 0)");
  }
  return (f.data.rowwise() - s.mean.transpose()).array().rowwise() / s.std.transpose().array();
}

Mat standardize_backward(const Mat& z, const Vec& std, const Mat& g_z) {
  const double n = static_cast<double>(z.rows());
  const Vec mean_g = g_z.colwise().mean().transpose();
  const Vec mean_gz = (g_z.array() * z.array()).colwise().sum().transpose() / n;
  Mat g = g_z;
  g.rowwise() -= mean_g.transpose();
  g.array() -= z.array().rowwise() * mean_gz.transpose().array();
  g.array().rowwise() /= std.transpose().array();
  return g;
}

StyleParams style_from_stats(const ChannelStats& s, std::string domain_id) {
  return StyleParams{s.mean, s.std, std::move(domain_id)};
}

Mat pin_standardized(const Mat& z, const StyleParams& style) {
  if (style.mu.size() != z.cols() || style.sigma.size() != z.cols()) {
    throw std::invalid_argument("pin: style dimension does not match feature dimension");
  }
  Mat out = z.array().rowwise() * style.sigma.transpose().array();
  out.rowwise() += style.mu.transpose();
  return out;
}

FeatureMap pin(const FeatureMap& f, const StyleParams& style, double eps) {
  if (style.mu.size() != f.dim() || style.sigma.size() != f.dim()) {
    throw std::invalid_argument("pin: style dimension does not match feature dimension");
  }
  return FeatureMap(f.h, f.w, pin_standardized(standardize(f, eps), style));
}

StyleGrad pin_backward(const Mat& z, const Mat& g_out) {
  StyleGrad g;
  g.mu = g_out.colwise().sum().transpose();
  g.sigma = (g_out.array() * z.array()).colwise().sum().transpose();
  return g;
}

double scene_alignment_loss(const Vec& pooled, const Vec& trg_emb, Vec* g_pooled) {
  if (pooled.size() != trg_emb.size()) throw std::invalid_argument("scene_alignment_loss: dimension mismatch");
  if (pooled.norm() == 0.0 || trg_emb.norm() == 0.0) {
    throw std::invalid_argument("scene_alignment_loss: zero vector");
  }
  if (g_pooled) *g_pooled = -cosine_grad(pooled, trg_emb);
  return 1.0 - cosine(pooled, trg_emb);
}

std::vector<const StyleBankEntry*> StyleBank::usable_entries() const {
  std::vector<const StyleBankEntry*> out;
  for (const auto& e : entries)
    if (e.status == EntryStatus::ok) out.push_back(&e);
  return out;
}

namespace {

bool finite_value(const ObjectiveValue& v) {
  if (!std::isfinite(v.total)) return false;
  for (double s : v.scene)
    if (!std::isfinite(s)) return false;
  return true;
}

bool finite_grads(std::span<const StyleGrad> g) {
  for (const auto& x : g)
    if (!x.mu.allFinite() || !x.sigma.allFinite()) return false;
  return true;
}

}  // namespace

StyleBank mine_styles(std::span<const FeatureMap> features, std::span<const std::string> image_ids,
                      std::span<const std::string> domains, const StyleObjective& objective,
                      const MiningConfig& cfg, const MiningLog& log) {
  if (features.empty()) throw std::invalid_argument("mine_styles: no images");
  if (domains.empty()) throw std::invalid_argument("mine_styles: no domains");
  if (image_ids.size() != features.size()) throw std::invalid_argument("mine_styles: image id count mismatch");
  if (cfg.steps < 0 || cfg.lr <= 0.0) throw std::invalid_argument("mine_styles: invalid optimizer settings");

  const std::size_t m = domains.size();
  StyleBank bank;
  bank.feature_dim = features.front().dim();
  bank.domains.assign(domains.begin(), domains.end());

  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].dim() != bank.feature_dim) throw std::invalid_argument("mine_styles: feature dimension mismatch");
    const ChannelStats init = channel_stats(features[i], cfg.eps);
    std::vector<StyleParams> styles;
    for (const auto& d : domains) styles.push_back(style_from_stats(init, d));
    std::vector<StyleGrad> grads(m);
    std::vector<StyleGrad> velocity(m, StyleGrad{Vec::Zero(bank.feature_dim), Vec::Zero(bank.feature_dim)});

    std::vector<double> initial_scene;
    ObjectiveValue value;
    bool failed = false;
    for (int step = 0; step <= cfg.steps; ++step) {
      value = objective(i, styles, grads);
      if (log) log(i, step, value);
      if (!finite_value(value) || value.scene.size() != m || !finite_grads(grads)) {
        failed = true;
        break;
      }
      if (step == 0) initial_scene = value.scene;
      if (step == cfg.steps) break;
      for (std::size_t j = 0; j < m; ++j) {
        velocity[j].mu = cfg.momentum * velocity[j].mu + grads[j].mu;
        velocity[j].sigma = cfg.momentum * velocity[j].sigma + grads[j].sigma;
        styles[j].mu -= cfg.lr * velocity[j].mu;
        styles[j].sigma -= cfg.lr * velocity[j].sigma;
        styles[j].sigma = styles[j].sigma.cwiseMax(cfg.sigma_floor);
      }
    }

    for (std::size_t j = 0; j < m; ++j) {
      StyleBankEntry e;
      e.domain_id = domains[j];
      e.image_id = image_ids[i];
      if (failed) {
        e.status = EntryStatus::non_finite;
        e.style = style_from_stats(init, domains[j]);
        e.initial_alignment_loss = initial_scene.empty() ? std::nan("") : initial_scene[j];
        e.final_alignment_loss = e.initial_alignment_loss;
      } else {
        e.style = styles[j];
        e.initial_alignment_loss = initial_scene[j];
        e.final_alignment_loss = value.scene[j];
      }
      bank.entries.push_back(std::move(e));
    }
  }
  return bank;
}

std::string serialize_style_bank(const StyleBank& bank) {
  std::ostringstream os(std::ios::binary);
  std::string domain_list;
  for (std::size_t i = 0; i < bank.domains.size(); ++i) {
    if (bank.domains[i].find(',') != std::string::npos) throw std::invalid_argument("domain id contains ','");
    domain_list += (i ? "," : "") + bank.domains[i];
  }
  io::write_header(os, "ULDA-STYLEBANK",
                   {{"format_version", std::to_string(kStyleBankFormatVersion)},
                    {"feature_dim", std::to_string(bank.feature_dim)},
                    {"entry_count", std::to_string(bank.entries.size())},
                    {"config_digest", bank.config_digest},
                    {"domains", domain_list},
                    {"encoding", "little-endian float64"}});
  for (const auto& e : bank.entries) {
    if (e.style.mu.size() != bank.feature_dim || e.style.sigma.size() != bank.feature_dim) {
      throw std::invalid_argument("style bank entry has wrong dimension");
    }
    io::write_string(os, e.domain_id);
    io::write_string(os, e.image_id);
    io::write_u8(os, static_cast<std::uint8_t>(e.status));
    io::write_vec(os, e.style.mu);
    io::write_vec(os, e.style.sigma);
    io::write_f64(os, e.initial_alignment_loss);
    io::write_f64(os, e.final_alignment_loss);
  }
  return os.str();
}

StyleBank deserialize_style_bank(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  const auto h = io::read_header(is, "ULDA-STYLEBANK");
  if (std::stoi(io::header_get(h, "format_version")) != kStyleBankFormatVersion) {
    throw std::runtime_error("style bank: unsupported format_version");
  }
  StyleBank bank;
  bank.feature_dim = std::stoi(io::header_get(h, "feature_dim"));
  bank.config_digest = io::header_get(h, "config_digest");
  bank.domains = io::split(io::header_get(h, "domains"), ',');
  const auto count = std::stoull(io::header_get(h, "entry_count"));
  for (std::size_t k = 0; k < count; ++k) {
    StyleBankEntry e;
    e.domain_id = io::read_string(is);
    e.image_id = io::read_string(is);
    const auto status = io::read_u8(is);
    if (status > 1) throw std::runtime_error("style bank: bad entry status");
    e.status = static_cast<EntryStatus>(status);
    e.style.mu = io::read_vec(is, bank.feature_dim);
    e.style.sigma = io::read_vec(is, bank.feature_dim);
    e.style.domain_id = e.domain_id;
    e.initial_alignment_loss = io::read_f64(is);
    e.final_alignment_loss = io::read_f64(is);
    bank.entries.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("style bank: trailing bytes");
  return bank;
}

void save_style_bank(const StyleBank& bank, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write style bank: " + path.string());
  const std::string bytes = serialize_style_bank(bank);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

StyleBank load_style_bank(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read style bank: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return deserialize_style_bank(buf.str());
}

}  // namespace ulda

#include "ulda/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ulda {

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;
constexpr std::uint64_t kCalibrationStream = 3;

Vec vec3(double a, double b, double c) {
  Vec v(3);
  v << a, b, c;
  return v;
}

std::string join_vec(const Vec& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += io::format_double(v[i]);
  }
  return s;
}

Vec parse_vec(const std::string& s) {
  const auto parts = io::split(s, ',');
  Vec v(static_cast<Eigen::Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) v[static_cast<Eigen::Index>(i)] = std::stod(parts[i]);
  return v;
}

std::uint64_t eval_seed(const ToySpec& spec, const std::string& domain, int k) {
  return mix_seed(mix_seed(mix_seed(spec.seed, kEvalStream), hash_string(domain)), static_cast<std::uint64_t>(k));
}

void write_images(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples)
    for (double v : s.image.px) io::write_f64(os, v);
}

void write_labels(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples)
    for (auto v : s.labels.labels) io::write_u8(os, v);
}

std::vector<Sample> read_samples(const std::filesystem::path& dir, const std::string& prefix, const ToySpec& spec,
                                 int count, const std::string& id_prefix) {
  std::ifstream im(dir / (prefix + "_images.f64"), std::ios::binary);
  std::ifstream lb(dir / (prefix + "_labels.u8"), std::ios::binary);
  if (!im || !lb) throw std::runtime_error("missing data files for '" + prefix + "' in " + dir.string());
  std::vector<Sample> out;
  for (int k = 0; k < count; ++k) {
    Sample s;
    s.id = id_prefix + std::to_string(k);
    s.image = Image(spec.image_size, spec.image_size, spec.channels);
    for (auto& v : s.image.px) v = io::read_f64(im);
    s.labels = LabelMap(spec.image_size, spec.image_size);
    for (auto& v : s.labels.labels) v = io::read_u8(lb);
    out.push_back(std::move(s));
  }
  if (im.peek() != std::char_traits<char>::eof() || lb.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("trailing bytes in data files for '" + prefix + "'");
  }
  return out;
}

}  // namespace

void ToySpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("ToySpec: image_size must be >= 8");
  if (n_classes < 2 || n_classes > 254) throw std::invalid_argument("ToySpec: n_classes must be in [2, 254]");
  if (channels < 1) throw std::invalid_argument("ToySpec: channels must be positive");
  if (n_train < 1 || n_eval_per_domain < 0 || n_calibration < 0) throw std::invalid_argument("ToySpec: bad counts");
  std::set<std::string> seen;
  for (const auto& [id, s] : domain_shifts) {
    if (id.empty() || !seen.insert(id).second) throw std::invalid_argument("ToySpec: domain ids must be unique and non-empty");
    if (s.gain.size() != channels || s.bias.size() != channels) {
      throw std::invalid_argument("ToySpec: shift '" + id + "' has wrong channel count");
    }
    if (!s.gain.allFinite() || !s.bias.allFinite() || !std::isfinite(s.noise) || s.noise < 0) {
      throw std::invalid_argument("ToySpec: shift '" + id + "' has non-finite or negative parameters");
    }
  }
}

const DomainShift& ToySpec::shift(const std::string& domain_id) const {
  for (const auto& [id, s] : domain_shifts)
    if (id == domain_id) return s;
  throw std::invalid_argument("unknown domain id: " + domain_id);
}

std::vector<std::string> ToySpec::domain_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, s] : domain_shifts) ids.push_back(id);
  return ids;
}

ToySpec default_toy_spec() {
  ToySpec spec;
  spec.domain_shifts = {
      {"night", DomainShift{vec3(0.3, 0.3, 0.3), vec3(0.02, 0.02, 0.05), 0.02}},
      {"fog", DomainShift{vec3(0.45, 0.45, 0.45), vec3(0.52, 0.52, 0.54), 0.02}},
      {"rain", DomainShift{vec3(0.65, 0.65, 0.65), vec3(0.0, 0.06, 0.3), 0.03}},
  };
  return spec;
}

Vec class_color(int k, int channels, std::uint64_t seed) {
  static const double palette[4][3] = {{0.5, 0.5, 0.5}, {0.6, 0.44, 0.43}, {0.43, 0.6, 0.45}, {0.44, 0.47, 0.62}};
  if (channels == 3 && k < 4) return vec3(palette[k][0], palette[k][1], palette[k][2]);
  Rng rng(mix_seed(seed, 0x636f6c6fULL + static_cast<std::uint64_t>(k)));
  Vec c(channels);
  for (int i = 0; i < channels; ++i) c[i] = rng.uniform(0.1, 0.9);
  return c;
}

Sample generate_sample(const ToySpec& spec, std::uint64_t seed, std::string id) {
  const int s = spec.image_size;
  const int n = spec.n_classes;
  Rng rng(seed);
  std::vector<Vec> colors;
  for (int k = 0; k < n; ++k) {
    Vec c = class_color(k, spec.channels, spec.seed);
    for (int ch = 0; ch < spec.channels; ++ch) c[ch] += 0.02 * rng.normal();
    colors.push_back(c);
  }
  Sample out;
  out.id = std::move(id);
  out.labels = LabelMap(s, s, 0);
  const int shapes = rng.uniform_int(3, 6);
  for (int i = 0; i < shapes; ++i) {
    const auto cls = static_cast<std::uint8_t>(rng.uniform_int(1, n - 1));
    const bool ellipse = rng.uniform() < 0.5;
    const double cy = rng.uniform(0, s);
    const double cx = rng.uniform(0, s);
    const double ry = rng.uniform(s / 8.0, s / 3.0);
    const double rx = rng.uniform(s / 8.0, s / 3.0);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double dy = (y + 0.5 - cy) / ry;
        const double dx = (x + 0.5 - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) out.labels.at(y, x) = cls;
      }
    }
  }
  out.image = Image(s, s, spec.channels);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int ch = 0; ch < spec.channels; ++ch)
        out.image.at(y, x, ch) = colors[out.labels.at(y, x)][ch] + 0.03 * rng.normal();
  return out;
}

SourceDataset generate_source(const ToySpec& spec) {
  spec.validate();
  SourceDataset ds;
  const std::uint64_t base = mix_seed(spec.seed, kTrainStream);
  for (int k = 0; k < spec.n_train; ++k) {
    ds.samples.push_back(generate_sample(spec, mix_seed(base, static_cast<std::uint64_t>(k)), "train_" + std::to_string(k)));
  }
  return ds;
}

Image apply_domain_shift(const Image& img, const std::string& domain_id, const ToySpec& spec, std::uint64_t noise_seed) {
  const DomainShift& sh = spec.shift(domain_id);
  if (sh.gain.size() != img.c) throw std::invalid_argument("apply_domain_shift: channel mismatch");
  Rng rng(noise_seed);
  Image out = img;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int ch = 0; ch < img.c; ++ch) {
        double v = sh.gain[ch] * img.at(y, x, ch) + sh.bias[ch];
        if (sh.noise > 0) v += sh.noise * rng.normal();
        out.at(y, x, ch) = v;
      }
    }
  }
  return out;
}

EvalSplit make_eval_split(const ToySpec& spec) {
  spec.validate();
  EvalSplit split;
  for (const auto& id : spec.domain_ids()) {
    EvalSplit::Domain dom;
    dom.domain_id = id;
    for (int k = 0; k < spec.n_eval_per_domain; ++k) {
      const std::uint64_t seed = eval_seed(spec, id, k);
      Sample s = generate_sample(spec, seed, "eval_" + id + "_" + std::to_string(k));
      s.image = apply_domain_shift(s.image, id, spec, mix_seed(seed, 0x6e6f6973ULL));
      dom.samples.push_back(std::move(s));
    }
    split.domains.push_back(std::move(dom));
  }
  return split;
}

std::vector<Sample> make_calibration_samples(const ToySpec& spec, const std::string& domain_id) {
  spec.validate();
  std::vector<Sample> out;
  const std::uint64_t base = mix_seed(mix_seed(spec.seed, kCalibrationStream), hash_string(domain_id));
  for (int k = 0; k < spec.n_calibration; ++k) {
    const std::uint64_t seed = mix_seed(base, static_cast<std::uint64_t>(k));
    Sample s = generate_sample(spec, seed, "calib_" + domain_id + "_" + std::to_string(k));
    s.image = apply_domain_shift(s.image, domain_id, spec, mix_seed(seed, 0x6e6f6973ULL));
    out.push_back(std::move(s));
  }
  return out;
}

SeparabilityReport domain_separability(const SourceDataset& source, const EvalSplit& split,
                                       const std::function<Vec(const Image&)>& embed) {
  std::vector<std::vector<Vec>> groups;
  std::vector<Vec> src;
  for (const auto& s : source.samples) src.push_back(embed(s.image));
  groups.push_back(std::move(src));
  for (const auto& d : split.domains) {
    std::vector<Vec> g;
    for (const auto& s : d.samples) g.push_back(embed(s.image));
    groups.push_back(std::move(g));
  }
  std::vector<Vec> centroids;
  SeparabilityReport r;
  for (const auto& g : groups) {
    if (g.empty()) throw std::invalid_argument("domain_separability: empty domain");
    Vec c = Vec::Zero(g.front().size());
    for (const auto& v : g) c += v;
    c /= static_cast<double>(g.size());
    double ss = 0.0;
    for (const auto& v : g) ss += (v - c).squaredNorm();
    r.max_within_std = std::max(r.max_within_std, std::sqrt(ss / static_cast<double>(g.size())));
    centroids.push_back(c);
  }
  r.min_centroid_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centroids.size(); ++i)
    for (std::size_t j = i + 1; j < centroids.size(); ++j)
      r.min_centroid_distance = std::min(r.min_centroid_distance, (centroids[i] - centroids[j]).norm());
  return r;
}

void save_toy_dataset(const std::filesystem::path& dir, const ToySpec& spec, const SourceDataset& source,
                      const EvalSplit& split) {
  spec.validate();
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> fields = {
      {"format_version", std::to_string(kToyDataFormatVersion)},
      {"seed", std::to_string(spec.seed)},
      {"n_classes", std::to_string(spec.n_classes)},
      {"image_size", std::to_string(spec.image_size)},
      {"channels", std::to_string(spec.channels)},
      {"n_train", std::to_string(spec.n_train)},
      {"n_eval_per_domain", std::to_string(spec.n_eval_per_domain)},
      {"n_calibration", std::to_string(spec.n_calibration)},
      {"image_layout", "HWC f64 little-endian, images concatenated"},
      {"label_layout", "HW u8, 255 = ignore"},
  };
  std::string ids;
  for (const auto& [id, s] : spec.domain_shifts) {
    if (!ids.empty()) ids += ',';
    ids += id;
    fields.emplace_back("shift." + id + ".gain", join_vec(s.gain));
    fields.emplace_back("shift." + id + ".bias", join_vec(s.bias));
    fields.emplace_back("shift." + id + ".noise", io::format_double(s.noise));
  }
  fields.emplace_back("domains", ids);
  {
    std::ofstream os(dir / "manifest.txt", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
    io::write_header(os, "ULDA-TOYDATA", fields);
  }
  write_images(dir / "train_images.f64", source.samples);
  write_labels(dir / "train_labels.u8", source.samples);
  for (const auto& d : split.domains) {
    write_images(dir / ("eval_" + d.domain_id + "_images.f64"), d.samples);
    write_labels(dir / ("eval_" + d.domain_id + "_labels.u8"), d.samples);
  }
}

ToySpec load_toy_spec(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt", std::ios::binary);
  if (!is) throw std::runtime_error("no dataset manifest at " + (dir / "manifest.txt").string());
  const io::Header h = io::read_header(is, "ULDA-TOYDATA");
  if (std::stoi(io::header_get(h, "format_version")) != kToyDataFormatVersion) {
    throw std::runtime_error("unsupported dataset format_version");
  }
  ToySpec spec;
  spec.seed = std::stoull(io::header_get(h, "seed"));
  spec.n_classes = std::stoi(io::header_get(h, "n_classes"));
  spec.image_size = std::stoi(io::header_get(h, "image_size"));
  spec.channels = std::stoi(io::header_get(h, "channels"));
  spec.n_train = std::stoi(io::header_get(h, "n_train"));
  spec.n_eval_per_domain = std::stoi(io::header_get(h, "n_eval_per_domain"));
  spec.n_calibration = std::stoi(io::header_get(h, "n_calibration"));
  const std::string& ids = io::header_get(h, "domains");
  if (!ids.empty()) {
    for (const auto& id : io::split(ids, ',')) {
      DomainShift s;
      s.gain = parse_vec(io::header_get(h, "shift." + id + ".gain"));
      s.bias = parse_vec(io::header_get(h, "shift." + id + ".bias"));
      s.noise = std::stod(io::header_get(h, "shift." + id + ".noise"));
      spec.domain_shifts.emplace_back(id, std::move(s));
    }
  }
  spec.validate();
  return spec;
}

SourceDataset load_source(const std::filesystem::path& dir) {
  const ToySpec spec = load_toy_spec(dir);
  return SourceDataset{read_samples(dir, "train", spec, spec.n_train, "train_")};
}

EvalSplit load_eval_split(const std::filesystem::path& dir) {
  const ToySpec spec = load_toy_spec(dir);
  EvalSplit split;
  for (const auto& id : spec.domain_ids()) {
    split.domains.push_back(
        {id, read_samples(dir, "eval_" + id, spec, spec.n_eval_per_domain, "eval_" + id + "_")});
  }
  return split;
}

}  // namespace ulda

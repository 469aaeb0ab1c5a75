#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ulda {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Spatial grid of d-dimensional features. Row p of `data` is the feature at
// position p = y * w + x, so the (h*w) x d matrix is the flattened HW x d view.
struct FeatureMap {
  int h = 0;
  int w = 0;
  Mat data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int d);
  FeatureMap(int h, int w, Mat values);

  int dim() const { return static_cast<int>(data.cols()); }
  int pixels() const { return h * w; }
  bool all_finite() const { return data.allFinite(); }
};

// Interleaved H x W x C image.
struct Image {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> px;

  Image() = default;
  Image(int h, int w, int c) : h(h), w(w), c(c), px(static_cast<std::size_t>(h) * w * c, 0.0) {}

  double& at(int y, int x, int ch) { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
};

struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = kIgnoreLabel)
      : h(h), w(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  int pixels() const { return h * w; }
};

// Throws std::invalid_argument if any non-IGNORE label is >= n.
void validate_labels(const LabelMap& y, int n);

// Unit-norm text embeddings for one domain: class-in-domain rows and the
// domain-level vector.
struct TextEmbeddingSet {
  Mat class_embs;  // n x d
  Vec domain_emb;  // d
  std::string domain_id;

  int classes() const { return static_cast<int>(class_embs.rows()); }
  int dim() const { return static_cast<int>(class_embs.cols()); }
};

enum class LossStatus { ok, empty_support };

struct LossResult {
  double value = 0.0;
  LossStatus status = LossStatus::ok;
};

// Cosine similarity; returns 0 when either vector has zero norm.
double cosine(const Vec& a, const Vec& b);

// Gradient of cosine(a, b) with respect to a.
Vec cosine_grad(const Vec& a, const Vec& b);

// Deterministic random source. Distribution mapping is done here rather than
// through <random> distributions so draws are identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  int uniform_int(int lo, int hi);       // inclusive
  double normal();
  std::string state_summary() const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(std::string_view s);

std::string sha256_hex(std::string_view bytes);

// Unit vector of gaussian draws.
Vec random_unit_vector(int d, Rng& rng);

namespace io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, std::string_view s);
void write_vec(std::ostream& os, const Vec& v);
void write_mat(std::ostream& os, const Mat& m);  // row-major

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
Vec read_vec(std::istream& is, int n);
Mat read_mat(std::istream& is, int rows, int cols);

// Text preamble: a magic line, then `key=value` lines, then `end_header`.
using Header = std::map<std::string, std::string>;
void write_header(std::ostream& os, std::string_view magic,
                  const std::vector<std::pair<std::string, std::string>>& fields);
Header read_header(std::istream& is, std::string_view magic);
const std::string& header_get(const Header& h, const std::string& key);

std::string format_double(double v);  // round-trip exact decimal
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace io

}  // namespace ulda

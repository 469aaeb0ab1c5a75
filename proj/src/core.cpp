#include "ulda/core.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace ulda {

FeatureMap::FeatureMap(int h, int w, int d) : h(h), w(w), data(Mat::Zero(h * w, d)) {}

FeatureMap::FeatureMap(int h, int w, Mat values) : h(h), w(w), data(std::move(values)) {
  if (data.rows() != static_cast<Eigen::Index>(h) * w) {
    throw std::invalid_argument("FeatureMap: row count does not match h*w");
  }
}

void validate_labels(const LabelMap& y, int n) {
  if (y.labels.size() != static_cast<std::size_t>(y.h) * y.w) {
    throw std::invalid_argument("LabelMap: storage does not match h*w");
  }
  for (std::uint8_t v : y.labels) {
    if (v != kIgnoreLabel && v >= n) {
      throw std::invalid_argument("LabelMap: label " + std::to_string(v) + " >= class count " +
                                  std::to_string(n));
    }
  }
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

Vec cosine_grad(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return Vec::Zero(a.size());
  const Vec ah = a / na;
  const Vec bh = b / nb;
  return (bh - ah.dot(bh) * ah) / na;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(engine_() % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

std::string Rng::state_summary() const {
  std::ostringstream os;
  os << engine_;
  return sha256_hex(os.str()).substr(0, 16);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

Vec random_unit_vector(int d, Rng& rng) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  return v / v.norm();
}

namespace io {

namespace {
void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, bytes);
}

std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), bytes);
  if (!is) throw std::runtime_error("unexpected end of binary data");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put_le(os, v, 1); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v, 4); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v, 8); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v), 8); }

void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_vec(std::ostream& os, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) write_f64(os, v[i]);
}

void write_mat(std::ostream& os, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_f64(os, m(r, c));
}

std::uint8_t read_u8(std::istream& is) { return static_cast<std::uint8_t>(get_le(is, 1)); }
std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le(is, 4)); }
std::uint64_t read_u64(std::istream& is) { return get_le(is, 8); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le(is, 8)); }

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("unexpected end of binary data");
  return s;
}

Vec read_vec(std::istream& is, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = read_f64(is);
  return v;
}

Mat read_mat(std::istream& is, int rows, int cols) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = read_f64(is);
  return m;
}

void write_header(std::ostream& os, std::string_view magic,
                  const std::vector<std::pair<std::string, std::string>>& fields) {
  os << magic << '\n';
  for (const auto& [k, v] : fields) {
    if (k.find('=') != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("header field not representable: " + k);
    }
    os << k << '=' << v << '\n';
  }
  os << "end_header\n";
}

Header read_header(std::istream& is, std::string_view magic) {
  std::string line;
  if (!std::getline(is, line) || line != magic) {
    throw std::runtime_error("bad file magic: expected " + std::string(magic));
  }
  Header h;
  while (std::getline(is, line)) {
    if (line == "end_header") return h;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed header line: " + line);
    h[line.substr(0, eq)] = line.substr(eq + 1);
  }
  throw std::runtime_error("header not terminated");
}

const std::string& header_get(const Header& h, const std::string& key) {
  const auto it = h.find(key);
  if (it == h.end()) throw std::runtime_error("missing header field: " + key);
  return it->second;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace io

}  // namespace ulda

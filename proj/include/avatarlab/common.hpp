#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace avatarlab {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// Error taxonomy, mirrored by the CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

// splitmix64, used to derive independent stream seeds from one master seed.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
  return mix_seed(base ^ mix_seed(salt));
}

// Deterministic RNG. All distributions are implemented here so results are
// pinned by this code, not by the standard library's unspecified algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller with a cached spare
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // integer in [0, n)
  uint64_t integer(uint64_t n) {
    require(n > 0, "Rng::integer: n must be positive");
    return gen_() % n;  // modulo bias irrelevant at these scales
  }

  int poisson(double lambda) {
    double l = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  Mat gaussian_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = gaussian();
    return m;
  }

  Rng fork(uint64_t salt) { return Rng(derive_seed(gen_(), salt)); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// --- little-endian binary IO -------------------------------------------------

void write_f32_blob(const std::filesystem::path& p, std::span<const double> v);
std::vector<double> read_f32_blob(const std::filesystem::path& p);
void write_f64_blob(const std::filesystem::path& p, std::span<const double> v);
std::vector<double> read_f64_blob(const std::filesystem::path& p);
void write_text_atomic(const std::filesystem::path& p, const std::string& text);
std::string read_text(const std::filesystem::path& p);

// FNV-1a over bytes; used for config hashes in run manifests.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace avatarlab

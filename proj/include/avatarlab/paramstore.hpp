#pragma once

#include "avatarlab/common.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace avatarlab {

// One named tensor inside a parameter arena.
struct TensorSpec {
  std::string group;
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  size_t size() const { return static_cast<size_t>(rows) * cols; }
};

// Flat float64 arena with a (group, name) registry. Parameters, gradients and
// optimizer moments all share this layout, which makes group-wise freezing,
// finite-difference probing and checkpoint serialization uniform.
class ParamStore {
 public:
  ParamStore() = default;

  // registration (before first tensor access)
  void add(const std::string& group, const std::string& name, int rows, int cols);

  Eigen::Map<Mat> tensor(const std::string& group, const std::string& name);
  Eigen::Map<const Mat> tensor(const std::string& group, const std::string& name) const;
  bool has(const std::string& group, const std::string& name) const;
  bool has_group(const std::string& group) const;

  const std::vector<TensorSpec>& specs() const { return specs_; }
  std::vector<std::string> groups() const;

  std::span<double> flat() { return {data_.data(), data_.size()}; }
  std::span<const double> flat() const { return {data_.data(), data_.size()}; }
  size_t size() const { return data_.size(); }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  // Same registry, zeroed data. Used for gradients and Adam moments.
  ParamStore zeros_like() const;

  // Zeroes every entry whose group is not in `keep`.
  void keep_only_groups(const std::set<std::string>& keep);

  // Bitwise equality of a single group's data between two stores.
  static bool group_equal(const ParamStore& a, const ParamStore& b, const std::string& group);

  bool all_finite() const;

  // Checkpoint: <prefix>.json manifest + <prefix>.bin float64 LE blob.
  void save(const std::filesystem::path& prefix, const nlohmann::json& extra) const;
  static std::pair<ParamStore, nlohmann::json> load(const std::filesystem::path& prefix);

 private:
  const TensorSpec& spec_of(const std::string& group, const std::string& name) const;

  std::vector<double> data_;
  std::vector<TensorSpec> specs_;
  std::map<std::pair<std::string, std::string>, size_t> index_;
};

// Adam with optional global-norm clipping; updates only the listed groups.
struct AdamConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // <= 0 disables
};

class Adam {
 public:
  explicit Adam(const ParamStore& params) : m_(params.zeros_like()), v_(params.zeros_like()) {}

  void step(ParamStore& params, const ParamStore& grads, const AdamConfig& cfg,
            const std::set<std::string>& trainable_groups);

  int64_t steps_taken() const { return t_; }

 private:
  ParamStore m_;
  ParamStore v_;
  int64_t t_ = 0;
};

}  // namespace avatarlab

#include "avatarlab/paramstore.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace avatarlab {

namespace fs = std::filesystem;
using nlohmann::json;

// --- binary IO helpers (declared in common.hpp) ------------------------------

void write_f32_blob(const fs::path& p, std::span<const double> v) {
  std::vector<float> tmp(v.size());
  for (size_t i = 0; i < v.size(); ++i) tmp[i] = static_cast<float>(v[i]);
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot open for write: " + p.string());
  f.write(reinterpret_cast<const char*>(tmp.data()),
          static_cast<std::streamsize>(tmp.size() * sizeof(float)));
  if (!f) throw MissingInputError("short write: " + p.string());
}

std::vector<double> read_f32_blob(const fs::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw MissingInputError("cannot open: " + p.string());
  auto bytes = static_cast<size_t>(f.tellg());
  if (bytes % sizeof(float) != 0)
    throw MissingInputError("blob size not a multiple of 4: " + p.string());
  f.seekg(0);
  std::vector<float> tmp(bytes / sizeof(float));
  f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw MissingInputError("short read: " + p.string());
  return {tmp.begin(), tmp.end()};
}

void write_f64_blob(const fs::path& p, std::span<const double> v) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot open for write: " + p.string());
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!f) throw MissingInputError("short write: " + p.string());
}

std::vector<double> read_f64_blob(const fs::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw MissingInputError("cannot open: " + p.string());
  auto bytes = static_cast<size_t>(f.tellg());
  if (bytes % sizeof(double) != 0)
    throw MissingInputError("blob size not a multiple of 8: " + p.string());
  f.seekg(0);
  std::vector<double> out(bytes / sizeof(double));
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw MissingInputError("short read: " + p.string());
  return out;
}

void write_text_atomic(const fs::path& p, const std::string& text) {
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw MissingInputError("cannot open for write: " + tmp.string());
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw MissingInputError("short write: " + tmp.string());
  }
  fs::rename(tmp, p);
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw MissingInputError("cannot open: " + p.string());
  std::string s(static_cast<size_t>(f.tellg()), '\0');
  f.seekg(0);
  f.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}

// --- ParamStore ---------------------------------------------------------------

void ParamStore::add(const std::string& group, const std::string& name, int rows, int cols) {
  require(rows > 0 && cols > 0, "ParamStore::add: empty tensor " + group + "/" + name);
  auto key = std::make_pair(group, name);
  require(!index_.count(key), "ParamStore::add: duplicate tensor " + group + "/" + name);
  TensorSpec s{group, name, rows, cols, data_.size()};
  index_[key] = specs_.size();
  specs_.push_back(s);
  data_.resize(data_.size() + s.size(), 0.0);
}

const TensorSpec& ParamStore::spec_of(const std::string& group, const std::string& name) const {
  auto it = index_.find({group, name});
  if (it == index_.end())
    throw std::invalid_argument("ParamStore: unknown tensor " + group + "/" + name);
  return specs_[it->second];
}

Eigen::Map<Mat> ParamStore::tensor(const std::string& group, const std::string& name) {
  const auto& s = spec_of(group, name);
  return {data_.data() + s.offset, s.rows, s.cols};
}

Eigen::Map<const Mat> ParamStore::tensor(const std::string& group, const std::string& name) const {
  const auto& s = spec_of(group, name);
  return {data_.data() + s.offset, s.rows, s.cols};
}

bool ParamStore::has(const std::string& group, const std::string& name) const {
  return index_.count({group, name}) > 0;
}

bool ParamStore::has_group(const std::string& group) const {
  return std::any_of(specs_.begin(), specs_.end(),
                     [&](const TensorSpec& s) { return s.group == group; });
}

std::vector<std::string> ParamStore::groups() const {
  std::vector<std::string> out;
  for (const auto& s : specs_)
    if (std::find(out.begin(), out.end(), s.group) == out.end()) out.push_back(s.group);
  return out;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore p;
  p.specs_ = specs_;
  p.index_ = index_;
  p.data_.assign(data_.size(), 0.0);
  return p;
}

void ParamStore::keep_only_groups(const std::set<std::string>& keep) {
  for (const auto& s : specs_) {
    if (!keep.count(s.group))
      std::fill_n(data_.begin() + static_cast<ptrdiff_t>(s.offset), s.size(), 0.0);
  }
}

bool ParamStore::group_equal(const ParamStore& a, const ParamStore& b, const std::string& group) {
  for (const auto& s : a.specs_) {
    if (s.group != group) continue;
    if (!b.has(s.group, s.name)) return false;
    const auto& sb = b.spec_of(s.group, s.name);
    if (sb.rows != s.rows || sb.cols != s.cols) return false;
    if (std::memcmp(a.data_.data() + s.offset, b.data_.data() + sb.offset,
                    s.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

bool ParamStore::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void ParamStore::save(const fs::path& prefix, const json& extra) const {
  json manifest;
  manifest["format"] = "avatarlab-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f64";
  manifest["blob"] = prefix.filename().string() + ".bin";
  manifest["total_scalars"] = data_.size();
  json tensors = json::array();
  for (const auto& s : specs_) {
    tensors.push_back({{"group", s.group},
                       {"name", s.name},
                       {"rows", s.rows},
                       {"cols", s.cols},
                       {"offset", s.offset}});
  }
  manifest["tensors"] = tensors;
  if (!extra.is_null()) manifest["meta"] = extra;

  fs::path json_path = prefix;
  json_path += ".json";
  fs::path bin_path = prefix;
  bin_path += ".bin";
  write_f64_blob(bin_path, flat());
  write_text_atomic(json_path, manifest.dump(2) + "\n");
}

std::pair<ParamStore, json> ParamStore::load(const fs::path& prefix) {
  fs::path json_path = prefix;
  json_path += ".json";
  fs::path bin_path = prefix;
  bin_path += ".bin";
  json manifest = json::parse(read_text(json_path));
  if (manifest.value("format", "") != "avatarlab-checkpoint")
    throw MissingInputError("not a checkpoint manifest: " + json_path.string());

  ParamStore p;
  for (const auto& t : manifest.at("tensors")) {
    p.add(t.at("group").get<std::string>(), t.at("name").get<std::string>(),
          t.at("rows").get<int>(), t.at("cols").get<int>());
  }
  auto blob = read_f64_blob(bin_path);
  if (blob.size() != p.data_.size())
    throw MissingInputError("checkpoint blob size mismatch: " + bin_path.string());
  p.data_ = std::move(blob);
  json meta = manifest.contains("meta") ? manifest["meta"] : json();
  return {std::move(p), meta};
}

// --- Adam ---------------------------------------------------------------------

void Adam::step(ParamStore& params, const ParamStore& grads, const AdamConfig& cfg,
                const std::set<std::string>& trainable_groups) {
  ++t_;
  double scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& s : grads.specs()) {
      if (!trainable_groups.count(s.group)) continue;
      auto g = grads.flat().subspan(s.offset, s.size());
      for (double x : g) sq += x * x;
    }
    double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  auto pf = params.flat();
  auto gf = grads.flat();
  auto mf = m_.flat();
  auto vf = v_.flat();
  for (const auto& s : params.specs()) {
    if (!trainable_groups.count(s.group)) continue;
    for (size_t i = s.offset; i < s.offset + s.size(); ++i) {
      double g = gf[i] * scale;
      mf[i] = cfg.beta1 * mf[i] + (1.0 - cfg.beta1) * g;
      vf[i] = cfg.beta2 * vf[i] + (1.0 - cfg.beta2) * g * g;
      double mh = mf[i] / bc1;
      double vh = vf[i] / bc2;
      pf[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

}  // namespace avatarlab

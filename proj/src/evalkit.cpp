#include "avatarlab/evalkit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <sstream>

namespace avatarlab {

using nlohmann::json;

double gsb_score(long long good, long long same, long long bad) {
  require(good >= 0 && same >= 0 && bad >= 0, "gsb_score: counts must be nonnegative");
  if (bad + same == 0) throw std::invalid_argument("gsb_score: undefined ratio (B + S = 0)");
  return static_cast<double>(good + same) / static_cast<double>(bad + same);
}

const char* to_string(GsbDimension d) {
  switch (d) {
    case GsbDimension::overall: return "overall";
    case GsbDimension::text_alignment: return "text_alignment";
    case GsbDimension::lip_sync: return "lip_sync";
    case GsbDimension::identity: return "identity";
    case GsbDimension::visual: return "visual";
  }
  return "?";
}

GsbDimension gsb_dimension_from_string(const std::string& s) {
  for (int i = 0; i < kNumGsbDimensions; ++i)
    if (s == to_string(static_cast<GsbDimension>(i))) return static_cast<GsbDimension>(i);
  throw std::invalid_argument("unknown GSB dimension: " + s);
}

std::vector<GSBRecord> parse_gsb_csv(const std::string& text) {
  std::vector<GSBRecord> out;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("dimension", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    std::istringstream ls(line);
    std::string dim, gs, ss, bs;
    if (!std::getline(ls, dim, ',') || !std::getline(ls, gs, ',') || !std::getline(ls, ss, ',') ||
        !std::getline(ls, bs, ','))
      throw std::invalid_argument("gsb csv: malformed row: " + line);
    GSBRecord r;
    r.dimension = gsb_dimension_from_string(dim);
    r.good = std::stoll(gs);
    r.same = std::stoll(ss);
    r.bad = std::stoll(bs);
    require(r.good + r.same + r.bad >= 1, "gsb csv: empty record");
    out.push_back(r);
  }
  return out;
}

json gsb_summary(std::span<const GSBRecord> records) {
  json j = json::object();
  for (const auto& r : records) {
    j[to_string(r.dimension)] = {{"G", r.good},
                                 {"S", r.same},
                                 {"B", r.bad},
                                 {"score", gsb_score(r.good, r.same, r.bad)}};
  }
  return j;
}

namespace {

double pearson(const Vec& a, const Vec& b) {
  const double ma = a.mean(), mb = b.mean();
  Vec da = a.array() - ma, db = b.array() - mb;
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va < 1e-18 || vb < 1e-18) return 0.0;  // constant signal convention
  return da.dot(db) / std::sqrt(va * vb);
}

double ols_slope(const Vec& y) {
  const int n = static_cast<int>(y.size());
  if (n < 2) return 0.0;
  const double tbar = (n - 1) / 2.0;
  double num = 0.0, den = 0.0;
  for (int t = 0; t < n; ++t) {
    num += (t - tbar) * (y[t] - y.mean());
    den += (t - tbar) * (t - tbar);
  }
  return num / den;
}

// variance gate below which the limb channel counts as still
constexpr double kLimbVarGate = 0.004;

double limb_peak_freq(const Vec& limb) {
  const int T = static_cast<int>(limb.size());
  if (T < 4) return 0.0;
  const double mean = limb.mean();
  double var = 0.0;
  for (int t = 0; t < T; ++t) var += (limb[t] - mean) * (limb[t] - mean);
  var /= T;
  if (var < kLimbVarGate) return 0.0;
  int best_k = 1;
  double best_pow = -1.0;
  for (int k = 1; k <= T / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (int t = 0; t < T; ++t) {
      double ang = 2.0 * M_PI * k * t / T;
      re += (limb[t] - mean) * std::cos(ang);
      im -= (limb[t] - mean) * std::sin(ang);
    }
    double p = re * re + im * im;
    if (p > best_pow) {
      best_pow = p;
      best_k = k;
    }
  }
  return static_cast<double>(best_k) / T;
}

}  // namespace

Vec sync_corr(const Clip& clip, const AudioSet& audio, const WorldSpec& spec) {
  require(clip.frames() >= 3, "sync_corr: need at least 3 frames");
  require(audio.frames() == clip.frames(), "sync_corr: length mismatch");
  require(audio.persons() == spec.persons, "sync_corr: stream count mismatch");
  Vec out(spec.persons);
  for (int p = 0; p < spec.persons; ++p) {
    Vec mouth = clip.data.col(spec.channel(p, Role::mouth));
    Vec stream = audio.streams.row(p).transpose();
    out[p] = pearson(mouth, stream);
  }
  return out;
}

ProbeFeatures probe_features(const Clip& clip, const WorldSpec& spec) {
  ProbeFeatures f;
  const int P = spec.persons;
  for (int p = 0; p < P; ++p) {
    f.slope_x += ols_slope(clip.data.col(spec.channel(p, Role::pos_x))) / P;
    f.slope_y += ols_slope(clip.data.col(spec.channel(p, Role::pos_y))) / P;
    f.limb_peak += limb_peak_freq(clip.data.col(spec.channel(p, Role::limb))) / P;
  }
  f.slope_cam = ols_slope(clip.data.col(spec.camera_channel()));
  return f;
}

TextClass LinearProbe::predict(const ProbeFeatures& f) const {
  RowVec x(4);
  x << f.slope_x, f.slope_y, f.slope_cam, f.limb_peak;
  x = (x - mu).cwiseQuotient(sd);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < kNumClasses; ++c) {
    double d = (x - centroids.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return static_cast<TextClass>(best);
}

TextClass LinearProbe::predict(const Clip& clip, const WorldSpec& spec) const {
  return predict(probe_features(clip, spec));
}

LinearProbe fit_probe(const WorldSpec& spec, int t_frames, int clips_per_class, uint64_t seed) {
  require(clips_per_class >= 2, "fit_probe: need at least 2 clips per class");
  Mat feats(kNumClasses * clips_per_class, 4);
  int row = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    for (int i = 0; i < clips_per_class; ++i) {
      uint64_t s = derive_seed(seed, 0x70726fb0u + static_cast<uint64_t>(row));
      AudioSet audio = make_audio(t_frames, spec.persons, derive_seed(s, 1));
      Clip clip = sample_clip(spec, static_cast<TextClass>(c), audio, derive_seed(s, 2));
      ProbeFeatures f = probe_features(clip, spec);
      feats.row(row++) << f.slope_x, f.slope_y, f.slope_cam, f.limb_peak;
    }
  }
  LinearProbe probe;
  probe.mu = feats.colwise().mean();
  probe.sd = RowVec(4);
  for (int j = 0; j < 4; ++j) {
    double v = (feats.col(j).array() - probe.mu[j]).square().mean();
    probe.sd[j] = std::max(std::sqrt(v), 1e-9);
  }
  probe.centroids = Mat::Zero(kNumClasses, 4);
  for (int c = 0; c < kNumClasses; ++c) {
    for (int i = 0; i < clips_per_class; ++i) {
      RowVec x = feats.row(c * clips_per_class + i);
      probe.centroids.row(c) += (x - probe.mu).cwiseQuotient(probe.sd) / clips_per_class;
    }
  }
  return probe;
}

double text_align_score(const LinearProbe& probe, std::span<const Clip> clips,
                        std::span<const TextClass> labels, const WorldSpec& spec) {
  require(!clips.empty(), "text_align_score: empty input");
  require(clips.size() == labels.size(), "text_align_score: label count mismatch");
  int hits = 0;
  for (size_t i = 0; i < clips.size(); ++i)
    hits += (probe.predict(clips[i], spec) == labels[i]);
  return static_cast<double>(hits) / static_cast<double>(clips.size());
}

double identity_consistency(const Clip& clip, const RowVec& ref_frame, const WorldSpec& spec) {
  require(static_cast<int>(ref_frame.size()) == spec.frame_dim(),
          "identity_consistency: reference frame width mismatch");
  double total = 0.0;
  for (int p = 0; p < spec.persons; ++p) {
    const int ia = spec.channel(p, Role::id_a);
    const int ib = spec.channel(p, Role::id_b);
    Eigen::Vector2d ref(ref_frame[ia], ref_frame[ib]);
    if (ref.norm() < 1e-12)
      throw std::invalid_argument("identity_consistency: zero-norm reference identity");
    double acc = 0.0;
    for (int t = 0; t < clip.frames(); ++t) {
      Eigen::Vector2d v(clip.data(t, ia), clip.data(t, ib));
      if (v.norm() < 1e-12)
        throw std::invalid_argument("identity_consistency: zero-norm identity at frame " +
                                    std::to_string(t));
      acc += ref.dot(v) / (ref.norm() * v.norm());
    }
    total += acc / clip.frames();
  }
  return total / spec.persons;
}

double motion_variance(const Clip& clip, const WorldSpec& spec) {
  require(clip.frames() >= 2, "motion_variance: need at least 2 frames");
  double total = 0.0;
  int n_channels = 0;
  for (int p = 0; p < spec.persons; ++p) {
    for (Role r : {Role::pos_x, Role::pos_y, Role::limb}) {
      Vec col = clip.data.col(spec.channel(p, r));
      Vec d = col.tail(col.size() - 1) - col.head(col.size() - 1);
      double mean = d.mean();
      total += (d.array() - mean).square().mean();
      ++n_channels;
    }
  }
  return total / n_channels;
}

double boundary_smoothness(const Clip& clip) {
  require(!clip.chunk_boundaries.empty(), "boundary_smoothness: clip has no boundaries");
  clip.validate();
  std::vector<char> is_boundary(static_cast<size_t>(clip.frames()), 0);
  for (int b : clip.chunk_boundaries) is_boundary[static_cast<size_t>(b)] = 1;

  double max_jump = 0.0;
  std::vector<double> within;
  for (int t = 1; t < clip.frames(); ++t) {
    double step = (clip.data.row(t) - clip.data.row(t - 1)).cwiseAbs().maxCoeff();
    if (is_boundary[static_cast<size_t>(t)])
      max_jump = std::max(max_jump, step);
    else
      within.push_back(step);
  }
  require(!within.empty(), "boundary_smoothness: no within-chunk steps");
  std::sort(within.begin(), within.end());
  size_t idx = static_cast<size_t>(std::ceil(0.95 * within.size())) - 1;
  idx = std::min(idx, within.size() - 1);
  return max_jump / (within[idx] + 1e-8);
}

json MetricReport::to_json() const {
  json j;
  j["sync_corr"] = sync_corr;
  j["text_align"] = text_align;
  j["idc"] = idc;
  j["motion_var"] = motion_var;
  j["boundary_ratio"] = boundary_ratio;
  return j;
}

std::string MetricReport::csv_header() {
  return "clip,sync_corr_mean,text_align,idc,motion_var,boundary_ratio";
}

std::string MetricReport::csv_row(const std::string& clip_id) const {
  double sync_mean = 0.0;
  for (double s : sync_corr) sync_mean += s;
  if (!sync_corr.empty()) sync_mean /= static_cast<double>(sync_corr.size());
  std::ostringstream os;
  os.precision(17);
  os << clip_id << ',' << sync_mean << ',' << text_align << ',' << idc << ',' << motion_var << ','
     << boundary_ratio;
  return os.str();
}

}  // namespace avatarlab

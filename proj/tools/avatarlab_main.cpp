// avatarlab: experiment runner for the synthetic avatar distillation lab.
//
// Subcommands: gen-data, pretrain, distill, generate, eval, gsb, report.
// Exit codes: 0 ok, 2 config error, 3 missing input, 4 numeric failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <iostream>

#include "avatarlab/runconfig.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace avatarlab;

namespace {

struct Paths {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path checkpoints() const { return out / "checkpoints"; }
  fs::path metrics() const { return out / "metrics"; }
  fs::path clips() const { return out / "clips"; }
  fs::path evals() const { return out / "eval"; }
};

Paths resolve_paths(const RunConfig& cfg) {
  fs::path out = cfg.output_dir;
  if (const char* root = std::getenv("AVATARLAB_OUT_ROOT"); root && out.is_relative())
    out = fs::path(root) / out;
  return {out};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunManifest base_manifest(const RunConfig& cfg, const std::string& command) {
  RunManifest m;
  m.config_hash = config_hash(cfg);
  m.command = command;
  return m;
}

int cmd_gen_data(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Paths paths = resolve_paths(cfg);
  fs::create_directories(paths.data());

  Dataset biased = sample_dataset(cfg.world, cfg.biased.dist, cfg.biased.n_clips, cfg.t_frames,
                                  true, cfg.biased.seed);
  biased.save(paths.data() / "biased");
  Dataset uniform = sample_dataset(cfg.world, cfg.uniform.dist, cfg.uniform.n_clips, cfg.t_frames,
                                   false, cfg.uniform.seed);
  uniform.save(paths.data() / "uniform");

  RunManifest m = base_manifest(cfg, "gen-data");
  m.artifacts["biased_manifest"] = (paths.data() / "biased.json").string();
  m.artifacts["uniform_manifest"] = (paths.data() / "uniform.json").string();
  m.seeds = {cfg.biased.seed, cfg.uniform.seed};
  m.wall_clock_s = seconds_since(t0);
  m.write(paths.out / "manifest_gen-data.json");
  std::cout << "gen-data: " << cfg.biased.n_clips << " biased + " << cfg.uniform.n_clips
            << " uniform clips -> " << paths.data().string() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, int stage, const std::string& teacher) {
  auto t0 = std::chrono::steady_clock::now();
  Paths paths = resolve_paths(cfg);
  fs::create_directories(paths.checkpoints());
  if (teacher != "audio" && teacher != "text")
    throw ConfigError("pretrain: --teacher must be audio or text");
  if (teacher == "text" && stage != 1)
    throw ConfigError("pretrain: the text teacher has no stage 2 (no audio pathway)");

  RunManifest m = base_manifest(cfg, "pretrain");
  fs::path out_ckpt;

  if (teacher == "audio" && stage == 1) {
    Dataset data = Dataset::load(paths.data() / "biased");
    DenoiserConfig mc = cfg.model;
    mc.has_audio_layer = false;
    Denoiser model = Denoiser::init(mc, derive_seed(cfg.stage1.seed, 0xa0));
    OptConfig opt;
    opt.adam.lr = cfg.stage1.lr;
    opt.batch = cfg.stage1.batch;
    opt.steps = cfg.stage1.steps;
    opt.seed = cfg.stage1.seed;
    auto result = pretrain_stage(model, data, 1, opt, cfg.geometry);
    out_ckpt = paths.checkpoints() / "audio_stage1";
    model.save(out_ckpt);
    std::cout << "pretrain audio stage 1: loss " << result.loss_history.front() << " -> "
              << result.loss_history.back() << "\n";
    m.seeds = {cfg.stage1.seed};
  } else if (teacher == "audio" && stage == 2) {
    fs::path base = paths.checkpoints() / "audio_stage1";
    if (!fs::exists(base.string() + ".json"))
      throw MissingInputError("pretrain stage 2: missing checkpoint " + base.string());
    Dataset data = Dataset::load(paths.data() / "biased");
    Denoiser model = Denoiser::load(base);
    OptConfig opt;
    opt.adam.lr = cfg.stage2.lr;
    opt.batch = cfg.stage2.batch;
    opt.steps = cfg.stage2.steps;
    opt.seed = cfg.stage2.seed;
    auto result = pretrain_stage(model, data, 2, opt, cfg.geometry);
    out_ckpt = paths.checkpoints() / "audio_teacher";
    model.save(out_ckpt);
    std::cout << "pretrain audio stage 2: loss " << result.loss_history.front() << " -> "
              << result.loss_history.back() << "\n";
    m.seeds = {cfg.stage2.seed};
  } else {
    Dataset data = Dataset::load(paths.data() / "uniform");
    DenoiserConfig mc = cfg.model;
    mc.has_audio_layer = false;
    Denoiser model = Denoiser::init(mc, derive_seed(cfg.text_teacher.seed, 0xa1));
    OptConfig opt;
    opt.adam.lr = cfg.text_teacher.lr;
    opt.batch = cfg.text_teacher.batch;
    opt.steps = cfg.text_teacher.steps;
    opt.seed = cfg.text_teacher.seed;
    auto result = pretrain_stage(model, data, 1, opt, cfg.geometry);
    out_ckpt = paths.checkpoints() / "text_teacher";
    model.save(out_ckpt);
    std::cout << "pretrain text teacher: loss " << result.loss_history.front() << " -> "
              << result.loss_history.back() << "\n";
    m.seeds = {cfg.text_teacher.seed};
  }

  m.artifacts["checkpoint"] = out_ckpt.string() + ".json";
  m.wall_clock_s = seconds_since(t0);
  m.write(paths.out / ("manifest_pretrain_" + teacher + "_stage" + std::to_string(stage) +
                       ".json"));
  return 0;
}

int cmd_distill(const RunConfig& cfg, const std::string& mode, const std::string& dynamic_cfg) {
  auto t0 = std::chrono::steady_clock::now();
  Paths paths = resolve_paths(cfg);
  fs::create_directories(paths.metrics());
  fs::create_directories(paths.checkpoints());
  if (mode != "twin" && mode != "vanilla" && mode != "twin-then-vanilla")
    throw ConfigError("distill: --mode must be twin, vanilla or twin-then-vanilla");
  if (dynamic_cfg != "on" && dynamic_cfg != "off")
    throw ConfigError("distill: --dynamic-cfg must be on or off");

  fs::path audio_ckpt = paths.checkpoints() / "audio_teacher";
  if (!fs::exists(audio_ckpt.string() + ".json"))
    throw MissingInputError("distill: missing audio teacher checkpoint " + audio_ckpt.string());
  Denoiser eps_audio = Denoiser::load(audio_ckpt);

  DistillConfig dcfg = cfg.distill;
  dcfg.dynamic_cfg_phase_a = (dynamic_cfg == "on");
  if (mode == "twin") dcfg.phase_b_steps = 0;
  if (mode == "vanilla") {
    dcfg.phase_b_steps += dcfg.phase_a_steps;  // same total budget as the twin modes
    dcfg.phase_a_steps = 0;
  }

  std::optional<Denoiser> eps_text;
  if (dcfg.phase_a_steps > 0) {
    fs::path text_ckpt = paths.checkpoints() / "text_teacher";
    if (!fs::exists(text_ckpt.string() + ".json"))
      throw MissingInputError("distill: missing text teacher checkpoint " + text_ckpt.string());
    eps_text = Denoiser::load(text_ckpt);
  }

  LinearProbe probe = fit_probe(cfg.world, cfg.chunk_plan.new_frames,
                                cfg.eval.probe_clips_per_class, cfg.eval.probe_seed);
  DistillResult result = distill_run(eps_audio, eps_text ? &*eps_text : nullptr, eps_audio, cfg.guidance,
                                     dcfg, cfg.student, cfg.chunk_plan, probe);

  fs::path student_ckpt = paths.checkpoints() / ("student_" + mode);
  result.student.save(student_ckpt);
  fs::path csv_path = paths.metrics() / ("distill_" + mode + "_" + dynamic_cfg + ".csv");
  write_text_atomic(csv_path, metrics_csv(result.rows));

  RunManifest m = base_manifest(cfg, "distill --mode " + mode + " --dynamic-cfg " + dynamic_cfg);
  m.artifacts["student"] = student_ckpt.string() + ".json";
  m.metrics_files = {csv_path.string()};
  m.seeds = {dcfg.seed};
  m.wall_clock_s = seconds_since(t0);
  m.write(paths.out / ("manifest_distill_" + mode + ".json"));
  if (!result.rows.empty())
    std::cout << "distill " << mode << ": steps " << result.rows.size() << ", final sync "
              << result.rows.back().sync_corr_eval << ", final text_align "
              << result.rows.back().text_align_eval << "\n";
  else
    std::cout << "distill " << mode << ": no steps configured, checkpoint copied\n";
  return 0;
}

int cmd_generate(const RunConfig& cfg, const std::string& student_name, uint64_t ref_seed,
                 uint64_t audio_seed, const std::string& prompts_arg, double duration,
                 int offset, const std::string& out_name, uint64_t gen_seed) {
  auto t0 = std::chrono::steady_clock::now();
  Paths paths = resolve_paths(cfg);
  fs::create_directories(paths.clips());

  fs::path student_ckpt = paths.checkpoints() / student_name;
  if (!fs::exists(student_ckpt.string() + ".json"))
    throw MissingInputError("generate: missing student checkpoint " + student_ckpt.string());
  Denoiser student = Denoiser::load(student_ckpt);

  std::vector<TextClass> prompts;
  {
    std::istringstream in(prompts_arg);
    std::string token;
    while (std::getline(in, token, ',')) {
      if (!token.empty()) prompts.push_back(text_class_from_string(token));
    }
  }
  if (prompts.empty()) throw ConfigError("generate: --prompts must list at least one class");

  ChunkPlan plan = cfg.chunk_plan;
  if (offset >= 0) plan.pseudo_offset = offset;

  PromptSchedule schedule = schedule_prompts(duration, prompts, cfg.world.frame_rate);
  const int total = schedule.total_frames();
  AudioSet audio = make_audio(total, cfg.world.persons, audio_seed);
  AudioSet ref_audio = make_audio(cfg.t_frames, cfg.world.persons, derive_seed(ref_seed, 5));
  RowVec ref = sample_clip(cfg.world, TextClass::idle, ref_audio, ref_seed).data.row(0);

  Clip clip = generate_stream(student, ref, audio, schedule, plan, cfg.student, gen_seed);

  Dataset single;
  single.spec = cfg.world;
  single.t_frames = clip.frames();
  single.with_audio = true;
  single.seed = gen_seed;
  single.clips.push_back({clip, schedule.fragments.front(), audio, gen_seed});
  fs::path prefix = paths.clips() / out_name;
  single.save(prefix);
  fs::path sidecar_path = prefix;
  sidecar_path += ".sidecar.json";
  write_text_atomic(sidecar_path, stream_sidecar(schedule, plan, clip, gen_seed, ref).dump(2) + "\n");

  RunManifest m = base_manifest(cfg, "generate");
  m.artifacts["clip"] = prefix.string() + ".json";
  m.artifacts["sidecar"] = sidecar_path.string();
  m.seeds = {ref_seed, audio_seed, gen_seed};
  m.wall_clock_s = seconds_since(t0);
  m.write(paths.out / ("manifest_generate_" + out_name + ".json"));
  std::cout << "generate: " << total << " frames in " << clip.chunk_boundaries.size() + 1
            << " chunks -> " << prefix.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& clips_arg, const std::string& against) {
  auto t0 = std::chrono::steady_clock::now();
  if (against != "ground-truth") throw ConfigError("eval: --against must be ground-truth");
  Paths paths = resolve_paths(cfg);
  fs::create_directories(paths.evals());

  fs::path prefix = clips_arg;
  if (prefix.is_relative() && !fs::exists(prefix.string() + ".json"))
    prefix = paths.clips() / clips_arg;
  if (!fs::exists(prefix.string() + ".json"))
    throw MissingInputError("eval: missing clip dataset " + prefix.string());
  Dataset ds = Dataset::load(prefix);

  fs::path sidecar_path = prefix;
  sidecar_path += ".sidecar.json";
  json sidecar;
  if (fs::exists(sidecar_path)) sidecar = json::parse(read_text(sidecar_path));

  LinearProbe window_probe;
  bool have_windows = sidecar.contains("schedule");
  if (have_windows) {
    int wlen = sidecar["schedule"][0]["end"].get<int>() - sidecar["schedule"][0]["begin"].get<int>();
    window_probe = fit_probe(cfg.world, wlen, cfg.eval.probe_clips_per_class, cfg.eval.probe_seed);
  }

  std::ostringstream csv;
  csv << MetricReport::csv_header() << "\n";
  json summaries = json::array();
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    const LabeledClip& lc = ds.clips[i];
    Clip clip = lc.clip;
    MetricReport report;
    Vec sync = sync_corr(clip, ds.audio_for(i), ds.spec);
    report.sync_corr.assign(sync.data(), sync.data() + sync.size());
    report.motion_var = motion_variance(clip, ds.spec);
    if (sidecar.contains("boundaries")) {
      for (const auto& b : sidecar["boundaries"]) clip.chunk_boundaries.push_back(b.get<int>());
      report.boundary_ratio = clip.chunk_boundaries.empty() ? 0.0 : boundary_smoothness(clip);
    }
    if (sidecar.contains("ref_frame")) {
      RowVec ref(ds.spec.frame_dim());
      for (int f = 0; f < ds.spec.frame_dim(); ++f) ref[f] = sidecar["ref_frame"][f].get<double>();
      report.idc = identity_consistency(clip, ref, ds.spec);
    } else {
      report.idc = identity_consistency(clip, RowVec(clip.data.row(0)), ds.spec);
    }
    if (have_windows) {
      std::vector<Clip> windows;
      std::vector<TextClass> labels;
      for (const auto& frag : sidecar["schedule"]) {
        int b = frag["begin"].get<int>(), e = frag["end"].get<int>();
        if (e - b < 4) continue;
        Clip w;
        w.data = clip.data.middleRows(b, e - b);
        windows.push_back(std::move(w));
        labels.push_back(text_class_from_string(frag["class"].get<std::string>()));
      }
      if (!windows.empty())
        report.text_align = text_align_score(window_probe, windows, labels, ds.spec);
    }
    csv << report.csv_row(prefix.filename().string() + "#" + std::to_string(i)) << "\n";
    summaries.push_back(report.to_json());
  }

  fs::path csv_path = paths.evals() / (prefix.filename().string() + "_metrics.csv");
  fs::path json_path = paths.evals() / (prefix.filename().string() + "_metrics.json");
  write_text_atomic(csv_path, csv.str());
  write_text_atomic(json_path, summaries.dump(2) + "\n");

  RunManifest m = base_manifest(cfg, "eval");
  m.metrics_files = {csv_path.string(), json_path.string()};
  m.wall_clock_s = seconds_since(t0);
  m.write(paths.out / ("manifest_eval_" + prefix.filename().string() + ".json"));
  std::cout << "eval: wrote " << csv_path.string() << "\n";
  return 0;
}

int cmd_gsb(const std::string& records_path, const std::string& out_path) {
  if (!fs::exists(records_path)) throw MissingInputError("gsb: missing records " + records_path);
  auto records = parse_gsb_csv(read_text(records_path));
  json summary = gsb_summary(records);
  std::cout << summary.dump(2) << "\n";
  if (!out_path.empty()) write_text_atomic(out_path, summary.dump(2) + "\n");
  return 0;
}

// last row of a metrics CSV, parsed loosely
std::optional<MetricRow> last_metric_row(const fs::path& csv_path) {
  std::istringstream in(read_text(csv_path));
  std::string line, last;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty()) return std::nullopt;
  std::istringstream ls(last);
  MetricRow r;
  std::string tok;
  std::getline(ls, tok, ',');
  r.step = std::stoi(tok);
  std::getline(ls, r.phase, ',');
  std::getline(ls, tok, ',');
  r.loss_fake = std::stod(tok);
  std::getline(ls, tok, ',');
  r.pseudo_loss = std::stod(tok);
  std::getline(ls, tok, ',');
  r.sync_corr_eval = std::stod(tok);
  std::getline(ls, tok, ',');
  r.text_align_eval = std::stod(tok);
  std::getline(ls, tok, ',');
  r.seed = std::stoull(tok);
  return r;
}

std::string svg_bar_chart(const std::vector<std::pair<std::string, double>>& bars,
                          const std::string& title) {
  const int bar_w = 60, gap = 30, h = 260, base = 200, left = 40;
  double maxv = 1e-9;
  for (const auto& [name, v] : bars) maxv = std::max(maxv, std::abs(v));
  std::ostringstream svg;
  int width = left + static_cast<int>(bars.size()) * (bar_w + gap) + gap;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << h << "'>\n";
  svg << "<text x='10' y='20' font-size='14'>" << title << "</text>\n";
  int x = left;
  for (const auto& [name, v] : bars) {
    int bh = static_cast<int>(std::round(std::abs(v) / maxv * 150.0));
    svg << "<rect x='" << x << "' y='" << base - bh << "' width='" << bar_w << "' height='" << bh
        << "' fill='#4477aa'/>\n";
    svg << "<text x='" << x << "' y='" << base + 16 << "' font-size='11'>" << name << "</text>\n";
    svg << "<text x='" << x << "' y='" << base - bh - 6 << "' font-size='11'>" << v << "</text>\n";
    x += bar_w + gap;
  }
  svg << "</svg>\n";
  return svg.str();
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
  if (runs.empty()) throw ConfigError("report: --runs must list at least one run directory");
  fs::path out = out_dir.empty() ? fs::path(runs.front()) / "report" : fs::path(out_dir);
  fs::create_directories(out);

  std::ostringstream csv;
  csv << "run,metrics_file,step,phase,loss_fake,pseudo_loss,sync_corr_eval,text_align_eval\n";
  std::vector<std::pair<std::string, double>> sync_bars, align_bars;
  for (const auto& run : runs) {
    fs::path mdir = fs::path(run) / "metrics";
    if (!fs::exists(mdir)) throw MissingInputError("report: no metrics under " + run);
    for (const auto& entry : fs::directory_iterator(mdir)) {
      if (entry.path().extension() != ".csv") continue;
      auto row = last_metric_row(entry.path());
      if (!row) continue;
      std::string label = fs::path(run).filename().string() + "/" + entry.path().stem().string();
      csv << run << ',' << entry.path().filename().string() << ',' << row->step << ','
          << row->phase << ',' << row->loss_fake << ',' << row->pseudo_loss << ','
          << row->sync_corr_eval << ',' << row->text_align_eval << "\n";
      sync_bars.push_back({label, row->sync_corr_eval});
      align_bars.push_back({label, row->text_align_eval});
    }
  }
  write_text_atomic(out / "comparison.csv", csv.str());
  write_text_atomic(out / "sync_corr.svg", svg_bar_chart(sync_bars, "sync_corr (final)"));
  write_text_atomic(out / "text_align.svg", svg_bar_chart(align_bars, "text_align (final)"));
  std::cout << "report: wrote " << (out / "comparison.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic avatar distillation lab"};
  app.require_subcommand(1);

  std::string config_path;
  int stage = 1;
  std::string teacher = "audio";
  std::string mode = "twin-then-vanilla";
  std::string dynamic_cfg = "on";
  std::string student_name = "student_twin-then-vanilla";
  uint64_t ref_seed = 1001, audio_seed = 2002, gen_seed = 3003;
  std::string prompts = "talk";
  double duration = 2.4;
  int offset = -1;
  std::string out_name = "generated";
  std::string clips_arg, against = "ground-truth";
  std::string records_path, gsb_out;
  std::vector<std::string> runs;
  std::string report_out;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config JSON")->required();
  };

  auto* sub_gen_data = app.add_subcommand("gen-data", "generate the biased and uniform datasets");
  add_config(sub_gen_data);

  auto* sub_pretrain = app.add_subcommand("pretrain", "flow-matching pretraining");
  add_config(sub_pretrain);
  sub_pretrain->add_option("--stage", stage, "1 or 2")->check(CLI::Range(1, 2));
  sub_pretrain->add_option("--teacher", teacher, "audio or text");

  auto* sub_distill = app.add_subcommand("distill", "post-training distillation");
  add_config(sub_distill);
  sub_distill->add_option("--mode", mode, "twin, vanilla or twin-then-vanilla");
  sub_distill->add_option("--dynamic-cfg", dynamic_cfg, "on or off");

  auto* sub_generate = app.add_subcommand("generate", "chunked stream generation");
  add_config(sub_generate);
  sub_generate->add_option("--student", student_name, "student checkpoint name");
  sub_generate->add_option("--ref-seed", ref_seed, "reference frame seed");
  sub_generate->add_option("--audio-seed", audio_seed, "audio envelope seed");
  sub_generate->add_option("--prompts", prompts, "comma-separated class names");
  sub_generate->add_option("--duration", duration, "seconds of audio to generate for");
  sub_generate->add_option("--offset", offset, "pseudo-frame position offset override");
  sub_generate->add_option("--out", out_name, "output clip name");
  sub_generate->add_option("--seed", gen_seed, "generation seed");

  auto* sub_eval = app.add_subcommand("eval", "metric report for generated clips");
  add_config(sub_eval);
  sub_eval->add_option("--clips", clips_arg, "clip dataset prefix")->required();
  sub_eval->add_option("--against", against, "reference (ground-truth)");

  auto* sub_gsb = app.add_subcommand("gsb", "aggregate G/S/B preference counts");
  sub_gsb->add_option("--records", records_path, "CSV of dimension,G,S,B rows")->required();
  sub_gsb->add_option("--out", gsb_out, "optional JSON output path");

  auto* sub_report = app.add_subcommand("report", "cross-run comparison tables and charts");
  sub_report->add_option("--runs", runs, "run output directories")->required();
  sub_report->add_option("--out", report_out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sub_gsb->parsed()) return cmd_gsb(records_path, gsb_out);
    if (sub_report->parsed()) return cmd_report(runs, report_out);

    RunConfig cfg = load_run_config(config_path);
    if (sub_gen_data->parsed()) return cmd_gen_data(cfg);
    if (sub_pretrain->parsed()) return cmd_pretrain(cfg, stage, teacher);
    if (sub_distill->parsed()) return cmd_distill(cfg, mode, dynamic_cfg);
    if (sub_generate->parsed())
      return cmd_generate(cfg, student_name, ref_seed, audio_seed, prompts, duration, offset,
                          out_name, gen_seed);
    if (sub_eval->parsed()) return cmd_eval(cfg, clips_arg, against);
    throw ConfigError("no subcommand selected");
  } catch (const ConfigError& e) {
    std::cerr << "error: code=2 kind=config msg=" << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: code=2 kind=argument msg=" << e.what() << "\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "error: code=3 kind=missing-input msg=" << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: code=3 kind=filesystem msg=" << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: code=4 kind=numeric msg=" << e.what() << "\n";
    return 4;
  }
}

#include "firework/cli.hpp"

#include "firework/data.hpp"
#include "firework/fieldops.hpp"
#include "firework/framework.hpp"
#include "firework/metrics.hpp"
#include "firework/plot.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace firework::cli {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep)) parts.push_back(cur);
  return parts;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) return s.substr(1, s.size() - 2);
  return s;
}

Shape3 parse_shape(const std::string& text) {
  const auto parts = split(text, ',');
  std::vector<Index> dims;
  try {
    for (const auto& p : parts) dims.push_back(std::stol(trim(p)));
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid shape '" + text + "'");
  }
  if (dims.size() == 1) dims = {dims[0], dims[0], dims[0]};
  if (dims.size() != 3) throw std::invalid_argument("invalid shape '" + text + "': expected D,H,W");
  for (Index d : dims)
    if (d < 1) throw std::invalid_argument("invalid shape '" + text + "': dimensions must be positive");
  return {dims[0], dims[1], dims[2]};
}

Spacing parse_spacing(const std::string& text) {
  const auto parts = split(text, ',');
  std::vector<double> v;
  try {
    for (const auto& p : parts) v.push_back(std::stod(trim(p)));
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid spacing '" + text + "'");
  }
  if (v.size() == 1) v = {v[0], v[0], v[0]};
  if (v.size() != 3 || v[0] <= 0 || v[1] <= 0 || v[2] <= 0) throw std::invalid_argument("invalid spacing '" + text + "'");
  return {v[0], v[1], v[2]};
}

// Turns `--config FILE` into leading --key=value arguments so that explicit
// flags, which come later, take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
  }
  if (file.empty()) return args;
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read config file " + file);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "config") continue;
    if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
      for (const auto& item : split(value.substr(1, value.size() - 2), ','))
        if (!trim(item).empty()) out.push_back("--" + key + "=" + unquote(item));
    } else if (!unquote(value).empty()) {
      out.push_back("--" + key + "=" + unquote(value));
    }
  }
  out.insert(out.end(), args.begin(), args.end());
  return out;
}

void echo_config(const CLI::App& cmd, const fs::path& file) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << cmd.config_to_str(true, false);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string step_name(const char* prefix, int t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%02d", prefix, t);
  return buf;
}

std::string pair_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

// ---------------------------------------------------------------- synth

struct SynthOptions {
  std::uint64_t seed = 0;
  int count = 1;
  std::string shape = "32,32,32";
  std::string out;
  double amplitude = SyntheticOptions{}.amplitude;
  double smoothing = SyntheticOptions{}.smoothing_sigma;
};

void add_synth(CLI::App& app, SynthOptions& o) {
  app.add_option("--seed", o.seed, "Dataset seed")->capture_default_str();
  app.add_option("--count", o.count, "Number of pairs")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--shape", o.shape, "Volume shape D,H,W (multiples of 4)")->capture_default_str();
  app.add_option("--out", o.out, "Output dataset directory")->required();
  app.add_option("--amplitude", o.amplitude, "Maximum ground-truth displacement (voxels)")->capture_default_str();
  app.add_option("--smoothing", o.smoothing, "Ground-truth field smoothing sigma (voxels)")->capture_default_str();
}

int cmd_synth(const CLI::App& app, const SynthOptions& o, std::ostream& out) {
  const Shape3 shape = parse_shape(o.shape);
  const Index div = RefinerConfig{}.divisor();
  if (shape.d % div || shape.h % div || shape.w % div || shape.d < 4 || shape.h < 4 || shape.w < 4) {
    throw std::invalid_argument("invalid shape " + shape.str() + ": dimensions must be multiples of " +
                                std::to_string(div));
  }
  SyntheticOptions opts;
  opts.amplitude = o.amplitude;
  opts.smoothing_sigma = o.smoothing;
  const fs::path root(o.out);
  fs::create_directories(root / "pairs");
  for (int i = 0; i < o.count; ++i) {
    const auto pair = gen_synthetic_pair<float>(mix_seed(o.seed, std::uint64_t(i)), shape, opts);
    save_pair(root / "pairs" / pair_name(i), pair);
  }
  echo_config(app, root / "run_config.ini");
  out << "wrote " << o.count << " pairs to " << (root / "pairs").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string data;
  std::string mode = "firework";
  double lr = 4e-4;
  int epochs = 30;
  double lambda = 4.0;
  int window = kDefaultNccWindow;
  std::uint64_t seed = 0;
  int steps = 5;
  int width = 8;
  int levels = 2;
  bool detach = false;
  std::string out;
};

void add_train(CLI::App& app, TrainOptions& o) {
  app.add_option("--data", o.data, "Dataset directory containing pairs/")->required();
  app.add_option("--mode", o.mode, "firework | baseline")->capture_default_str();
  app.add_option("--lr", o.lr, "Initial learning rate")->capture_default_str();
  app.add_option("--epochs", o.epochs, "Epochs M")->capture_default_str();
  app.add_option("--lambda", o.lambda, "Regularization weight")->capture_default_str();
  app.add_option("--window", o.window, "NCC window (odd)")->capture_default_str();
  app.add_option("--seed", o.seed, "Seed for weights and pair order")->capture_default_str();
  app.add_option("--steps", o.steps, "Default inference steps T recorded with the run")->capture_default_str();
  app.add_option("--width", o.width, "Base channel width")->capture_default_str();
  app.add_option("--levels", o.levels, "Encoder downsamplings")->capture_default_str();
  app.add_flag("--detach", o.detach, "Stop gradients from stage-2 inputs into stage 1");
  app.add_option("--out", o.out, "Run directory")->required();
}

int cmd_train(const CLI::App& app, const TrainOptions& o, std::ostream& out) {
  if (!fs::is_directory(o.data)) throw std::runtime_error("data directory " + o.data + " does not exist");
  TrainConfig cfg;
  cfg.mode = parse_framework_mode(o.mode);
  cfg.lr_init = o.lr;
  cfg.epochs = o.epochs;
  cfg.lambda = o.lambda;
  cfg.window = o.window;
  cfg.seed = o.seed;
  cfg.t_infer = o.steps;
  cfg.detach_stage1 = o.detach;
  cfg.validate();
  RefinerConfig net = RefinerConfig::for_mode(cfg.mode, o.seed);
  net.base_width = o.width;
  net.levels = o.levels;
  net.validate();

  std::vector<ImagePair<float>> pairs;
  for (const fs::path& dir : list_pairs(o.data)) {
    pairs.push_back({load_volume<float>(dir / "moving"), load_volume<float>(dir / "fixed")});
  }
  if (pairs.empty()) throw std::runtime_error("no pairs found under " + o.data);

  const fs::path run(o.out);
  fs::create_directories(run);
  echo_config(app, run / "run_config.ini");
  const TrainResult<float> result = train<float>(pairs, cfg, net, [&out, &cfg](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %d/%d lr=%.3g sim1=%.5f sim2=%.5f reg1=%.5f reg2=%.5f total=%.5f\n", r.epoch,
                  cfg.epochs, r.lr, r.sim1, r.sim2, r.reg1, r.reg2, r.total);
    out << buf << std::flush;
  });
  save_checkpoint((run / "checkpoint.bin").string(), Checkpoint{cfg.mode, result.params});
  std::ofstream log(run / "train_log.csv");
  write_training_log_csv(log, result.log);
  if (!log) throw std::runtime_error("cannot write training log");
  out << "checkpoint " << (run / "checkpoint.bin").string() << " fingerprint " << result.params.fingerprint() << "\n";
  return 0;
}

// ------------------------------------------------------------- register

struct RegisterOptions {
  std::string checkpoint;
  std::string moving;
  std::string fixed;
  std::string moving_labels;
  int steps = 5;
  bool check_telescoping = false;
  std::string out;
};

void add_register(CLI::App& app, RegisterOptions& o) {
  app.add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  app.add_option("--moving", o.moving, "Moving volume")->required();
  app.add_option("--fixed", o.fixed, "Fixed volume")->required();
  app.add_option("--moving-labels", o.moving_labels, "Moving label volume, warped at every step");
  app.add_option("--steps", o.steps, "Refinement steps T")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--check-telescoping", o.check_telescoping, "Verify phi_T = -sum eps_t and print PASS/FAIL");
  app.add_option("--out", o.out, "Result directory")->required();
}

int cmd_register(const CLI::App& app, const RegisterOptions& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Volume<float> moving = load_volume<float>(o.moving);
  const Volume<float> fixed = load_volume<float>(o.fixed);
  std::optional<LabelVolume> labels;
  if (!o.moving_labels.empty()) labels = load_labels(o.moving_labels);

  const PairRegistration<float> reg =
      register_pair(ck.params, moving, fixed, labels ? &*labels : nullptr, nullptr, o.steps, ck.mode);
  const RegistrationResult<float>& result = reg.result;

  const fs::path dir(o.out);
  fs::create_directories(dir);
  for (int t = 1; t <= result.step_count(); ++t) {
    const auto& step = result.steps[t - 1];
    save_field(dir / step_name("field", t), step.field, fixed.spacing);
    save_field(dir / step_name("update", t), step.update, fixed.spacing);
    save_volume(dir / step_name("warped", t), step.warped);
    if (step.warped_labels) save_labels(dir / step_name("warped_labels", t), *step.warped_labels);
  }
  save_field(dir / "field", result.final_step().field, fixed.spacing);
  save_volume(dir / "warped", result.final_step().warped);

  nlohmann::ordered_json manifest;
  manifest["mode"] = to_string(ck.mode);
  manifest["steps"] = result.step_count();
  manifest["shape"] = {fixed.shape.d, fixed.shape.h, fixed.shape.w};
  if (labels) manifest["moving_rois"] = labels->roi_ids();
  std::ofstream(dir / "result.json") << manifest.dump(2) << "\n";
  echo_config(app, dir / "run_config.ini");
  out << "wrote " << result.step_count() << " step(s) to " << dir.string() << "\n";

  if (o.check_telescoping) {
    if (ck.mode != FrameworkMode::firework) {
      out << "telescoping check: not applicable to " << to_string(ck.mode) << "\n";
      return 0;
    }
    Eigen::Array<double, Eigen::Dynamic, 3> acc = result.final_step().field.data.cast<double>();
    for (const auto& step : result.steps) acc += step.update.data.cast<double>();
    const double residual = acc.abs().maxCoeff();
    const bool pass = residual < 1e-5;
    out << "telescoping check: " << (pass ? "PASS" : "FAIL") << " (max |phi_T + sum eps_t| = " << residual << ")\n";
    return pass ? 0 : 1;
  }
  return 0;
}

// ------------------------------------------------------------- evaluate

struct EvaluateOptions {
  std::vector<std::string> result_dirs;
  std::vector<std::string> labels;
  std::vector<std::string> moving_labels;
  std::string spacing;
  std::string out;
};

void add_evaluate(CLI::App& app, EvaluateOptions& o) {
  app.add_option("--result-dir", o.result_dirs, "Result directory from `register` (repeatable)")->required()->take_all();
  app.add_option("--labels", o.labels, "Fixed label volume, one per result directory")->required()->take_all();
  app.add_option("--moving-labels", o.moving_labels, "Moving labels, if the results carry no warped labels")->take_all();
  app.add_option("--spacing", o.spacing, "Voxel spacing s0,s1,s2 in mm (default: from the label header)");
  app.add_option("--out", o.out, "Metrics CSV")->required();
}

std::vector<MetricsRecord> evaluate_result_dir(const fs::path& dir, const LabelVolume& fixed_labels,
                                               const std::optional<LabelVolume>& moving_labels, const Spacing& spacing,
                                               std::set<int>& rois) {
  std::ifstream is(dir / "result.json");
  if (!is) throw std::runtime_error("no result.json in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(is);
  const int steps = manifest.at("steps").get<int>();

  RegistrationResult<float> result;
  result.mode = parse_framework_mode(manifest.at("mode").get<std::string>());
  rois = fixed_labels.roi_ids();
  if (manifest.contains("moving_rois")) {
    for (int r : manifest.at("moving_rois").get<std::vector<int>>()) rois.insert(r);
  }
  if (moving_labels) {
    for (int r : moving_labels->roi_ids()) rois.insert(r);
  }
  for (int t = 1; t <= steps; ++t) {
    RegistrationStep<float> step;
    step.field = load_field<float>(dir / step_name("field", t));
    const fs::path stored = dir / step_name("warped_labels", t);
    if (fs::exists(fs::path(stored.string() + ".json"))) {
      step.warped_labels = load_labels(stored);
    } else if (moving_labels) {
      step.warped_labels = warp(*moving_labels, step.field, Interp::nearest);
    } else {
      throw std::runtime_error(dir.string() + " has no warped labels; pass --moving-labels");
    }
    result.steps.push_back(std::move(step));
  }
  return evaluate(result, fixed_labels, rois, spacing);
}

// Per step: DSC per ROI averaged over pairs where present, then the means
// of dsc_mean, assd_mean_mm (finite values only) and folding_ratio.
std::vector<MetricsRecord> average_over_pairs(const std::vector<std::vector<MetricsRecord>>& per_pair) {
  std::vector<MetricsRecord> out;
  const std::size_t steps = per_pair.front().size();
  for (std::size_t t = 0; t < steps; ++t) {
    MetricsRecord avg;
    avg.step = int(t) + 1;
    std::map<int, std::pair<double, int>> roi_sum;
    double dsc = 0, assd = 0, fold = 0;
    int dsc_n = 0, assd_n = 0;
    for (const auto& recs : per_pair) {
      const MetricsRecord& r = recs[t];
      if (std::isfinite(r.dsc_mean)) dsc += r.dsc_mean, ++dsc_n;
      if (std::isfinite(r.assd_mean_mm)) assd += r.assd_mean_mm, ++assd_n;
      fold += r.folding_ratio;
      for (const auto& [roi, v] : r.dsc_per_roi) {
        roi_sum[roi].first += v;
        roi_sum[roi].second += 1;
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    avg.dsc_mean = dsc_n ? dsc / dsc_n : nan;
    avg.assd_mean_mm = assd_n ? assd / assd_n : nan;
    avg.folding_ratio = fold / double(per_pair.size());
    for (const auto& [roi, s] : roi_sum) avg.dsc_per_roi[roi] = s.first / s.second;
    out.push_back(std::move(avg));
  }
  return out;
}

int cmd_evaluate(const CLI::App& app, const EvaluateOptions& o, std::ostream& out) {
  if (o.labels.size() != o.result_dirs.size()) {
    throw std::invalid_argument("--labels must be given once per --result-dir");
  }
  if (!o.moving_labels.empty() && o.moving_labels.size() != o.result_dirs.size()) {
    throw std::invalid_argument("--moving-labels must be given once per --result-dir");
  }
  std::vector<std::vector<MetricsRecord>> per_pair;
  std::set<int> all_rois;
  for (std::size_t i = 0; i < o.result_dirs.size(); ++i) {
    const LabelVolume fixed = load_labels(o.labels[i]);
    std::optional<LabelVolume> moving;
    if (!o.moving_labels.empty()) moving = load_labels(o.moving_labels[i]);
    const Spacing spacing = o.spacing.empty() ? fixed.spacing : parse_spacing(o.spacing);
    std::set<int> rois;
    per_pair.push_back(evaluate_result_dir(o.result_dirs[i], fixed, moving, spacing, rois));
    all_rois.insert(rois.begin(), rois.end());
    if (per_pair.back().size() != per_pair.front().size()) {
      throw std::runtime_error("result directories have different step counts");
    }
  }
  const std::vector<MetricsRecord> records = per_pair.size() == 1 ? per_pair.front() : average_over_pairs(per_pair);
  const fs::path csv(o.out);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  std::ofstream os(csv);
  if (!os) throw std::runtime_error("cannot write " + o.out);
  write_metrics_csv(os, records, all_rois);
  os.close();
  echo_config(app, fs::path(o.out + ".config.ini"));
  out << "wrote " << records.size() << " metric row(s) to " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------- curve

struct CurveOptions {
  std::vector<std::string> csvs;
  std::vector<std::string> labels;
  std::string column = "dsc_mean";
  std::string title = "DSC vs refinement step";
  std::string out;
};

void add_curve(CLI::App& app, CurveOptions& o) {
  app.add_option("--metrics-csv", o.csvs, "Metrics CSV, one per series (repeatable)")->required()->take_all();
  app.add_option("--labels-for-series", o.labels, "Series labels (repeatable or comma-separated)")->take_all();
  app.add_option("--column", o.column, "Metric column to plot")->capture_default_str();
  app.add_option("--title", o.title, "Plot title")->capture_default_str();
  app.add_option("--out", o.out, "Output SVG file")->required();
}

CurveSeries read_series(const std::string& path, const std::string& column, const std::string& label) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || trim(line).empty()) throw std::runtime_error(path + " is empty");
  const auto header = split(trim(line), ',');
  const auto col = std::find(header.begin(), header.end(), column);
  const auto step = std::find(header.begin(), header.end(), "step");
  if (col == header.end() || step == header.end()) throw std::runtime_error(path + " lacks a step or " + column + " column");
  CurveSeries s;
  s.label = label;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != header.size()) throw std::runtime_error(path + ": malformed row '" + line + "'");
    s.points.emplace_back(std::stoi(cells[step - header.begin()]), std::stod(cells[col - header.begin()]));
  }
  if (s.points.empty()) throw std::runtime_error(path + " has no data rows");
  return s;
}

int cmd_curve(const CLI::App& app, const CurveOptions& o, std::ostream& out) {
  std::vector<std::string> labels;
  for (const auto& l : o.labels)
    for (const auto& part : split(l, ',')) labels.push_back(trim(part));
  if (!labels.empty() && labels.size() != o.csvs.size()) {
    throw std::invalid_argument("--labels-for-series count does not match --metrics-csv count");
  }
  std::vector<CurveSeries> series;
  for (std::size_t i = 0; i < o.csvs.size(); ++i) {
    series.push_back(read_series(o.csvs[i], o.column, labels.empty() ? fs::path(o.csvs[i]).stem().string() : labels[i]));
  }
  const fs::path svg(o.out);
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  std::ofstream os(svg);
  if (!os) throw std::runtime_error("cannot write " + o.out);
  write_curve_svg(os, series, o.title, o.column);
  os.close();
  echo_config(app, fs::path(o.out + ".config.ini"));
  out << "wrote " << o.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deformable registration by iterative field refinement", "firework"};
  app.require_subcommand(1);

  SynthOptions synth;
  TrainOptions train_opts;
  RegisterOptions reg;
  EvaluateOptions eval;
  CurveOptions curve;
  std::string config_file;

  auto make = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--config", config_file, "Flat key=value config file; flags override it");
    return sub;
  };
  CLI::App* synth_cmd = make("synth", "Generate synthetic labelled pairs");
  add_synth(*synth_cmd, synth);
  CLI::App* train_cmd = make("train", "Train a refiner (firework) or cascade (baseline) network");
  add_train(*train_cmd, train_opts);
  CLI::App* reg_cmd = make("register", "Register one pair with a trained checkpoint");
  add_register(*reg_cmd, reg);
  CLI::App* eval_cmd = make("evaluate", "Per-step DSC, ASSD and folding ratio of registration results");
  add_evaluate(*eval_cmd, eval);
  CLI::App* curve_cmd = make("curve", "Plot metric-vs-step curves to SVG");
  add_curve(*curve_cmd, curve);

  try {
    std::vector<std::string> expanded;
    if (!args.empty()) {
      expanded.push_back(args[0]);
      const auto rest = expand_config(std::vector<std::string>(args.begin() + 1, args.end()));
      expanded.insert(expanded.end(), rest.begin(), rest.end());
    }
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(*synth_cmd, synth, out);
    if (train_cmd->parsed()) return cmd_train(*train_cmd, train_opts, out);
    if (reg_cmd->parsed()) return cmd_register(*reg_cmd, reg, out);
    if (eval_cmd->parsed()) return cmd_evaluate(*eval_cmd, eval, out);
    if (curve_cmd->parsed()) return cmd_curve(*curve_cmd, curve, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace firework::cli

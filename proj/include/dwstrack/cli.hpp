#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "dwstrack/checkpoint.hpp"
#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"
#include "dwstrack/data.hpp"
#include "dwstrack/eval.hpp"
#include "dwstrack/model.hpp"
#include "dwstrack/pipeline.hpp"
#include "dwstrack/train.hpp"
#include "dwstrack/version.hpp"

namespace dwstrack {
namespace cli {

struct GlobalOpts {
  uint64_t seed = 42;
  std::string config_path;
  std::string out_dir;
  int threads = 1;
  std::vector<std::string> sets;  // key=value overrides, applied after the config file
};

/// Option precedence, lowest to highest: built-in defaults, --config file,
/// repeated --set key=value overrides.
inline KeyValue resolve_settings(const GlobalOpts& g) {
  KeyValue settings;
  if (!g.config_path.empty()) settings = KeyValue::load(g.config_path);
  for (const auto& kv : g.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    settings.set(KeyValue::trim(kv.substr(0, eq)), KeyValue::trim(kv.substr(eq + 1)));
  }
  return settings;
}

inline std::string default_run_dir(uint64_t seed) {
  auto now = std::chrono::system_clock::now();
  auto tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return std::string("runs/") + buf + "_s" + std::to_string(seed);
}

/// Full resolved snapshot of a run, written before any long computation so
/// the run can be reproduced with --from-manifest.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const GlobalOpts& g, const KeyValue& settings,
                           const std::vector<std::pair<std::string, std::string>>& args) {
  std::filesystem::create_directories(out_dir);
  KeyValue m;
  m.format_tag = "dwstrack-manifest v1";
  m.set("command", command);
  m.set("tool_version", kToolVersion);
  m.set("seed", std::to_string(g.seed));
  m.set("out_dir", out_dir);
  m.set("threads", std::to_string(g.threads));
  for (const auto& a : args) m.append("arg." + a.first, a.second);
  // Resolved config snapshot with every default filled in.
  KeyValue resolved = settings;
  ModelConfig::from_kv(settings).to_kv(resolved);
  TrainConfig::from_kv(settings).to_kv(resolved);
  resolved.set("data.window_stride", settings.get_or("data.window_stride", "0"));
  for (const auto& kv : resolved.items()) m.append("cfg." + kv.first, kv.second);
  m.save(out_dir + "/manifest.txt");
}

inline int cmd_synth(const std::string& profile_path, int64_t count, const GlobalOpts& g) {
  if (count < 1) throw ConfigError("synth: --count must be >= 1");
  MotionProfile profile = MotionProfile::load(profile_path);
  KeyValue settings = resolve_settings(g);
  std::string out_dir = g.out_dir.empty() ? default_run_dir(g.seed) : g.out_dir;
  write_manifest(out_dir, "synth", g, settings,
                 {{"profile", profile_path}, {"count", std::to_string(count)}});

  std::vector<std::string> ids;
  for (int64_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03d", static_cast<int>(i));
    ImuSequence seq = synthesize(profile, derive_seed(g.seed, static_cast<uint64_t>(i)));
    seq.sequence_id = name;
    save_sequence(seq, out_dir + "/" + name + ".txt");
    ids.push_back(name);
  }
  std::string notice;
  SplitSpec split = make_split(ids, g.seed, &notice);
  split.save(out_dir + "/split.txt");
  if (!notice.empty()) std::cerr << "warning: " << notice << "\n";
  std::cout << "wrote " << count << " sequences and split.txt (train=" << split.train.size()
            << " val=" << split.val.size() << " test=" << split.test.size() << ") to " << out_dir
            << "\n";
  return 0;
}

inline std::vector<ImuWindow> windows_for_ids(const std::string& data_dir,
                                              const std::vector<std::string>& ids, int64_t window_len,
                                              int64_t stride) {
  std::vector<ImuWindow> all;
  for (const auto& id : ids) {
    ImuSequence seq = load_sequence(data_dir + "/" + id + ".txt");
    auto res = make_windows(seq, window_len, stride);
    if (!res.notice.empty()) std::cerr << "warning: " << res.notice << "\n";
    all.insert(all.end(), res.windows.begin(), res.windows.end());
  }
  return all;
}

inline int cmd_train(const std::string& data_dir, const GlobalOpts& g, const std::string& ablation,
                     bool dry_run, const std::string& resume_path) {
  KeyValue settings = resolve_settings(g);
  ModelConfig mc = ModelConfig::from_kv(settings);
  if (ablation == "no-msgcu")
    mc.enable_msgcu = false;
  else if (!ablation.empty() && ablation != "none")
    throw ConfigError("train: unknown --ablation '" + ablation + "' (expected 'no-msgcu')");
  mc.validate();
  TrainConfig tc = TrainConfig::from_kv(settings);
  tc.seed = g.seed;

  if (dry_run) {
    DwsformerModel model(mc, derive_seed(g.seed, 1));
    auto flops = model.count_flops(mc.window_len);
    std::cout << "parameters: " << model.count_parameters() << "\n";
    std::cout << "flops(L=" << mc.window_len << "): " << flops.total << " MACs\n";
    auto lengths = mc.stage_lengths(mc.window_len);
    std::cout << "stage lengths:";
    for (auto l : lengths) std::cout << " " << l;
    std::cout << "\n";
    return 0;
  }

  std::string split_path = data_dir + "/split.txt";
  if (!std::filesystem::exists(split_path))
    throw IoError("train: missing split file: " + split_path);
  SplitSpec split = SplitSpec::load(split_path);

  std::string out_dir = g.out_dir.empty() ? default_run_dir(g.seed) : g.out_dir;
  write_manifest(out_dir, "train", g, settings,
                 {{"data_dir", data_dir}, {"ablation", ablation}, {"resume", resume_path}});

  int64_t stride = settings.get_int_or("data.window_stride", 0);
  if (stride <= 0) stride = std::max<int64_t>(1, mc.window_len / 2);
  auto train_windows = windows_for_ids(data_dir, split.train, mc.window_len, stride);
  auto val_windows = windows_for_ids(data_dir, split.val, mc.window_len, mc.window_len);
  if (train_windows.empty() || val_windows.empty())
    throw ConfigError("train: empty train or val window set (train=" +
                      std::to_string(train_windows.size()) + ", val=" +
                      std::to_string(val_windows.size()) + ")");

  NormStats norm = normalize_stats(train_windows);
  if (!norm.notice.empty()) std::cerr << "warning: " << norm.notice << "\n";

  DwsformerModel model(mc, derive_seed(g.seed, 1));
  std::unique_ptr<Checkpoint> resume;
  if (!resume_path.empty()) {
    resume = std::make_unique<Checkpoint>(read_checkpoint(resume_path));
    norm = norm_from_checkpoint(*resume);
  }
  TrainResult res = train_model(model, train_windows, val_windows, norm, tc, out_dir, resume.get());
  std::cout << "best val loss " << format_double(res.best_val) << " at epoch " << res.best_epoch
            << (res.terminated_by_lr ? " (stopped by lr schedule)" : "") << "\n";
  std::cout << "checkpoint: " << res.best_checkpoint << "\n";
  return 0;
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
                    const std::string& split_name, const GlobalOpts& g) {
  KeyValue settings = resolve_settings(g);
  Checkpoint ck = read_checkpoint(checkpoint_path);
  std::string split_path = data_dir + "/split.txt";
  if (!std::filesystem::exists(split_path)) throw IoError("eval: missing split file: " + split_path);
  SplitSpec split = SplitSpec::load(split_path);
  const std::vector<std::string>* ids = nullptr;
  if (split_name == "train")
    ids = &split.train;
  else if (split_name == "val")
    ids = &split.val;
  else if (split_name == "test")
    ids = &split.test;
  else
    throw ConfigError("eval: unknown split '" + split_name + "' (train|val|test)");
  if (ids->empty()) throw ConfigError("eval: split '" + split_name + "' is empty");

  std::string out_dir = g.out_dir.empty() ? default_run_dir(g.seed) : g.out_dir;
  write_manifest(out_dir, "eval", g, settings,
                 {{"checkpoint", checkpoint_path}, {"data_dir", data_dir}, {"split", split_name}});

  NormStats norm = norm_from_checkpoint(ck);
  double interval = settings.get_double_or("eval.rte_interval_s", 60.0);

  EvalReport report;
  report.rte_interval_s = interval;
  report.sequences.resize(ids->size());
  std::vector<std::pair<Trajectory, Trajectory>> aligned(ids->size());

  int threads = std::max(1, g.threads);
  auto worker = [&](size_t begin, size_t end) {
    // Each worker owns its model instance; the checkpoint is shared read-only.
    auto model = model_from_checkpoint(ck);
    for (size_t i = begin; i < end; ++i) {
      ImuSequence seq = load_sequence(data_dir + "/" + (*ids)[i] + ".txt");
      report.sequences[i] = evaluate_sequence(*model, seq, norm, interval, &aligned[i]);
    }
  };
  if (threads <= 1 || ids->size() <= 1) {
    worker(0, ids->size());
  } else {
    std::vector<std::thread> pool;
    size_t per = (ids->size() + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
    for (size_t at = 0; at < ids->size(); at += per)
      pool.emplace_back(worker, at, std::min(ids->size(), at + per));
    for (auto& th : pool) th.join();
  }

  export_report(report, out_dir, aligned);
  std::cout << "split " << split_name << ": mean ATE " << format_double(report.mean(&SequenceEval::ate_m))
            << " m, mean RTE " << format_double(report.mean(&SequenceEval::rte_m)) << " m, mean PDE "
            << format_double(report.mean(&SequenceEval::pde)) << "\n";
  std::cout << "report: " << out_dir << "/metrics.csv\n";
  return 0;
}

inline int cmd_predict(const std::string& checkpoint_path, const std::string& sequence_path,
                       const std::string& out_path, const GlobalOpts& g) {
  KeyValue settings = resolve_settings(g);
  Checkpoint ck = read_checkpoint(checkpoint_path);
  ImuSequence seq = load_sequence(sequence_path);

  std::string out_dir = std::filesystem::path(out_path).parent_path().string();
  if (out_dir.empty()) out_dir = ".";
  write_manifest(out_dir, "predict", g, settings,
                 {{"checkpoint", checkpoint_path}, {"sequence", sequence_path}, {"out", out_path}});

  auto model = model_from_checkpoint(ck);
  NormStats norm = norm_from_checkpoint(ck);
  auto pred = predict_sequence(*model, seq, norm);

  std::ofstream out(out_path);
  if (!out) throw IoError("cannot write trajectory: " + out_path);
  if (pred.has_ground_truth) {
    auto gtp = resample(pred.ground_truth, pred.estimate.times);
    out << "t,est_x,est_y,gt_x,gt_y\n";
    for (size_t k = 0; k < pred.estimate.times.size(); ++k)
      out << format_double(pred.estimate.times[k]) << "," << format_double(pred.estimate.positions[k][0])
          << "," << format_double(pred.estimate.positions[k][1]) << "," << format_double(gtp[k][0])
          << "," << format_double(gtp[k][1]) << "\n";
  } else {
    out << "t,est_x,est_y\n";
    for (size_t k = 0; k < pred.estimate.times.size(); ++k)
      out << format_double(pred.estimate.times[k]) << "," << format_double(pred.estimate.positions[k][0])
          << "," << format_double(pred.estimate.positions[k][1]) << "\n";
  }
  std::cout << "wrote " << pred.estimate.times.size() << " trajectory rows to " << out_path << "\n";
  return 0;
}

inline int cmd_inspect(const std::string& checkpoint_path, int64_t window_len, const GlobalOpts& g) {
  KeyValue settings = resolve_settings(g);
  std::unique_ptr<DwsformerModel> model;
  if (!checkpoint_path.empty()) {
    Checkpoint ck = read_checkpoint(checkpoint_path);
    model = model_from_checkpoint(ck);
  } else {
    ModelConfig mc = ModelConfig::from_kv(settings);
    mc.validate();
    model = std::make_unique<DwsformerModel>(mc, derive_seed(g.seed, 1));
  }
  const ModelConfig& mc = model->config();
  int64_t len = window_len > 0 ? window_len : mc.window_len;

  std::cout << "parameters (name shape count):\n";
  for (const auto& p : model->params().params)
    std::cout << "  " << p.first << " " << shape_to_string(p.second.shape()) << " " << p.second.numel()
              << "\n";
  std::cout << "total parameters: " << model->count_parameters() << "\n";

  auto lengths = mc.stage_lengths(len);
  std::cout << "stage lengths at L=" << len << ":";
  for (size_t i = 0; i < lengths.size(); ++i)
    std::cout << (i ? " -> " : " ") << lengths[i];
  std::cout << "\n";

  auto flops = model->count_flops(len);
  std::cout << "flop breakdown (multiply-accumulate pairs):\n";
  for (const auto& item : flops.items) std::cout << "  " << item.name << " " << item.macs << "\n";
  std::cout << "total MACs per window: " << flops.total << "\n";
  return 0;
}

inline int run_from_manifest(const std::string& manifest_path, const GlobalOpts& overrides) {
  KeyValue m = KeyValue::load(manifest_path);
  GlobalOpts g;
  g.seed = static_cast<uint64_t>(m.get_int("seed"));
  g.out_dir = overrides.out_dir.empty() ? m.get("out_dir") : overrides.out_dir;
  g.threads = static_cast<int>(m.get_int_or("threads", 1));
  for (const auto& kv : m.items())
    if (kv.first.rfind("cfg.", 0) == 0) g.sets.push_back(kv.first.substr(4) + "=" + kv.second);
  auto arg = [&m](const std::string& name) { return m.get_or("arg." + name, ""); };
  std::string command = m.get("command");
  if (command == "synth")
    return cmd_synth(arg("profile"), KeyValue::parse_int(arg("count"), "count"), g);
  if (command == "train")
    return cmd_train(arg("data_dir"), g, arg("ablation"), false, arg("resume"));
  if (command == "eval") return cmd_eval(arg("checkpoint"), arg("data_dir"), arg("split"), g);
  if (command == "predict") return cmd_predict(arg("checkpoint"), arg("sequence"), arg("out"), g);
  throw ConfigError("manifest: cannot re-run command '" + command + "'");
}

/// Entry point shared by the binary and the test suite. Exit codes: 0 success,
/// 2 usage/input error, 3 numeric failure.
inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"dwstrack: inertial odometry from 6-axis IMU windows — synthetic data generation, "
               "training, trajectory evaluation"};
  app.set_version_flag("--version", kToolVersion);

  GlobalOpts g;
  std::string from_manifest;
  app.add_option("--seed", g.seed, "root seed for all randomness");
  app.add_option("--config", g.config_path, "config file (key = value lines)");
  app.add_option("--out-dir", g.out_dir, "output directory (default runs/<timestamp>_s<seed>)");
  app.add_option("--threads", g.threads, "worker threads for per-sequence evaluation");
  app.add_option("--set", g.sets, "override a config key, e.g. --set train.lr=1e-4")
      ->take_all();
  app.add_option("--from-manifest", from_manifest, "re-run a recorded run from its manifest");

  std::string profile_path;
  int64_t count = 10;
  auto* synth = app.add_subcommand("synth", "generate synthetic IMU sequences plus a split file");
  synth->add_option("--profile", profile_path, "motion profile file")->required();
  synth->add_option("--count", count, "number of sequences");

  std::string data_dir, ablation, resume_path;
  bool dry_run = false;
  auto* train = app.add_subcommand("train", "train the model on a sequence directory");
  train->add_option("--data-dir", data_dir, "directory with sequences and split.txt")->required();
  train->add_option("--ablation", ablation, "'no-msgcu' trains without the gated conv unit");
  train->add_flag("--dry-run", dry_run, "print parameter/FLOP counts and exit");
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  std::string ckpt_path, split_name = "test";
  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  evalc->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  evalc->add_option("--data-dir", data_dir, "directory with sequences and split.txt")->required();
  evalc->add_option("--split", split_name, "train|val|test (default test)");

  std::string sequence_path, out_path;
  auto* predict = app.add_subcommand("predict", "predict a trajectory for one sequence");
  predict->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  predict->add_option("--sequence", sequence_path, "sequence file")->required();
  predict->add_option("--out", out_path, "output trajectory file")->required();

  int64_t inspect_len = 0;
  auto* inspect = app.add_subcommand("inspect", "print parameter table, shapes and FLOP breakdown");
  inspect->add_option("--checkpoint", ckpt_path, "checkpoint file (else built from --config)");
  inspect->add_option("--window-len", inspect_len, "window length for shape/FLOP accounting");

  std::vector<const char*> argv;
  argv.push_back("dwstrack");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (!from_manifest.empty()) return run_from_manifest(from_manifest, g);
    if (synth->parsed()) return cmd_synth(profile_path, count, g);
    if (train->parsed()) return cmd_train(data_dir, g, ablation, dry_run, resume_path);
    if (evalc->parsed()) return cmd_eval(ckpt_path, data_dir, split_name, g);
    if (predict->parsed()) return cmd_predict(ckpt_path, sequence_path, out_path, g);
    if (inspect->parsed()) return cmd_inspect(ckpt_path, inspect_len, g);
    std::cerr << "error: no command given (see --help)\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(std::move(args));
}

}  // namespace cli
}  // namespace dwstrack

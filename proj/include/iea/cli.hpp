#pragma once

// The iea-cnn command line: train, eval, sweep-m, ensemble and analyze.
// Options come from flags and an optional key=value file (--config); flags
// win. Every run echoes its resolved options to <out>/runspec.txt, which can
// be fed back through --config.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "iea/iea.hpp"

namespace iea::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

struct RunSpec {
  std::string command;

  std::string data_format = "idx";
  std::string data_dir = "data/mnist-subset";
  std::string train_images, train_labels, test_images, test_labels;
  std::string amat, amat_test;
  std::vector<std::size_t> amat_split{50000, 12000};
  bool transpose = false;
  std::size_t synth_train = 1000, synth_test = 200, synth_classes = 10;
  std::uint64_t data_seed = 1;
  std::size_t limit_train = 5000, limit_test = 1000;

  std::size_t depth = 1;
  std::vector<std::size_t> channels;
  std::size_t m = 1;
  std::vector<std::size_t> m_list;
  std::size_t head_grid = kDefaultHeadGrid;

  std::size_t epochs = 350;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t lr_drop_every = 100;
  double lr_drop_factor = 10.0;
  std::size_t batch_size = 128;
  std::vector<std::uint64_t> seeds{0};

  std::string checkpoint;
  std::vector<std::string> checkpoints;
  std::size_t layer = 0;
  std::size_t probe_index = 0;
  std::size_t probe_count = 1;

  std::string out = "runs/out";
  bool force = false;
  bool quiet = false;
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"train", "eval", "sweep-m", "ensemble", "analyze"};
  return c;
}

inline void add_options(CLI::App& app, RunSpec& s) {
  app.option_defaults()->always_capture_default();
  app.add_option("command", s.command, "train | eval | sweep-m | ensemble | analyze")
      ->required()
      ->check(CLI::IsMember(commands()));

  auto* data = "Data";
  app.add_option("--data-format", s.data_format, "idx, amat or synth")->check(CLI::IsMember({"idx", "amat", "synth"}))->group(data);
  app.add_option("--data-dir", s.data_dir, "directory holding the four standard MNIST IDX files (.gz or plain)")->group(data);
  app.add_option("--train-images", s.train_images)->group(data);
  app.add_option("--train-labels", s.train_labels)->group(data);
  app.add_option("--test-images", s.test_images)->group(data);
  app.add_option("--test-labels", s.test_labels)->group(data);
  app.add_option("--amat", s.amat, "amat file; split into train/test rows unless --amat-test is given")->group(data);
  app.add_option("--amat-test", s.amat_test, "separate amat test file")->group(data);
  app.add_option("--amat-split", s.amat_split, "train,test row counts taken from --amat")->delimiter(',')->expected(2)->group(data);
  app.add_flag("--transpose", s.transpose, "transpose amat images (column-major files)")->group(data);
  app.add_option("--synth-train", s.synth_train)->group(data);
  app.add_option("--synth-test", s.synth_test)->group(data);
  app.add_option("--synth-classes", s.synth_classes)->group(data);
  app.add_option("--data-seed", s.data_seed, "seed of the synthetic set")->group(data);
  app.add_option("--limit-train", s.limit_train, "use the first N training samples (0 = all)")->group(data);
  app.add_option("--limit-test", s.limit_test, "use the first N test samples (0 = all)")->group(data);

  auto* model = "Model";
  app.add_option("--depth", s.depth)->group(model);
  app.add_option("--channels", s.channels, "output channels per layer (default 32, 64, 128, ...)")->delimiter(',')->group(model);
  app.add_option("--m", s.m, "inner ensemble members per layer")->group(model);
  app.add_option("--m-list", s.m_list, "m values for sweep-m")->delimiter(',')->group(model);
  app.add_option("--head-grid", s.head_grid, "average-pool grid in front of the linear head (1 = global)")->group(model);

  auto* optim = "Training";
  app.add_option("--epochs", s.epochs)->group(optim);
  app.add_option("--lr", s.lr)->group(optim);
  app.add_option("--momentum", s.momentum)->group(optim);
  app.add_option("--weight-decay", s.weight_decay)->group(optim);
  app.add_option("--lr-drop-every", s.lr_drop_every)->group(optim);
  app.add_option("--lr-drop-factor", s.lr_drop_factor)->group(optim);
  app.add_option("--batch-size", s.batch_size)->group(optim);
  app.add_option("--seeds", s.seeds)->delimiter(',')->group(optim);

  auto* analysis = "Evaluation";
  app.add_option("--checkpoint", s.checkpoint)->group(analysis);
  app.add_option("--checkpoints", s.checkpoints)->delimiter(',')->group(analysis);
  app.add_option("--layer", s.layer, "layer analyzed by analyze")->group(analysis);
  app.add_option("--probe-index", s.probe_index, "first test sample used by analyze")->group(analysis);
  app.add_option("--probe-count", s.probe_count, "number of probe samples averaged by analyze")->group(analysis);

  app.add_option("--out", s.out, "output directory");
  app.add_flag("--force", s.force, "allow a non-empty output directory");
  app.add_flag("--quiet", s.quiet, "no per-epoch progress");
  app.set_config("--config", "", "key=value file; flags override it");
}

// key=value echo of every option, readable by --config. Lists are written
// comma-separated; empty lists are left out.
inline std::string runspec_text(const CLI::App& app) {
  std::string text;
  for (const CLI::Option* opt : app.get_options()) {
    const std::string key = opt->get_single_name();
    if (key.empty() || key == "help" || key == "config") continue;
    std::vector<std::string> vals = opt->results();
    if (vals.empty()) {
      std::string d = opt->get_default_str();
      if (d.size() >= 2 && (d.front() == '[' || d.front() == '{')) d = d.substr(1, d.size() - 2);
      if (d.empty()) continue;
      vals.push_back(d);
    }
    std::string joined;
    for (const auto& v : vals) joined += (joined.empty() ? "" : ",") + v;
    text += key + "=" + joined + "\n";
  }
  return text;
}

// ---------------------------------------------------------------------------
// Validation and derived configs

inline ModelConfig model_config(const RunSpec& s, std::size_t m, std::uint64_t seed, std::size_t num_classes) {
  if (s.depth == 0) throw ConfigError("depth must be at least 1");
  if (m == 0) throw ConfigError("m must be a positive integer");
  ModelConfig cfg = ModelConfig::standard(s.depth, m, seed);
  if (!s.channels.empty()) {
    if (s.channels.size() != s.depth)
      throw ConfigError("channels lists " + std::to_string(s.channels.size()) + " widths for depth " + std::to_string(s.depth));
    for (std::size_t i = 0; i < s.depth; ++i) cfg.layers[i].out_channels = s.channels[i];
  }
  if (s.head_grid == 0) throw ConfigError("head_grid must be positive");
  cfg.head_grid = s.head_grid;
  cfg.clamp_head_grid();
  cfg.num_classes = num_classes;
  cfg.validate();
  return cfg;
}

inline SgdConfig sgd_config(const RunSpec& s) {
  SgdConfig c;
  c.lr0 = s.lr;
  c.momentum = s.momentum;
  c.weight_decay = s.weight_decay;
  c.lr_drop_every = s.lr_drop_every;
  c.lr_drop_factor = s.lr_drop_factor;
  c.total_epochs = s.epochs;
  c.batch_size = s.batch_size;
  c.validate();
  return c;
}

// Keeps first occurrences in order; warns once per repeated value.
inline std::vector<std::size_t> dedup_m_list(const std::vector<std::size_t>& in, std::ostream& warn) {
  std::vector<std::size_t> out;
  std::set<std::size_t> seen, reported;
  for (std::size_t m : in) {
    if (seen.insert(m).second) {
      out.push_back(m);
    } else if (reported.insert(m).second) {
      warn << "warning: m=" << m << " listed more than once; running it once\n";
    }
  }
  return out;
}

inline std::vector<std::uint64_t> checked_seeds(const RunSpec& s) {
  if (s.seeds.empty()) throw ConfigError("seeds must list at least one seed");
  std::set<std::uint64_t> uniq(s.seeds.begin(), s.seeds.end());
  if (uniq.size() != s.seeds.size()) throw ConfigError("seeds must be distinct");
  return s.seeds;
}

// ---------------------------------------------------------------------------
// Data

struct Splits {
  Dataset train, test;
};

inline Splits load_splits(const RunSpec& s) {
  Splits d;
  if (s.transpose && s.data_format != "amat") throw ConfigError("--transpose only applies to amat data");
  if (s.data_format == "idx") {
    auto pick = [&](const std::string& given, const char* standard) {
      if (!given.empty()) return given;
      const fs::path base = fs::path(s.data_dir) / standard;
      const fs::path gz = base.string() + ".gz";
      return (fs::exists(gz) || !fs::exists(base) ? gz : base).string();
    };
    d.train = parse_idx(pick(s.train_images, "train-images-idx3-ubyte"), pick(s.train_labels, "train-labels-idx1-ubyte"));
    d.test = parse_idx(pick(s.test_images, "t10k-images-idx3-ubyte"), pick(s.test_labels, "t10k-labels-idx1-ubyte"), Split::kTest);
  } else if (s.data_format == "amat") {
    if (s.amat.empty()) throw ConfigError("amat data needs --amat");
    if (!s.amat_test.empty()) {
      d.train = parse_amat_file(s.amat, s.transpose);
      d.test = parse_amat_file(s.amat_test, s.transpose, Split::kTest);
    } else {
      if (s.amat_split.size() != 2) throw ConfigError("amat_split needs two counts");
      std::tie(d.train, d.test) = parse_amat(s.amat, {s.amat_split[0], s.amat_split[1]}, s.transpose);
    }
  } else {
    if (s.synth_classes < 2) throw ConfigError("synth_classes must be at least 2");
    if (s.synth_train < 2 || s.synth_test < 1) throw ConfigError("synthetic set sizes are too small");
    d.train = synth_blobs(s.synth_train, s.synth_classes, s.data_seed);
    d.test = synth_blobs(s.synth_test, s.synth_classes, derive_seed(s.data_seed, 1));
    d.test.split = Split::kTest;
  }
  d.train = d.train.head(s.limit_train);
  d.test = d.test.head(s.limit_test);
  const std::size_t classes = std::max(d.train.num_classes, d.test.num_classes);
  d.train.num_classes = d.test.num_classes = classes;
  const Normalization norm = fit_normalization(d.train);
  d.train = standardize(d.train, norm);
  d.test = standardize(d.test, norm);
  return d;
}

// ---------------------------------------------------------------------------
// Output directory

inline void prepare_out_dir(const RunSpec& s) {
  const fs::path dir(s.out);
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw ConfigError("output path " + s.out + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !s.force) throw ConfigError("output directory " + s.out + " is not empty (use --force)");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + s.out + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("short write to " + path.string());
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Parallel jobs: IEA_THREADS caps the worker count. Results are written by
// index, so output order never depends on scheduling.

inline std::size_t thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("IEA_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("IEA_THREADS must be a positive integer, got '") + env + "'");
    cap = static_cast<std::size_t>(v);
  }
  return cap;
}

template <class Fn>
void run_jobs(std::size_t count, Fn&& fn) {
  const std::size_t workers = std::min(count, thread_cap());
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Commands

struct TrainedRun {
  std::size_t m = 0;
  std::uint64_t seed = 0;
  RunMetrics metrics;
};

class Runner {
 public:
  Runner(RunSpec spec, std::ostream& out, std::ostream& err) : s_(std::move(spec)), out_(out), err_(err) {}

  void train_runs(const std::vector<std::size_t>& ms, const std::string& tag_fmt, std::vector<TrainedRun>& runs) {
    const auto seeds = checked_seeds(s_);
    const SgdConfig sgd = sgd_config(s_);
    const Splits data = load_splits(s_);
    for (std::size_t m : ms) model_config(s_, m, 0, data.train.num_classes);
    runs.clear();
    for (std::size_t m : ms)
      for (std::uint64_t seed : seeds) runs.push_back({m, seed, {}});
    run_jobs(runs.size(), [&](std::size_t i) {
      TrainedRun& r = runs[i];
      Model model(model_config(s_, r.m, r.seed, data.train.num_classes));
      const std::string tag = tag_for(tag_fmt, r.m, r.seed);
      TrainOptions opts;
      opts.sgd = sgd;
      opts.shuffle_seed = derive_seed(r.seed, 0x5eed);
      if (!s_.quiet)
        opts.on_epoch = [&](const EpochRecord& e) {
          std::lock_guard lock(mu_);
          out_ << tag << " epoch " << e.epoch << " lr " << e.lr << " loss " << fmt(e.train_loss) << " train_err "
               << fmt(e.train_error_pct) << " test_err " << fmt(e.test_error_pct) << '\n';
        };
      r.metrics = train(model, data.train, data.test, opts);
      r.metrics.write_csv((fs::path(s_.out) / ("metrics_" + tag + ".csv")).string());
      save_checkpoint(model, (fs::path(s_.out) / ("model_" + tag + ".ieac")).string());
    });
  }

  void cmd_train() {
    std::vector<TrainedRun> runs;
    train_runs({s_.m}, "seed{s}", runs);
    std::string csv = "seed,final_train_error_pct,final_test_error_pct\n";
    for (const auto& r : runs) {
      const auto& last = r.metrics.epochs.back();
      csv += std::to_string(r.seed) + ',' + fmt(last.train_error_pct) + ',' + fmt(last.test_error_pct) + '\n';
    }
    write_text(fs::path(s_.out) / "summary.csv", csv);
    out_ << csv;
  }

  void cmd_sweep_m() {
    if (s_.m_list.empty()) throw ConfigError("sweep-m needs --m-list");
    if (s_.seeds.size() < 2) throw ConfigError("sweep-m needs at least 2 seeds for the standard deviation");
    const auto ms = dedup_m_list(s_.m_list, err_);
    std::vector<TrainedRun> runs;
    train_runs(ms, "m{m}_seed{s}", runs);
    std::string per_run = "m,seed,test_error_pct\n", sweep = "m,mean_error,std_error\n";
    const std::size_t k = s_.seeds.size();
    for (std::size_t mi = 0; mi < ms.size(); ++mi) {
      std::vector<double> errs;
      for (std::size_t j = 0; j < k; ++j) {
        const auto& r = runs[mi * k + j];
        errs.push_back(r.metrics.final_test_error());
        per_run += std::to_string(r.m) + ',' + std::to_string(r.seed) + ',' + fmt(errs.back()) + '\n';
      }
      double mean = 0.0, var = 0.0;
      for (double e : errs) mean += e;
      mean /= static_cast<double>(k);
      for (double e : errs) var += (e - mean) * (e - mean);
      const double sd = std::sqrt(var / static_cast<double>(k - 1));
      sweep += std::to_string(ms[mi]) + ',' + fmt(mean) + ',' + fmt(sd) + '\n';
    }
    write_text(fs::path(s_.out) / "runs.csv", per_run);
    write_text(fs::path(s_.out) / "sweep.csv", sweep);
    out_ << sweep;
  }

  std::vector<std::string> checkpoint_list(std::size_t min_count) const {
    std::vector<std::string> list = s_.checkpoints;
    if (!s_.checkpoint.empty()) list.insert(list.begin(), s_.checkpoint);
    if (list.size() < min_count)
      throw ConfigError("need at least " + std::to_string(min_count) + " checkpoint(s), got " + std::to_string(list.size()));
    return list;
  }

  static void check_compatible(const Model& model, const Dataset& test, const std::string& path) {
    const auto& c = model.config();
    const auto& shape = test.images.shape();
    if (c.in_channels != shape[1] || c.in_height != shape[2] || c.in_width != shape[3])
      throw IncompatibleModelsError(path + ": model expects " + std::to_string(c.in_channels) + "x" + std::to_string(c.in_height) +
                                    "x" + std::to_string(c.in_width) + " inputs, data is " + shape_str(shape));
    for (int y : test.labels)
      if (static_cast<std::size_t>(y) >= c.num_classes)
        throw IncompatibleModelsError(path + ": label " + std::to_string(y) + " exceeds the model's " +
                                      std::to_string(c.num_classes) + " classes");
  }

  void cmd_eval() {
    const auto paths = checkpoint_list(1);
    const Splits data = load_splits(s_);
    std::string csv = "checkpoint,test_error_pct\n";
    for (const auto& p : paths) {
      Model model = load_checkpoint(p);
      check_compatible(model, data.test, p);
      csv += p + ',' + fmt(evaluate_error(model, data.test)) + '\n';
    }
    write_text(fs::path(s_.out) / "eval.csv", csv);
    out_ << csv;
  }

  void cmd_ensemble() {
    const auto paths = checkpoint_list(2);
    const Splits data = load_splits(s_);
    std::vector<Tensor> probs;
    std::size_t classes = 0;
    std::string csv = "model,test_error_pct\n";
    double mean_member = 0.0;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      Model model = load_checkpoint(paths[i]);
      if (i == 0) classes = model.config().num_classes;
      if (model.config().num_classes != classes)
        throw IncompatibleModelsError(paths[i] + " has " + std::to_string(model.config().num_classes) + " classes, " + paths[0] +
                                      " has " + std::to_string(classes));
      check_compatible(model, data.test, paths[i]);
      probs.push_back(predict_proba(model, data.test));
      const double e = error_pct(probs.back(), data.test.labels);
      mean_member += e / static_cast<double>(paths.size());
      csv += "member" + std::to_string(i) + ',' + fmt(e) + '\n';
    }
    const EnsemblePrediction ens = ensemble_average(probs);
    csv += "mean_member," + fmt(mean_member) + '\n';
    csv += "ensemble," + fmt(ensemble_error_pct(ens, data.test.labels)) + '\n';
    write_text(fs::path(s_.out) / "ensemble.csv", csv);
    out_ << csv;
  }

  void cmd_analyze() {
    const auto paths = checkpoint_list(1);
    if (paths.size() != 1) throw ConfigError("analyze takes exactly one checkpoint");
    Model model = load_checkpoint(paths[0]);
    if (s_.layer >= model.depth())
      throw ConfigError("layer " + std::to_string(s_.layer) + " out of range for a depth-" + std::to_string(model.depth()) + " model");
    if (s_.probe_count == 0) throw ConfigError("probe_count must be positive");
    const Splits data = load_splits(s_);
    check_compatible(model, data.test, paths[0]);
    if (s_.probe_index + s_.probe_count > data.test.size())
      throw ConfigError("probe samples [" + std::to_string(s_.probe_index) + ", " + std::to_string(s_.probe_index + s_.probe_count) +
                        ") exceed the " + std::to_string(data.test.size()) + " test samples");
    const Dataset probes = data.test.subset_range(s_.probe_index, s_.probe_index + s_.probe_count);
    const auto banks = extract_features(model, s_.layer, probes.images);
    double mss = 0.0;
    for (const auto& b : banks) mss += mss_score(b);
    mss /= static_cast<double>(banks.size());
    export_feature_maps(banks.front(), fs::path(s_.out) / "features");
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", s_.layer, banks.front().count(), mss);
    const std::string csv = std::string("layer,n,mss_score\n") + buf;
    write_text(fs::path(s_.out) / "mss.csv", csv);
    out_ << csv;
  }

  void run() {
    if (s_.command == "train") cmd_train();
    else if (s_.command == "eval") cmd_eval();
    else if (s_.command == "sweep-m") cmd_sweep_m();
    else if (s_.command == "ensemble") cmd_ensemble();
    else if (s_.command == "analyze") cmd_analyze();
    else throw ConfigError("unknown command " + s_.command);
  }

 private:
  static std::string tag_for(std::string f, std::size_t m, std::uint64_t seed) {
    auto put = [&](const std::string& key, const std::string& v) {
      if (auto p = f.find(key); p != std::string::npos) f.replace(p, key.size(), v);
    };
    put("{m}", std::to_string(m));
    put("{s}", std::to_string(seed));
    return f;
  }

  RunSpec s_;
  std::ostream& out_;
  std::ostream& err_;
  std::mutex mu_;
};

// Parses, prepares the output directory, runs. Returns the process exit code.
inline int main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunSpec spec;
  CLI::App app{"Inner Ensemble Average CNN: train, evaluate, sweep m, ensemble and analyze"};
  add_options(app, spec);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  try {
    if (spec.command == "train" || spec.command == "sweep-m") {
      sgd_config(spec);
      if (spec.command == "train") model_config(spec, spec.m, 0, 10);
      for (std::size_t m : spec.m_list) model_config(spec, m, 0, 10);
      checked_seeds(spec);
    }
    prepare_out_dir(spec);
    write_text(fs::path(spec.out) / "runspec.txt", runspec_text(app));
    Runner(spec, out, err).run();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const IncompatibleModelsError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace iea::cli

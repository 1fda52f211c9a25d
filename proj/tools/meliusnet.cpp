// meliusnet: cost summaries, kernel verification, training, evaluation and
// weight-flip instrumentation for MeliusNet-style binary networks.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "melius/cost.hpp"
#include "melius/io.hpp"
#include "melius/train.hpp"
#include "melius/verify.hpp"

using namespace melius;

namespace {

// Usage problems map to exit code 2, everything else that fails at runtime to 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ArchConfig arch_or_usage(const std::string& spec) {
  try {
    return load_arch(spec);
  } catch (const InvalidConfig& e) {
    throw UsageError(e.what());
  }
}

void check_data_fits(const ArchConfig& cfg, const Dataset& data) {
  const Shape s = data.image_shape();
  if (s.c != cfg.input_channels || s.h != cfg.input_height || s.w != cfg.input_width) {
    throw std::runtime_error("data images are " + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
                             std::to_string(s.w) + " but arch '" + cfg.name + "' expects " +
                             std::to_string(cfg.input_channels) + "x" + std::to_string(cfg.input_height) + "x" +
                             std::to_string(cfg.input_width));
  }
  if (data.num_classes() > cfg.num_classes) {
    throw std::runtime_error("data has labels up to " + std::to_string(data.num_classes() - 1) + " but arch '" +
                             cfg.name + "' has " + std::to_string(cfg.num_classes) + " classes");
  }
}

bool has_split(const std::filesystem::path& dir, const std::string& split) {
  const std::string stem = split + "-images-idx3-ubyte";
  return std::filesystem::exists(dir / stem) || std::filesystem::exists(dir / (stem + ".gz"));
}

Normalization stats_of(const Dataset& d) { return {d.mean, d.stddev}; }

struct SummarizeArgs {
  std::vector<std::string> archs;
  std::string input;  // empty: each arch's own input shape
  std::string format = "table";
  bool layers = false;
};

int run_summarize(const SummarizeArgs& a) {
  std::vector<ArchConfig> cfgs;
  for (const std::string& s : a.archs) cfgs.push_back(arch_or_usage(s));
  std::vector<CostReport> reports;
  try {
    if (!a.input.empty()) {
      const Shape input = parse_shape(a.input);
      for (ArchConfig& c : cfgs) {
        c.input_channels = input.c;
        c.input_height = input.h;
        c.input_width = input.w;
      }
    }
    for (const ArchConfig& c : cfgs) reports.push_back(model_cost(c));
  } catch (const InvalidConfig& e) {
    throw UsageError(e.what());
  }
  if (a.format == "json") {
    for (const CostReport& r : reports) std::cout << to_json(r, a.layers) << "\n";
  } else {
    for (const CostReport& r : reports) std::cout << format_table(r, a.layers);
    if (reports.size() > 1) std::cout << "\n" << format_comparison(reports);
  }
  return 0;
}

int run_verify(int trials, std::uint64_t seed) {
  bool ok = true;
  for (const PropertyResult& r : run_property_suite(trials, seed)) {
    std::cout << (r.ok() ? "ok   " : "FAIL ") << r.name << ": " << r.cases << " cases, " << r.failures
              << " mismatches";
    if (!r.ok()) std::cout << " (first: " << r.first_failure << ")";
    std::cout << "\n";
    ok = ok && r.ok();
  }
  return ok ? 0 : 1;
}

struct TrainArgs {
  std::string arch;
  std::string data;
  TrainConfig cfg;
  std::string out;
  std::string csv;
  bool no_hflip = false;
  bool accumulate_flips = false;
  std::string optimizer = "adam";
};

int run_train(TrainArgs a, bool flips_only) {
  const ArchConfig arch = arch_or_usage(a.arch);
  a.cfg.hflip = !a.no_hflip;
  a.cfg.reset_flips_per_epoch = !a.accumulate_flips;
  a.cfg.optimizer = a.optimizer == "sgd" ? OptimizerKind::kSgdMomentum : OptimizerKind::kAdam;
  try {
    a.cfg.validate();
  } catch (const InvalidConfig& e) {
    throw UsageError(e.what());
  }

  const Dataset train = load_idx_split(a.data, "train");
  check_data_fits(arch, train);
  std::optional<Dataset> test;
  if (!flips_only && has_split(a.data, "t10k")) test = load_idx_split(a.data, "t10k", stats_of(train));

  ModelGraph<float> g = build_model<float>(arch, a.cfg.seed);
  TrainState state = TrainState::create(g, a.cfg, true);

  std::ofstream csv;
  if (!a.csv.empty()) {
    csv.open(a.csv);
    if (!csv) throw std::runtime_error("cannot open '" + a.csv + "' for writing");
    csv << (flips_only ? kFlipCsvHeader : kEpochCsvHeader) << "\n";
  }
  std::cout << arch.name << ": " << train.size() << " training images, "
            << (test ? std::to_string(test->size()) + " test images" : std::string("no test split")) << "\n";
  for (int e = 0; e < a.cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochMetrics m = train_epoch(g, train, a.cfg, state);
    const double test_top1 = test ? evaluate(g, *test) : -1;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << format_epoch(m, test_top1) << " (" << std::fixed << std::setprecision(1) << secs << "s)\n"
              << std::defaultfloat << std::flush;
    if (!csv.is_open()) continue;
    if (flips_only) {
      for (const FlipSummary& s : state.flips->summarize()) csv << flip_csv_row(m.epoch, s) << "\n";
      csv << flip_csv_row(m.epoch, state.flips->summarize_all()) << "\n";
    } else {
      csv << epoch_csv_row(m, test_top1) << "\n";
    }
  }
  if (!a.out.empty()) {
    export_weights(g, a.out, ExportOptions{.include_buffers = true});
    std::cout << "wrote " << a.out << " (" << std::filesystem::file_size(a.out) << " bytes)\n";
  }
  return 0;
}

int run_eval(const std::string& arch_spec, const std::string& weights, const std::string& data) {
  const ArchConfig arch = arch_or_usage(arch_spec);
  ModelGraph<float> g = build_model<float>(arch, 0);
  load_weights(g, import_weights(weights));
  // The test split is normalized with training statistics when the training split is present.
  std::optional<Normalization> stats;
  if (has_split(data, "train")) stats = stats_of(load_idx_split(data, "train"));
  const Dataset test = load_idx_split(data, has_split(data, "t10k") ? "t10k" : "train", stats);
  check_data_fits(arch, test);
  std::cout << "top1 " << evaluate(g, test) << " on " << test.size() << " images\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MeliusNet binary network toolkit"};
  app.require_subcommand(1);

  SummarizeArgs sum;
  auto* summarize = app.add_subcommand("summarize", "Operation counts and model size");
  summarize->add_option("--arch", sum.archs, "Preset name or config file (repeat to compare)")->required();
  summarize->add_option("--input", sum.input, "Input shape CxHxW (default: the arch's own)");
  summarize->add_option("--format", sum.format, "table or json")
      ->check(CLI::IsMember({"table", "json"}))
      ->capture_default_str();
  summarize->add_flag("--layers", sum.layers, "Include per-layer rows");

  int trials = 100;
  std::uint64_t verify_seed = 0;
  auto* verify = app.add_subcommand("verify", "Run the xnor-conv, sign and STE property suites");
  verify->add_option("--trials", trials, "Randomized conv cases")->check(CLI::PositiveNumber)->capture_default_str();
  verify->add_option("--seed", verify_seed)->capture_default_str();

  TrainArgs tr;
  auto add_train_options = [&](CLI::App* cmd, bool flips) {
    cmd->add_option("--arch", tr.arch, "Preset name or config file")->required();
    cmd->add_option("--data", tr.data, "Directory with IDX train/t10k files")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
    cmd->add_option("--lr", tr.cfg.base_lr, "Base learning rate")->capture_default_str();
    cmd->add_option("--warmup", tr.cfg.warmup_epochs, "Warmup epochs")->capture_default_str();
    cmd->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
    cmd->add_option("--seed", tr.cfg.seed)->capture_default_str();
    cmd->add_option("--clip", tr.cfg.t_clip, "STE clip threshold")->capture_default_str();
    cmd->add_option("--crop-padding", tr.cfg.crop_padding)->capture_default_str();
    cmd->add_flag("--no-hflip", tr.no_hflip, "Disable random horizontal flips");
    cmd->add_option("--csv", tr.csv, flips ? "Per-layer flip summaries" : "Per-epoch metrics");
    cmd->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
    if (flips) {
      cmd->add_flag("--accumulate", tr.accumulate_flips, "Accumulate flip counts across epochs");
    } else {
      cmd->add_option("--out", tr.out, "Weight file to write");
    }
  };
  auto* train = app.add_subcommand("train", "Train on an IDX dataset");
  add_train_options(train, false);
  auto* flips = app.add_subcommand("flips", "Training run that logs per-layer weight sign flips");
  add_train_options(flips, true);

  std::string eval_arch, eval_weights, eval_data;
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a weight file");
  eval->add_option("--arch", eval_arch)->required();
  eval->add_option("--weights", eval_weights)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data)->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*summarize) return run_summarize(sum);
    if (*verify) return run_verify(trials, verify_seed);
    if (*train) return run_train(tr, false);
    if (*flips) return run_train(tr, true);
    if (*eval) return run_eval(eval_arch, eval_weights, eval_data);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

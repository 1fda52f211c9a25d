// Acceptance checks. Prints one PASS/FAIL line per criterion; pass criterion
// numbers as arguments to run a subset. Exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "melius/cost.hpp"
#include "melius/io.hpp"
#include "melius/verify.hpp"
#include "support.hpp"

using namespace melius;
using namespace melius::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [" << what << "]";
    }
  }
};

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

// Published rows: name, BOPs 1e9, FLOPs 1e8, OPs 1e8, size MB, transition fractions.
struct TableRow {
  const char* preset;
  double bops, flops, ops, mb;
  std::array<Fraction, 3> fractions;
};

const TableRow kPublished[] = {
    {"meliusnet22", 4.62, 1.35, 2.08, 3.9, {{{160, 320}, {224, 480}, {256, 480}}}},
    {"meliusnet29", 5.47, 1.29, 2.14, 5.1, {{{128, 320}, {192, 512}, {256, 704}}}},
    {"meliusnet42", 9.69, 1.74, 3.25, 10.1, {{{160, 384}, {256, 672}, {416, 1152}}}},
    {"meliusnet59", 18.3, 2.45, 5.25, 17.4, {{{192, 448}, {320, 960}, {544, 1856}}}},
    {"meliusnetA", 4.85, 0.86, 1.62, 4.0, {{{160, 320}, {256, 480}, {288, 576}}}},
    {"meliusnetB", 5.72, 1.06, 1.96, 5.0, {{{160, 320}, {224, 544}, {320, 736}}}},
    {"meliusnetC", 4.35, 0.82, 1.50, 4.5, {{{128, 256}, {192, 448}, {224, 704}}}},
};

Outcome cost_table() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_bops = 0, worst_other = 0;
  for (const TableRow& row : kPublished) {
    ArchConfig cfg = preset(row.preset);
    cfg.input_channels = 3;
    cfg.input_height = cfg.input_width = 224;
    const CostTotals t = model_cost(cfg).totals;
    const double b = rel(double(t.bops) / 1e9, row.bops);
    const double f = rel(double(t.flops) / 1e8, row.flops);
    const double p = rel(t.ops / 1e8, row.ops);
    const double m = rel(t.size_mb, row.mb);
    worst_bops = std::max(worst_bops, b);
    worst_other = std::max({worst_other, f, p, m});
    o.require(b <= 0.01, std::string(row.preset) + " BOPs");
    o.require(f <= 0.03, std::string(row.preset) + " FLOPs");
    o.require(p <= 0.03, std::string(row.preset) + " OPs");
    o.require(m <= 0.03, std::string(row.preset) + " size");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 1.0, "runtime");
  o.detail << " worst BOPs dev " << worst_bops * 100 << "%, worst FLOPs/OPs/size dev " << worst_other * 100
           << "%, " << secs << " s";
  return o;
}

Outcome stems() {
  Outcome o;
  const Shape in{1, 3, 224, 224};
  const double seven = double(model_cost(build_stem_7x7(3), in).totals.flops);
  const double grouped = double(model_cost(build_grouped_stem(3), in).totals.flops);
  o.require(rel(seven, 1.18e8) <= 0.01, "7x7 stem");
  o.require(rel(grouped, 0.69e8) <= 0.01, "grouped stem");
  o.require(rel(seven - grouped, 0.49e8) <= 0.01, "difference");
  o.detail << " 7x7 " << seven << ", grouped " << grouped << ", saved " << seven - grouped;
  return o;
}

Outcome kernels() {
  Outcome o;
  const auto t0 = Clock::now();
  const PropertyResult r = verify_xnor_conv(1000, 2024);
  const double secs = seconds_since(t0);
  o.require(r.ok(), r.first_failure);
  o.require(r.cases == 1000, "case count");
  o.require(secs < 30, "runtime");
  o.detail << " " << r.cases << " cases, " << r.failures << " mismatches, " << secs << " s";
  return o;
}

Outcome ste() {
  Outcome o;
  std::mt19937_64 rng(77);
  const float clip = 1.3f;
  std::uniform_real_distribution<float> wide(-4.0f, 4.0f);
  Tensor<float> x(Shape{1, 1, 1, 10000});
  for (Index i = 0; i < x.size(); ++i) x[i] = wide(rng);
  const float specials[] = {clip, -clip, 0.0f, -0.0f, std::nextafter(clip, 2.0f), std::nextafter(-clip, -2.0f),
                            std::nextafter(clip, 0.0f), std::nextafter(-clip, 0.0f)};
  for (std::size_t i = 0; i < std::size(specials); ++i) x[Index(i)] = specials[i];
  const Tensor<float> up = random_tensor<float>(x.shape(), rng, -2, 2);
  const Tensor<float> g = ste_backward(x, up, clip);
  const Tensor<float> s = sign_values(x);
  const BitTensor bits = sign_forward(x);
  Index mismatches = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const float mask = std::abs(x[i]) <= clip ? 1.0f : 0.0f;
    const float sign = x[i] >= 0.0f ? 1.0f : -1.0f;
    mismatches += g[i] != mask * up[i];
    mismatches += s[i] != sign;
    mismatches += bits.bit(0, 0, 0, i) != (sign > 0);
  }
  o.require(mismatches == 0, "oracle mismatch");
  const PropertyResult a = verify_ste(10000, 78);
  const PropertyResult b = verify_sign(10000, 79);
  o.require(a.ok(), a.first_failure);
  o.require(b.ok(), b.first_failure);
  o.detail << " 10000 scalars, " << mismatches << " oracle mismatches; suites " << a.cases << "+" << b.cases
           << " cases";
  return o;
}

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  ModelGraph<double> g = build_model<double>(tiny_arch(16, 4, 3), 5);
  const Tensor<double> x = random_tensor<double>(Shape{2, 3, 16, 16}, rng);
  const std::vector<int> labels{1, 3};
  const GradCheckReport r = check_parameter_gradients(g, x, labels, 1e-2, 1e-5);
  const double secs = seconds_since(t0);
  o.require(r.failures == 0, "worst " + r.worst_name);
  o.require(secs < 120, "runtime");
  o.detail << " " << r.checked << " gradients, " << r.failures << " above 1e-2, worst " << r.worst << " at "
           << r.worst_name << ", " << secs << " s";
  return o;
}

Outcome invariants() {
  Outcome o;
  // Channel bookkeeping against the published fractions.
  for (const TableRow& row : kPublished) {
    const LayerGraph g = build_topology(preset(row.preset));
    for (int t = 0; t < 3; ++t) {
      const auto id = g.find("transition" + std::to_string(t + 1) + ".conv");
      const ConvParams p = std::get<ConvParams>(g.layer(*id).params);
      const Fraction f = row.fractions[std::size_t(t)];
      if (p.in_channels != f.den || p.out_channels != f.num) {
        o.require(false, std::string(row.preset) + " transition " + std::to_string(t + 1) + " is " +
                             std::to_string(p.out_channels) + "/" + std::to_string(p.in_channels) + ", table " +
                             std::to_string(f.num) + "/" + std::to_string(f.den));
      }
    }
  }
  // Zero-weight improvement blocks.
  std::mt19937_64 rng(6);
  ArchConfig with = tiny_arch();
  ArchConfig without = with;
  without.block_style = BlockStyle::kDenseOnly;
  ModelGraph<double> a = build_model<double>(with, 1);
  ModelGraph<double> b = build_model<double>(without, 2);
  copy_shared_tensors(a, b);
  for (auto& [name, t] : a.parameters)
    if (name.find(".improve.conv.weight") != std::string::npos) t.values().setZero();
  const Tensor<double> x = random_tensor<double>(Shape{4, 3, 16, 16}, rng);
  const ForwardOptions opt{Mode::kInference, Binarization::kSurrogate};
  o.require(bitwise_equal(forward(a, x, opt), forward(b, x, opt)), "zero improvement blocks change the output");
  // Naive residual vs improvement block cost at matched width.
  for (Index c : {128, 192, 320, 704, 1856}) {
    LayerGraph imp(c), res(c);
    add_improvement_block(imp, kGraphInput, 64, "b");
    add_residual_block(res, kGraphInput, "b");
    const std::uint64_t bi = model_cost(imp, Shape{1, c, 28, 28}).totals.bops;
    const std::uint64_t br = model_cost(res, Shape{1, c, 28, 28}).totals.bops;
    // Symbolically 9 c^2 HW over 9 c 64 HW.
    o.require(bi == 9u * std::uint64_t(c) * 64u * 784u, "improvement BOPs closed form");
    o.require(br * 64 == bi * std::uint64_t(c), "residual factor at c=" + std::to_string(c));
  }
  return o;
}

Outcome desk_training() {
  Outcome o;
  const auto t0 = Clock::now();
  // Separable toy set.
  const Dataset toy = separable_dataset(64, 16, 1);
  ModelGraph<float> tg = build_model<float>(tiny_arch(16, 2, 1), 1);
  TrainConfig tc;
  tc.epochs = 20;
  tc.warmup_epochs = 1;
  tc.batch_size = 16;
  tc.crop_padding = 2;
  tc.seed = 1;
  TrainState ts = TrainState::create(tg, tc, false);
  int reached = 0;
  for (int e = 1; e <= tc.epochs && !reached; ++e) {
    train_epoch(tg, toy, tc, ts);
    if (evaluate(tg, toy) == 1.0) reached = e;
  }
  o.require(reached > 0, "toy set not separated in 20 epochs");
  o.detail << " toy 100% at epoch " << reached << ";";

  const std::filesystem::path dir = std::filesystem::path(MELIUS_SOURCE_DIR) / "tests" / "data" / "digits";
  const Dataset train = load_idx_split(dir, "train");
  const Dataset test = load_idx_split(dir, "t10k", Normalization{train.mean, train.stddev});
  ModelGraph<float> g = build_model<float>(load_arch((std::filesystem::path(MELIUS_SOURCE_DIR) / "configs" / "digits.cfg").string()), 0);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.warmup_epochs = 1;
  cfg.base_lr = 0.002;
  cfg.batch_size = 64;
  cfg.hflip = false;
  cfg.crop_padding = 2;
  cfg.seed = 0;
  TrainState st = TrainState::create(g, cfg, false);
  double top1 = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const EpochMetrics m = train_epoch(g, train, cfg, st);
    top1 = evaluate(g, test);
    std::cout << "  digits " << format_epoch(m, top1) << "\n" << std::flush;
  }
  const double secs = seconds_since(t0);
  o.require(top1 >= 0.97, "digits test top-1 below 97%");
  o.require(secs < 1800, "runtime");
  o.detail << " digits " << train.size() << "/" << test.size() << " test top-1 " << top1 << " after 10 epochs, "
           << secs << " s";
  return o;
}

std::vector<std::vector<float>> snapshot(const ModelGraph<float>& g) {
  std::vector<std::vector<float>> out;
  for (const ParamInfo& p : g.topology.parameters())
    if (p.role == ParamRole::kBinaryLatent) {
      const Tensor<float>& t = g.parameters.at(p.name);
      out.emplace_back(t.data(), t.data() + t.size());
    }
  return out;
}

bool parses_as_number(const std::string& s) {
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return !s.empty() && end == s.c_str() + s.size();
}

Outcome instrumentation() {
  Outcome o;
  const Dataset data = separable_dataset(48, 16, 3);
  ModelGraph<float> g = build_model<float>(tiny_arch(16, 2, 1), 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.warmup_epochs = 0;
  cfg.batch_size = 8;
  cfg.base_lr = 0.01;
  cfg.seed = 3;
  cfg.reset_flips_per_epoch = false;
  TrainState st = TrainState::create(g, cfg, true);
  std::vector<std::vector<std::vector<float>>> snaps{snapshot(g)};
  st.after_step = [&](const ModelGraph<float>& m) { snaps.push_back(snapshot(m)); };
  std::vector<std::string> rows;
  for (int e = 0; e < cfg.epochs; ++e) {
    const EpochMetrics m = train_epoch(g, data, cfg, st);
    for (const FlipSummary& s : st.flips->summarize()) rows.push_back(flip_csv_row(m.epoch, s));
    rows.push_back(flip_csv_row(m.epoch, st.flips->summarize_all()));
  }
  std::uint64_t flips = 0, weights = 0;
  std::vector<std::uint32_t> pooled;
  for (std::size_t l = 0; l < st.flips->layers().size(); ++l) {
    std::vector<std::vector<float>> history;
    for (const auto& s : snaps) history.push_back(s[l]);
    const auto oracle = replay_flips(history);
    o.require(st.flips->layers()[l].total_counts == oracle, "layer " + st.flips->layers()[l].name);
    for (auto c : oracle) flips += c;
    weights += oracle.size();
    pooled.insert(pooled.end(), oracle.begin(), oracle.end());
  }
  // Pooled summary recomputed from the replay.
  std::sort(pooled.begin(), pooled.end());
  auto rank = [&](double p) { return pooled[std::max<std::size_t>(std::size_t(std::ceil(p / 100 * double(pooled.size()))), 1) - 1]; };
  const FlipSummary all = st.flips->summarize_all();
  o.require(all.p50 == rank(50) && all.p90 == rank(90) && all.p99 == rank(99) && all.max == pooled.back(),
            "pooled percentiles");
  // CSV schema.
  const std::string header = kFlipCsvHeader;
  o.require(header == "epoch,layer,weights,zero_flip_fraction,p50,p75,p90,p95,p99,max", "flip header");
  for (const std::string& row : rows) {
    std::vector<std::string> f;
    std::stringstream ss(row);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 10) {
      o.require(false, "row field count: " + row);
      continue;
    }
    bool ok = !f[1].empty();
    for (std::size_t i : {0, 2, 3, 4, 5, 6, 7, 8, 9}) ok = ok && parses_as_number(f[i]);
    for (std::size_t i = 5; i < 10 && ok; ++i) ok = std::stod(f[i - 1]) <= std::stod(f[i]);
    o.require(ok, "row: " + row);
  }
  o.require(flips > 0, "no flips recorded");
  o.detail << " " << snaps.size() - 1 << " steps, " << weights << " weights, " << flips << " flips match replay; "
           << rows.size() << " CSV rows";
  return o;
}

ArchConfig random_model(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> blocks(0, 2), growth(1, 4), groups(0, 2), classes(2, 20), size(2, 4);
  ArchConfig cfg = tiny_arch(Index(8 * size(rng)), classes(rng), 1 + blocks(rng));
  for (auto& b : cfg.block_counts) b = blocks(rng);
  cfg.block_counts[0] = std::max<Index>(cfg.block_counts[0], 1);
  cfg.growth = 8 * growth(rng);
  cfg.downsample_groups = Index(1) << groups(rng);
  cfg.stem = rng() % 2 ? StemKind::kGrouped : StemKind::kConv7x7;
  cfg.block_style = static_cast<BlockStyle>(rng() % 3);
  try {
    build_topology(cfg);
  } catch (const InvalidConfig&) {
    return random_model(rng);
  }
  return cfg;
}

Outcome serialization() {
  Outcome o;
  std::mt19937_64 rng(9);
  const auto dir = std::filesystem::temp_directory_path() / ("melius_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  int identical = 0;
  for (int i = 0; i < 50; ++i) {
    const ArchConfig cfg = random_model(rng);
    ModelGraph<float> g = build_model<float>(cfg, rng());
    const auto path = dir / ("m" + std::to_string(i) + ".mnbw");
    const ExportOptions opt{i % 2 == 1};
    export_weights(g, path, opt);
    const WeightFile f = import_weights(path);
    const auto expected = exported_tensors(g, opt);
    bool same = f.tensors.size() == expected.size();
    for (const auto& [name, t] : expected) same = same && f.tensors.count(name) && bitwise_equal(f.tensors.at(name), t);
    // A second generation must reproduce the file byte for byte.
    ModelGraph<float> h = build_model<float>(cfg, 0);
    load_weights(h, f);
    same = same && encode_weights(h, opt) == encode_weights(g, opt);
    identical += same;
  }
  o.require(identical == 50, "round-trip mismatch");
  double worst = 0;
  for (const std::string& name : preset_names()) {
    const ModelGraph<float> g = build_model<float>(preset(name), 0);
    const auto path = dir / (name + ".mnbw");
    export_weights(g, path);
    const double file = double(std::filesystem::file_size(path));
    const double model = double(model_cost(preset(name)).totals.size_bytes);
    const double d = rel(file, model);
    worst = std::max(worst, d);
    o.require(d <= 0.02, name + " file size");
    if (name == "meliusnet22") o.detail << " meliusnet22 file " << file << " B vs cost " << model << " B;";
  }
  std::filesystem::remove_all(dir);
  o.detail << " " << identical << "/50 round-trips identical, worst preset size dev " << worst * 100 << "%";
  return o;
}

struct Criterion {
  const char* title;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {"cost table reproduction", cost_table},
    {"stem arithmetic", stems},
    {"kernel exactness", kernels},
    {"STE correctness", ste},
    {"gradient checks", gradients},
    {"architecture invariants", invariants},
    {"desk-scale training", desk_training},
    {"instrumentation", instrumentation},
    {"serialization", serialization},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty())
    for (int i = 1; i <= 9; ++i) which.push_back(i);
  bool all = true;
  for (int n : which) {
    if (n < 1 || n > 9) {
      std::cerr << "unknown criterion " << n << "\n";
      return 2;
    }
    const Criterion& c = kCriteria[n - 1];
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << c.title << " -" << o.detail.str()
              << "\n"
              << std::flush;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}

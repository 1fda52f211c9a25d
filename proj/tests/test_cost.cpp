#include <doctest.h>

#include <nlohmann/json.hpp>

#include "melius/cost.hpp"
#include "support.hpp"

using namespace melius;

namespace {

// 3x3 conv MACs over an h x w output.
std::uint64_t conv_macs(std::uint64_t cin_per_group, std::uint64_t cout, std::uint64_t k, std::uint64_t h,
                        std::uint64_t w) {
  return cin_per_group * cout * k * k * h * w;
}

std::uint64_t bops_with_prefix(const CostReport& r, const std::string& prefix) {
  std::uint64_t s = 0;
  for (const LayerCost& l : r.layers)
    if (l.name.rfind(prefix, 0) == 0) s += l.bops;
  return s;
}

}  // namespace

TEST_CASE("stem FLOPs match the convolution closed forms") {
  const std::uint64_t grouped = conv_macs(3, 32, 3, 112, 112) + conv_macs(8, 32, 3, 112, 112) +
                                conv_macs(4, 64, 3, 112, 112);
  const std::uint64_t seven = conv_macs(3, 64, 7, 112, 112);
  CHECK(grouped == 68640768u);
  CHECK(seven == 118013952u);
  const CostReport g = model_cost(build_grouped_stem(3), Shape{1, 3, 224, 224});
  const CostReport s = model_cost(build_stem_7x7(3), Shape{1, 3, 224, 224});
  CHECK(g.totals.flops == grouped);
  CHECK(s.totals.flops == seven);
  CHECK(s.totals.flops - g.totals.flops == 49373184u);
  CHECK(g.totals.bops == 0);
}

TEST_CASE("stage-one BOPs of meliusnet22 sum the dense and improvement convs") {
  std::uint64_t oracle = 0;
  for (std::uint64_t c = 64; c < 64 + 4 * 64; c += 64) {
    oracle += conv_macs(c, 64, 3, 56, 56);       // dense
    oracle += conv_macs(c + 64, 64, 3, 56, 56);  // improvement
  }
  CHECK(oracle == 2774532096u);
  CHECK(bops_with_prefix(model_cost(preset("meliusnet22")), "stage1.") == oracle);
}

TEST_CASE("transition cost counts the 1x1 conv after pooling") {
  const CostReport r = model_cost(build_transition(128, 64, 1), Shape{1, 128, 8, 8});
  CHECK(r.totals.flops == 128u * 64u * 4u * 4u);
  CHECK(r.totals.fp_params == 128u * 64u + 2u * 64u);
  CHECK(r.totals.size_bytes == 4u * (128u * 64u + 128u));
  const CostReport g4 = model_cost(build_transition(128, 64, 4), Shape{1, 128, 8, 8});
  CHECK(g4.totals.flops == r.totals.flops / 4);
}

TEST_CASE("classifier costs C times K and its bias counts as a parameter") {
  LayerGraph g(512);
  add_classifier(g, kGraphInput, 1000);
  const CostReport r = model_cost(g, Shape{1, 512, 7, 7});
  CHECK(r.totals.flops == 512u * 1000u);
  CHECK(r.totals.fp_params == 512u * 1000u + 1000u + 2u * 512u);
}

TEST_CASE("model size is packed bits plus four bytes per float parameter") {
  const CostReport r = model_cost(preset("meliusnet22"));
  const CostTotals& t = r.totals;
  CHECK(t.size_bytes == (t.binary_bits + 7) / 8 + 4 * t.fp_params);
  CHECK(t.size_mb == doctest::Approx(double(t.size_bytes) / (1 << 20)));
  CHECK(t.ops == doctest::Approx(double(t.bops) / 64 + double(t.flops)));
  std::uint64_t bits = 0, bops = 0;
  for (const LayerCost& l : r.layers) {
    bits += l.binary_bits;
    bops += l.bops;
  }
  CHECK(bits == t.binary_bits);
  CHECK(bops == t.bops);
}

TEST_CASE("naive residual blocks cost c/64 times the improvement block") {
  for (Index c : {128, 256, 448, 1024}) {
    LayerGraph imp(c), res(c);
    add_improvement_block(imp, kGraphInput, 64, "b");
    add_residual_block(res, kGraphInput, "b");
    const Shape in{1, c, 14, 14};
    const CostReport a = model_cost(imp, in);
    const CostReport b = model_cost(res, in);
    CHECK(a.totals.bops == conv_macs(std::uint64_t(c), 64, 3, 14, 14));
    CHECK(b.totals.bops * 64 == a.totals.bops * std::uint64_t(c));
    CHECK(b.totals.binary_bits * 64 == a.totals.binary_bits * std::uint64_t(c));
  }
}

TEST_CASE("reports are pure functions of the configuration") {
  const CostReport a = model_cost(preset("meliusnetB"));
  const CostReport b = model_cost(preset("meliusnetB"));
  CHECK(format_table(a, true) == format_table(b, true));
  CHECK(to_json(a, true) == to_json(b, true));
}

TEST_CASE("JSON report carries raw and scaled totals") {
  const CostReport r = model_cost(preset("meliusnet29"));
  const nlohmann::json j = nlohmann::json::parse(to_json(r, true));
  CHECK(j["name"] == "meliusnet29");
  CHECK(j["totals"]["bops"].get<std::uint64_t>() == r.totals.bops);
  CHECK(j["table"]["bops_1e9"].get<double>() == doctest::Approx(double(r.totals.bops) / 1e9));
  CHECK(j["layers"].size() == r.layers.size());
}

TEST_CASE("comparison lists every model") {
  std::vector<ArchConfig> cfgs{preset("meliusnet22"), preset("meliusnetC")};
  const auto reports = compare_archs(cfgs, Shape{1, 3, 224, 224});
  const std::string s = format_comparison(reports);
  CHECK(s.find("meliusnet22") != std::string::npos);
  CHECK(s.find("meliusnetC") != std::string::npos);
}

TEST_CASE("cost scales with input resolution") {
  ArchConfig cfg = preset("meliusnet22");
  const CostReport small = model_cost(cfg);
  cfg.input_height = cfg.input_width = 448;
  const CostReport big = model_cost(cfg);
  CHECK(big.totals.bops == 4 * small.totals.bops);
  CHECK(big.totals.binary_bits == small.totals.binary_bits);
}

#include <doctest.h>

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "melius/io.hpp"
#include "support.hpp"

using namespace melius;
using namespace melius::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("melius_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> idx_bytes(const std::vector<std::uint32_t>& dims, const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> b{0, 0, 0x08, std::uint8_t(dims.size())};
  for (std::uint32_t d : dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(d >> s));
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

void write_gz(const fs::path& p, const std::vector<std::uint8_t>& b) {
  gzFile f = gzopen(p.string().c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, b.data(), unsigned(b.size()));
  gzclose(f);
}

// Little-endian field writers for hand-built weight files.
void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(std::uint8_t(v));
  b.push_back(std::uint8_t(v >> 8));
}
void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(std::uint8_t(v >> s));
}

std::vector<std::uint8_t> header(std::uint32_t count) {
  std::vector<std::uint8_t> b{'M', 'N', 'B', 'W'};
  put16(b, 1);
  put32(b, count);
  return b;
}

void put_record_head(std::vector<std::uint8_t>& b, const std::string& name, std::uint8_t dtype,
                     std::vector<std::uint32_t> dims) {
  put16(b, std::uint16_t(name.size()));
  b.insert(b.end(), name.begin(), name.end());
  b.push_back(dtype);
  b.push_back(std::uint8_t(dims.size()));
  for (auto d : dims) put32(b, d);
}

ArchConfig random_arch(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> blocks(0, 2), growth(1, 3), groups(0, 2), classes(2, 12), size(2, 3);
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
    return random_arch(rng);
  }
  return cfg;
}

}  // namespace

TEST_CASE("idx loader reads a small 1x8x8 fixture, plain and gzipped") {
  TempDir dir;
  std::vector<std::uint8_t> pixels(4 * 64);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t((i * 37) % 256);
  const auto images = idx_bytes({4, 8, 8}, pixels);
  const auto labels = idx_bytes({4}, {3, 1, 4, 1});
  write_file(dir.path / "train-images-idx3-ubyte", images);
  write_file(dir.path / "train-labels-idx1-ubyte", labels);
  write_gz(dir.path / "t10k-images-idx3-ubyte.gz", images);
  write_gz(dir.path / "t10k-labels-idx1-ubyte.gz", labels);

  const Dataset a = load_idx_split(dir.path, "train");
  const Dataset b = load_idx_split(dir.path, "t10k");
  CHECK(a.images.shape() == Shape{4, 1, 8, 8});
  CHECK(a.labels == std::vector<int>{3, 1, 4, 1});
  CHECK(a.num_classes() == 5);
  CHECK(bitwise_equal(a.images, b.images));

  double mean = 0, sq = 0;
  for (auto p : pixels) {
    mean += p / 255.0;
    sq += (p / 255.0) * (p / 255.0);
  }
  mean /= 256;
  const double sd = std::sqrt(sq / 256 - mean * mean);
  CHECK(a.mean[0] == doctest::Approx(mean).epsilon(1e-5));
  CHECK(a.stddev[0] == doctest::Approx(sd).epsilon(1e-4));
  CHECK(a.images[5] == doctest::Approx((pixels[5] / 255.0 - mean) / sd).epsilon(1e-4));

  const Dataset c = load_idx_split(dir.path, "t10k", Normalization{{0.5f}, {0.25f}});
  CHECK(c.images[5] == doctest::Approx((pixels[5] / 255.0 - 0.5) / 0.25).epsilon(1e-5));
}

TEST_CASE("idx loader accepts rank-4 colour images") {
  TempDir dir;
  std::vector<std::uint8_t> pixels(2 * 3 * 2 * 2);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t(i < 12 ? 0 : 255);
  write_file(dir.path / "i", idx_bytes({2, 3, 2, 2}, pixels));
  write_file(dir.path / "l", idx_bytes({2}, {0, 1}));
  const Dataset d = load_idx_dataset(dir.path / "i", dir.path / "l");
  CHECK(d.images.shape() == Shape{2, 3, 2, 2});
  CHECK(d.mean.size() == 3);
  CHECK(d.mean[1] == doctest::Approx(0.5));
}

TEST_CASE("idx loader errors") {
  TempDir dir;
  write_file(dir.path / "l", idx_bytes({2}, {0, 1}));
  write_file(dir.path / "i3", idx_bytes({3, 2, 2}, std::vector<std::uint8_t>(12)));
  CHECK_THROWS_AS(load_idx_dataset(dir.path / "i3", dir.path / "l"), InvalidInput);

  write_file(dir.path / "short", idx_bytes({2, 2, 2}, std::vector<std::uint8_t>(7)));
  CHECK_THROWS_AS(load_idx_dataset(dir.path / "short", dir.path / "l"), ParseError);

  auto bad = idx_bytes({2, 2, 2}, std::vector<std::uint8_t>(8));
  bad[2] = 0x0D;
  write_file(dir.path / "float", bad);
  try {
    load_idx_dataset(dir.path / "float", dir.path / "l");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 2);
  }
  write_file(dir.path / "huge", idx_bytes({0xFFFFFFFF, 0xFFFFFFFF, 2}, {}));
  CHECK_THROWS_AS(load_idx_dataset(dir.path / "huge", dir.path / "l"), ParseError);
  CHECK_THROWS_AS(load_idx_dataset(dir.path / "missing", dir.path / "l"), std::runtime_error);
  CHECK_THROWS_AS(load_idx_split(dir.path, "nothing"), std::runtime_error);
}

TEST_CASE("idx loader handles a file with zero images") {
  TempDir dir;
  write_file(dir.path / "i", idx_bytes({0, 4, 4}, {}));
  write_file(dir.path / "l", idx_bytes({0}, {}));
  const Dataset d = load_idx_dataset(dir.path / "i", dir.path / "l");
  CHECK(d.size() == 0);
  CHECK(d.images.shape() == Shape{0, 1, 4, 4});
}

TEST_CASE("weight files round-trip through bytes and disk") {
  ModelGraph<float> g = build_model<float>(tiny_arch(), 8);
  TempDir dir;
  for (bool buffers : {false, true}) {
    const ExportOptions opt{buffers};
    const auto bytes = encode_weights(g, opt);
    const WeightFile f = decode_weights(bytes);
    const auto expected = exported_tensors(g, opt);
    REQUIRE(f.tensors.size() == expected.size());
    for (const auto& [name, t] : expected) CHECK(bitwise_equal(f.tensors.at(name), t));
    export_weights(g, dir.path / "w.mnbw", opt);
    CHECK(fs::file_size(dir.path / "w.mnbw") == bytes.size());
    const WeightFile r = import_weights(dir.path / "w.mnbw");
    CHECK(r.packed == f.packed);
  }
  const auto exported = exported_tensors(g);
  for (const ParamInfo& p : g.topology.parameters()) {
    if (p.role == ParamRole::kBuffer) {
      CHECK(exported.count(p.name) == 0);
    } else if (p.role == ParamRole::kBinaryLatent) {
      CHECK(bitwise_equal(exported.at(p.name), sign_values(g.parameters.at(p.name))));
    } else {
      CHECK(bitwise_equal(exported.at(p.name), g.parameters.at(p.name)));
    }
  }
}

TEST_CASE("loading exported weights reproduces inference") {
  std::mt19937_64 rng(61);
  ModelGraph<float> g = build_model<float>(tiny_arch(), 8);
  const Tensor<float> x = random_tensor<float>(Shape{2, 3, 16, 16}, rng);
  forward(g, x, ForwardOptions{Mode::kTraining});
  ModelGraph<float> h = build_model<float>(tiny_arch(), 99);
  load_weights(h, decode_weights(encode_weights(g, ExportOptions{true})));
  CHECK(bitwise_equal(forward(g, x), forward(h, x)));
}

TEST_CASE("random models round-trip") {
  std::mt19937_64 rng(62);
  for (int i = 0; i < 20; ++i) {
    const ArchConfig cfg = random_arch(rng);
    INFO(cfg.growth << " " << cfg.downsample_groups);
    const ModelGraph<float> g = build_model<float>(cfg, rng());
    const WeightFile f = decode_weights(encode_weights(g, ExportOptions{true}));
    const auto expected = exported_tensors(g, ExportOptions{true});
    CHECK(f.tensors.size() == expected.size());
    for (const auto& [name, t] : expected) CHECK(bitwise_equal(f.tensors.at(name), t));
  }
}

TEST_CASE("an empty graph encodes to a bare header") {
  ModelGraph<float> g;
  const auto bytes = encode_weights(g);
  CHECK(bytes == header(0));
  CHECK(decode_weights(bytes).tensors.empty());
}

TEST_CASE("hand-built files decode with packed rows LSB first") {
  auto b = header(2);
  put_record_head(b, "w", 1, {2, 65, 1, 1});
  // Row 0: only channel 0 positive. Row 1: only channel 64 positive.
  for (std::uint64_t word : {1ull, 0ull, 0ull, 1ull})
    for (int s = 0; s < 64; s += 8) b.push_back(std::uint8_t(word >> s));
  put_record_head(b, "bias", 0, {1, 2, 1, 1});
  for (float v : {1.5f, -2.0f}) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put32(b, u);
  }
  const WeightFile f = decode_weights(b);
  REQUIRE(f.packed.count("w"));
  const Tensor<float>& w = f.tensors.at("w");
  CHECK(w(0, 0, 0, 0) == 1.0f);
  CHECK(w(0, 1, 0, 0) == -1.0f);
  CHECK(w(1, 64, 0, 0) == 1.0f);
  CHECK(w(1, 0, 0, 0) == -1.0f);
  CHECK(f.tensors.at("bias")[1] == -2.0f);
}

TEST_CASE("malformed weight files report the failing byte") {
  auto offset_of = [](const std::vector<std::uint8_t>& b) -> std::size_t {
    try {
      decode_weights(b);
    } catch (const ParseError& e) {
      return e.offset();
    }
    return std::size_t(-1);
  };
  auto magic = header(0);
  magic[0] = 'X';
  CHECK(offset_of(magic) == 0);
  auto version = header(0);
  version[4] = 2;
  CHECK(offset_of(version) == 4);
  CHECK(offset_of({'M', 'N', 'B'}) != std::size_t(-1));

  auto dtype = header(1);
  put_record_head(dtype, "a", 7, {1, 1, 1, 1});
  CHECK(offset_of(dtype) == 10 + 2 + 1);

  auto rank = header(1);
  put_record_head(rank, "a", 0, {1, 1, 1, 1, 1});
  CHECK(offset_of(rank) == 10 + 2 + 1 + 1);

  auto truncated = header(1);
  put_record_head(truncated, "a", 0, {1, 1, 1, 2});
  put32(truncated, 0);
  CHECK(offset_of(truncated) == 10 + 2 + 1 + 2 + 16);

  auto trailing = header(0);
  trailing.push_back(0);
  CHECK(offset_of(trailing) == 10);

  auto dup = header(2);
  for (int i = 0; i < 2; ++i) {
    put_record_head(dup, "a", 0, {1, 1, 1, 1});
    put32(dup, 0);
  }
  CHECK(offset_of(dup) == 10 + 2 + 1 + 2 + 16 + 4);

  auto pad = header(1);
  put_record_head(pad, "p", 1, {1, 3, 1, 1});
  for (int i = 0; i < 8; ++i) pad.push_back(0xFF);
  CHECK(offset_of(pad) == 10 + 2 + 1 + 2 + 16);

  auto count = header(3);
  CHECK(offset_of(count) != std::size_t(-1));
}

TEST_CASE("import names the file and load_weights checks the graph") {
  TempDir dir;
  write_file(dir.path / "bad.mnbw", {'M', 'N'});
  try {
    import_weights(dir.path / "bad.mnbw");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("bad.mnbw") != std::string::npos);
    CHECK(what.find("(at byte") == what.rfind("(at byte"));
  }
  ModelGraph<float> g = build_model<float>(tiny_arch(), 1);
  WeightFile f = decode_weights(encode_weights(g));
  WeightFile extra = f;
  extra.tensors.emplace("nope", Tensor<float>(Shape{1, 1, 1, 1}));
  CHECK_THROWS_AS(load_weights(g, extra), ContractViolation);
  WeightFile missing = f;
  missing.tensors.erase("head.fc.bias");
  CHECK_THROWS_AS(load_weights(g, missing), ContractViolation);
  WeightFile shape = f;
  shape.tensors.at("head.fc.bias") = Tensor<float>(Shape{1, 1, 1, 1});
  CHECK_THROWS_AS(load_weights(g, shape), ContractViolation);
  ModelGraph<float> other = build_model<float>(tiny_arch(16, 5), 1);
  CHECK_THROWS_AS(load_weights(other, f), ContractViolation);
}

TEST_CASE("architecture config files") {
  const ArchConfig a = parse_arch_config(
      "# comment\npreset = meliusnet22\ngrowth = 32  # trailing\nblocks = 1,2,3,4\nstem = conv7x7\n"
      "stem_pool = false\ninput = 1x28x28\nnum_classes = 10\nblock_style = dense-only\n",
      "my.cfg");
  CHECK(a.name == "meliusnet22");
  CHECK(a.growth == 32);
  CHECK(a.block_counts == std::array<Index, 4>{1, 2, 3, 4});
  CHECK(a.reductions[1] == Fraction{224, 480});
  CHECK(a.stem == StemKind::kConv7x7);
  CHECK_FALSE(a.stem_pool);
  CHECK(a.input_shape() == Shape{1, 1, 28, 28});
  CHECK(a.block_style == BlockStyle::kDenseOnly);

  const ArchConfig b = parse_arch_config("reductions = 1/2, 2/3, 3/4\ndownsample_groups = 2\n", "dir/custom.cfg");
  CHECK(b.name == "custom");
  CHECK(b.reductions[2] == Fraction{3, 4});

  auto fails_at = [](const std::string& text, const std::string& where) {
    try {
      parse_arch_config(text, "f.cfg");
    } catch (const InvalidConfig& e) {
      return std::string(e.what()).find(where) != std::string::npos;
    }
    return false;
  };
  CHECK(fails_at("growth = 8\ncolour = red\n", "f.cfg:2"));
  CHECK(fails_at("growth = 8\npreset = meliusnet22\n", "f.cfg:2"));
  CHECK(fails_at("\n\ngrowth = x\n", "f.cfg:3"));
  CHECK(fails_at("blocks = 1,2,3\n", "f.cfg:1"));
  CHECK(fails_at("stem_pool = maybe\n", "f.cfg:1"));
  CHECK(fails_at("just words\n", "f.cfg:1"));
  CHECK_THROWS_AS(parse_arch_config("preset = nope\n"), InvalidConfig);
  CHECK_THROWS_AS(parse_arch_config("growth = 0\n"), InvalidConfig);
}

TEST_CASE("shapes and arch lookup") {
  CHECK(parse_shape("3x224x224") == Shape{1, 3, 224, 224});
  CHECK_THROWS_AS(parse_shape("3x224"), InvalidConfig);
  CHECK_THROWS_AS(parse_shape("0x2x2"), InvalidConfig);
  CHECK(load_arch("meliusnetC").name == "meliusnetC");
  CHECK_THROWS_AS(load_arch("/no/such/file.cfg"), InvalidConfig);
}

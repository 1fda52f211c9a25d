#include "melius/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <zlib.h>

namespace melius {

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    T v;
    read(&v, sizeof(T), what);
    return v;
  }
  void read(void* out, std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw ParseError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, " +
                           std::to_string(bytes_.size() - pos_) + " left",
                       pos_);
    }
    if (n) std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void put_header(Writer& w, std::uint32_t count) {
  w.put_bytes("MNBW", 4);
  w.put<std::uint16_t>(kWeightFormatVersion);
  w.put<std::uint32_t>(count);
}

void put_record_head(Writer& w, const std::string& name, WeightDtype dtype, const Shape& s) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw InvalidInput("tensor name too long: " + name);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
  w.put<std::uint8_t>(4);
  for (Index d : {s.n, s.c, s.h, s.w}) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
}

struct Entry {
  const Tensor<float>* tensor;
  bool packed;
};

std::vector<std::pair<std::string, Entry>> export_entries(const ModelGraph<float>& g, const ExportOptions& opt) {
  validate(g);
  std::vector<std::pair<std::string, Entry>> out;
  for (const ParamInfo& info : g.topology.parameters()) {
    if (info.role == ParamRole::kBuffer) {
      if (opt.include_buffers) out.push_back({info.name, {&g.buffers.at(info.name), false}});
    } else {
      out.push_back({info.name, {&g.parameters.at(info.name), info.role == ParamRole::kBinaryLatent}});
    }
  }
  return out;
}

}  // namespace

std::map<std::string, Tensor<float>> exported_tensors(const ModelGraph<float>& g, const ExportOptions& opt) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [name, e] : export_entries(g, opt))
    out.emplace(name, e.packed ? sign_values(*e.tensor) : *e.tensor);
  return out;
}

std::vector<std::uint8_t> encode_weights(const ModelGraph<float>& g, const ExportOptions& opt) {
  const auto entries = export_entries(g, opt);
  Writer w;
  put_header(w, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, e] : entries) {
    const Tensor<float>& t = *e.tensor;
    if (e.packed) {
      put_record_head(w, name, WeightDtype::kPacked, t.shape());
      const BitTensor bits = sign_forward(t);
      for (std::uint64_t word : bits.words()) w.put<std::uint64_t>(word);
    } else {
      put_record_head(w, name, WeightDtype::kFloat32, t.shape());
      w.put_bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
    }
  }
  return std::move(w.bytes);
}

WeightFile decode_weights(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "MNBW", 4) != 0) throw ParseError("bad magic, expected \"MNBW\"", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWeightFormatVersion) {
    throw ParseError("unsupported weight format version " + std::to_string(version), version_at);
  }
  const auto count = r.get<std::uint32_t>("tensor count");

  WeightFile file;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t record_at = r.pos();
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name");
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw ParseError("tensor '" + name + "': unknown dtype " + std::to_string(dtype), dtype_at);
    const std::size_t ndim_at = r.pos();
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim < 1 || ndim > 4 || (dtype == 1 && ndim != 4)) {
      throw ParseError("tensor '" + name + "': unsupported rank " + std::to_string(ndim), ndim_at);
    }
    std::array<Index, 4> dims{1, 1, 1, 1};
    for (int d = 4 - ndim; d < 4; ++d) dims[static_cast<std::size_t>(d)] = r.get<std::uint32_t>("dims");
    const Shape shape{dims[0], dims[1], dims[2], dims[3]};
    if (file.tensors.count(name)) throw ParseError("duplicate tensor '" + name + "'", record_at);

    const std::size_t payload_at = r.pos();
    if (dtype == 0) {
      // Each factor fits in 32 bits, so compare against the remaining length one factor at a time.
      std::uint64_t need = sizeof(float);
      for (Index d : dims) {
        need *= static_cast<std::uint64_t>(d);
        if (need > r.remaining()) throw ParseError("truncated payload of tensor '" + name + "'", payload_at);
      }
      Tensor<float> t(shape);
      r.read(t.data(), static_cast<std::size_t>(need), "tensor payload");
      file.tensors.emplace(name, std::move(t));
    } else {
      std::uint64_t need = 8 * static_cast<std::uint64_t>((shape.c + 63) / 64);
      for (Index d : {shape.n, shape.h, shape.w}) {
        need *= static_cast<std::uint64_t>(d);
        if (need > r.remaining()) throw ParseError("truncated payload of tensor '" + name + "'", payload_at);
      }
      BitTensor bits(shape);
      r.read(bits.words().data(), static_cast<std::size_t>(need), "packed payload");
      if (bits.pad_popcount() != 0) throw ParseError("tensor '" + name + "': nonzero pad bits", payload_at);
      file.tensors.emplace(name, unpack_bits<float>(bits));
      file.packed.insert(name);
    }
  }
  if (r.remaining() != 0) throw ParseError(std::to_string(r.remaining()) + " trailing bytes", r.pos());
  return file;
}

void export_weights(const ModelGraph<float>& g, const std::filesystem::path& path, const ExportOptions& opt) {
  const std::vector<std::uint8_t> bytes = encode_weights(g, opt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

WeightFile import_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_weights(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  }
}

void load_weights(ModelGraph<float>& g, const WeightFile& file) {
  std::map<std::string, const ParamInfo*> known;
  const std::vector<ParamInfo> infos = g.topology.parameters();
  for (const ParamInfo& info : infos) known.emplace(info.name, &info);
  for (const auto& [name, t] : file.tensors) {
    auto it = known.find(name);
    if (it == known.end()) throw ContractViolation("weight file has tensor '" + name + "' unknown to the graph");
    const ParamInfo& info = *it->second;
    if (t.shape() != info.shape) {
      throw ContractViolation("tensor '" + name + "' has shape " + to_string(t.shape()) + ", graph expects " +
                              to_string(info.shape));
    }
    if (file.packed.count(name) && info.role != ParamRole::kBinaryLatent) {
      throw ContractViolation("tensor '" + name + "' is packed but the graph stores it as 32-bit");
    }
  }
  for (const ParamInfo& info : infos) {
    if (info.role != ParamRole::kBuffer && !file.tensors.count(info.name)) {
      throw ContractViolation("weight file lacks parameter '" + info.name + "'");
    }
  }
  for (const auto& [name, t] : file.tensors) {
    auto& target = known.at(name)->role == ParamRole::kBuffer ? g.buffers : g.parameters;
    target.insert_or_assign(name, t);
  }
}

namespace {

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  int err = 0;
  const std::string msg = n < 0 ? gzerror(f, &err) : "";
  gzclose(f);
  if (n < 0) throw ParseError(path.string() + ": decompression failed: " + msg, out.size());
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

struct Idx {
  std::vector<std::uint64_t> dims;
  std::size_t payload = 0;
};

Idx parse_idx(const std::vector<std::uint8_t>& b, const std::string& src) {
  if (b.size() < 4) throw ParseError(src + ": truncated IDX header", b.size());
  if (b[0] != 0 || b[1] != 0) throw ParseError(src + ": bad IDX magic", 0);
  if (b[2] != 0x08) throw ParseError(src + ": unsupported IDX element type " + std::to_string(b[2]), 2);
  const int ndim = b[3];
  if (ndim < 1) throw ParseError(src + ": IDX rank must be >= 1", 3);
  Idx idx;
  idx.payload = 4 + 4 * static_cast<std::size_t>(ndim);
  if (b.size() < idx.payload) throw ParseError(src + ": truncated IDX header", b.size());
  std::uint64_t total = 1;
  for (int d = 0; d < ndim; ++d) {
    const std::uint64_t dim = be32(b, 4 + 4 * static_cast<std::size_t>(d));
    idx.dims.push_back(dim);
    if (dim != 0 && total > (std::uint64_t(1) << 40) / dim) {
      throw ParseError(src + ": IDX dimensions overflow", 4 + 4 * static_cast<std::size_t>(d));
    }
    total *= dim;
  }
  if (b.size() - idx.payload < total) {
    throw ParseError(src + ": truncated IDX payload, need " + std::to_string(total) + " bytes, have " +
                         std::to_string(b.size() - idx.payload),
                     b.size());
  }
  return idx;
}

}  // namespace

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         const std::optional<Normalization>& stats) {
  const std::vector<std::uint8_t> ib = read_maybe_gzip(images);
  const std::vector<std::uint8_t> lb = read_maybe_gzip(labels);
  const Idx ii = parse_idx(ib, images.string());
  const Idx li = parse_idx(lb, labels.string());
  if (ii.dims.size() != 3 && ii.dims.size() != 4) {
    throw ParseError(images.string() + ": image file must have rank 3 or 4", 3);
  }
  if (li.dims.size() != 1) throw ParseError(labels.string() + ": label file must have rank 1", 3);
  if (ii.dims[0] != li.dims[0]) {
    throw InvalidInput("IDX count mismatch: " + std::to_string(ii.dims[0]) + " images, " +
                       std::to_string(li.dims[0]) + " labels");
  }
  const bool rank4 = ii.dims.size() == 4;
  const Shape shape{static_cast<Index>(ii.dims[0]), rank4 ? static_cast<Index>(ii.dims[1]) : 1,
                    static_cast<Index>(ii.dims[rank4 ? 2 : 1]), static_cast<Index>(ii.dims[rank4 ? 3 : 2])};

  Dataset d;
  d.images = Tensor<float>(shape);
  const std::uint8_t* px = ib.data() + ii.payload;
  for (Index i = 0; i < d.images.size(); ++i) d.images.data()[i] = float(px[i]) / 255.0f;
  d.labels.assign(lb.begin() + static_cast<std::ptrdiff_t>(li.payload),
                  lb.begin() + static_cast<std::ptrdiff_t>(li.payload + li.dims[0]));

  if (stats) {
    if (static_cast<Index>(stats->mean.size()) != shape.c || static_cast<Index>(stats->stddev.size()) != shape.c) {
      throw ContractViolation("normalization statistics have " + std::to_string(stats->mean.size()) +
                              " channels, images have " + std::to_string(shape.c));
    }
    d.mean = stats->mean;
    d.stddev = stats->stddev;
  } else {
    d.mean.assign(static_cast<std::size_t>(shape.c), 0.0f);
    d.stddev.assign(static_cast<std::size_t>(shape.c), 1.0f);
    const double count = double(shape.n) * double(shape.plane());
    for (Index c = 0; c < shape.c && count > 0; ++c) {
      double sum = 0;
      double sq = 0;
      for (Index n = 0; n < shape.n; ++n) {
        const auto ch = d.images.channels(n, c, 1);
        sum += ch.cast<double>().sum();
        sq += ch.cast<double>().squaredNorm();
      }
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      d.mean[static_cast<std::size_t>(c)] = float(mean);
      d.stddev[static_cast<std::size_t>(c)] = var > 0 ? float(std::sqrt(var)) : 1.0f;
    }
  }
  for (Index n = 0; n < shape.n; ++n)
    for (Index c = 0; c < shape.c; ++c) {
      auto ch = d.images.channels(n, c, 1);
      ch = (ch.array() - d.mean[static_cast<std::size_t>(c)]) / d.stddev[static_cast<std::size_t>(c)];
    }
  return d;
}

Dataset load_idx_split(const std::filesystem::path& dir, const std::string& split,
                       const std::optional<Normalization>& stats) {
  auto find = [&](const std::string& stem) {
    for (const char* ext : {"", ".gz"}) {
      const std::filesystem::path p = dir / (stem + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw std::runtime_error("no '" + stem + "[.gz]' in '" + dir.string() + "'");
  };
  return load_idx_dataset(find(split + "-images-idx3-ubyte"), find(split + "-labels-idx1-ubyte"), stats);
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

Index to_index(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<Index>(v);
  } catch (const std::logic_error&) {
    throw InvalidConfig(where + ": '" + s + "' is not an integer");
  }
}

bool to_bool(const std::string& s, const std::string& where) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw InvalidConfig(where + ": '" + s + "' is not a boolean");
}

}  // namespace

Shape parse_shape(const std::string& text) {
  const std::vector<std::string> parts = split(text, 'x');
  if (parts.size() != 3) throw InvalidConfig("shape '" + text + "' is not CxHxW");
  Shape s{1, to_index(parts[0], "shape"), to_index(parts[1], "shape"), to_index(parts[2], "shape")};
  if (s.c < 1 || s.h < 1 || s.w < 1) throw InvalidConfig("shape '" + text + "' has a non-positive extent");
  return s;
}

ArchConfig parse_arch_config(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::optional<ArchConfig> base;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw InvalidConfig(where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "preset") {
      if (base || !entries.empty()) throw InvalidConfig(where + ": 'preset' must be the first key");
      base = preset(value);
      continue;
    }
    entries.emplace_back(where + " '" + key + "'", key + "=" + value);
  }

  ArchConfig cfg = base.value_or(ArchConfig{});
  if (!base) cfg.name = std::filesystem::path(source).stem().string();
  for (const auto& [where, kv] : entries) {
    const auto eq = kv.find('=');
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    if (key == "name") {
      cfg.name = value;
    } else if (key == "blocks") {
      const auto parts = split(value, ',');
      if (parts.size() != 4) throw InvalidConfig(where + ": expected four comma-separated block counts");
      for (std::size_t i = 0; i < 4; ++i) cfg.block_counts[i] = to_index(parts[i], where);
    } else if (key == "growth") {
      cfg.growth = to_index(value, where);
    } else if (key == "reductions") {
      const auto parts = split(value, ',');
      if (parts.size() != 3) throw InvalidConfig(where + ": expected three comma-separated num/den fractions");
      for (std::size_t i = 0; i < 3; ++i) {
        const auto nd = split(parts[i], '/');
        if (nd.size() != 2) throw InvalidConfig(where + ": '" + parts[i] + "' is not num/den");
        cfg.reductions[i] = {to_index(nd[0], where), to_index(nd[1], where)};
      }
    } else if (key == "downsample_groups") {
      cfg.downsample_groups = to_index(value, where);
    } else if (key == "stem") {
      if (value == "grouped") cfg.stem = StemKind::kGrouped;
      else if (value == "conv7x7") cfg.stem = StemKind::kConv7x7;
      else throw InvalidConfig(where + ": stem must be grouped or conv7x7");
    } else if (key == "stem_pool") {
      cfg.stem_pool = to_bool(value, where);
    } else if (key == "num_classes") {
      cfg.num_classes = to_index(value, where);
    } else if (key == "input") {
      const Shape s = parse_shape(value);
      cfg.input_channels = s.c;
      cfg.input_height = s.h;
      cfg.input_width = s.w;
    } else if (key == "block_style") {
      if (value == "melius") cfg.block_style = BlockStyle::kMelius;
      else if (value == "naive-residual") cfg.block_style = BlockStyle::kNaiveResidual;
      else if (value == "dense-only") cfg.block_style = BlockStyle::kDenseOnly;
      else throw InvalidConfig(where + ": block_style must be melius, naive-residual or dense-only");
    } else {
      throw InvalidConfig(where + ": unknown key");
    }
  }
  cfg.validate();
  return cfg;
}

ArchConfig load_arch(const std::string& preset_or_path) {
  const std::filesystem::path p(preset_or_path);
  if (std::filesystem::is_regular_file(p)) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_arch_config(ss.str(), p.string());
  }
  return preset(preset_or_path);
}

}  // namespace melius

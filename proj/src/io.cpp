// SPDX-License-Identifier: Apache-2.0
#include "gssd/io.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gssd {

namespace {

constexpr char kVolumeMagic[8] = {'G', 'S', 'S', 'D', 'V', 'O', 'L', '1'};
constexpr char kCheckpointMagic[8] = {'G', 'S', 'S', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
const std::string kConfigRecord = "__config__";

template <typename T> T swap_bytes(T v) {
  T out = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out = static_cast<T>((out << 8) | ((v >> (8 * i)) & 0xff));
  return out;
}

template <typename T> T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big)
    return swap_bytes(v);
  return v;
}

class Writer {
public:
  explicit Writer(const std::filesystem::path &path) : path_(path), out_(path, std::ios::binary) {
    if (!out_)
      throw IoError("cannot open " + path.string() + " for writing");
  }
  void bytes(const void *data, std::size_t n) { out_.write(static_cast<const char *>(data), static_cast<std::streamsize>(n)); }
  template <typename U> void uint(U v) {
    v = to_little(v);
    bytes(&v, sizeof v);
  }
  void floats(const float *data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(data, n * sizeof(float));
    } else {
      for (std::size_t i = 0; i < n; ++i)
        uint(std::bit_cast<std::uint32_t>(data[i]));
    }
  }
  void finish() {
    out_.flush();
    if (!out_)
      throw IoError("write to " + path_.string() + " failed");
  }

private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
public:
  explicit Reader(const std::filesystem::path &path) : path_(path), in_(path, std::ios::binary) {
    if (!in_)
      throw IoError("cannot open " + path.string());
  }
  void bytes(void *data, std::size_t n) {
    in_.read(static_cast<char *>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(path_.string() + ": truncated file");
  }
  template <typename U> U uint() {
    U v;
    bytes(&v, sizeof v);
    return to_little(v);
  }
  void floats(float *data, std::size_t n) {
    bytes(data, n * sizeof(float));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<float>(swap_bytes(std::bit_cast<std::uint32_t>(data[i])));
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  [[noreturn]] void fail(const std::string &what) const { throw FormatError(path_.string() + ": " + what); }

private:
  std::filesystem::path path_;
  std::ifstream in_;
};

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos)
    return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_words(const std::string &s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;)
    out.push_back(w);
  return out;
}

double parse_double(const std::string &text, const std::string &context) {
  double v = 0;
  const char *first = text.data();
  const char *last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw FormatError(context + ": '" + text + "' is not a number");
  return v;
}

long long parse_integer(const std::string &text, const std::string &context) {
  long long v = 0;
  const char *first = text.data();
  const char *last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw FormatError(context + ": '" + text + "' is not an integer");
  return v;
}

std::uint64_t parse_unsigned(const std::string &text, const std::string &context) {
  std::uint64_t v = 0;
  const char *first = text.data();
  const char *last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw FormatError(context + ": '" + text + "' is not an unsigned integer");
  return v;
}

std::string read_text(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

void write_volume(const std::filesystem::path &path, const PhaseVolume &pv) {
  Writer w(path);
  w.bytes(kVolumeMagic, sizeof kVolumeMagic);
  for (Index d : {pv.phases, pv.depth, pv.height, pv.width})
    w.uint(static_cast<std::uint32_t>(d));
  w.floats(pv.hu.data(), static_cast<std::size_t>(pv.hu.size()));
  w.finish();
}

PhaseVolume read_volume(const std::filesystem::path &path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kVolumeMagic, sizeof magic) != 0)
    r.fail("not a GSSDVOL1 volume");
  Index dims[4];
  for (auto &d : dims) {
    d = r.uint<std::uint32_t>();
    if (d == 0)
      r.fail("zero volume dimension");
  }
  PhaseVolume pv(dims[0], dims[1], dims[2], dims[3]);
  r.floats(pv.hu.data(), static_cast<std::size_t>(pv.hu.size()));
  if (!r.at_end())
    r.fail("trailing bytes after volume data");
  return pv;
}

void write_labels(const std::filesystem::path &path, const std::vector<WeakLabel> &labels) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "# phase z_start z_end x_min y_min x_max y_max class\n";
  for (const auto &l : labels)
    out << l.phase << ' ' << l.z_start << ' ' << l.z_end << ' ' << format_double(l.box.x_min) << ' '
        << format_double(l.box.y_min) << ' ' << format_double(l.box.x_max) << ' ' << format_double(l.box.y_max)
        << ' ' << l.label << '\n';
  if (!out)
    throw IoError("write to " + path.string() + " failed");
}

std::vector<WeakLabel> read_labels(const std::filesystem::path &path) {
  std::istringstream in(read_text(path));
  std::vector<WeakLabel> out;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty())
      continue;
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    const auto w = split_words(line);
    if (w.size() != 8)
      throw FormatError(ctx + ": expected 8 fields, got " + std::to_string(w.size()));
    WeakLabel l;
    l.phase = static_cast<int>(parse_integer(w[0], ctx));
    l.z_start = static_cast<int>(parse_integer(w[1], ctx));
    l.z_end = static_cast<int>(parse_integer(w[2], ctx));
    l.box = {parse_double(w[3], ctx), parse_double(w[4], ctx), parse_double(w[5], ctx), parse_double(w[6], ctx)};
    l.label = static_cast<int>(parse_integer(w[7], ctx));
    if (l.z_end < l.z_start || !l.box.valid() || l.label < 1)
      throw FormatError(ctx + ": invalid label");
    out.push_back(l);
  }
  return out;
}

KeyValues KeyValues::parse(const std::string &text, const std::string &source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty())
      continue;
    const std::string ctx = source + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(ctx + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw FormatError(ctx + ": empty key");
    if (kv.entries_.count(key))
      throw FormatError(ctx + ": duplicate key '" + key + "'");
    kv.entries_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path &path) { return parse(read_text(path), path.string()); }

const std::string &KeyValues::get(const std::string &key) const {
  auto it = entries_.find(key);
  if (it == entries_.end())
    throw FormatError(source_ + ": missing key '" + key + "'");
  return it->second;
}

void KeyValues::set(const std::string &key, std::string value) { entries_[key] = std::move(value); }

double KeyValues::number(const std::string &key) const { return parse_double(get(key), source_ + ": " + key); }

long long KeyValues::integer(const std::string &key) const { return parse_integer(get(key), source_ + ": " + key); }

std::uint64_t KeyValues::unsigned_integer(const std::string &key) const {
  return parse_unsigned(get(key), source_ + ": " + key);
}

bool KeyValues::boolean(const std::string &key) const {
  const auto &v = get(key);
  if (v == "true" || v == "1")
    return true;
  if (v == "false" || v == "0")
    return false;
  throw FormatError(source_ + ": " + key + ": '" + v + "' is not a boolean");
}

std::vector<double> KeyValues::numbers(const std::string &key) const {
  std::string v = get(key);
  for (char &c : v)
    if (c == ',')
      c = ' ';
  std::vector<double> out;
  for (const auto &w : split_words(v))
    out.push_back(parse_double(w, source_ + ": " + key));
  return out;
}

std::string KeyValues::serialize() const {
  std::string out;
  for (const auto &[k, v] : entries_)
    out += k + " = " + v + "\n";
  return out;
}

PhantomConfig parse_phantom_config(const KeyValues &kv) {
  PhantomConfig cfg;
  auto &s = cfg.base;
  std::map<int, LesionSpec> lesions;
  std::map<int, std::vector<std::string>> lesion_keys;
  LesionSampler sampler;
  bool random = false;

  auto vec3 = [&](const std::string &key) {
    const auto v = kv.numbers(key);
    if (v.size() != 3)
      throw ConfigError(kv.source() + ": " + key + " needs 3 values (z y x)");
    return Eigen::Vector3d(v[0], v[1], v[2]);
  };

  for (const auto &[key, value] : kv.entries()) {
    if (key == "phases")
      s.phases = kv.integer(key);
    else if (key == "depth")
      s.depth = kv.integer(key);
    else if (key == "height")
      s.height = kv.integer(key);
    else if (key == "width")
      s.width = kv.integer(key);
    else if (key == "slice_spacing")
      s.slice_spacing = kv.number(key);
    else if (key == "background_hu")
      s.background_hu = static_cast<float>(kv.number(key));
    else if (key == "liver_hu")
      s.liver_hu = static_cast<float>(kv.number(key));
    else if (key == "liver_center")
      s.liver_center = vec3(key);
    else if (key == "liver_radii")
      s.liver_radii = vec3(key);
    else if (key == "noise" || key == "noise_sigma")
      s.noise_sigma = static_cast<float>(kv.number(key));
    else if (key == "bias" || key == "vendor_bias")
      s.vendor_bias = static_cast<float>(kv.number(key));
    else if (key == "seed")
      cfg.seed = kv.unsigned_integer(key);
    else if (key.rfind("random.", 0) == 0) {
      random = true;
      const std::string field = key.substr(7);
      if (field == "count_min")
        sampler.count_min = static_cast<int>(kv.integer(key));
      else if (field == "count_max")
        sampler.count_max = static_cast<int>(kv.integer(key));
      else if (field == "radius_min")
        sampler.radius_min = kv.number(key);
      else if (field == "radius_max")
        sampler.radius_max = kv.number(key);
      else if (field == "contrast_min")
        sampler.contrast_min = kv.number(key);
      else if (field == "contrast_max")
        sampler.contrast_max = kv.number(key);
      else if (field == "portal_hidden_fraction")
        sampler.portal_hidden_fraction = kv.number(key);
      else if (field == "vendor_bias_max")
        cfg.vendor_bias_max = kv.number(key);
      else if (field != "enabled")
        throw ConfigError(kv.source() + ": unknown key '" + key + "'");
    } else if (key.rfind("lesion.", 0) == 0) {
      const auto dot = key.find('.', 7);
      if (dot == std::string::npos)
        throw ConfigError(kv.source() + ": malformed lesion key '" + key + "'");
      const int index = static_cast<int>(parse_integer(key.substr(7, dot - 7), kv.source() + ": " + key));
      const std::string field = key.substr(dot + 1);
      auto &l = lesions[index];
      if (field == "center") {
        const auto c = vec3(key);
        l.z = c[0];
        l.y = c[1];
        l.x = c[2];
      } else if (field == "radius") {
        l.radius = kv.number(key);
      } else if (field == "delta") {
        l.delta.clear();
        for (double d : kv.numbers(key))
          l.delta.push_back(static_cast<float>(d));
      } else {
        throw ConfigError(kv.source() + ": unknown key '" + key + "'");
      }
      lesion_keys[index].push_back(field);
    } else {
      throw ConfigError(kv.source() + ": unknown key '" + key + "'");
    }
  }
  if (random && !lesions.empty())
    throw ConfigError(kv.source() + ": explicit lesions and random.* keys are mutually exclusive");
  if (random && kv.has("random.enabled") && !kv.boolean("random.enabled"))
    random = false;
  for (const auto &[index, fields] : lesion_keys)
    for (const char *required : {"center", "radius", "delta"})
      if (std::find(fields.begin(), fields.end(), required) == fields.end())
        throw ConfigError(kv.source() + ": lesion " + std::to_string(index) + " is missing '" + required + "'");
  for (auto &[index, l] : lesions)
    s.lesions.push_back(std::move(l));
  if (random) {
    if (sampler.count_min < 0 || sampler.count_max < sampler.count_min || !(sampler.radius_min > 0) ||
        sampler.radius_max < sampler.radius_min || sampler.contrast_max < sampler.contrast_min ||
        sampler.portal_hidden_fraction < 0 || sampler.portal_hidden_fraction > 1)
      throw ConfigError(kv.source() + ": inconsistent random.* ranges");
    cfg.sampler = sampler;
  }
  s.validate();
  return cfg;
}

std::uint64_t volume_seed(std::uint64_t seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x766f6cu};
  std::mt19937_64 rng(seq);
  return rng();
}

Phantom generate_volume(const PhantomConfig &cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PhantomSpec spec = cfg.base;
  if (cfg.sampler) {
    spec.lesions = sample_lesions(spec, *cfg.sampler, rng);
    if (cfg.vendor_bias_max > 0)
      spec.vendor_bias = static_cast<float>(
          std::uniform_real_distribution<double>(-cfg.vendor_bias_max, cfg.vendor_bias_max)(rng));
  }
  return generate_phantom(spec, rng);
}

const Tensor<float> *Checkpoint::find(const std::string &name) const {
  for (const auto &r : records)
    if (r.name == name)
      return &r.tensor;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
  // write to a sibling file first so a crash never leaves a torn checkpoint
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    Writer w(tmp);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.uint(kCheckpointVersion);
    w.uint(static_cast<std::uint32_t>(ckpt.records.size() + 1));
    auto name = [&](const std::string &n) {
      if (n.size() > 0xffff)
        throw ConfigError("checkpoint record name too long: " + n.substr(0, 40));
      w.uint(static_cast<std::uint16_t>(n.size()));
      w.bytes(n.data(), n.size());
    };
    for (const auto &r : ckpt.records) {
      if (r.name == kConfigRecord)
        throw ConfigError("checkpoint record name " + kConfigRecord + " is reserved");
      name(r.name);
      w.uint(static_cast<std::uint8_t>(r.tensor.rank()));
      for (Index d : r.tensor.shape())
        w.uint(static_cast<std::uint32_t>(d));
      w.floats(r.tensor.ptr(), static_cast<std::size_t>(r.tensor.size()));
    }
    name(kConfigRecord);
    w.uint(std::uint8_t{1});
    w.uint(static_cast<std::uint32_t>(ckpt.config.size()));
    w.bytes(ckpt.config.data(), ckpt.config.size());
    w.finish();
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path &path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    r.fail("not a GSSDCKPT checkpoint");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.uint<std::uint32_t>();
  Checkpoint ckpt;
  bool have_config = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.uint<std::uint16_t>(), '\0');
    r.bytes(name.data(), name.size());
    const auto rank = r.uint<std::uint8_t>();
    Shape shape;
    for (int d = 0; d < rank; ++d)
      shape.push_back(r.uint<std::uint32_t>());
    if (name == kConfigRecord) {
      if (i + 1 != count || rank != 1)
        r.fail("misplaced config record");
      ckpt.config.resize(static_cast<std::size_t>(shape[0]));
      r.bytes(ckpt.config.data(), ckpt.config.size());
      have_config = true;
      continue;
    }
    for (Index d : shape)
      if (d == 0)
        r.fail("record '" + name + "' has a zero dimension");
    auto t = Tensor<float>::uninitialized(shape);
    r.floats(t.ptr(), static_cast<std::size_t>(t.size()));
    ckpt.records.push_back({std::move(name), std::move(t)});
  }
  if (!have_config)
    r.fail("missing __config__ record");
  if (!r.at_end())
    r.fail("trailing bytes after last record");
  return ckpt;
}

void store_model(const Model<float> &model, Checkpoint &ckpt) {
  for (const auto &p : model.parameters())
    ckpt.records.push_back(p);
  for (const auto &b : model.buffers())
    ckpt.records.push_back(b);
}

void load_model(const Checkpoint &ckpt, Model<float> &model) {
  auto load = [&](NamedTensor<float> &dst) {
    const Tensor<float> *src = ckpt.find(dst.name);
    if (!src)
      throw FormatError("checkpoint lacks tensor '" + dst.name + "'");
    if (src->shape() != dst.tensor.shape())
      throw FormatError("checkpoint tensor '" + dst.name + "' has shape " + shape_string(src->shape()) +
                        ", model expects " + shape_string(dst.tensor.shape()));
    dst.tensor.data() = src->data();
  };
  for (auto &p : model.parameters())
    load(p);
  for (auto &b : model.buffers())
    load(b);
}

void write_manifest(const std::filesystem::path &dir, const std::vector<ManifestEntry> &entries) {
  const auto path = dir / "manifest.csv";
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "volume,labels,seed,vendor_bias\n";
  for (const auto &e : entries)
    out << e.volume << ',' << e.labels << ',' << e.seed << ',' << format_double(e.vendor_bias) << '\n';
  if (!out)
    throw IoError("write to " + path.string() + " failed");
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path &dir) {
  const auto path = dir / "manifest.csv";
  std::istringstream in(read_text(path));
  std::vector<ManifestEntry> out;
  std::string line;
  if (!std::getline(in, line) || trim(line) != "volume,labels,seed,vendor_bias")
    throw FormatError(path.string() + ": missing manifest header");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty())
      continue;
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string> f;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');)
      f.push_back(cell);
    if (f.size() != 4)
      throw FormatError(ctx + ": expected 4 columns");
    out.push_back({f[0], f[1], parse_unsigned(f[2], ctx),
                   static_cast<float>(parse_double(f[3], ctx))});
  }
  if (out.empty())
    throw FormatError(path.string() + ": no volumes listed");
  return out;
}

std::vector<ManifestEntry> write_phantom_set(const PhantomConfig &cfg, int count, std::uint64_t seed,
                                             const std::filesystem::path &dir) {
  if (count < 1)
    throw ConfigError("phantom count must be positive");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "volume_%03d", i);
    ManifestEntry e{std::string(stem) + ".gssdvol", std::string(stem) + ".labels", volume_seed(seed, i), 0};
    const Phantom ph = generate_volume(cfg, e.seed);
    e.vendor_bias = ph.volume.vendor_bias;
    write_volume(dir / e.volume, ph.volume);
    write_labels(dir / e.labels, ph.labels);
    entries.push_back(e);
  }
  write_manifest(dir, entries);
  return entries;
}

} // namespace gssd

#include "pairmeas/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pairmeas {

static_assert(std::endian::native == std::endian::little,
              "container io assumes a little-endian host");

namespace fs = std::filesystem;

// ---------------- crc32 ----------------

namespace {

const std::array<std::uint32_t, 256>& crc_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

}  // namespace

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed) {
  const auto& t = crc_table();
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = t[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// ---------------- configuration ----------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config cfg;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? eol : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    auto where = [&] { return origin + ":" + std::to_string(line_no); };
    if (line.front() == '[') {
      if (line.back() != ']') throw IoError(where() + ": unterminated section header");
      std::string_view name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) throw IoError(where() + ": empty section name");
      section = std::string(name);
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw IoError(where() + ": expected key = value");
    std::string_view key = trim(line.substr(0, eq));
    std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) throw IoError(where() + ": empty key");
    if (key.find_first_of(" \t[]") != std::string_view::npos)
      throw IoError(where() + ": malformed key '" + std::string(key) + "'");
    std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (cfg.kv_.count(full)) throw IoError(where() + ": duplicate key '" + full + "'");
    cfg.kv_.emplace(std::move(full), std::string(value));
  }
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

bool Config::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string Config::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw IoError("missing config key '" + key + "'");
  return it->second;
}

std::string Config::get(const std::string& key, std::string fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? std::move(fallback) : it->second;
}

namespace {

std::int64_t parse_i64(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw IoError("config key '" + key + "' is not an integer: '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw IoError("config key '" + key + "' is not an unsigned integer: '" + v + "'");
  return out;
}

double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw IoError("config key '" + key + "' is not a number: '" + v + "'");
  }
}

}  // namespace

std::int64_t Config::get_int(const std::string& key) const { return parse_i64(key, get(key)); }

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? parse_i64(key, get(key)) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? parse_u64(key, get(key)) : fallback;
}

double Config::get_double(const std::string& key) const { return parse_f64(key, get(key)); }

double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? parse_f64(key, get(key)) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  std::string v = get(key);
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw IoError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<int> Config::get_int_list(const std::string& key) const {
  std::string v = get(key);
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    std::size_t comma = v.find(',', pos);
    std::string item(trim(v.substr(pos, comma == std::string::npos ? comma : comma - pos)));
    if (item.empty()) throw IoError("config key '" + key + "' has an empty list item");
    out.push_back(static_cast<int>(parse_i64(key, item)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw IoError("config key '" + key + "' is an empty list");
  return out;
}

void Config::set(const std::string& key, std::string value) {
  kv_[key] = std::move(value);
}

std::string Config::serialize() const {
  std::ostringstream out;
  // sectionless keys must precede every header or they change section on reparse
  bool any_plain = false;
  for (const auto& [key, value] : kv_) {
    if (key.find('.') != std::string::npos) continue;
    out << key << " = " << value << "\n";
    any_plain = true;
  }
  std::string section;
  bool first = !any_plain;
  // std::map iterates keys sorted, so a section's keys are contiguous
  for (const auto& [key, value] : kv_) {
    std::size_t dot = key.find('.');
    if (dot == std::string::npos) continue;
    std::string sec = key.substr(0, dot);
    if (sec != section || first) {
      if (!first) out << "\n";
      out << "[" << sec << "]\n";
      section = sec;
      first = false;
    }
    out << key.substr(dot + 1) << " = " << value << "\n";
  }
  return out.str();
}

void reject_unknown_keys(const Config& cfg, const std::set<std::string>& allowed) {
  std::string bad;
  for (const auto& [key, value] : cfg.items())
    if (!allowed.count(key)) bad += bad.empty() ? key : ", " + key;
  if (!bad.empty()) throw IoError("unknown config keys: " + bad);
}

// ---------------- named-tensor container ----------------

namespace {

constexpr char kMagic[4] = {'U', 'I', 'M', '1'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::vector<unsigned char>& buf, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  buf.insert(buf.end(), b, b + n);
}

void put_u16(std::vector<unsigned char>& buf, std::uint16_t v) { put_bytes(buf, &v, 2); }
void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) { put_bytes(buf, &v, 4); }

struct ByteReader {
  const unsigned char* p;
  std::size_t n, at = 0;
  void need(std::size_t k, const char* what) {
    if (n - at < k) throw IoError(std::string("container truncated reading ") + what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v;
    std::memcpy(&v, p + at, 2);
    at += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, p + at, 4);
    at += 4;
    return v;
  }
};

void write_file_atomic(const std::string& path, const std::vector<unsigned char>& buf) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return buf;
}

}  // namespace

void write_container(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::vector<unsigned char> buf;
  put_bytes(buf, kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  std::set<std::string> seen;
  for (const NamedTensor& e : entries) {
    if (e.name.empty() || e.name.size() > 65535)
      throw IoError("container entry name must be 1..65535 bytes");
    if (!seen.insert(e.name).second) throw IoError("duplicate container entry " + e.name);
    if (e.dims.empty() || e.dims.size() > 255)
      throw IoError("container entry " + e.name + " needs 1..255 dims");
    std::int64_t numel = 1;
    for (std::int64_t d : e.dims) {
      if (d < 1 || d > 0x7FFFFFFF) throw IoError("container entry " + e.name + " has a bad dim");
      numel *= d;
      if (numel > (std::int64_t(1) << 31)) throw IoError("container entry " + e.name + " too big");
    }
    if (numel != static_cast<std::int64_t>(e.values.size()))
      throw IoError("container entry " + e.name + " value count does not match dims");
    put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
    put_bytes(buf, e.name.data(), e.name.size());
    put_u32(buf, static_cast<std::uint32_t>(e.dims.size()));
    for (std::int64_t d : e.dims) put_u32(buf, static_cast<std::uint32_t>(d));
    put_bytes(buf, e.values.data(), e.values.size() * 4);
  }
  put_u32(buf, crc32(buf.data(), buf.size()));
  write_file_atomic(path, buf);
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::vector<unsigned char> buf = read_file(path);
  if (buf.size() < 16) throw IoError(path + " is too short to be a container");
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  if (stored != crc32(buf.data(), buf.size() - 4))
    throw IoError(path + " failed its checksum; the file is corrupt");
  ByteReader r{buf.data(), buf.size() - 4};
  char magic[4];
  r.need(4, "magic");
  std::memcpy(magic, r.p, 4);
  r.at = 4;
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + " is not a UIM1 container");
  std::uint32_t version = r.u32("version");
  if (version != kVersion)
    throw IoError(path + " has unsupported version " + std::to_string(version));
  std::uint32_t count = r.u32("entry count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    std::uint16_t name_len = r.u16("name length");
    r.need(name_len, "name");
    e.name.assign(reinterpret_cast<const char*>(r.p + r.at), name_len);
    r.at += name_len;
    if (e.name.empty()) throw IoError(path + " holds an entry with an empty name");
    if (!seen.insert(e.name).second) throw IoError(path + " repeats entry " + e.name);
    std::uint32_t ndim = r.u32("ndim");
    if (ndim < 1 || ndim > 255) throw IoError(path + ": entry " + e.name + " has bad rank");
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint32_t dim = r.u32("dim");
      if (dim < 1) throw IoError(path + ": entry " + e.name + " has a zero dim");
      e.dims.push_back(static_cast<std::int64_t>(dim));
      numel *= dim;
      if (numel > (std::int64_t(1) << 31)) throw IoError(path + ": entry " + e.name + " too big");
    }
    r.need(static_cast<std::size_t>(numel) * 4, "values");
    e.values.resize(static_cast<std::size_t>(numel));
    std::memcpy(e.values.data(), r.p + r.at, static_cast<std::size_t>(numel) * 4);
    r.at += static_cast<std::size_t>(numel) * 4;
    out.push_back(std::move(e));
  }
  if (r.at != r.n) throw IoError(path + " has trailing bytes after the last entry");
  return out;
}

// ---------------- model checkpoints ----------------

namespace {

NamedTensor scalar_entry(std::string name, double v) {
  return NamedTensor{std::move(name), {1}, {static_cast<float>(v)}};
}

template <typename T>
NamedTensor tensor_entry(std::string name, const Tensor<T>& t) {
  NamedTensor e;
  e.name = std::move(name);
  for (int d = 0; d < t.rank(); ++d) e.dims.push_back(t.dim(d));
  auto v = t.values();
  e.values.reserve(v.size());
  for (T x : v) e.values.push_back(static_cast<float>(x));
  return e;
}

struct EntryMap {
  std::map<std::string, const NamedTensor*> by_name;
  const std::string origin;

  explicit EntryMap(const std::vector<NamedTensor>& entries, std::string where)
      : origin(std::move(where)) {
    for (const NamedTensor& e : entries) by_name.emplace(e.name, &e);
  }
  const NamedTensor& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError(origin + " is missing entry " + name);
    return *it->second;
  }
  bool has(const std::string& name) const { return by_name.count(name) != 0; }
  double scalar(const std::string& name) const {
    const NamedTensor& e = at(name);
    if (e.values.size() != 1) throw IoError(origin + ": entry " + name + " is not a scalar");
    return static_cast<double>(e.values[0]);
  }
};

template <typename T>
void fill_tensor(const NamedTensor& e, Tensor<T>& t, const std::string& origin) {
  bool match = static_cast<int>(e.dims.size()) == t.rank();
  for (int d = 0; match && d < t.rank(); ++d) match = e.dims[d] == t.dim(d);
  if (!match) throw IoError(origin + ": entry " + e.name + " has the wrong shape");
  auto out = t.mutable_values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(e.values[i]);
}

// u64 as four exact 16-bit limbs, low first; float holds each limb exactly
NamedTensor u64_entry(std::string name, std::uint64_t v) {
  NamedTensor e;
  e.name = std::move(name);
  e.dims = {4};
  for (int k = 0; k < 4; ++k)
    e.values.push_back(static_cast<float>((v >> (16 * k)) & 0xFFFFu));
  return e;
}

std::uint64_t u64_from_entry(const NamedTensor& e, const std::string& origin) {
  if (e.values.size() != 4) throw IoError(origin + ": entry " + e.name + " is not a u64");
  std::uint64_t v = 0;
  for (int k = 0; k < 4; ++k) {
    double limb = static_cast<double>(e.values[static_cast<std::size_t>(k)]);
    if (limb < 0 || limb > 65535 || limb != std::floor(limb))
      throw IoError(origin + ": entry " + e.name + " holds a malformed u64 limb");
    v |= static_cast<std::uint64_t>(limb) << (16 * k);
  }
  return v;
}

template <typename T, typename Model>
void fill_params(Model& model, const EntryMap& m) {
  for (auto& [name, tensor] : model.named_params()) fill_tensor(m.at("param." + name), *tensor, m.origin);
}

}  // namespace

ModelKind container_kind(const std::vector<NamedTensor>& entries) {
  EntryMap m(entries, "checkpoint");
  double kind = m.scalar("meta.kind");
  if (kind == 0) return ModelKind::cs;
  if (kind == 1) return ModelKind::deblur;
  throw IoError("checkpoint has unknown model kind " + std::to_string(kind));
}

template <typename T>
std::vector<NamedTensor> pack_model(CsEstimator<T>& model) {
  std::vector<NamedTensor> out;
  out.push_back(scalar_entry("meta.kind", 0));
  out.push_back(scalar_entry("meta.patch", model.config().patch));
  NamedTensor widths{"meta.widths", {3}, {}};
  for (int w : model.config().widths) widths.values.push_back(static_cast<float>(w));
  out.push_back(std::move(widths));
  for (auto& [name, tensor] : model.named_params())
    out.push_back(tensor_entry<T>("param." + name, *tensor));
  return out;
}

template <typename T>
std::vector<NamedTensor> pack_model(DeblurEstimator<T>& model) {
  std::vector<NamedTensor> out;
  out.push_back(scalar_entry("meta.kind", 1));
  out.push_back(scalar_entry("meta.image", model.config().image));
  out.push_back(scalar_entry("meta.ksize", model.config().ksize));
  out.push_back(scalar_entry("meta.kernel_head", model.config().kernel_head ? 1 : 0));
  NamedTensor widths{"meta.widths", {4}, {}};
  for (int w : model.config().widths) widths.values.push_back(static_cast<float>(w));
  out.push_back(std::move(widths));
  for (auto& [name, tensor] : model.named_params())
    out.push_back(tensor_entry<T>("param." + name, *tensor));
  return out;
}

template <typename T>
CsEstimator<T> unpack_cs_model(const std::vector<NamedTensor>& entries) {
  EntryMap m(entries, "checkpoint");
  if (m.scalar("meta.kind") != 0) throw IoError("checkpoint does not hold a patch estimator");
  CsModelConfig cfg;
  cfg.patch = static_cast<int>(m.scalar("meta.patch"));
  const NamedTensor& w = m.at("meta.widths");
  if (w.values.size() != cfg.widths.size()) throw IoError("checkpoint has a bad width list");
  for (std::size_t i = 0; i < cfg.widths.size(); ++i)
    cfg.widths[i] = static_cast<int>(w.values[i]);
  CsEstimator<T> model(cfg, 0);
  fill_params<T>(model, m);
  return model;
}

template <typename T>
DeblurEstimator<T> unpack_deblur_model(const std::vector<NamedTensor>& entries) {
  EntryMap m(entries, "checkpoint");
  if (m.scalar("meta.kind") != 1) throw IoError("checkpoint does not hold a deblur estimator");
  DeblurModelConfig cfg;
  cfg.image = static_cast<int>(m.scalar("meta.image"));
  cfg.ksize = static_cast<int>(m.scalar("meta.ksize"));
  cfg.kernel_head = m.scalar("meta.kernel_head") != 0;
  const NamedTensor& w = m.at("meta.widths");
  if (w.values.size() != cfg.widths.size()) throw IoError("checkpoint has a bad width list");
  for (std::size_t i = 0; i < cfg.widths.size(); ++i)
    cfg.widths[i] = static_cast<int>(w.values[i]);
  DeblurEstimator<T> model(cfg, 0);
  fill_params<T>(model, m);
  return model;
}

template <typename T>
void append_carry(std::vector<NamedTensor>& entries, const TrainCarry<T>& carry,
                  const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
  if (carry.adam.m.size() != params.size() || carry.adam.v.size() != params.size())
    throw IoError("carry does not match the parameter list");
  if (carry.adam.step > (std::int64_t(1) << 24))
    throw IoError("step count exceeds what the checkpoint format stores exactly");
  NamedTensor scalars{"carry.scalars", {7}, {}};
  scalars.values = {static_cast<float>(carry.adam.step),
                    static_cast<float>(carry.epochs_done),
                    static_cast<float>(carry.lr),
                    static_cast<float>(carry.best_val),
                    static_cast<float>(carry.stall),
                    static_cast<float>(carry.drops_taken),
                    carry.stopped ? 1.0f : 0.0f};
  entries.push_back(std::move(scalars));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i].first;
    NamedTensor me{"carry.m." + name,
                   {static_cast<std::int64_t>(carry.adam.m[i].size())},
                   {}};
    for (T x : carry.adam.m[i]) me.values.push_back(static_cast<float>(x));
    entries.push_back(std::move(me));
    NamedTensor ve{"carry.v." + name,
                   {static_cast<std::int64_t>(carry.adam.v[i].size())},
                   {}};
    for (T x : carry.adam.v[i]) ve.values.push_back(static_cast<float>(x));
    entries.push_back(std::move(ve));
  }
}

bool has_carry(const std::vector<NamedTensor>& entries) {
  return std::any_of(entries.begin(), entries.end(),
                     [](const NamedTensor& e) { return e.name == "carry.scalars"; });
}

template <typename T>
TrainCarry<T> extract_carry(const std::vector<NamedTensor>& entries,
                            const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
  EntryMap m(entries, "checkpoint");
  const NamedTensor& s = m.at("carry.scalars");
  if (s.values.size() != 7) throw IoError("checkpoint carry block is malformed");
  TrainCarry<T> carry;
  carry.adam.step = static_cast<std::int64_t>(s.values[0]);
  carry.epochs_done = static_cast<int>(s.values[1]);
  carry.lr = static_cast<double>(s.values[2]);
  carry.best_val = static_cast<double>(s.values[3]);
  carry.stall = static_cast<int>(s.values[4]);
  carry.drops_taken = static_cast<int>(s.values[5]);
  carry.stopped = s.values[6] != 0;
  for (const auto& [name, tensor] : params) {
    const NamedTensor& me = m.at("carry.m." + name);
    const NamedTensor& ve = m.at("carry.v." + name);
    std::size_t numel = tensor->values().size();
    if (me.values.size() != numel || ve.values.size() != numel)
      throw IoError("checkpoint carry moments do not match parameter " + name);
    std::vector<T> mm(numel), vv(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      mm[i] = static_cast<T>(me.values[i]);
      vv[i] = static_cast<T>(ve.values[i]);
    }
    carry.adam.m.push_back(std::move(mm));
    carry.adam.v.push_back(std::move(vv));
  }
  return carry;
}

template <typename T>
void save_model(const std::string& path, CsEstimator<T>& model) {
  write_container(path, pack_model(model));
}

template <typename T>
void save_model(const std::string& path, DeblurEstimator<T>& model) {
  write_container(path, pack_model(model));
}

// ---------------- images ----------------

void write_pgm(const std::string& path, const Tensor<double>& img) {
  if (!img.defined() || img.rank() != 2) throw IoError("pgm output needs an [H,W] image");
  std::int64_t H = img.dim(0), W = img.dim(1);
  std::vector<unsigned char> buf;
  std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  put_bytes(buf, header.data(), header.size());
  for (double v : img.values()) {
    double c = std::clamp(v, 0.0, 1.0);
    buf.push_back(static_cast<unsigned char>(std::lround(c * 255.0)));
  }
  write_file_atomic(path, buf);
}

namespace {

// netpbm token: skips whitespace and # comments
std::string pnm_token(const std::vector<unsigned char>& buf, std::size_t& at,
                      const std::string& path) {
  while (at < buf.size()) {
    unsigned char c = buf[at];
    if (c == '#') {
      while (at < buf.size() && buf[at] != '\n') ++at;
    } else if (std::isspace(c)) {
      ++at;
    } else {
      break;
    }
  }
  std::size_t start = at;
  while (at < buf.size() && !std::isspace(buf[at]) && buf[at] != '#') ++at;
  if (start == at) throw IoError(path + " ends inside its header");
  return std::string(buf.begin() + static_cast<std::ptrdiff_t>(start),
                     buf.begin() + static_cast<std::ptrdiff_t>(at));
}

}  // namespace

Tensor<double> read_image(const std::string& path) {
  std::vector<unsigned char> buf = read_file(path);
  std::size_t at = 0;
  std::string magic = pnm_token(buf, at, path);
  int channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError(path + " is not a binary PGM or PPM image");
  }
  auto dim_tok = [&](const char* what) {
    std::string t = pnm_token(buf, at, path);
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || v < 1)
      throw IoError(path + " has a bad " + what);
    return v;
  };
  std::int64_t W = dim_tok("width");
  std::int64_t H = dim_tok("height");
  std::int64_t maxval = dim_tok("maxval");
  if (maxval != 255) throw IoError(path + ": only maxval 255 is supported");
  ++at;  // single whitespace byte separates header from raster
  std::size_t need = static_cast<std::size_t>(H * W * channels);
  if (at > buf.size() || buf.size() - at < need) throw IoError(path + " raster is truncated");
  std::vector<double> vals(static_cast<std::size_t>(H * W));
  for (std::size_t i = 0; i < vals.size(); ++i) {
    double acc = 0;
    for (int c = 0; c < channels; ++c)
      acc += static_cast<double>(buf[at + i * static_cast<std::size_t>(channels) +
                                     static_cast<std::size_t>(c)]);
    vals[i] = acc / (255.0 * channels);
  }
  return Tensor<double>::from({H, W}, std::move(vals));
}

// ---------------- paired-measurement datasets ----------------

namespace {

std::string rec_key(std::int64_t k, const char* suffix) {
  return "r" + std::to_string(k) + "." + suffix;
}

std::string kind_name(typename ParamDistribution<double>::Kind k) {
  using K = typename ParamDistribution<double>::Kind;
  switch (k) {
    case K::cs_shifted: return "cs-shifted";
    case K::cs_fresh: return "cs-fresh";
    case K::motion_kernels: return "motion";
    default: throw IoError("this operator family cannot be written to a dataset");
  }
}

std::string boundary_name(Boundary b) { return b == Boundary::circular ? "circular" : "zero"; }

Boundary boundary_from(const std::string& s) {
  if (s == "circular") return Boundary::circular;
  if (s == "zero") return Boundary::zero;
  throw IoError("unknown boundary '" + s + "'");
}

Tensor<double> entry_tensor(const NamedTensor& e) {
  std::vector<double> vals(e.values.begin(), e.values.end());
  return Tensor<double>::from(Shape(e.dims.begin(), e.dims.end()), std::move(vals));
}

// operator descriptor entries under a key prefix such as "r3.t1"
void pack_op(std::vector<NamedTensor>& out, const std::string& prefix,
             const MeasurementOp<double>& op, bool shared_phi) {
  if (op.kind() == MeasurementOp<double>::Kind::compressive) {
    const auto& cs = op.cs();
    NamedTensor off{prefix + ".off", {2},
                    {static_cast<float>(cs.dy()), static_cast<float>(cs.dx())}};
    out.push_back(std::move(off));
    if (!shared_phi) out.push_back(tensor_entry<double>(prefix + ".phi", cs.phi()));
  } else if (op.kind() == MeasurementOp<double>::Kind::convolution) {
    out.push_back(tensor_entry<double>(prefix + ".kernel", op.conv().kernel()));
  } else {
    throw IoError("record is missing its operator descriptor");
  }
}

MeasurementOp<double> unpack_op(const EntryMap& m, const std::string& prefix,
                                const DatasetInfo& info, const Tensor<double>& shared_phi) {
  if (info.kind == "motion") {
    Tensor<double> kernel = entry_tensor(m.at(prefix + ".kernel"));
    return MeasurementOp<double>(
        ConvolutionOp<double>(std::move(kernel), boundary_from(info.boundary)));
  }
  const NamedTensor& off = m.at(prefix + ".off");
  if (off.values.size() != 2) throw IoError(m.origin + ": entry " + off.name + " is malformed");
  int dy = static_cast<int>(off.values[0]), dx = static_cast<int>(off.values[1]);
  Tensor<double> phi = info.kind == "cs-shifted" ? shared_phi
                                                 : entry_tensor(m.at(prefix + ".phi"));
  return MeasurementOp<double>(CompressivePatchOp<double>(phi, info.patch, dy, dx));
}

void write_manifest(const std::string& dir, const DatasetInfo& info) {
  Config mf;
  mf.set("dataset.kind", info.kind);
  mf.set("dataset.records", std::to_string(info.records));
  mf.set("dataset.height", std::to_string(info.height));
  mf.set("dataset.width", std::to_string(info.width));
  if (info.kind == "motion") {
    mf.set("dataset.ksize", std::to_string(info.ksize));
    mf.set("dataset.max_walk", std::to_string(info.max_walk));
    mf.set("dataset.boundary", info.boundary);
  } else {
    mf.set("dataset.patch", std::to_string(info.patch));
    mf.set("dataset.m", std::to_string(info.m));
  }
  char sig[32];
  std::snprintf(sig, sizeof sig, "%.17g", info.sigma);
  mf.set("dataset.sigma", sig);
  mf.set("dataset.seed", std::to_string(info.seed));
  mf.set("dataset.blind", info.blind ? "1" : "0");
  mf.set("dataset.has_eval", info.has_eval ? "1" : "0");
  char hex[24];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(info.content_hash));
  mf.set("dataset.hash", hex);
  std::string text = mf.serialize();
  std::vector<unsigned char> buf(text.begin(), text.end());
  write_file_atomic(dir + "/manifest.txt", buf);
}

}  // namespace

DatasetInfo write_dataset(const std::string& dir, const DatasetInfo& info,
                          const ParamDistribution<double>& dist,
                          const std::vector<MeasurementPair<double>>& records) {
  DatasetInfo out = info;
  out.kind = kind_name(dist.kind());
  out.records = static_cast<std::int64_t>(records.size());
  if (records.empty()) throw IoError("refusing to write an empty dataset");
  if (out.height < 1 || out.width < 1) throw IoError("dataset needs its canvas geometry");
  if (out.kind == "motion") {
    out.ksize = dist.kernel_size();
    out.boundary = boundary_name(dist.boundary());
    // the walk bound is not recoverable from the distribution handle
    if (out.max_walk < 1) throw IoError("motion datasets need max_walk in their info");
  } else {
    out.patch = dist.patch_size();
    out.m = dist.measurements_per_patch();
  }
  fs::create_directories(dir);

  std::vector<NamedTensor> data, sealed, eval;
  const bool shared_phi = out.kind == "cs-shifted";
  if (shared_phi)
    data.push_back(tensor_entry<double>("family.phi", records[0].theta1.cs().phi()));
  for (std::int64_t k = 0; k < out.records; ++k) {
    const MeasurementPair<double>& rec = records[static_cast<std::size_t>(k)];
    if (!rec.y1.defined() || !rec.y2.defined())
      throw IoError("record " + std::to_string(k) + " is missing measurements");
    data.push_back(tensor_entry<double>(rec_key(k, "y1"), rec.y1));
    data.push_back(tensor_entry<double>(rec_key(k, "y2"), rec.y2));
    data.push_back(u64_entry(rec_key(k, "seed"), rec.record_seed));
    std::vector<NamedTensor>& op_sink = out.blind ? sealed : data;
    pack_op(op_sink, rec_key(k, "t1"), rec.theta1, shared_phi);
    pack_op(op_sink, rec_key(k, "t2"), rec.theta2, shared_phi);
    if (out.has_eval) {
      if (!rec.x_eval.defined())
        throw IoError("record " + std::to_string(k) + " has no ground truth to store");
      eval.push_back(tensor_entry<double>(rec_key(k, "x"), rec.x_eval));
    }
  }
  write_container(dir + "/dataset.bin", data);
  if (out.blind) write_container(dir + "/operators.bin", sealed);
  if (out.has_eval) write_container(dir + "/eval.bin", eval);

  // the manifest hash covers the records as a loader will see them, so the
  // float32 rounding of this container is part of the dataset's identity
  out.content_hash = 0;
  write_manifest(dir, out);
  Dataset check = read_dataset(dir, false);
  out.content_hash = check.info.content_hash;
  write_manifest(dir, out);
  return out;
}

DatasetInfo read_dataset_info(const std::string& dir) {
  Config mf = Config::parse_file(dir + "/manifest.txt");
  reject_unknown_keys(
      mf, {"dataset.kind", "dataset.records", "dataset.height", "dataset.width",
           "dataset.patch", "dataset.m", "dataset.ksize", "dataset.max_walk",
           "dataset.boundary", "dataset.sigma", "dataset.seed", "dataset.blind",
           "dataset.has_eval", "dataset.hash"});
  DatasetInfo info;
  info.kind = mf.get("dataset.kind");
  if (info.kind != "cs-shifted" && info.kind != "cs-fresh" && info.kind != "motion")
    throw IoError(dir + ": unknown dataset kind '" + info.kind + "'");
  info.records = mf.get_int("dataset.records");
  info.height = mf.get_int("dataset.height");
  info.width = mf.get_int("dataset.width");
  if (info.kind == "motion") {
    info.ksize = static_cast<int>(mf.get_int("dataset.ksize"));
    info.max_walk = static_cast<int>(mf.get_int("dataset.max_walk"));
    info.boundary = mf.get("dataset.boundary");
    boundary_from(info.boundary);
  } else {
    info.patch = static_cast<int>(mf.get_int("dataset.patch"));
    info.m = static_cast<int>(mf.get_int("dataset.m"));
  }
  info.sigma = mf.get_double("dataset.sigma");
  info.seed = mf.get_u64("dataset.seed", 0);
  info.blind = mf.get_bool("dataset.blind", false);
  info.has_eval = mf.get_bool("dataset.has_eval", false);
  std::string hex = mf.get("dataset.hash");
  if (hex.size() != 16 || hex.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw IoError(dir + ": manifest hash is malformed");
  info.content_hash = std::stoull(hex, nullptr, 16);
  return info;
}

Dataset read_dataset(const std::string& dir, bool with_eval) {
  Dataset ds;
  ds.info = read_dataset_info(dir);
  const DatasetInfo& info = ds.info;
  if (with_eval && !info.has_eval)
    throw IoError(dir + " holds no ground-truth images");
  std::vector<NamedTensor> data = read_container(dir + "/dataset.bin");
  EntryMap m(data, dir + "/dataset.bin");

  Tensor<double> shared_phi;
  if (info.kind == "cs-shifted") shared_phi = entry_tensor(m.at("family.phi"));
  ds.noise = GaussianNoise<double>(info.sigma);
  if (info.kind == "cs-shifted") {
    ds.dist = ParamDistribution<double>::cs_shifted(shared_phi, info.patch);
  } else if (info.kind == "cs-fresh") {
    ds.dist = ParamDistribution<double>::cs_fresh(info.m, info.patch);
  } else {
    ds.dist = ParamDistribution<double>::motion_kernels(info.ksize, info.max_walk,
                                                        boundary_from(info.boundary));
  }

  ds.records.reserve(static_cast<std::size_t>(info.records));
  for (std::int64_t k = 0; k < info.records; ++k) {
    MeasurementPair<double> rec;
    rec.y1 = entry_tensor(m.at(rec_key(k, "y1")));
    rec.y2 = entry_tensor(m.at(rec_key(k, "y2")));
    rec.record_seed = u64_from_entry(m.at(rec_key(k, "seed")), m.origin);
    if (!info.blind) {
      rec.theta1 = unpack_op(m, rec_key(k, "t1"), info, shared_phi);
      rec.theta2 = unpack_op(m, rec_key(k, "t2"), info, shared_phi);
    }
    ds.records.push_back(std::move(rec));
  }

  std::uint64_t h = dataset_hash(ds.records);
  if (info.content_hash != 0 && h != info.content_hash)
    throw IoError(dir + ": records do not match the manifest hash");
  ds.info.content_hash = h;

  if (with_eval) {
    std::vector<NamedTensor> ev = read_container(dir + "/eval.bin");
    EntryMap em(ev, dir + "/eval.bin");
    for (std::int64_t k = 0; k < info.records; ++k)
      ds.records[static_cast<std::size_t>(k)].x_eval = entry_tensor(em.at(rec_key(k, "x")));
  }
  return ds;
}

std::vector<std::pair<MeasurementOp<double>, MeasurementOp<double>>> read_sealed_operators(
    const std::string& dir) {
  DatasetInfo info = read_dataset_info(dir);
  if (!info.blind) throw IoError(dir + " is not a blind dataset; operators live in dataset.bin");
  Tensor<double> shared_phi;
  if (info.kind == "cs-shifted") {
    std::vector<NamedTensor> data = read_container(dir + "/dataset.bin");
    EntryMap dm(data, dir + "/dataset.bin");
    shared_phi = entry_tensor(dm.at("family.phi"));
  }
  std::vector<NamedTensor> sealed = read_container(dir + "/operators.bin");
  EntryMap m(sealed, dir + "/operators.bin");
  std::vector<std::pair<MeasurementOp<double>, MeasurementOp<double>>> out;
  out.reserve(static_cast<std::size_t>(info.records));
  for (std::int64_t k = 0; k < info.records; ++k)
    out.emplace_back(unpack_op(m, rec_key(k, "t1"), info, shared_phi),
                     unpack_op(m, rec_key(k, "t2"), info, shared_phi));
  return out;
}

// ---------------- run records ----------------

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,swap,self,proxy_param,proxy_image,val_loss,val_psnr,lr,seconds\n";
  auto cell = [&out](double v) {
    out << ",";
    if (std::isnan(v)) return;
    char b[32];
    std::snprintf(b, sizeof b, "%.12g", v);
    out << b;
  };
  for (const EpochRecord& r : history) {
    out << r.epoch;
    cell(r.train_loss);
    cell(r.swap);
    cell(r.self);
    cell(r.proxy_param);
    cell(r.proxy_image);
    cell(r.val_loss);
    cell(r.val_psnr);
    cell(r.lr);
    cell(r.seconds);
    out << "\n";
  }
  std::string text = out.str();
  std::vector<unsigned char> buf(text.begin(), text.end());
  write_file_atomic(path, buf);
}

#define PAIRMEAS_IO_INSTANTIATE(T)                                                            \
  template std::vector<NamedTensor> pack_model(CsEstimator<T>&);                              \
  template std::vector<NamedTensor> pack_model(DeblurEstimator<T>&);                          \
  template CsEstimator<T> unpack_cs_model(const std::vector<NamedTensor>&);                   \
  template DeblurEstimator<T> unpack_deblur_model(const std::vector<NamedTensor>&);           \
  template void append_carry(std::vector<NamedTensor>&, const TrainCarry<T>&,                 \
                             const std::vector<std::pair<std::string, Tensor<T>*>>&);        \
  template TrainCarry<T> extract_carry(const std::vector<NamedTensor>&,                       \
                                       const std::vector<std::pair<std::string, Tensor<T>*>>&); \
  template void save_model(const std::string&, CsEstimator<T>&);                              \
  template void save_model(const std::string&, DeblurEstimator<T>&);

PAIRMEAS_IO_INSTANTIATE(float)
PAIRMEAS_IO_INSTANTIATE(double)

#undef PAIRMEAS_IO_INSTANTIATE

}  // namespace pairmeas

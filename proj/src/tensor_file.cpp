#include "vspad/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_set>

namespace vspad::io {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written with native little-endian stores");

std::uint64_t shape_numel(std::span<const std::uint64_t> shape) {
  std::uint64_t n = 1;
  for (const auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw FormatError("shape/offset inconsistency: element count overflows");
    }
    n *= d;
  }
  return n;
}

std::uint64_t Tensor::numel() const { return shape_numel(shape); }

const Tensor* TensorFile::find(std::string_view name) const {
  for (const auto& t : entries) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const Tensor& TensorFile::at(std::string_view name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError("missing entry: " + std::string(name));
  return *t;
}

Tensor& TensorFile::add(std::string name, std::vector<std::uint64_t> shape, std::vector<float> data) {
  if (find(name)) throw FormatError("duplicate entry: " + name);
  if (shape_numel(shape) != data.size()) {
    throw FormatError("entry " + name + ": data length does not match shape");
  }
  entries.push_back(Tensor{std::move(name), std::move(shape), std::move(data)});
  return entries.back();
}

Tensor& TensorFile::add(std::string name, const Matrix& m) {
  std::vector<float> data(m.data(), m.data() + m.size());
  return add(std::move(name),
             {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
             std::move(data));
}

Tensor& TensorFile::add(std::string name, const Vector& v) {
  std::vector<float> data(v.data(), v.data() + v.size());
  return add(std::move(name), {static_cast<std::uint64_t>(v.size())}, std::move(data));
}

std::string TensorFile::kind() const {
  if (manifest.is_object() && manifest.contains("kind") && manifest["kind"].is_string()) {
    return manifest["kind"].get<std::string>();
  }
  return {};
}

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

// Every read is bounds-checked against the bytes actually present, so a
// corrupt header can never trigger an allocation larger than the file.
class Source {
 public:
  virtual ~Source() = default;
  virtual void read(void* dst, std::uint64_t n) = 0;
  virtual std::uint64_t remaining() const = 0;

  template <typename T>
  T get() {
    T value;
    read(&value, sizeof(T));
    return value;
  }

  void require(std::uint64_t n) const {
    if (n > remaining()) throw FormatError("truncated file");
  }
};

class MemorySource final : public Source {
 public:
  explicit MemorySource(std::string_view bytes) : bytes_(bytes) {}
  void read(void* dst, std::uint64_t n) override {
    require(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint64_t remaining() const override { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::uint64_t pos_ = 0;
};

class FileSource final : public Source {
 public:
  explicit FileSource(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open " + path.string());
    size_ = std::filesystem::file_size(path);
  }
  void read(void* dst, std::uint64_t n) override {
    require(n);
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw FormatError("truncated file");
    pos_ += n;
  }
  std::uint64_t remaining() const override { return size_ - pos_; }

 private:
  std::ifstream in_;
  std::uint64_t size_ = 0;
  std::uint64_t pos_ = 0;
};

struct EntryHeader {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0;
};

TensorFile decode(Source& src) {
  std::array<char, 8> magic{};
  if (src.remaining() < magic.size()) throw FormatError("bad magic");
  src.read(magic.data(), magic.size());
  if (magic != kMagic) throw FormatError("bad magic");

  const auto version = src.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("version unsupported: " + std::to_string(version));
  }
  const auto count = src.get<std::uint32_t>();

  std::vector<EntryHeader> headers;
  std::unordered_set<std::string> names;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    EntryHeader h;
    const auto name_len = src.get<std::uint16_t>();
    h.name.resize(name_len);
    src.read(h.name.data(), name_len);
    if (!names.insert(h.name).second) throw FormatError("duplicate entry: " + h.name);
    const auto dtype = src.get<std::uint8_t>();
    if (dtype != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(dtype));
    const auto rank = src.get<std::uint8_t>();
    src.require(std::uint64_t{rank} * 8 + 8);
    h.shape.resize(rank);
    for (auto& d : h.shape) d = src.get<std::uint64_t>();
    h.offset = src.get<std::uint64_t>();
    if (h.offset != expected_offset) {
      throw FormatError("shape/offset inconsistency at entry " + h.name);
    }
    const std::uint64_t numel = shape_numel(h.shape);
    if (numel > std::numeric_limits<std::uint64_t>::max() / sizeof(float) - expected_offset) {
      throw FormatError("shape/offset inconsistency at entry " + h.name);
    }
    expected_offset += numel * sizeof(float);
    headers.push_back(std::move(h));
  }

  // Payload plus the manifest length field must be present before any
  // tensor storage is allocated.
  src.require(expected_offset);
  src.require(expected_offset + sizeof(std::uint64_t));

  TensorFile file;
  file.entries.reserve(headers.size());
  for (auto& h : headers) {
    Tensor t;
    t.name = std::move(h.name);
    t.shape = std::move(h.shape);
    t.data.resize(shape_numel(t.shape));
    src.read(t.data.data(), t.data.size() * sizeof(float));
    file.entries.push_back(std::move(t));
  }

  const auto manifest_len = src.get<std::uint64_t>();
  src.require(manifest_len);
  std::string json_text(manifest_len, '\0');
  src.read(json_text.data(), manifest_len);
  if (src.remaining() != 0) throw FormatError("trailing bytes after manifest");
  try {
    file.manifest = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  return file;
}

}  // namespace

std::string serialize(const TensorFile& file) {
  std::unordered_set<std::string_view> names;
  for (const auto& t : file.entries) {
    if (!names.insert(t.name).second) throw FormatError("duplicate entry: " + t.name);
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("entry name too long: " + t.name.substr(0, 32));
    }
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw FormatError("entry rank too large: " + t.name);
    }
    if (t.numel() != t.data.size()) {
      throw FormatError("entry " + t.name + ": data length does not match shape");
    }
  }
  if (file.entries.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError("too many entries");
  }

  std::string out(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.entries.size()));
  std::uint64_t offset = 0;
  for (const auto& t : file.entries) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.append(t.name);
    put<std::uint8_t>(out, kDtypeF32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (const auto d : t.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += t.data.size() * sizeof(float);
  }
  for (const auto& t : file.entries) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  const std::string json_text = file.manifest.dump();
  put<std::uint64_t>(out, json_text.size());
  out.append(json_text);
  return out;
}

TensorFile parse(std::string_view bytes) {
  MemorySource src(bytes);
  return decode(src);
}

void save_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
  const std::string bytes = serialize(file);
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  FileSource src(path);
  return decode(src);
}

Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("entry " + t.name + " is not rank 2");
  Matrix m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

Vector to_vector(const Tensor& t) {
  if (t.rank() != 1) throw ShapeError("entry " + t.name + " is not rank 1");
  Vector v(static_cast<Eigen::Index>(t.shape[0]));
  std::copy(t.data.begin(), t.data.end(), v.data());
  return v;
}

}  // namespace vspad::io

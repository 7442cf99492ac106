#include "lsr/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace lsr::io {

static_assert(std::endian::native == std::endian::little, "LSRT/LSRC writers assume a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path.string() + "' for writing");
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_.string());
  }
  template <class U>
  void pod(U v) {
    bytes(&v, sizeof(U));
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > data_.size()) throw FormatError("truncated file: " + path_.string());
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U pod() {
    U v;
    bytes(&v, sizeof(U));
    return v;
  }
  bool at_end() const { return pos_ == data_.size(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

template <class T>
void write_body(Writer& w, const Tensor<T>& t, DType dtype) {
  w.pod(static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw FormatError("tensor rank too large");
  w.pod(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) w.pod(static_cast<std::uint32_t>(d));
  w.bytes(t.data(), t.size() * sizeof(T));
}

AnyTensor read_body(Reader& r) {
  const auto dtype = r.pod<std::uint8_t>();
  const auto rank = r.pod<std::uint8_t>();
  Shape shape(rank);
  for (auto& d : shape) {
    const auto v = r.pod<std::uint32_t>();
    if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) throw FormatError("dimension too large");
    d = static_cast<int>(v);
  }
  if (dtype == static_cast<std::uint8_t>(DType::Float32)) {
    Tensor<float> t(shape);
    r.bytes(t.data(), t.size() * sizeof(float));
    return t;
  }
  if (dtype == static_cast<std::uint8_t>(DType::Int32)) {
    Tensor<std::int32_t> t(shape);
    r.bytes(t.data(), t.size() * sizeof(std::int32_t));
    return t;
  }
  throw FormatError("unknown dtype code " + std::to_string(dtype) + " in " + r.path().string());
}

void expect_magic(Reader& r, const char* magic) {
  char m[4];
  r.bytes(m, 4);
  if (std::memcmp(m, magic, 4) != 0) {
    throw FormatError("'" + r.path().string() + "' is not an " + std::string(magic, 4) + " file");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kFormatVersion) {
    throw FormatError("unsupported " + std::string(magic, 4) + " version " + std::to_string(version));
  }
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  Writer w(path);
  w.bytes("LSRT", 4);
  w.pod(kFormatVersion);
  write_body(w, t, DType::Float32);
}

void write_tensor(const std::filesystem::path& path, const Tensor<std::int32_t>& t) {
  Writer w(path);
  w.bytes("LSRT", 4);
  w.pod(kFormatVersion);
  write_body(w, t, DType::Int32);
}

AnyTensor read_any_tensor(const std::filesystem::path& path) {
  Reader r(path);
  expect_magic(r, "LSRT");
  AnyTensor t = read_body(r);
  if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
  return t;
}

Tensor<float> read_float_tensor(const std::filesystem::path& path) {
  AnyTensor t = read_any_tensor(path);
  if (auto* f = std::get_if<Tensor<float>>(&t)) return std::move(*f);
  throw FormatError("expected float32 tensor in " + path.string());
}

Tensor<std::int32_t> read_int_tensor(const std::filesystem::path& path) {
  AnyTensor t = read_any_tensor(path);
  if (auto* i = std::get_if<Tensor<std::int32_t>>(&t)) return std::move(*i);
  throw FormatError("expected int32 tensor in " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  Writer w(path);
  w.bytes("LSRC", 4);
  w.pod(kFormatVersion);
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long");
    w.pod(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    if (const auto* f = std::get_if<Tensor<float>>(&tensor)) {
      write_body(w, *f, DType::Float32);
    } else {
      write_body(w, std::get<Tensor<std::int32_t>>(tensor), DType::Int32);
    }
  }
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  expect_magic(r, "LSRC");
  const auto count = r.pod<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint16_t>();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    out.emplace(std::move(name), read_body(r));
  }
  if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
  return out;
}

template <class T>
void put_parameters(NamedTensors& out, const ad::ParameterSet<T>& params, const std::string& prefix) {
  for (const auto& p : params.items()) out[prefix + p.name] = p.value.template cast<float>();
}

template <class T>
ad::ParameterSet<T> take_parameters(const NamedTensors& in, const std::vector<std::string>& names,
                                    const std::string& prefix) {
  ad::ParameterSet<T> out;
  for (const auto& name : names) {
    auto it = in.find(prefix + name);
    if (it == in.end()) throw FormatError("checkpoint is missing tensor '" + prefix + name + "'");
    const auto* f = std::get_if<Tensor<float>>(&it->second);
    if (!f) throw FormatError("tensor '" + prefix + name + "' must be float32");
    out.add(name, f->template cast<T>());
  }
  return out;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(data.data(), data.size());
}

template void put_parameters(NamedTensors&, const ad::ParameterSet<float>&, const std::string&);
template void put_parameters(NamedTensors&, const ad::ParameterSet<double>&, const std::string&);
template ad::ParameterSet<float> take_parameters(const NamedTensors&, const std::vector<std::string>&,
                                                 const std::string&);
template ad::ParameterSet<double> take_parameters(const NamedTensors&, const std::vector<std::string>&,
                                                  const std::string&);

}  // namespace lsr::io

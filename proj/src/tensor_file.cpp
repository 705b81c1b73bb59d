#include "icl/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace icl::io {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'I', 'C', 'L', 'T'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("tensor file truncated at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("tensor '" + name + "' not found");
}

bool TensorFile::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<std::uint8_t> serialize(const TensorFile& file) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    if (t.values.size() != t.element_count()) {
      throw FormatError("tensor '" + t.name + "' has " + std::to_string(t.values.size()) + " values for its dims");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint64_t>(out, d);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    for (double v : t.values) {
      if (t.dtype == Dtype::F32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  const std::string meta = file.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

TensorFile deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.string(4) != std::string(kMagic, 4)) throw FormatError("bad magic: not an ICLT tensor file");
  const auto version = r.get<std::uint32_t>();
  if (version != kTensorFileVersion) throw FormatError("unsupported tensor file version " + std::to_string(version));
  TensorFile file;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.string(r.get<std::uint32_t>());
    const auto ndim = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) t.dims.push_back(r.get<std::uint64_t>());
    const auto code = r.get<std::uint8_t>();
    if (code > 1) throw FormatError("tensor '" + t.name + "' has unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<Dtype>(code);
    t.values.resize(t.element_count());
    for (auto& v : t.values) v = t.dtype == Dtype::F32 ? static_cast<double>(r.get<float>()) : r.get<double>();
    file.tensors.push_back(std::move(t));
  }
  const auto meta_len = r.get<std::uint64_t>();
  file.metadata = nlohmann::json::parse(r.string(meta_len));
  if (!r.at_end()) throw FormatError("trailing bytes after metadata");
  return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  const auto bytes = serialize(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace icl::io

#include "vocadt/tensor_io.hpp"

#include <bit>
#include <cstring>

#include "vocadt/common.hpp"

namespace vocadt::tensor_io {

namespace {

constexpr char kMagic[4] = {'V', 'A', 'D', 'T'};

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out += static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }
  std::size_t limit() const { return bytes_.size(); }
  void set_limit(std::size_t limit) { bytes_ = bytes_.substr(0, limit); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("tensor file is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

bool TensorFile::has(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

const Tensor& TensorFile::get(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("tensor file has no tensor named '" + std::string(name) + "'");
}

Tensor& TensorFile::add(Tensor t) {
  if (has(t.name)) throw ValidationError("duplicate tensor name: " + t.name);
  tensors.push_back(std::move(t));
  return tensors.back();
}

std::string serialize(const TensorFile& file) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  nlohmann::json trailer = file.trailer;
  nlohmann::json dtypes = nlohmann::json::object();
  for (const auto& t : file.tensors) {
    if (t.name.size() > 0xFFFF) throw ValidationError("tensor name too long");
    if (t.dims.size() > 0xFF) throw ValidationError("tensor rank too large");
    const auto n = t.numel();
    if ((t.dtype == DType::kF32 ? t.f32.size() : t.u32.size()) != n) {
      throw ValidationError("tensor '" + t.name + "' data does not match its shape");
    }
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_le<std::uint64_t>(out, d);
    out.reserve(out.size() + 4 * n);
    if (t.dtype == DType::kF32) {
      for (float x : t.f32) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
    } else {
      dtypes[t.name] = "u32";
      for (auto x : t.u32) put_le<std::uint32_t>(out, x);
    }
  }
  if (!dtypes.empty()) {
    trailer["dtypes"] = dtypes;
  } else if (trailer.is_object()) {
    trailer.erase("dtypes");
  }
  const std::string text = trailer.dump();
  out += text;
  put_le<std::uint64_t>(out, text.size());
  return out;
}

TensorFile deserialize(std::string_view bytes) {
  if (bytes.size() < 20) throw FormatError("tensor file is truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic: not a VADT tensor file");

  Reader tail(bytes.substr(bytes.size() - 8));
  const auto trailer_len = tail.get<std::uint64_t>();
  if (trailer_len > bytes.size() - 8 - 12) throw FormatError("tensor file is truncated (trailer length)");
  const std::size_t trailer_begin = bytes.size() - 8 - static_cast<std::size_t>(trailer_len);

  TensorFile file;
  try {
    file.trailer = nlohmann::json::parse(bytes.substr(trailer_begin, static_cast<std::size_t>(trailer_len)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tensor file trailer: ") + e.what());
  }
  const nlohmann::json dtypes = file.trailer.is_object() && file.trailer.contains("dtypes")
                                    ? file.trailer["dtypes"]
                                    : nlohmann::json::object();

  Reader r(bytes);
  r.set_limit(trailer_begin);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported tensor file version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor t;
    const auto name_len = r.get<std::uint16_t>();
    t.name = std::string(r.take(name_len));
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) t.dims.push_back(r.get<std::uint64_t>());
    const auto n = t.numel();
    if (n > (r.limit() - r.pos()) / 4) throw FormatError("tensor file is truncated (data of '" + t.name + "')");
    if (dtypes.contains(t.name)) {
      if (dtypes[t.name] != "u32") throw FormatError("unknown dtype for tensor '" + t.name + "'");
      t.dtype = DType::kU32;
      t.u32.resize(n);
      for (auto& x : t.u32) x = r.get<std::uint32_t>();
    } else {
      t.f32.resize(n);
      for (auto& x : t.f32) x = std::bit_cast<float>(r.get<std::uint32_t>());
    }
    if (file.has(t.name)) throw FormatError("duplicate tensor name: " + t.name);
    file.tensors.push_back(std::move(t));
  }
  if (r.pos() != trailer_begin) throw FormatError("tensor file has trailing bytes before the trailer");
  if (file.trailer.is_object()) file.trailer.erase("dtypes");
  return file;
}

void save(const std::filesystem::path& path, const TensorFile& file) { write_file_atomic(path, serialize(file)); }

TensorFile load(const std::filesystem::path& path) {
  try {
    return deserialize(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vocadt::tensor_io

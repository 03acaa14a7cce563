#include "smagnet/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "smagnet/errors.hpp"

namespace smagnet::io {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

namespace {

constexpr char kContainerMagic[8] = {'S', 'M', 'A', 'G', 'C', 'T', 'R', '1'};
// Header lengths beyond this are treated as corruption.
constexpr std::uint64_t kMaxHeader = 1u << 20;

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("unexpected end of stream");
  return v;
}

void write_header(std::ostream& os, const Shape& shape, const char* dtype) {
  nlohmann::json h;
  h["shape"] = shape;
  h["dtype"] = dtype;
  const std::string text = h.dump();
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace

void write_tensor(std::ostream& os, const Shape& shape, const std::vector<float>& values) {
  write_header(os, shape, "f32");
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(float)));
}

void write_tensor(std::ostream& os, const Shape& shape, const std::vector<std::uint8_t>& values) {
  write_header(os, shape, "u8");
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
}

RawTensor read_tensor(std::istream& is) {
  const std::uint64_t hlen = read_u64(is);
  if (hlen == 0 || hlen > kMaxHeader) throw DataError("corrupt tensor header length " + std::to_string(hlen));
  std::string text(hlen, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(hlen))) throw DataError("truncated tensor header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed tensor header: ") + e.what());
  }
  RawTensor t;
  try {
    t.shape = h.at("shape").get<Shape>();
    const std::string dtype = h.at("dtype").get<std::string>();
    if (dtype == "f32") {
      t.dtype = DType::f32;
    } else if (dtype == "u8") {
      t.dtype = DType::u8;
    } else {
      throw DataError("unknown dtype '" + dtype + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed tensor header: ") + e.what());
  }
  const std::size_t n = numel(t.shape);
  if (t.dtype == DType::f32) {
    t.f32.resize(n);
    if (!is.read(reinterpret_cast<char*>(t.f32.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw DataError("truncated tensor payload for shape " + shape_str(t.shape));
  } else {
    t.u8.resize(n);
    if (!is.read(reinterpret_cast<char*>(t.u8.data()), static_cast<std::streamsize>(n)))
      throw DataError("truncated tensor payload for shape " + shape_str(t.shape));
  }
  return t;
}

namespace {

template <class V>
void write_tensor_file_impl(const std::string& path, const Shape& shape, const V& values) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, shape, values);
  write_text_atomic(path, os.str());
}

}  // namespace

void write_tensor_file(const std::string& path, const Shape& shape, const std::vector<float>& values) {
  write_tensor_file_impl(path, shape, values);
}

void write_tensor_file(const std::string& path, const Shape& shape,
                       const std::vector<std::uint8_t>& values) {
  write_tensor_file_impl(path, shape, values);
}

RawTensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  RawTensor t = read_tensor(is);
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in " + path);
  return t;
}

void Container::put(const std::string& key, const Tensor& t) {
  put(key, t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
}

void Container::put(const std::string& key, const Shape& shape, std::vector<float> values) {
  RawTensor r;
  r.shape = shape;
  r.dtype = DType::f32;
  r.f32 = std::move(values);
  tensors[key] = std::move(r);
}

const RawTensor& Container::get(const std::string& key) const {
  auto it = tensors.find(key);
  if (it == tensors.end()) throw DataError("container has no entry '" + key + "'");
  return it->second;
}

void write_container(const std::string& path, const Container& c) {
  std::ostringstream os(std::ios::binary);
  os.write(kContainerMagic, sizeof kContainerMagic);
  const std::string meta = c.meta.dump();
  write_u64(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_u64(os, c.tensors.size());
  for (const auto& [key, t] : c.tensors) {
    write_u64(os, key.size());
    os.write(key.data(), static_cast<std::streamsize>(key.size()));
    if (t.dtype == DType::f32) {
      write_tensor(os, t.shape, t.f32);
    } else {
      write_tensor(os, t.shape, t.u8);
    }
  }
  write_text_atomic(path, os.str());
}

Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0)
    throw DataError(path + ": not a tensor container");
  Container c;
  try {
    const std::uint64_t mlen = read_u64(is);
    if (mlen > (1u << 26)) throw DataError("corrupt metadata length");
    std::string meta(mlen, '\0');
    if (!is.read(meta.data(), static_cast<std::streamsize>(mlen))) throw DataError("truncated metadata");
    c.meta = nlohmann::json::parse(meta);
    const std::uint64_t count = read_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t klen = read_u64(is);
      if (klen > 4096) throw DataError("corrupt key length");
      std::string key(klen, '\0');
      if (!is.read(key.data(), static_cast<std::streamsize>(klen))) throw DataError("truncated key");
      c.tensors[key] = read_tensor(is);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed metadata: " + e.what());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
  return c;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw DataError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot rename " + tmp + " to " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string file_digest(const std::string& path) {
  const std::string bytes = read_text(path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace smagnet::io

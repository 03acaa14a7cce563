#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smagnet/tensor.hpp"

// On-disk tensor records: a little-endian u64 header length, a JSON header
// {"shape": [...], "dtype": "f32"|"u8"}, then the row-major payload.
namespace smagnet::io {

enum class DType { f32, u8 };

struct RawTensor {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

void write_tensor(std::ostream& os, const Shape& shape, const std::vector<float>& values);
void write_tensor(std::ostream& os, const Shape& shape, const std::vector<std::uint8_t>& values);
RawTensor read_tensor(std::istream& is);

void write_tensor_file(const std::string& path, const Shape& shape, const std::vector<float>& values);
void write_tensor_file(const std::string& path, const Shape& shape,
                       const std::vector<std::uint8_t>& values);
RawTensor read_tensor_file(const std::string& path);

// Keyed tensors plus JSON metadata in one file. Keys are kept sorted so the
// byte stream is a pure function of the contents.
struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, RawTensor> tensors;

  void put(const std::string& key, const Tensor& t);
  void put(const std::string& key, const Shape& shape, std::vector<float> values);
  const RawTensor& get(const std::string& key) const;
  bool contains(const std::string& key) const { return tensors.count(key) != 0; }
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

// Writes to a sibling temporary file and renames over the target.
void write_text_atomic(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace smagnet::io

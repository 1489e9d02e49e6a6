#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "robustbench/tensor.hpp"

namespace robustbench {

/// Shortest round-trip decimal form; locale independent.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("format_number failed");
  return std::string(buf.data(), end);
}

inline std::string format_number(float v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("format_number failed");
  return std::string(buf.data(), end);
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

/// Accumulates RFC 4180 rows in memory.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) : columns_(header.size()) { row(header); }

  template <typename... Cells>
  CsvWriter& add(const Cells&... cells) {
    std::vector<std::string> fields{cell(cells)...};
    return row(fields);
  }

  CsvWriter& row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_) throw std::invalid_argument("csv: row has wrong column count");
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_field(fields[i]);
    }
    out_ << "\r\n";
    ++rows_;
    return *this;
  }

  std::string str() const { return out_.str(); }
  std::size_t data_rows() const { return rows_ - 1; }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_number(v); }
  static std::string cell(float v) { return format_number(v); }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  std::size_t columns_;
  std::size_t rows_ = 0;
  std::ostringstream out_;
};

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Binary PGM (P5) for one channel, binary PPM (P6) for three.
inline std::string encode_pnm(const std::vector<std::uint8_t>& pixels, std::size_t height, std::size_t width,
                              std::size_t channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("pnm: channels must be 1 or 3");
  if (pixels.size() != height * width * channels) throw std::invalid_argument("pnm: pixel count mismatch");
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

/// Linear map of [lo, hi] onto 0..255 with rounding; values outside clamp.
template <typename T>
std::vector<std::uint8_t> to_bytes(const Tensor<T>& image, double lo, double hi) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double u = (static_cast<double>(image[i]) - lo) / (hi - lo);
    out[i] = static_cast<std::uint8_t>(std::clamp(std::floor(u * 255.0 + 0.5), 0.0, 255.0));
  }
  return out;
}

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return os.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

}  // namespace robustbench

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fedopt/error.hpp"
#include "fedopt/numerics.hpp"

namespace fedopt {

// Shortest repeatable decimal form: 17 significant digits round-trips any double.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// JSON text with every floating-point number printed by fmt17; non-finite
// numbers become null.
inline void dump_json17(const nlohmann::json& j, std::string& out) {
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += nlohmann::json(it.key()).dump();
        out += ':';
        dump_json17(it.value(), out);
      }
      out += '}';
      break;
    }
    case nlohmann::json::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i > 0) out += ',';
        dump_json17(j[i], out);
      }
      out += ']';
      break;
    }
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      out += std::isfinite(v) ? fmt17(v) : "null";
      break;
    }
    default:
      out += j.dump();
  }
}

inline std::string dump_json17(const nlohmann::json& j) {
  std::string out;
  dump_json17(j, out);
  return out;
}

// Writes to a sibling temp file and renames it into place, so readers see
// either the complete file or nothing.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Model file: u64 little-endian coordinate count, then little-endian f64 values.
inline std::string encode_model(const ParamVector& x) {
  std::string out;
  out.reserve(8 + 8 * x.size());
  auto put = [&out](std::uint64_t bits) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  };
  put(static_cast<std::uint64_t>(x.size()));
  for (double v : x) put(std::bit_cast<std::uint64_t>(v));
  return out;
}

inline ParamVector decode_model(std::string_view bytes) {
  auto get = [&bytes](std::size_t offset) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= std::uint64_t{static_cast<unsigned char>(bytes[offset + b])} << (8 * b);
    }
    return bits;
  };
  if (bytes.size() < 8) throw FormatError("model file: missing length header");
  const std::uint64_t n = get(0);
  if (bytes.size() != 8 + 8 * n) throw FormatError("model file: length header does not match payload");
  ParamVector x(n);
  for (std::size_t j = 0; j < n; ++j) x[j] = std::bit_cast<double>(get(8 + 8 * j));
  return x;
}

}  // namespace fedopt

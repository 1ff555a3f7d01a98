#pragma once
#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "msam/volume.hpp"

// Bit-exact volume file format.
//
// A volume is stored as two files: a raw payload at `path` and a text header
// sidecar at `path + ".hdr"`. The payload is the grid in canonical
// (C, X, Y, Z) row-major order, little-endian, one of:
//   f32  volumes, 4 bytes per voxel
//   u8   masks, 1 byte per voxel, values restricted to {0, 1}
// The header is `key: value` lines:
//   format: msam-volume-v1
//   dtype: f32 | u8
//   channels: C
//   size_x: X / size_y: Y / size_z: Z
//   spacing: sx sy sz          (f32 volumes only)
//   crc32: <8 hex digits>      (CRC-32 of the payload bytes)

namespace msam {

namespace io_detail {

inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline std::uint32_t get_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t payload_crc(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.empty() ? Z_NULL : bytes.data(), static_cast<uInt>(bytes.size())));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UnwritablePathError("cannot open " + path + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  out.flush();
  if (!out) throw UnwritablePathError("short write to " + path);
}

// Parses `key: value` lines; unknown keys are kept so the format can grow.
inline std::map<std::string, std::string> parse_header(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open header " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string::npos) throw CorruptHeaderError("malformed header line: " + line);
    std::string key = line.substr(0, colon);
    std::string val = line.substr(colon + 1);
    auto ltrim = val.find_first_not_of(" \t");
    val = (ltrim == std::string::npos) ? "" : val.substr(ltrim);
    kv[key] = val;
  }
  return kv;
}

inline const std::string& require(const std::map<std::string, std::string>& kv,
                                  const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CorruptHeaderError("header missing key '" + key + "'");
  return it->second;
}

inline Eigen::Index require_index(const std::map<std::string, std::string>& kv,
                                  const std::string& key) {
  try {
    long long v = std::stoll(require(kv, key));
    if (v < 1) throw CorruptHeaderError("header key '" + key + "' must be >= 1");
    return static_cast<Eigen::Index>(v);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw CorruptHeaderError("header key '" + key + "' is not an integer");
  }
}

inline std::string header_path(const std::string& path) { return path + ".hdr"; }

inline void write_header(const std::string& path, const char* dtype, const Extents& e,
                         const double* spacing, std::uint32_t crc) {
  std::ostringstream os;
  os << "format: msam-volume-v1\n";
  os << "dtype: " << dtype << "\n";
  os << "channels: " << e.c << "\n";
  os << "size_x: " << e.x << "\n";
  os << "size_y: " << e.y << "\n";
  os << "size_z: " << e.z << "\n";
  if (spacing) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "spacing: %.17g %.17g %.17g\n", spacing[0], spacing[1],
                  spacing[2]);
    os << buf;
  }
  char crcbuf[24];
  std::snprintf(crcbuf, sizeof crcbuf, "crc32: %08x\n", crc);
  os << crcbuf;
  const std::string text = os.str();
  write_file(header_path(path), text.data(), text.size());
}

struct ParsedHeader {
  std::string dtype;
  Extents ext;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::uint32_t crc = 0;
};

inline ParsedHeader load_header(const std::string& path) {
  auto kv = parse_header(header_path(path));
  if (require(kv, "format") != "msam-volume-v1")
    throw CorruptHeaderError("unsupported format tag '" + kv["format"] + "'");
  ParsedHeader h;
  h.dtype = require(kv, "dtype");
  h.ext.c = require_index(kv, "channels");
  h.ext.x = require_index(kv, "size_x");
  h.ext.y = require_index(kv, "size_y");
  h.ext.z = require_index(kv, "size_z");
  if (auto it = kv.find("spacing"); it != kv.end()) {
    std::istringstream ss(it->second);
    if (!(ss >> h.spacing[0] >> h.spacing[1] >> h.spacing[2]))
      throw CorruptHeaderError("malformed spacing line");
  }
  const std::string& crc = require(kv, "crc32");
  try {
    h.crc = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
  } catch (const std::exception&) {
    throw CorruptHeaderError("malformed crc32 value '" + crc + "'");
  }
  return h;
}

}  // namespace io_detail

inline void write_volume(const Volume<float>& v, const std::string& path) {
  validate(v);
  std::vector<std::uint8_t> payload;
  payload.reserve(static_cast<std::size_t>(v.data.size()) * 4);
  for (Eigen::Index i = 0; i < v.data.size(); ++i) {
    std::uint32_t bits;
    float f = v.data[i];
    std::memcpy(&bits, &f, 4);
    io_detail::put_le32(payload, bits);
  }
  const std::uint32_t crc = io_detail::payload_crc(payload);
  io_detail::write_file(path, payload.data(), payload.size());
  io_detail::write_header(path, "f32", v.ext, v.spacing.data(), crc);
}

inline Volume<float> read_volume(const std::string& path) {
  auto h = io_detail::load_header(path);
  if (h.dtype != "f32")
    throw CorruptHeaderError("expected dtype f32, header says '" + h.dtype + "'");
  auto payload = io_detail::read_file(path);
  if (static_cast<Eigen::Index>(payload.size()) != h.ext.total() * 4)
    throw CorruptHeaderError("payload size " + std::to_string(payload.size()) +
                             " does not match extents " + h.ext.str());
  if (io_detail::payload_crc(payload) != h.crc)
    throw ChecksumMismatchError("crc32 mismatch for " + path);
  Volume<float> v;
  v.ext = h.ext;
  v.spacing = h.spacing;
  v.data.resize(h.ext.total());
  for (Eigen::Index i = 0; i < v.data.size(); ++i) {
    std::uint32_t bits = io_detail::get_le32(payload.data() + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    v.data[i] = f;
  }
  if (!v.data.isFinite().all())
    throw NonFiniteDataError("volume " + path + " contains NaN or Inf voxels");
  return v;
}

inline void write_mask(const Mask& m, const std::string& path) {
  validate(m);
  io_detail::write_file(path, m.labels.data(), static_cast<std::size_t>(m.labels.size()));
  std::vector<std::uint8_t> payload(m.labels.data(), m.labels.data() + m.labels.size());
  io_detail::write_header(path, "u8", m.ext, nullptr, io_detail::payload_crc(payload));
}

inline Mask read_mask(const std::string& path) {
  auto h = io_detail::load_header(path);
  if (h.dtype != "u8")
    throw CorruptHeaderError("expected dtype u8, header says '" + h.dtype + "'");
  auto payload = io_detail::read_file(path);
  if (static_cast<Eigen::Index>(payload.size()) != h.ext.total())
    throw CorruptHeaderError("payload size does not match extents " + h.ext.str());
  if (io_detail::payload_crc(payload) != h.crc)
    throw ChecksumMismatchError("crc32 mismatch for " + path);
  Mask m;
  m.ext = h.ext;
  m.labels.resize(h.ext.total());
  std::memcpy(m.labels.data(), payload.data(), payload.size());
  if ((m.labels > std::uint8_t{1}).any())
    throw NonFiniteDataError("mask " + path + " has labels outside {0,1}");
  return m;
}

}  // namespace msam

#pragma once

// Minimal reader for ZIP archives holding stored or deflated members, enough
// to read a zipped GTFS feed. No ZIP64, no encryption.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include <zlib.h>

#include "fourstep/error.hpp"

namespace fourstep::zip {

namespace detail {

inline std::uint32_t u16(std::string_view d, std::size_t at) {
  if (at + 2 > d.size()) throw ParseError("zip: truncated archive");
  return std::uint32_t(static_cast<unsigned char>(d[at])) | std::uint32_t(static_cast<unsigned char>(d[at + 1])) << 8;
}
inline std::uint32_t u32(std::string_view d, std::size_t at) { return u16(d, at) | u16(d, at + 2) << 16; }

inline std::string inflate_raw(std::string_view src, std::size_t expected) {
  std::string out(expected, '\0');
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw ParseError("zip: inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(src.data()));
  zs.avail_in = static_cast<uInt>(src.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) throw ParseError("zip: corrupt deflate stream");
  return out;
}

}  // namespace detail

inline bool looks_like_zip(std::string_view data) { return data.size() >= 4 && data.substr(0, 4) == "PK\x03\x04"; }

// Member name -> contents. Directory entries are skipped; names keep any
// leading folder.
inline std::map<std::string, std::string> read_archive(std::string_view data) {
  using detail::u16;
  using detail::u32;
  if (data.size() < 22) throw ParseError("zip: file too small");
  std::size_t eocd = std::string_view::npos;
  const std::size_t stop = data.size() > 65557 ? data.size() - 65557 : 0;
  for (std::size_t p = data.size() - 22 + 1; p-- > stop;)
    if (u32(data, p) == 0x06054b50) {
      eocd = p;
      break;
    }
  if (eocd == std::string_view::npos) throw ParseError("zip: end of central directory not found");
  const std::size_t count = u16(data, eocd + 10);
  std::size_t p = u32(data, eocd + 16);

  std::map<std::string, std::string> out;
  for (std::size_t k = 0; k < count; ++k) {
    if (u32(data, p) != 0x02014b50) throw ParseError("zip: bad central directory entry");
    const auto method = u16(data, p + 10);
    const std::size_t csize = u32(data, p + 20), usize = u32(data, p + 24);
    const std::size_t nlen = u16(data, p + 28), xlen = u16(data, p + 30), clen = u16(data, p + 32);
    const std::size_t local = u32(data, p + 42);
    std::string name(data.substr(p + 46, nlen));
    p += 46 + nlen + xlen + clen;
    if (name.empty() || name.back() == '/') continue;

    if (u32(data, local) != 0x04034b50) throw ParseError("zip: bad local header for " + name);
    const std::size_t start = local + 30 + u16(data, local + 26) + u16(data, local + 28);
    if (start + csize > data.size()) throw ParseError("zip: member " + name + " runs past end of archive");
    const auto body = data.substr(start, csize);
    if (method == 0) out.emplace(name, std::string(body));
    else if (method == 8) out.emplace(name, detail::inflate_raw(body, usize));
    else throw ParseError("zip: unsupported compression method for " + name);
  }
  return out;
}

}  // namespace fourstep::zip

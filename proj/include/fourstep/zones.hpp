#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"

namespace fourstep {

struct Zone {
  std::string id;
  std::string name;
  double lat = 0.0;
  double lon = 0.0;

  bool operator==(const Zone&) const = default;
};

// Ordered zone list; the order is the row/column order of every matrix.
class ZoneRegistry {
 public:
  ZoneRegistry() = default;
  explicit ZoneRegistry(std::vector<Zone> zones) : zones_(std::move(zones)) {
    if (zones_.empty()) throw InvalidArgument("zone registry is empty");
    for (std::size_t i = 0; i < zones_.size(); ++i) {
      const auto& z = zones_[i];
      if (z.id.empty()) throw InvalidArgument("zone registry: empty zone id");
      if (!(z.lat >= -90 && z.lat <= 90 && z.lon >= -180 && z.lon <= 180))
        throw InvalidArgument("zone registry: coordinates out of range for zone '" + z.id + "'");
      if (!index_.emplace(z.id, i).second) throw InvalidArgument("zone registry: duplicate zone id '" + z.id + "'");
    }
  }

  std::size_t size() const { return zones_.size(); }
  const std::vector<Zone>& zones() const { return zones_; }
  const Zone& operator[](std::size_t i) const { return zones_.at(i); }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw NotFound("unknown zone '" + id + "'");
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& z : zones_) out.push_back(z.id);
    return out;
  }

 private:
  std::vector<Zone> zones_;
  std::map<std::string, std::size_t> index_;
};

// Columns: zone_id, lat, lon and optional name.
inline ZoneRegistry load_zones(const std::filesystem::path& path) {
  auto csv = io::read_csv(path);
  const auto cid = csv.column("zone_id"), clat = csv.column("lat"), clon = csv.column("lon");
  const auto cname = csv.find_column("name");
  std::vector<Zone> zones;
  for (std::size_t r = 0; r < csv.size(); ++r) {
    Zone z;
    z.id = std::string(csv.cell(r, cid));
    z.name = cname ? std::string(csv.cell(r, *cname)) : z.id;
    z.lat = csv.number(r, clat);
    z.lon = csv.number(r, clon);
    zones.push_back(std::move(z));
  }
  return ZoneRegistry(std::move(zones));
}

inline std::string zones_to_csv(const ZoneRegistry& reg) {
  io::CsvWriter w({"zone_id", "name", "lat", "lon"});
  for (const auto& z : reg.zones()) w.row({z.id, z.name, io::format_double(z.lat), io::format_double(z.lon)});
  return w.str();
}

// Two-column per-zone values (zone_id, <value_column>), aligned to `order`.
// Zones absent from the file get 0; zones not in `order` are an error.
inline std::vector<double> load_zone_values(const std::filesystem::path& path, const std::vector<std::string>& order,
                                            const std::string& value_column) {
  auto csv = io::read_csv(path);
  const auto cz = csv.column("zone_id"), cv = csv.column(value_column);
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < order.size(); ++i) idx.emplace(order[i], i);
  std::vector<double> out(order.size(), 0.0);
  for (std::size_t r = 0; r < csv.size(); ++r) {
    auto it = idx.find(std::string(csv.cell(r, cz)));
    if (it == idx.end()) throw csv.error_at(r, "unknown zone '" + std::string(csv.cell(r, cz)) + "'");
    const double v = csv.number(r, cv);
    if (!(v >= 0.0) || !std::isfinite(v)) throw csv.error_at(r, value_column + " must be finite and non-negative");
    out[it->second] += v;
  }
  return out;
}

}  // namespace fourstep

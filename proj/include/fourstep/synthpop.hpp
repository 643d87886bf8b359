#pragma once

// Synthetic population: fit a seed contingency table to per-zone marginal
// controls with iterative proportional fitting, integerize the fit, and draw
// person records from a weighted microdata sample.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/rng.hpp"

namespace fourstep::synthpop {

// n-dimensional array of non-negative counts stored row-major (last axis
// fastest).
class ContingencyTable {
 public:
  ContingencyTable() = default;

  ContingencyTable(std::vector<std::string> axis_names, std::vector<std::vector<std::string>> axis_labels,
                   std::vector<double> cells)
      : names_(std::move(axis_names)), labels_(std::move(axis_labels)), cells_(std::move(cells)) {
    if (names_.size() != labels_.size())
      throw InvalidArgument("contingency table: axis name count differs from label list count");
    dims_.reserve(labels_.size());
    std::size_t n = 1;
    for (const auto& l : labels_) {
      if (l.empty()) throw InvalidArgument("contingency table: every dimension needs at least one category");
      dims_.push_back(l.size());
      n *= l.size();
    }
    if (cells_.size() != n)
      throw InvalidArgument("contingency table: cell count " + std::to_string(cells_.size()) +
                            " != product of dimension sizes " + std::to_string(n));
    for (double c : cells_)
      if (!(c >= 0.0)) throw InvalidArgument("contingency table: cells must be non-negative numbers");
    strides_.assign(dims_.size(), 1);
    for (std::size_t d = dims_.size(); d-- > 1;) strides_[d - 1] = strides_[d] * dims_[d];
  }

  // Table with default labels "0".."k-1" per axis.
  static ContingencyTable from_dims(const std::vector<std::size_t>& dims, std::vector<double> cells) {
    std::vector<std::string> names;
    std::vector<std::vector<std::string>> labels;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      names.push_back("d" + std::to_string(d));
      std::vector<std::string> l;
      for (std::size_t k = 0; k < dims[d]; ++k) l.push_back(std::to_string(k));
      labels.push_back(std::move(l));
    }
    return ContingencyTable(std::move(names), std::move(labels), std::move(cells));
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return cells_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  const std::vector<std::string>& axis_names() const { return names_; }
  const std::vector<std::vector<std::string>>& axis_labels() const { return labels_; }
  const std::vector<double>& cells() const { return cells_; }
  double operator[](std::size_t flat) const { return cells_[flat]; }

  std::size_t category_of(std::size_t flat, std::size_t dim) const {
    return (flat / strides_[dim]) % dims_[dim];
  }

  std::size_t flat_index(std::span<const std::size_t> categories) const {
    if (categories.size() != dims_.size()) throw InvalidArgument("flat_index: wrong number of categories");
    std::size_t flat = 0;
    for (std::size_t d = 0; d < dims_.size(); ++d) {
      if (categories[d] >= dims_[d]) throw InvalidArgument("flat_index: category out of range");
      flat += categories[d] * strides_[d];
    }
    return flat;
  }

  std::vector<double> marginal(std::size_t dim) const {
    std::vector<double> m(dims_.at(dim), 0.0);
    for (std::size_t i = 0; i < cells_.size(); ++i) m[category_of(i, dim)] += cells_[i];
    return m;
  }

  double total() const { return std::accumulate(cells_.begin(), cells_.end(), 0.0); }

  // Same shape and labels, new cells.
  ContingencyTable with_cells(std::vector<double> cells) const {
    return ContingencyTable(names_, labels_, std::move(cells));
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<std::string>> labels_;
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> strides_;
  std::vector<double> cells_;
};

// Target marginal vector per dimension.
using MarginalSet = std::vector<std::vector<double>>;

struct IpfOptions {
  double tol = 1e-8;
  int max_iter = 1000;
};

struct IpfResult {
  ContingencyTable table;
  bool converged = false;
  int iterations = 0;
  double max_deviation = 0.0;  // max |marginal - target| over all dimensions
  double step_distance = 0.0;  // Euclidean distance between the last two iterates
};

inline double max_marginal_deviation(const ContingencyTable& t, const MarginalSet& targets) {
  double dev = 0.0;
  for (std::size_t d = 0; d < t.rank(); ++d) {
    auto m = t.marginal(d);
    for (std::size_t k = 0; k < m.size(); ++k) dev = std::max(dev, std::abs(m[k] - targets[d][k]));
  }
  return dev;
}

inline void check_marginals(const ContingencyTable& seed, const MarginalSet& targets) {
  if (targets.size() != seed.rank())
    throw InvalidArgument("ipf: " + std::to_string(targets.size()) + " target vectors for a " +
                          std::to_string(seed.rank()) + "-dimensional table");
  for (std::size_t d = 0; d < targets.size(); ++d) {
    if (targets[d].size() != seed.dims()[d])
      throw InvalidArgument("ipf: target vector for dimension " + std::to_string(d) + " has " +
                            std::to_string(targets[d].size()) + " entries, expected " +
                            std::to_string(seed.dims()[d]));
    for (double u : targets[d])
      if (!(u >= 0.0) || !std::isfinite(u)) throw InvalidArgument("ipf: targets must be finite and non-negative");
  }
  if (targets.empty()) return;
  const double t0 = std::accumulate(targets[0].begin(), targets[0].end(), 0.0);
  for (std::size_t d = 1; d < targets.size(); ++d) {
    const double td = std::accumulate(targets[d].begin(), targets[d].end(), 0.0);
    if (std::abs(td - t0) > 1e-9 * std::max(std::abs(t0), std::abs(td)))
      throw Infeasible("ipf: marginal totals disagree (dimension 0 sums to " + io::format_double(t0) +
                       ", dimension " + std::to_string(d) + " sums to " + io::format_double(td) + ")");
  }
}

// Alternating per-dimension scaling, dimensions swept in ascending order.
// Converges when every marginal is within `tol` of its target; otherwise
// returns the last iterate with converged=false. Zero seed cells stay zero.
inline IpfResult ipf_fit(const ContingencyTable& seed, const MarginalSet& targets, IpfOptions opt = {}) {
  if (!(opt.tol > 0.0)) throw InvalidArgument("ipf: tol must be positive");
  if (opt.max_iter < 1) throw InvalidArgument("ipf: max_iter must be positive");
  check_marginals(seed, targets);
  for (std::size_t d = 0; d < seed.rank(); ++d) {
    auto m = seed.marginal(d);
    for (std::size_t k = 0; k < m.size(); ++k)
      if (targets[d][k] > 0.0 && m[k] <= 0.0)
        throw Infeasible("ipf: positive target for category '" + seed.axis_labels()[d][k] + "' of dimension '" +
                         seed.axis_names()[d] + "' but the seed slice is all zero");
  }

  IpfResult res;
  std::vector<double> cells = seed.cells();
  res.max_deviation = max_marginal_deviation(seed, targets);
  if (res.max_deviation <= opt.tol) {
    res.table = seed;
    res.converged = true;
    return res;
  }

  std::vector<double> prev;
  for (int it = 1; it <= opt.max_iter; ++it) {
    prev = cells;
    for (std::size_t d = 0; d < seed.rank(); ++d) {
      std::vector<double> sums(seed.dims()[d], 0.0);
      for (std::size_t i = 0; i < cells.size(); ++i) sums[seed.category_of(i, d)] += cells[i];
      std::vector<double> factor(sums.size(), 0.0);
      for (std::size_t k = 0; k < sums.size(); ++k)
        factor[k] = sums[k] > 0.0 ? targets[d][k] / sums[k] : 0.0;
      for (std::size_t i = 0; i < cells.size(); ++i) cells[i] *= factor[seed.category_of(i, d)];
    }
    double dist2 = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i) dist2 += (cells[i] - prev[i]) * (cells[i] - prev[i]);
    res.step_distance = std::sqrt(dist2);
    res.iterations = it;
    res.table = seed.with_cells(cells);
    res.max_deviation = max_marginal_deviation(res.table, targets);
    if (res.max_deviation <= opt.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

// Largest-remainder rounding: floor every cell, then hand the units needed to
// reach round(total) to the cells with the largest fractional parts (ties by
// ascending flat index). Values within 1e-9 of an integer snap to it first.
inline ContingencyTable integerize(const ContingencyTable& fitted) {
  const auto& x = fitted.cells();
  std::vector<double> out(x.size());
  std::vector<double> frac(x.size());
  double total = 0.0;
  double floor_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw InvalidArgument("integerize: non-finite cell at index " + std::to_string(i));
    double v = x[i];
    const double r = std::round(v);
    if (std::abs(v - r) <= 1e-9) v = r;
    out[i] = std::floor(v);
    frac[i] = v - out[i];
    total += x[i];
    floor_sum += out[i];
  }
  auto missing = static_cast<long long>(std::llround(total) - std::llround(floor_sum));
  if (missing > 0) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (long long u = 0; u < missing; ++u) out[order[static_cast<std::size_t>(u)]] += 1.0;
  }
  return fitted.with_cells(std::move(out));
}

inline bool is_integral(const ContingencyTable& t) {
  return std::all_of(t.cells().begin(), t.cells().end(), [](double c) { return c >= 0 && c == std::floor(c); });
}

// ---------------------------------------------------------------------------
// Microdata and persons

struct MicrodataRecord {
  std::vector<std::size_t> categories;  // one category index per table axis
  double weight = 1.0;
};

struct MicrodataSample {
  std::vector<std::string> axis_names;
  std::vector<std::vector<std::string>> axis_labels;
  std::vector<MicrodataRecord> records;

  // Weighted cross-tabulation, usable as an IPF seed.
  ContingencyTable cross_tab() const {
    ContingencyTable shape(axis_names, axis_labels,
                           std::vector<double>(product_of_sizes(), 0.0));
    std::vector<double> cells(shape.size(), 0.0);
    for (const auto& r : records) cells[shape.flat_index(r.categories)] += r.weight;
    return shape.with_cells(std::move(cells));
  }

 private:
  std::size_t product_of_sizes() const {
    std::size_t n = 1;
    for (const auto& l : axis_labels) n *= l.size();
    return n;
  }
};

// The five person features in their canonical order. Tables, feature
// vectors and request profiles all use this order.
inline const std::array<std::string, 5>& person_feature_names() {
  static const std::array<std::string, 5> names = {"household_car_share", "individual_senior",
                                                   "household_income_high", "individual_employed",
                                                   "individual_college"};
  return names;
}

struct SyntheticPerson {
  std::string zone_id;
  bool household_car_share = false;
  bool individual_senior = false;
  bool household_income_high = false;
  bool individual_employed = false;
  bool individual_college = false;
  std::size_t record = 0;  // index of the microdata record this person was drawn from

  std::vector<double> features() const {
    return {double(household_car_share), double(individual_senior), double(household_income_high),
            double(individual_employed), double(individual_college)};
  }

  bool operator==(const SyntheticPerson&) const = default;
};

namespace detail {

// For each canonical feature, the axis that holds it.
inline std::array<std::size_t, 5> feature_axes(const ContingencyTable& t) {
  std::array<std::size_t, 5> axes{};
  const auto& names = person_feature_names();
  for (std::size_t f = 0; f < names.size(); ++f) {
    auto it = std::find(t.axis_names().begin(), t.axis_names().end(), names[f]);
    if (it == t.axis_names().end())
      throw InvalidArgument("sample_population: table has no axis '" + names[f] + "'");
    axes[f] = static_cast<std::size_t>(it - t.axis_names().begin());
    const auto& labels = t.axis_labels()[axes[f]];
    if (labels.size() != 2 || labels[0] != "0" || labels[1] != "1")
      throw InvalidArgument("sample_population: axis '" + names[f] + "' must be binary with categories 0,1");
  }
  return axes;
}

}  // namespace detail

// Draws counts[cell] records per cell from the microdata records in that
// cell, with probability proportional to record weight. Persons are emitted
// in ascending cell order.
inline std::vector<SyntheticPerson> sample_population(const ContingencyTable& counts, const MicrodataSample& microdata,
                                                      const std::string& zone_id, std::uint64_t rng_seed) {
  if (!is_integral(counts)) throw InvalidArgument("sample_population: counts must be non-negative integers");
  if (microdata.records.empty()) throw InvalidArgument("sample_population: microdata is empty");
  if (microdata.axis_names != counts.axis_names() || microdata.axis_labels != counts.axis_labels())
    throw InvalidArgument("sample_population: microdata axes do not match the count table");
  const auto axes = detail::feature_axes(counts);

  std::vector<std::vector<std::size_t>> by_cell(counts.size());
  for (std::size_t r = 0; r < microdata.records.size(); ++r) {
    const auto& rec = microdata.records[r];
    if (rec.weight > 0.0) by_cell[counts.flat_index(rec.categories)].push_back(r);
  }

  Rng rng(rng_seed);
  std::vector<SyntheticPerson> persons;
  persons.reserve(static_cast<std::size_t>(counts.total()));
  for (std::size_t cell = 0; cell < counts.size(); ++cell) {
    const auto n = static_cast<long long>(counts[cell]);
    if (n == 0) continue;
    const auto& candidates = by_cell[cell];
    if (candidates.empty())
      throw Infeasible("sample_population: cell " + std::to_string(cell) + " of zone '" + zone_id + "' has count " +
                       std::to_string(n) + " but no microdata record with positive weight");
    std::vector<double> cum(candidates.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) cum[i] = acc += microdata.records[candidates[i]].weight;

    SyntheticPerson proto;
    proto.zone_id = zone_id;
    proto.household_car_share = counts.category_of(cell, axes[0]) == 1;
    proto.individual_senior = counts.category_of(cell, axes[1]) == 1;
    proto.household_income_high = counts.category_of(cell, axes[2]) == 1;
    proto.individual_employed = counts.category_of(cell, axes[3]) == 1;
    proto.individual_college = counts.category_of(cell, axes[4]) == 1;
    for (long long k = 0; k < n; ++k) {
      proto.record = candidates.size() == 1 ? candidates[0] : candidates[draw_weighted(rng, cum)];
      persons.push_back(proto);
    }
  }
  return persons;
}

// Re-aggregates persons into the cells of `shape`.
inline ContingencyTable tabulate(const std::vector<SyntheticPerson>& persons, const ContingencyTable& shape) {
  const auto axes = detail::feature_axes(shape);
  std::vector<double> cells(shape.size(), 0.0);
  std::vector<std::size_t> cat(shape.rank(), 0);
  for (const auto& p : persons) {
    auto f = p.features();
    for (std::size_t i = 0; i < 5; ++i) cat[axes[i]] = f[i] > 0.5 ? 1 : 0;
    cells[shape.flat_index(cat)] += 1.0;
  }
  return shape.with_cells(std::move(cells));
}

// ---------------------------------------------------------------------------
// Files

// Per-zone marginal controls: dimension -> category label -> target.
struct ZoneMarginals {
  std::string zone_id;
  std::map<std::string, std::map<std::string, double>> targets;
};

// Columns: zone_id, dimension, category, target_count. Zones keep file order.
inline std::vector<ZoneMarginals> load_marginals(const std::filesystem::path& path) {
  auto csv = io::read_csv(path);
  const auto cz = csv.column("zone_id"), cd = csv.column("dimension"), cc = csv.column("category"),
             ct = csv.column("target_count");
  std::vector<ZoneMarginals> zones;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < csv.size(); ++r) {
    std::string zone(csv.cell(r, cz));
    auto [it, inserted] = index.emplace(zone, zones.size());
    if (inserted) zones.push_back({zone, {}});
    const double v = csv.number(r, ct);
    if (v < 0 || !std::isfinite(v)) throw csv.error_at(r, "target_count must be finite and non-negative");
    auto& slot = zones[it->second].targets[std::string(csv.cell(r, cd))][std::string(csv.cell(r, cc))];
    slot += v;
  }
  return zones;
}

inline MarginalSet to_marginal_set(const ZoneMarginals& zm, const ContingencyTable& shape) {
  MarginalSet out;
  for (std::size_t d = 0; d < shape.rank(); ++d) {
    auto dit = zm.targets.find(shape.axis_names()[d]);
    if (dit == zm.targets.end())
      throw InvalidArgument("zone '" + zm.zone_id + "' has no marginal for dimension '" + shape.axis_names()[d] + "'");
    std::vector<double> u(shape.dims()[d], 0.0);
    for (const auto& [label, value] : dit->second) {
      const auto& labels = shape.axis_labels()[d];
      auto lit = std::find(labels.begin(), labels.end(), label);
      if (lit == labels.end()) {
        if (value > 0.0)
          throw InvalidArgument("zone '" + zm.zone_id + "': unknown category '" + label + "' for dimension '" +
                                shape.axis_names()[d] + "'");
        continue;
      }
      u[static_cast<std::size_t>(lit - labels.begin())] = value;
    }
    out.push_back(std::move(u));
  }
  for (const auto& [dim, _] : zm.targets)
    if (std::find(shape.axis_names().begin(), shape.axis_names().end(), dim) == shape.axis_names().end())
      throw InvalidArgument("zone '" + zm.zone_id + "': marginal for unknown dimension '" + dim + "'");
  return out;
}

// Every column other than `weight` (and an optional `record_id`) is an
// attribute. Category labels per attribute are the distinct values, sorted
// numerically when all are integers; binary features give "0","1".
inline MicrodataSample load_microdata(const std::filesystem::path& path) {
  auto csv = io::read_csv(path);
  const auto cw = csv.column("weight");
  MicrodataSample s;
  std::vector<std::size_t> attr_cols;
  for (std::size_t c = 0; c < csv.header().size(); ++c) {
    if (c == cw || csv.header()[c] == "record_id") continue;
    attr_cols.push_back(c);
    s.axis_names.push_back(csv.header()[c]);
  }
  if (attr_cols.empty()) throw ParseError(path.string() + ": no attribute columns");
  for (std::size_t a = 0; a < attr_cols.size(); ++a) {
    std::vector<std::string> values;
    for (std::size_t r = 0; r < csv.size(); ++r) values.emplace_back(csv.cell(r, attr_cols[a]));
    const bool numeric = std::all_of(values.begin(), values.end(), [](const std::string& v) {
      return io::try_parse_int(v).has_value();
    });
    std::sort(values.begin(), values.end(), [numeric](const std::string& x, const std::string& y) {
      return numeric ? *io::try_parse_int(x) < *io::try_parse_int(y) : x < y;
    });
    values.erase(std::unique(values.begin(), values.end()), values.end());
    // Binary person features always carry both categories.
    if (numeric && std::all_of(values.begin(), values.end(), [](const std::string& v) { return v == "0" || v == "1"; }))
      values = {"0", "1"};
    s.axis_labels.push_back(std::move(values));
  }
  for (std::size_t r = 0; r < csv.size(); ++r) {
    MicrodataRecord rec;
    for (std::size_t a = 0; a < attr_cols.size(); ++a) {
      const auto& labels = s.axis_labels[a];
      rec.categories.push_back(static_cast<std::size_t>(
          std::find(labels.begin(), labels.end(), std::string(csv.cell(r, attr_cols[a]))) - labels.begin()));
    }
    rec.weight = csv.number(r, cw);
    if (!(rec.weight >= 0.0) || !std::isfinite(rec.weight)) throw csv.error_at(r, "weight must be finite and >= 0");
    s.records.push_back(std::move(rec));
  }
  if (s.records.empty()) throw ParseError(path.string() + ": no microdata records");
  return s;
}

inline std::vector<std::string> person_csv_header() {
  std::vector<std::string> h = {"zone_id", "person", "record"};
  for (const auto& n : person_feature_names()) h.push_back(n);
  return h;
}

inline std::string persons_to_csv(const std::vector<SyntheticPerson>& persons) {
  io::CsvWriter w(person_csv_header());
  std::map<std::string, std::size_t> seq;
  for (const auto& p : persons) {
    std::vector<std::string> row = {p.zone_id, std::to_string(seq[p.zone_id]++), std::to_string(p.record)};
    for (double f : p.features()) row.push_back(f > 0.5 ? "1" : "0");
    w.row(row);
  }
  return w.str();
}

inline std::vector<SyntheticPerson> load_persons(const std::filesystem::path& path) {
  auto csv = io::read_csv(path);
  std::vector<SyntheticPerson> out;
  const auto& names = person_feature_names();
  std::array<std::size_t, 5> cols{};
  for (std::size_t i = 0; i < 5; ++i) cols[i] = csv.column(names[i]);
  for (std::size_t r = 0; r < csv.size(); ++r) {
    SyntheticPerson p;
    p.zone_id = std::string(csv.cell(r, "zone_id"));
    p.record = static_cast<std::size_t>(csv.integer(r, "record"));
    bool* fields[5] = {&p.household_car_share, &p.individual_senior, &p.household_income_high,
                       &p.individual_employed, &p.individual_college};
    for (std::size_t i = 0; i < 5; ++i) *fields[i] = csv.integer(r, cols[i]) != 0;
    out.push_back(std::move(p));
  }
  return out;
}

struct ZonePopulation {
  std::string zone_id;
  IpfResult fit;
  ContingencyTable counts;
  std::vector<SyntheticPerson> persons;
};

// The full per-zone chain: seed = weighted microdata cross-tab, fit to the
// zone's marginals, integerize, sample. Zone i uses stream derive_seed(seed, i).
inline std::vector<ZonePopulation> synthesize(const std::vector<ZoneMarginals>& zones, const MicrodataSample& microdata,
                                              IpfOptions opt, std::uint64_t seed) {
  const auto seed_table = microdata.cross_tab();
  std::vector<ZonePopulation> out;
  for (std::size_t z = 0; z < zones.size(); ++z) {
    ZonePopulation zp;
    zp.zone_id = zones[z].zone_id;
    try {
      zp.fit = ipf_fit(seed_table, to_marginal_set(zones[z], seed_table), opt);
    } catch (const Error& e) {
      throw Error("zone '" + zp.zone_id + "': " + e.what());
    }
    if (!zp.fit.converged)
      throw Error("zone '" + zp.zone_id + "': ipf did not converge after " + std::to_string(zp.fit.iterations) +
                  " iterations (max deviation " + io::format_double(zp.fit.max_deviation) + ")");
    zp.counts = integerize(zp.fit.table);
    zp.persons = sample_population(zp.counts, microdata, zp.zone_id, derive_seed(seed, z));
    out.push_back(std::move(zp));
  }
  return out;
}

}  // namespace fourstep::synthpop

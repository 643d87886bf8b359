#pragma once

// Trip distribution with the doubly-constrained gravity model
//   T_ij = A_i B_j O_i D_j f(c_ij)
// solved by alternating (Furness) balancing, plus deterrence calibration
// against a target trip-weighted mean cost.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"

namespace fourstep::distribution {

inline constexpr double kUnreachable = std::numeric_limits<double>::infinity();
inline constexpr double kDefaultIntrazonalFloor = 60.0;

struct ProductionAttraction {
  std::vector<double> productions;  // O_i
  std::vector<double> attractions;  // D_j

  std::size_t size() const { return productions.size(); }
};

// Rescales attractions so they sum to total productions.
inline ProductionAttraction balance(ProductionAttraction pa) {
  if (pa.productions.size() != pa.attractions.size())
    throw InvalidArgument("productions and attractions cover different zone counts");
  for (double v : pa.productions)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("productions must be finite and non-negative");
  for (double v : pa.attractions)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("attractions must be finite and non-negative");
  const double so = std::accumulate(pa.productions.begin(), pa.productions.end(), 0.0);
  const double sd = std::accumulate(pa.attractions.begin(), pa.attractions.end(), 0.0);
  if (so == 0.0) {
    std::fill(pa.attractions.begin(), pa.attractions.end(), 0.0);
    return pa;
  }
  if (sd == 0.0) throw Infeasible("positive productions but zero total attractions");
  for (double& d : pa.attractions) d *= so / sd;
  return pa;
}

inline bool is_balanced(const ProductionAttraction& pa, double rel_tol = 1e-9) {
  const double so = std::accumulate(pa.productions.begin(), pa.productions.end(), 0.0);
  const double sd = std::accumulate(pa.attractions.begin(), pa.attractions.end(), 0.0);
  return std::abs(so - sd) <= rel_tol * std::max({std::abs(so), std::abs(sd), 1e-300});
}

// Square zone x zone generalized cost in seconds; kUnreachable marks pairs
// with no path.
class CostMatrix {
 public:
  CostMatrix() = default;
  explicit CostMatrix(std::size_t n, double fill = 0.0) : n_(n), c_(n * n, fill) {}
  CostMatrix(std::size_t n, std::vector<double> values) : n_(n), c_(std::move(values)) {
    if (c_.size() != n * n) throw InvalidArgument("cost matrix must be square");
    for (double v : c_)
      if (!(v >= 0.0)) throw InvalidArgument("cost matrix entries must be non-negative");
  }

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return c_[i * n_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return c_[i * n_ + j]; }
  bool reachable(std::size_t i, std::size_t j) const { return std::isfinite(c_[i * n_ + j]); }
  const std::vector<double>& values() const { return c_; }

  CostMatrix scaled(double k) const {
    CostMatrix out = *this;
    for (double& v : out.c_) v *= k;
    return out;
  }

 private:
  std::size_t n_ = 0;
  std::vector<double> c_;
};

class Deterrence {
 public:
  enum class Form { exponential, power };

  static Deterrence exponential(double beta) { return Deterrence(Form::exponential, beta, kDefaultIntrazonalFloor); }
  static Deterrence power(double gamma, double min_cost = kDefaultIntrazonalFloor) {
    return Deterrence(Form::power, gamma, min_cost);
  }

  Deterrence(Form form, double parameter, double min_cost) : form_(form), param_(parameter), min_cost_(min_cost) {
    if (!(parameter >= 0.0) || !std::isfinite(parameter))
      throw InvalidArgument("deterrence parameter must be finite and non-negative");
    if (form == Form::power && !(min_cost > 0.0))
      throw InvalidArgument("power deterrence needs a positive minimum cost");
  }

  // Parses "exp:<beta>" or "pow:<gamma>".
  static Deterrence parse(std::string_view spec, double min_cost = kDefaultIntrazonalFloor) {
    const auto colon = spec.find(':');
    if (colon == std::string_view::npos) throw InvalidArgument("deterrence must look like exp:<beta> or pow:<gamma>");
    const auto head = spec.substr(0, colon);
    const auto value = io::try_parse_double(spec.substr(colon + 1));
    if (!value) throw InvalidArgument("deterrence parameter is not a number: '" + std::string(spec) + "'");
    if (head == "exp") return Deterrence(Form::exponential, *value, min_cost);
    if (head == "pow") return Deterrence(Form::power, *value, min_cost);
    throw InvalidArgument("unknown deterrence form '" + std::string(head) + "'");
  }

  Form form() const { return form_; }
  double parameter() const { return param_; }
  double min_cost() const { return min_cost_; }

  Deterrence with_parameter(double p) const { return Deterrence(form_, p, min_cost_); }

  // 0 for unreachable pairs.
  double operator()(double cost) const {
    if (!std::isfinite(cost)) return 0.0;
    if (form_ == Form::exponential) return std::exp(-param_ * cost);
    return std::pow(std::max(cost, min_cost_), -param_);
  }

  std::string to_string() const {
    return (form_ == Form::exponential ? "exp:" : "pow:") + io::format_double(param_);
  }

 private:
  Form form_;
  double param_;
  double min_cost_;
};

struct ODMatrix {
  std::size_t n = 0;
  std::vector<double> trips;  // row-major T_ij
  std::vector<double> a;      // balancing factors A_i (0 where O_i = 0)
  std::vector<double> b;      // balancing factors B_j (0 where D_j = 0)
  bool converged = false;
  int iterations = 0;
  double max_deviation = 0.0;

  double operator()(std::size_t i, std::size_t j) const { return trips[i * n + j]; }

  std::vector<double> row_sums() const {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s[i] += trips[i * n + j];
    return s;
  }
  std::vector<double> col_sums() const {
    std::vector<double> s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s[j] += trips[i * n + j];
    return s;
  }
  double total() const { return std::accumulate(trips.begin(), trips.end(), 0.0); }
};

struct FurnessOptions {
  double tol = 1e-8;
  int max_iter = 5000;
};

inline double marginal_deviation(const ODMatrix& od, const ProductionAttraction& pa) {
  double dev = 0.0;
  const auto rs = od.row_sums(), cs = od.col_sums();
  for (std::size_t i = 0; i < od.n; ++i) {
    dev = std::max(dev, std::abs(rs[i] - pa.productions[i]));
    dev = std::max(dev, std::abs(cs[i] - pa.attractions[i]));
  }
  return dev;
}

// Alternating updates A_i = 1 / sum_j B_j D_j f_ij, B_j = 1 / sum_i A_i O_i f_ij
// until both marginal families are within tol. Reported factors are
// normalized so that sum_i A_i O_i = sum_i O_i.
inline ODMatrix furness_balance(const ProductionAttraction& pa, const CostMatrix& cost, const Deterrence& det,
                                FurnessOptions opt = {}) {
  const std::size_t n = pa.size();
  if (pa.attractions.size() != n) throw InvalidArgument("furness: productions/attractions size mismatch");
  if (cost.size() != n)
    throw InvalidArgument("furness: cost matrix is " + std::to_string(cost.size()) + "x" + std::to_string(cost.size()) +
                          " but there are " + std::to_string(n) + " zones");
  if (!is_balanced(pa)) throw InvalidArgument("furness: productions and attractions are not balanced");
  if (!(opt.tol > 0.0) || opt.max_iter < 1) throw InvalidArgument("furness: invalid tolerance or iteration limit");
  const auto& O = pa.productions;
  const auto& D = pa.attractions;

  std::vector<double> f(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) f[i * n + j] = det(cost(i, j));

  for (std::size_t i = 0; i < n; ++i) {
    if (O[i] <= 0.0) continue;
    bool any = false;
    for (std::size_t j = 0; j < n && !any; ++j) any = D[j] > 0.0 && f[i * n + j] > 0.0;
    if (!any) throw Infeasible("furness: zone index " + std::to_string(i) +
                               " has positive production but no reachable destination with positive attraction");
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (D[j] <= 0.0) continue;
    bool any = false;
    for (std::size_t i = 0; i < n && !any; ++i) any = O[i] > 0.0 && f[i * n + j] > 0.0;
    if (!any) throw Infeasible("furness: zone index " + std::to_string(j) +
                               " has positive attraction but no origin with positive production reaches it");
  }

  ODMatrix od;
  od.n = n;
  od.trips.assign(n * n, 0.0);
  od.a.assign(n, 0.0);
  od.b.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) od.b[j] = D[j] > 0.0 ? 1.0 : 0.0;

  auto fill = [&] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) od.trips[i * n + j] = od.a[i] * od.b[j] * O[i] * D[j] * f[i * n + j];
  };

  for (int it = 1; it <= opt.max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      if (O[i] <= 0.0) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += od.b[j] * D[j] * f[i * n + j];
      od.a[i] = 1.0 / s;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (D[j] <= 0.0) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += od.a[i] * O[i] * f[i * n + j];
      od.b[j] = 1.0 / s;
    }
    fill();
    od.iterations = it;
    od.max_deviation = marginal_deviation(od, pa);
    if (!std::isfinite(od.max_deviation)) throw Infeasible("furness: balancing factors overflowed");
    if (od.max_deviation <= opt.tol) {
      od.converged = true;
      break;
    }
  }

  double weighted = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    weighted += od.a[i] * O[i];
    total += O[i];
  }
  if (weighted > 0.0) {
    const double k = total / weighted;
    for (double& v : od.a) v *= k;
    for (double& v : od.b) v /= k;
  }
  return od;
}

// S = -sum T ln T with 0 ln 0 = 0.
inline double entropy_of(const std::vector<double>& trips) {
  double s = 0.0;
  for (double t : trips) {
    if (t < 0.0 || std::isnan(t)) throw InvalidArgument("entropy: negative cell");
    if (t > 0.0) s -= t * std::log(t);
  }
  return s;
}
inline double entropy_of(const ODMatrix& od) { return entropy_of(od.trips); }

// Trip-weighted mean cost over cells carrying trips.
inline double mean_cost(const ODMatrix& od, const CostMatrix& cost) {
  double tc = 0.0, t = 0.0;
  for (std::size_t i = 0; i < od.n; ++i)
    for (std::size_t j = 0; j < od.n; ++j) {
      const double v = od(i, j);
      if (v <= 0.0) continue;
      tc += v * cost(i, j);
      t += v;
    }
  return t > 0.0 ? tc / t : 0.0;
}

struct CalibrationOptions {
  double tol = 1e-6;            // on mean cost
  double furness_tol = 1e-12;
  int furness_max_iter = 100000;
  int max_expansions = 80;
};

struct Calibration {
  Deterrence deterrence;
  double achieved_mean_cost = 0.0;
  int evaluations = 0;
};

// Bisection over the deterrence parameter on [0, hi]; mean cost is
// non-increasing in the parameter. Returns 0 when the parameter-free
// (f == 1) matrix already hits the target. Targets above the f == 1 mean
// cost would need a negative parameter and are rejected.
inline Calibration calibrate_deterrence(const ProductionAttraction& pa, const CostMatrix& cost, Deterrence::Form form,
                                        double target_mean_cost, CalibrationOptions opt = {},
                                        double min_cost = kDefaultIntrazonalFloor) {
  if (!std::isfinite(target_mean_cost) || target_mean_cost < 0.0)
    throw InvalidArgument("calibrate: target mean cost must be finite and non-negative");
  const Deterrence proto(form, 0.0, min_cost);
  const FurnessOptions fo{opt.furness_tol, opt.furness_max_iter};
  int evals = 0;
  auto eval = [&](double p) {
    ++evals;
    const auto od = furness_balance(pa, cost, proto.with_parameter(p), fo);
    return mean_cost(od, cost);
  };

  const double at_zero = eval(0.0);
  if (std::abs(at_zero - target_mean_cost) <= opt.tol) return {proto.with_parameter(0.0), at_zero, evals};
  if (target_mean_cost > at_zero)
    throw InvalidArgument("calibrate: target mean cost " + io::format_double(target_mean_cost) +
                          " exceeds the maximum achievable " + io::format_double(at_zero));

  double scale = 0.0;
  std::size_t finite = 0;
  for (double c : cost.values())
    if (std::isfinite(c) && c > 0.0) {
      scale += c;
      ++finite;
    }
  double lo = 0.0;
  double hi = form == Deterrence::Form::exponential && finite ? 1.0 / (scale / static_cast<double>(finite)) : 1.0;
  double m_hi = 0.0;
  for (int k = 0;; ++k) {
    if (k >= opt.max_expansions)
      throw Infeasible("calibrate: target mean cost " + io::format_double(target_mean_cost) +
                       " is below the achievable range (bound expansion failed)");
    try {
      m_hi = eval(hi);
    } catch (const Infeasible&) {
      throw Infeasible("calibrate: balancing failed at parameter " + io::format_double(hi) +
                       " before the target was bracketed");
    }
    if (m_hi <= target_mean_cost) break;
    lo = hi;
    hi *= 2.0;
  }

  double mid = hi, m_mid = m_hi;
  for (int k = 0; k < 200; ++k) {
    mid = 0.5 * (lo + hi);
    m_mid = eval(mid);
    if (m_mid > target_mean_cost) lo = mid;
    else hi = mid;
    if (hi - lo <= 1e-15 * std::max(1.0, hi)) break;
  }
  if (std::abs(m_mid - target_mean_cost) > opt.tol)
    throw Infeasible("calibrate: bisection ended with mean cost " + io::format_double(m_mid) + ", target " +
                     io::format_double(target_mean_cost));
  return {proto.with_parameter(mid), m_mid, evals};
}

// ---------------------------------------------------------------------------
// Files

// Skim rows: origin_zone, destination_zone, seconds ("UNREACHABLE" for no path).
inline std::string skim_to_csv(const CostMatrix& c, const std::vector<std::string>& zones) {
  io::CsvWriter w({"origin_zone", "destination_zone", "seconds"});
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j)
      w.row({zones[i], zones[j], c.reachable(i, j) ? io::format_double(c(i, j)) : "UNREACHABLE"});
  return w.str();
}

inline CostMatrix load_skim(const std::filesystem::path& path, const std::vector<std::string>& zones) {
  auto csv = io::read_csv(path);
  const auto co = csv.column("origin_zone"), cd = csv.column("destination_zone"), cs = csv.column("seconds");
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < zones.size(); ++i) idx.emplace(zones[i], i);
  CostMatrix c(zones.size(), kUnreachable);
  std::vector<char> seen(zones.size() * zones.size(), 0);
  for (std::size_t r = 0; r < csv.size(); ++r) {
    auto oi = idx.find(std::string(csv.cell(r, co)));
    auto di = idx.find(std::string(csv.cell(r, cd)));
    if (oi == idx.end() || di == idx.end()) throw csv.error_at(r, "unknown zone");
    const auto s = csv.cell(r, cs);
    double v = kUnreachable;
    if (s != "UNREACHABLE") {
      v = csv.number(r, cs);
      if (!(v >= 0.0) || !std::isfinite(v)) throw csv.error_at(r, "seconds must be finite and non-negative");
    }
    c(oi->second, di->second) = v;
    seen[oi->second * zones.size() + di->second] = 1;
  }
  for (std::size_t k = 0; k < seen.size(); ++k)
    if (!seen[k])
      throw ParseError(path.string() + ": missing pair " + zones[k / zones.size()] + " -> " + zones[k % zones.size()]);
  return c;
}

// Long form with only positive cells: origin_zone, destination_zone, trips.
inline std::string od_to_csv(const ODMatrix& od, const std::vector<std::string>& zones) {
  io::CsvWriter w({"origin_zone", "destination_zone", "trips"});
  for (std::size_t i = 0; i < od.n; ++i)
    for (std::size_t j = 0; j < od.n; ++j)
      if (od(i, j) > 0.0) w.row({zones[i], zones[j], io::format_double(od(i, j))});
  return w.str();
}

// Dense whitespace-separated matrix with a header line of zone ids.
inline std::string od_to_dense_text(const ODMatrix& od, const std::vector<std::string>& zones) {
  std::string out = "zone";
  for (const auto& z : zones) out += " " + z;
  out += "\n";
  for (std::size_t i = 0; i < od.n; ++i) {
    out += zones[i];
    for (std::size_t j = 0; j < od.n; ++j) out += " " + io::format_double(od(i, j));
    out += "\n";
  }
  return out;
}

inline ODMatrix load_od(const std::filesystem::path& path, const std::vector<std::string>& zones) {
  auto csv = io::read_csv(path);
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < zones.size(); ++i) idx.emplace(zones[i], i);
  ODMatrix od;
  od.n = zones.size();
  od.trips.assign(od.n * od.n, 0.0);
  for (std::size_t r = 0; r < csv.size(); ++r) {
    auto oi = idx.find(std::string(csv.cell(r, "origin_zone")));
    auto di = idx.find(std::string(csv.cell(r, "destination_zone")));
    if (oi == idx.end() || di == idx.end()) throw csv.error_at(r, "unknown zone");
    const double v = csv.number(r, "trips");
    if (!(v >= 0.0)) throw csv.error_at(r, "trips must be non-negative");
    od.trips[oi->second * od.n + di->second] += v;
  }
  od.converged = true;
  return od;
}

}  // namespace fourstep::distribution

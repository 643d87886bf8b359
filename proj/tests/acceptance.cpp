// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Standalone on purpose (no test framework) so it can be run by hand.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>

#include <unistd.h>

#include "fourstep/service.hpp"
#include "fourstep/toy_city.hpp"

using namespace fourstep;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = FOURSTEP_SOURCE_DIR;
const fs::path kToy = kSource / "data" / "toy_city";

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  // Records a failed condition but keeps going, so the detail shows the worst case.
  void require(bool ok, const std::string& why) {
    if (!ok && pass) detail << why << "; ";
    pass = pass && ok;
  }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << "exception: " << e.what();
  }
  failures += !o.pass;
  std::printf("%s  %s  %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str());
  std::fflush(stdout);
}

struct Scratch {
  fs::path path = fs::temp_directory_path() / ("fourstep_acceptance_" + std::to_string(::getpid()));
  Scratch() { fs::create_directories(path); }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().filename().string()] = io::read_file(e.path());
  return out;
}

// ---------------------------------------------------------------------------
// oracles

std::vector<double> ras_oracle(const std::vector<double>& O, const std::vector<double>& D, std::vector<double> T) {
  const std::size_t n = O.size();
  for (int it = 0; it < 100000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += T[i * n + j];
      for (std::size_t j = 0; j < n; ++j) T[i * n + j] *= s > 0 ? O[i] / s : 0.0;
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += T[i * n + j];
      for (std::size_t i = 0; i < n; ++i) T[i * n + j] *= s > 0 ? D[j] / s : 0.0;
    }
    double dev = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += T[i * n + j];
      dev = std::max(dev, std::abs(s - O[i]));
    }
    if (dev < 1e-12) break;
  }
  return T;
}

double entropy_objective(const std::vector<double>& T, const std::vector<double>& c, double beta) {
  double v = distribution::entropy_of(T);
  for (std::size_t k = 0; k < T.size(); ++k) v -= beta * T[k] * c[k];
  return v;
}

std::vector<double> bellman_ford(std::size_t n, const std::vector<std::array<std::size_t, 3>>& arcs, std::size_t s) {
  std::vector<double> d(n, routing::kInfinity);
  d[s] = 0;
  for (std::size_t round = 0; round + 1 < n; ++round) {
    bool changed = false;
    for (const auto& a : arcs)
      if (d[a[0]] + double(a[2]) < d[a[1]]) d[a[1]] = d[a[0]] + double(a[2]), changed = true;
    if (!changed) break;
  }
  return d;
}

std::vector<double> permutation_shapley(const tripgen::TripModel& m, const std::vector<double>& x,
                                        const std::vector<std::vector<double>>& bg) {
  const std::size_t n = x.size();
  auto v = [&](const std::vector<bool>& in) {
    double s = 0;
    for (const auto& b : bg) {
      std::vector<double> z(n);
      for (std::size_t i = 0; i < n; ++i) z[i] = in[i] ? x[i] : b[i];
      s += m.predict(z);
    }
    return s / double(bg.size());
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(n, 0.0);
  int count = 0;
  do {
    std::vector<bool> in(n, false);
    for (auto i : order) {
      const double before = v(in);
      in[i] = true;
      phi[i] += v(in) - before;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  for (double& p : phi) p /= count;
  return phi;
}

tripgen::TrainingSet random_training(Rng& rng, std::size_t rows, std::size_t n) {
  tripgen::TrainingSet t;
  t.feature_names = tripgen::default_feature_names(n);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> x(n);
    for (auto& v : x) v = double(rng.below(2));
    double y = 3.0 + 4.0 * rng.uniform();
    for (std::size_t i = 0; i < n; ++i) y += (double(i) - 1.5) * x[i];
    t.add(x, std::max(0.0, y));
  }
  return t;
}

}  // namespace

int main() {
  using namespace synthpop;
  using namespace distribution;

  criterion("IPF 50 random 3-D tables: marginals <= 1e-8, odds ratios <= 1e-6, < 1 s", [](Outcome& o) {
    Rng rng(7);
    double worst_marg = 0, worst_or = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::size_t> dims = {2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)};
      const std::size_t n = dims[0] * dims[1] * dims[2];
      std::vector<double> seed_cells(n), truth(n);
      for (auto& v : seed_cells) v = 0.1 + 5 * rng.uniform();
      for (auto& v : truth) v = 0.1 + 20 * rng.uniform();
      const auto seed = ContingencyTable::from_dims(dims, seed_cells);
      const auto t = ContingencyTable::from_dims(dims, truth);
      const MarginalSet targets = {t.marginal(0), t.marginal(1), t.marginal(2)};
      const auto r = ipf_fit(seed, targets);
      o.require(r.converged, "trial " + std::to_string(trial) + " did not converge");
      worst_marg = std::max(worst_marg, max_marginal_deviation(r.table, targets));
      // every 2x2 odds ratio within each layer of the third axis
      auto at = [](const ContingencyTable& tb, std::size_t i, std::size_t j, std::size_t k) {
        std::array<std::size_t, 3> c = {i, j, k};
        return tb[tb.flat_index(c)];
      };
      for (std::size_t k = 0; k < dims[2]; ++k)
        for (std::size_t i = 1; i < dims[0]; ++i)
          for (std::size_t j = 1; j < dims[1]; ++j) {
            const double before = at(seed, 0, 0, k) * at(seed, i, j, k) / (at(seed, 0, j, k) * at(seed, i, 0, k));
            const double after = at(r.table, 0, 0, k) * at(r.table, i, j, k) / (at(r.table, 0, j, k) * at(r.table, i, 0, k));
            worst_or = std::max(worst_or, std::abs(after / before - 1.0));
          }
    }
    const double secs = seconds_since(t0);
    o.detail << "max marginal dev " << worst_marg << ", max odds-ratio rel dev " << worst_or << ", " << secs << " s";
    o.require(worst_marg <= 1e-8 && worst_or <= 1e-6 && secs < 1.0, "");
  });

  criterion("IPF 2x2 uniform seed equals product of marginals within 1e-10", [](Outcome& o) {
    const auto r = ipf_fit(ContingencyTable::from_dims({2, 2}, {1, 1, 1, 1}), {{1, 3}, {2, 2}});
    const std::vector<double> want = {0.5, 0.5, 1.5, 1.5};
    double dev = 0;
    for (std::size_t i = 0; i < 4; ++i) dev = std::max(dev, std::abs(r.table[i] - want[i]));
    o.detail << "max dev " << dev;
    o.require(r.converged && dev <= 1e-10, "");
  });

  criterion("Integerization: 1000 random tables keep totals exactly and are idempotent", [](Outcome& o) {
    Rng rng(11);
    int bad_total = 0, bad_idem = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng.below(12);
      std::vector<double> cells(n);
      for (auto& v : cells) v = 10 * rng.uniform();
      // grand total made integral, as it is for a zone's person count
      const double frac = std::accumulate(cells.begin(), cells.end(), 0.0);
      cells[0] += std::ceil(frac) - frac;
      const auto t = ContingencyTable::from_dims({n}, cells);
      const auto r = integerize(t);
      bad_total += !(is_integral(r) && r.total() == std::round(t.total()));
      bad_idem += integerize(r).cells() != r.cells();
    }
    o.detail << bad_total << " total mismatches, " << bad_idem << " non-idempotent";
    o.require(bad_total == 0 && bad_idem == 0, "");
  });

  criterion("Gravity: 50 random instances meet row/column sums within 1e-8", [](Outcome& o) {
    Rng rng(77);
    double worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t n = 1 + rng.below(10);
      ProductionAttraction pa;
      for (std::size_t i = 0; i < n; ++i) {
        pa.productions.push_back(1 + rng.uniform() * 200);
        pa.attractions.push_back(1 + rng.uniform() * 200);
      }
      pa = balance(pa);
      std::vector<double> c(n * n);
      for (auto& v : c) v = 60 + rng.uniform() * 1800;
      const auto det = rep % 2 ? Deterrence::exponential(rng.uniform() * 0.004) : Deterrence::power(rng.uniform() * 2);
      const auto od = furness_balance(pa, CostMatrix(n, c), det);
      o.require(od.converged, "instance " + std::to_string(rep) + " did not converge");
      const auto rs = od.row_sums(), cs = od.col_sums();
      for (std::size_t i = 0; i < n; ++i)
        worst = std::max({worst, std::abs(rs[i] - pa.productions[i]), std::abs(cs[i] - pa.attractions[i])});
    }
    o.detail << "max marginal dev " << worst;
    o.require(worst <= 1e-8, "");
  });

  criterion("Gravity: beta = 0 equals the independence table within 1e-10", [](Outcome& o) {
    Rng rng(3);
    double worst = 0;
    for (int rep = 0; rep < 10; ++rep) {
      const std::size_t n = 2 + rng.below(8);
      ProductionAttraction pa;
      std::vector<double> c(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        pa.productions.push_back(rng.uniform() * 100);
        pa.attractions.push_back(rng.uniform() * 100);
      }
      for (auto& v : c) v = rng.uniform() * 1000;
      pa = balance(pa);
      const auto od = furness_balance(pa, CostMatrix(n, c), Deterrence::exponential(0.0), {1e-12, 5000});
      const double total = std::accumulate(pa.productions.begin(), pa.productions.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          worst = std::max(worst, std::abs(od(i, j) - pa.productions[i] * pa.attractions[j] / total));
    }
    o.detail << "max dev " << worst;
    o.require(worst <= 1e-10, "");
  });

  criterion("Gravity: entropy-optimal against a 0.01 grid search on 3 fixed 3x3 instances", [](Outcome& o) {
    struct Instance {
      std::vector<double> O, D, c;
      double beta;
    };
    const std::vector<Instance> cases = {
        {{0.3, 0.3, 0.4}, {0.2, 0.5, 0.3}, {1, 2, 3, 2, 1, 2, 3, 2, 1}, 1.0},
        {{0.5, 0.2, 0.3}, {0.4, 0.4, 0.2}, {0, 5, 1, 5, 0, 2, 1, 2, 0}, 0.5},
        {{0.1, 0.6, 0.3}, {0.3, 0.3, 0.4}, {2, 1, 4, 3, 0.5, 1, 1, 2, 2}, 2.0},
    };
    double worst_gap = 0, worst_cell = 0;
    bool grid_beats = false;
    for (const auto& inst : cases) {
      const auto od =
          furness_balance({inst.O, inst.D}, CostMatrix(3, inst.c), Deterrence::exponential(inst.beta), {1e-13, 100000});
      const double g = entropy_objective(od.trips, inst.c, inst.beta);
      double best = -1e300;
      std::vector<double> arg;
      auto step = [](int k) { return k * 0.01; };
      for (int a = 0; step(a) <= inst.O[0] + 1e-12; ++a)
        for (int b = 0; step(a) + step(b) <= inst.O[0] + 1e-12; ++b)
          for (int d = 0; step(a) + step(d) <= inst.D[0] + 1e-12 && step(d) <= inst.O[1] + 1e-12; ++d)
            for (int e = 0; step(d) + step(e) <= inst.O[1] + 1e-12 && step(b) + step(e) <= inst.D[1] + 1e-12; ++e) {
              std::vector<double> T(9);
              T[0] = step(a), T[1] = step(b), T[3] = step(d), T[4] = step(e);
              T[2] = inst.O[0] - T[0] - T[1];
              T[5] = inst.O[1] - T[3] - T[4];
              T[6] = inst.D[0] - T[0] - T[3];
              T[7] = inst.D[1] - T[1] - T[4];
              T[8] = inst.O[2] - T[6] - T[7];
              bool ok = true;
              for (auto& t : T) {
                if (t < -1e-12) ok = false;
                t = std::max(t, 0.0);
              }
              if (!ok) continue;
              const double v = entropy_objective(T, inst.c, inst.beta);
              if (v > best) best = v, arg = T;
            }
      grid_beats = grid_beats || best > g + 1e-12;
      worst_gap = std::max(worst_gap, g - best);
      for (std::size_t k = 0; k < 9; ++k) worst_cell = std::max(worst_cell, std::abs(arg[k] - od.trips[k]));
    }
    o.detail << "no grid point beats the balanced matrix: " << (grid_beats ? "no" : "yes") << ", objective gap "
             << worst_gap << ", grid argmax within " << worst_cell << " of each cell";
    o.require(!grid_beats && worst_cell <= 0.011, "");
  });

  criterion("Deterrence calibration recovers beta within 1e-4 on the 2-zone fixture", [](Outcome& o) {
    const auto T = ras_oracle({6, 4}, {5, 5}, {std::exp(-1.0), std::exp(-2.0), std::exp(-2.0), std::exp(-1.0)});
    const double target = (T[0] + 2 * T[1] + 2 * T[2] + T[3]) / 10.0;
    const auto cal = calibrate_deterrence({{6, 4}, {5, 5}}, CostMatrix(2, {1, 2, 2, 1}), Deterrence::Form::exponential, target);
    o.detail << "beta " << cal.deterrence.parameter();
    o.require(std::abs(cal.deterrence.parameter() - 1.0) <= 1e-4, "");
  });

  criterion("Dijkstra equals Bellman-Ford on 200 random graphs, < 5 s", [](Outcome& o) {
    Rng rng(404);
    int mismatches = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t n = 1 + rng.below(50);
      std::vector<std::array<std::size_t, 3>> arcs;
      const std::size_t m = rng.below(n * 4 + 1);
      for (std::size_t k = 0; k < m; ++k) arcs.push_back({rng.below(n), rng.below(n), rng.below(20)});
      std::vector<network::NetworkNode> nodes;
      for (std::size_t i = 0; i < n; ++i) nodes.push_back({"n" + std::to_string(i), 47.0, -122.0, network::NodeKind::road});
      std::vector<network::NetworkEdge> edges;
      for (const auto& a : arcs) edges.push_back({a[0], a[1], network::Mode::drive, double(a[2])});
      const network::MultimodalGraph g(std::move(nodes), std::move(edges), {});
      for (std::size_t s = 0; s < n; ++s) mismatches += routing::dijkstra(g, s).dist != bellman_ford(n, arcs, s);
    }
    const double secs = seconds_since(t0);
    o.detail << mismatches << " mismatching sources, " << secs << " s";
    o.require(mismatches == 0 && secs < 5.0, "");
  });

  criterion("Naive Bayes: posteriors sum to 1 within 1e-12, counting oracle exact, 0.3/0.7 priors", [](Outcome& o) {
    using namespace modechoice;
    std::vector<LabeledRecord> three_seven;
    for (int i = 0; i < 3; ++i) three_seven.push_back({{1}, "transit"});
    for (int i = 0; i < 7; ++i) three_seven.push_back({{0}, "drive"});
    const auto pm = fit_nb(three_seven, {"transit", "drive"}, 0.0);
    o.require(pm.priors()[0] == 0.3 && pm.priors()[1] == 0.7, "priors not 0.3/0.7");

    Rng rng(31);
    const auto modes = default_modes();
    int oracle_mismatch = 0;
    double worst_sum = 0;
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t nf = 1 + rng.below(5), rows = 5 + rng.below(200);
      std::vector<LabeledRecord> recs;
      for (std::size_t r = 0; r < rows; ++r) {
        LabeledRecord rec;
        for (std::size_t f = 0; f < nf; ++f) rec.features.push_back(int(rng.below(2)));
        rec.mode = modes[rng.below(modes.size())];
        recs.push_back(rec);
      }
      const double alpha = double(rep % 3);
      const auto m = fit_nb(recs, modes, alpha);
      for (std::size_t k = 0; k < modes.size(); ++k) {
        double ck = 0;
        for (const auto& r : recs) ck += r.mode == modes[k];
        oracle_mismatch += m.priors()[k] != (ck + alpha) / (double(recs.size()) + alpha * 3);
        for (std::size_t f = 0; f < nf; ++f)
          for (int v = 0; v < 2; ++v) {
            double c = 0;
            for (const auto& r : recs) c += r.mode == modes[k] && r.features[f] == v;
            const double expect = ck + 2 * alpha > 0 ? (c + alpha) / (ck + 2 * alpha) : 0.5;
            oracle_mismatch += m.likelihood(f, v, k) != expect;
          }
      }
      // every profile of this model
      for (std::size_t bits = 0; bits < (std::size_t{1} << nf); ++bits) {
        std::vector<int> x(nf);
        for (std::size_t f = 0; f < nf; ++f) x[f] = int((bits >> f) & 1U);
        try {
          const auto p = posterior(m, x);
          worst_sum = std::max(worst_sum, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
        } catch (const InvalidArgument&) {
          // alpha = 0 can rule out every mode for an unseen profile
        }
      }
    }
    // and the fitted toy-city model
    const auto toy = fit_nb(load_mode_training(kToy / "mode_training.csv").records, modes, 1.0);
    for (std::size_t bits = 0; bits < 32; ++bits) {
      std::vector<int> x(5);
      for (std::size_t f = 0; f < 5; ++f) x[f] = int((bits >> f) & 1U);
      const auto p = posterior(toy, x);
      worst_sum = std::max(worst_sum, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
    }
    o.detail << "max |sum - 1| " << worst_sum << ", " << oracle_mismatch << " oracle mismatches, priors "
             << pm.priors()[0] << "/" << pm.priors()[1];
    o.require(worst_sum <= 1e-12 && oracle_mismatch == 0, "");
  });

  criterion("Shapley: efficiency within 1e-9, brute-force oracle on n=3 trees, dummy phi within 1e-9", [](Outcome& o) {
    using namespace tripgen;
    double worst_eff = 0, worst_oracle = 0, worst_dummy = 0;
    Rng rng(33);
    for (auto kind : {ModelKind::linear, ModelKind::random_forest, ModelKind::gradient_boost, ModelKind::mlp})
      for (int trial = 0; trial < 5; ++trial) {
        const auto t = random_training(rng, 60, 5);
        const auto m = fit_model(kind, t, {}, rng.next());
        const auto bg = random_training(rng, 12, 5);
        std::vector<double> x(5);
        for (auto& v : x) v = double(rng.below(2));
        const auto a = shapley(m, x, bg);
        worst_eff = std::max(worst_eff, std::abs(std::accumulate(a.phi.begin(), a.phi.end(), a.base_value) - m.predict(x)));
      }

    std::vector<TreeNode> nodes(7);
    nodes[0] = {0, 0.5, 1, 2, 0, 0, 0};
    nodes[1] = {2, 0.5, 3, 4, 0, 0, 0};
    nodes[2] = {1, 0.5, 5, 6, 0, 0, 0};
    nodes[3].value = 1.0;
    nodes[4].value = 4.0;
    nodes[5].value = -2.0;
    nodes[6].value = 7.0;
    std::vector<TreeNode> stump(3);  // never reads feature 1 or 2
    stump[0] = {0, 0.5, 1, 2, 0, 0, 0};
    stump[1].value = 2.0;
    stump[2].value = 9.0;
    const TripModel tree({"a", "b", "c"}, {}, RandomForest{{RegressionTree(nodes)}});
    const TripModel forest({"a", "b", "c"}, {}, RandomForest{{RegressionTree(nodes), RegressionTree(stump)}});
    const TripModel dummy({"a", "b", "c"}, {}, RandomForest{{RegressionTree(stump)}});
    const std::vector<std::vector<double>> bg = {{0, 0, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 0}};
    const auto bg_set = make_training_set(bg, {0, 0, 0, 0});
    for (std::size_t bits = 0; bits < 8; ++bits) {
      const std::vector<double> x = {double(bits & 1U), double((bits >> 1) & 1U), double((bits >> 2) & 1U)};
      for (const auto* m : {&tree, &forest}) {
        const auto a = shapley(*m, x, bg_set);
        const auto oracle = permutation_shapley(*m, x, bg);
        for (std::size_t i = 0; i < 3; ++i) worst_oracle = std::max(worst_oracle, std::abs(a.phi[i] - oracle[i]));
        worst_eff = std::max(worst_eff, std::abs(std::accumulate(a.phi.begin(), a.phi.end(), a.base_value) - m->predict(x)));
      }
      const auto d = shapley(dummy, x, bg_set);
      worst_dummy = std::max({worst_dummy, std::abs(d.phi[1]), std::abs(d.phi[2])});
    }
    o.detail << "max efficiency gap " << worst_eff << ", max oracle dev " << worst_oracle << ", max dummy |phi| "
             << worst_dummy;
    o.require(worst_eff <= 1e-9 && worst_oracle <= 1e-9 && worst_dummy <= 1e-9, "");
  });

  criterion("MLP analytic gradient vs central differences, rel err <= 1e-4 on 20 networks", [](Outcome& o) {
    using namespace tripgen;
    Rng rng(77);
    double worst = 0;
    for (int net = 0; net < 20; ++net) {
      const std::size_t inputs = 1 + rng.below(5), hidden = 1 + rng.below(6);
      Mlp m = Mlp::random(inputs, hidden, rng, 0.5);
      TrainingSet data;
      data.feature_names = default_feature_names(inputs);
      for (int r = 0; r < 8; ++r) {
        std::vector<double> x(inputs);
        for (auto& v : x) v = double(rng.below(2));
        data.add(x, 5 * rng.uniform());
      }
      const auto g = m.gradient(data);
      auto p = m.params();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double h = 1e-5, keep = p[i];
        p[i] = keep + h;
        m.set_params(p);
        const double up = m.loss(data);
        p[i] = keep - h;
        m.set_params(p);
        const double down = m.loss(data);
        p[i] = keep;
        m.set_params(p);
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
      }
    }
    o.detail << "max rel err " << worst;
    o.require(worst <= 1e-4, "");
  });

  criterion("End-to-end toy city: < 10 s, byte-deterministic, conservation within 1e-6", [](Outcome& o) {
    Scratch scratch;
    const auto cfg = pipeline::load_scenario(kToy / "scenario.json");
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = pipeline::run_pipeline(cfg);
    pipeline::write_outputs(r, scratch.path / "a");
    const double secs = seconds_since(t0);
    pipeline::write_outputs(pipeline::run_pipeline(cfg), scratch.path / "b");
    const auto a = dir_contents(scratch.path / "a"), b = dir_contents(scratch.path / "b");
    std::size_t differing = a.size() == b.size() ? 0 : 1;
    for (const auto& [name, text] : a) differing += !b.count(name) || b.at(name) != text;

    const double persons = std::accumulate(r.person_trips.begin(), r.person_trips.end(), 0.0);
    const double prod = std::accumulate(r.pa.productions.begin(), r.pa.productions.end(), 0.0);
    double row_dev = 0;
    const auto rows = r.od.row_sums();
    for (std::size_t i = 0; i < rows.size(); ++i) row_dev = std::max(row_dev, std::abs(rows[i] - r.pa.productions[i]));
    const double dev = std::max({std::abs(prod - persons), std::abs(r.od.total() - prod), row_dev});
    o.detail << r.zones.size() << " zones, " << r.graph.node_count() << " nodes, " << secs << " s, " << differing
             << " differing files of " << a.size() << ", max conservation dev " << dev;
    o.require(secs < 10.0 && differing == 0 && dev <= 1e-6 && r.od.converged, "");
  });

  criterion("Model beats uniform-proportion baseline for every mode at tau = 0.2", [](Outcome& o) {
    Scratch scratch;
    const auto r = pipeline::run_pipeline(pipeline::load_scenario(kToy / "scenario.json"));
    pipeline::write_outputs(r, scratch.path);
    auto [pred, pop] = pipeline::load_predicted(scratch.path / "zone_summaries.csv");
    const auto rep = pipeline::evaluate(pred, pipeline::load_truth(kToy / "truth.csv"), pop, 0.2);
    bool all = !rep.modes.empty();
    for (std::size_t m = 0; m < rep.modes.size(); ++m) {
      o.detail << rep.modes[m] << " " << rep.model_proportion[m] << " vs " << rep.baseline_proportion[m] << "; ";
      all = all && rep.model_proportion[m] > rep.baseline_proportion[m];
    }
    o.require(all, "");
  });

  criterion("Service: golden request byte-identical across runs and equal to direct composition", [](Outcome& o) {
    Scratch scratch;
    const auto r = pipeline::run_pipeline(pipeline::load_scenario(kToy / "scenario.json"));
    pipeline::write_outputs(r, scratch.path);
    const auto request = io::read_file(kSource / "tests" / "golden" / "toy_city" / "predict_request.json");
    const auto golden = io::read_file(kSource / "tests" / "golden" / "toy_city" / "predict_response.json");
    const auto s1 = service::load_bundle(scratch.path);
    const auto s2 = service::load_bundle(scratch.path);
    const auto first = service::handle_predict(s1, std::string_view(request));
    bool stable = first.status == 200 && first.text() + "\n" == golden;
    for (int i = 0; i < 3; ++i) stable = stable && service::handle_predict(s2, std::string_view(request)).text() == first.text();

    // composition over the in-memory run
    const auto req = nlohmann::json::parse(request);
    const auto ids = r.zones.ids();
    const std::size_t origin = r.zones.index_of(req["origin_zone"]);
    std::vector<double> x;
    for (const auto& v : req["profile"]) x.push_back(v.get<double>());
    std::vector<int> cats(x.begin(), x.end());
    const double trips = std::max(0.0, r.trip_model->predict(x));
    const auto post = modechoice::posterior(*r.mode_model, cats);
    const auto tree = routing::dijkstra(r.graph, r.graph.anchor(ids[origin]));
    const auto& body = first.body;
    bool equal = body["monthly_trips"].get<double>() == trips;
    for (std::size_t m = 0; m < post.size(); ++m) equal = equal && body["mode_probabilities"][m]["probability"] == post[m];
    double row = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) row += r.od(origin, j);
    for (const auto& d : body["destinations"]) {
      const std::size_t j = r.zones.index_of(d["zone_id"]);
      equal = equal && d["share"].get<double>() == r.od(origin, j) / row;
      equal = equal && d["route"] == routing::route_feature(routing::trace_path(tree, r.graph.anchor(ids[j]), r.graph), r.graph);
    }
    equal = equal && body["destinations"].size() == std::min<std::size_t>(req.value("top_k", 5), ids.size());
    o.detail << "byte-identical to golden: " << (stable ? "yes" : "no") << ", equals composition: " << (equal ? "yes" : "no");
    o.require(stable && equal, "");
  });

  std::printf("%d failing\n", failures);
  return failures ? 1 : 0;
}

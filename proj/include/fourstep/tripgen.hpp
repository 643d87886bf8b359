#pragma once

// Trip generation: regression models from one-hot demographic features to
// trips per period, exact Shapley attribution by subset enumeration, and
// impurity / permutation feature importance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/rng.hpp"

namespace fourstep::tripgen {

using FeatureSpan = std::span<const double>;

struct TrainingSet {
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> rows;
  std::vector<double> targets;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
  std::size_t n_features() const { return feature_names.size(); }

  void add(std::vector<double> x, double y) {
    rows.push_back(std::move(x));
    targets.push_back(y);
  }

  void validate() const {
    if (rows.empty()) throw InvalidArgument("training set is empty");
    if (rows.size() != targets.size()) throw InvalidArgument("training set: row/target count mismatch");
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != feature_names.size())
        throw InvalidArgument("training set: row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                              " features, expected " + std::to_string(feature_names.size()));
      if (!std::isfinite(targets[r])) throw InvalidArgument("training set: non-finite target");
    }
  }
};

inline std::vector<std::string> default_feature_names(std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("x" + std::to_string(i + 1));
  return names;
}

inline TrainingSet make_training_set(std::vector<std::vector<double>> rows, std::vector<double> targets) {
  TrainingSet t;
  t.feature_names = default_feature_names(rows.empty() ? 0 : rows.front().size());
  t.rows = std::move(rows);
  t.targets = std::move(targets);
  return t;
}

// ---------------------------------------------------------------------------
// Regression trees

struct TreeNode {
  int feature = -1;  // -1 for a leaf
  double threshold = 0.0;  // go left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  double value = 0.0;  // mean target of the node's samples
  double gain = 0.0;   // SSE reduction achieved by the split
  std::size_t samples = 0;
};

class RegressionTree {
 public:
  RegressionTree() = default;
  explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.empty()) throw InvalidArgument("regression tree needs at least one node");
  }

  static RegressionTree constant(double v) { return RegressionTree({TreeNode{.value = v}}); }

  double predict(FeatureSpan x) const {
    std::size_t i = 0;
    while (nodes_[i].feature >= 0) {
      const auto& n = nodes_[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return nodes_[i].value;
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }

  // Adds each split's gain to `out[feature]`.
  void accumulate_gain(std::vector<double>& out) const {
    for (const auto& n : nodes_)
      if (n.feature >= 0) out[static_cast<std::size_t>(n.feature)] += n.gain;
  }

 private:
  std::vector<TreeNode> nodes_;
};

struct TreeParams {
  int max_depth = 6;
  int min_samples_leaf = 1;
  int features_per_split = 0;  // 0 = all features
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<double>>& X, std::span<const double> y, TreeParams p, Rng* rng)
      : X_(X), y_(y), p_(p), rng_(rng), n_features_(X.empty() ? 0 : X.front().size()) {}

  RegressionTree build(std::vector<std::size_t> sample) {
    nodes_.clear();
    grow(sample, 0);
    return RegressionTree(std::move(nodes_));
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int grow(std::vector<std::size_t>& sample, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    double sum = 0.0;
    for (auto i : sample) sum += y_[i];
    nodes_[id].value = sum / static_cast<double>(sample.size());
    nodes_[id].samples = sample.size();
    if (depth >= p_.max_depth || sample.size() < 2 * static_cast<std::size_t>(p_.min_samples_leaf)) return id;

    const Split best = best_split(sample, sum);
    if (best.feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto i : sample) (X_[i][static_cast<std::size_t>(best.feature)] <= best.threshold ? left : right).push_back(i);
    nodes_[id].feature = best.feature;
    nodes_[id].threshold = best.threshold;
    nodes_[id].gain = best.gain;
    sample.clear();
    sample.shrink_to_fit();
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  // Drawn subset first, then the remaining features as a fallback block.
  std::vector<std::vector<std::size_t>> candidate_features() {
    std::vector<std::size_t> f(n_features_);
    std::iota(f.begin(), f.end(), 0);
    const auto k = static_cast<std::size_t>(p_.features_per_split);
    if (!rng_ || k == 0 || k >= n_features_) return {f};
    for (std::size_t i = 0; i < k; ++i) std::swap(f[i], f[i + rng_->below(n_features_ - i)]);
    std::vector<std::size_t> drawn(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(k)), rest(f.begin() + static_cast<std::ptrdiff_t>(k), f.end());
    std::sort(drawn.begin(), drawn.end());
    std::sort(rest.begin(), rest.end());
    return {drawn, rest};
  }

  // Largest SSE reduction; ties go to the lower feature index, then the
  // lower threshold.
  Split best_split(const std::vector<std::size_t>& sample, double sum) {
    const double n = static_cast<double>(sample.size());
    const double parent = sum * sum / n;
    double sse = 0.0;
    for (auto i : sample) sse += (y_[i] - sum / n) * (y_[i] - sum / n);
    Split best;
    const double min_gain = 1e-12 * std::max(1.0, sse);
    std::vector<std::pair<double, double>> xv(sample.size());
    const auto min_leaf = static_cast<std::size_t>(std::max(1, p_.min_samples_leaf));
    // Like sklearn, keep looking past the drawn subset when none of its
    // features can split this node (e.g. all constant here).
    for (const auto& block : candidate_features()) {
      if (best.feature >= 0) break;
      for (auto f : block) {
        for (std::size_t k = 0; k < sample.size(); ++k) xv[k] = {X_[sample[k]][f], y_[sample[k]]};
        std::sort(xv.begin(), xv.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        double left_sum = 0.0;
        for (std::size_t k = 0; k + 1 < xv.size(); ++k) {
          left_sum += xv[k].second;
          if (xv[k].first == xv[k + 1].first) continue;
          const std::size_t nl = k + 1, nr = xv.size() - nl;
          if (nl < min_leaf || nr < min_leaf) continue;
          const double right_sum = sum - left_sum;
          const double gain = left_sum * left_sum / double(nl) + right_sum * right_sum / double(nr) - parent;
          if (gain > min_gain && gain > best.gain * (1.0 + 1e-12) + 1e-300) {
            best.feature = static_cast<int>(f);
            best.threshold = 0.5 * (xv[k].first + xv[k + 1].first);
            best.gain = gain;
          }
        }
      }
    }
    return best;
  }

  const std::vector<std::vector<double>>& X_;
  std::span<const double> y_;
  TreeParams p_;
  Rng* rng_;
  std::size_t n_features_;
  std::vector<TreeNode> nodes_;
};

}  // namespace detail

inline RegressionTree fit_tree(const std::vector<std::vector<double>>& X, std::span<const double> y,
                               std::vector<std::size_t> sample, TreeParams p, Rng* rng = nullptr) {
  if (sample.empty()) throw InvalidArgument("fit_tree: empty sample");
  return detail::TreeBuilder(X, y, p, rng).build(std::move(sample));
}

// ---------------------------------------------------------------------------
// Model kinds

enum class ModelKind { linear, random_forest, gradient_boost, mlp };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::linear: return "linear";
    case ModelKind::random_forest: return "random_forest";
    case ModelKind::gradient_boost: return "gradient_boost";
    case ModelKind::mlp: return "mlp";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "linear") return ModelKind::linear;
  if (s == "random_forest" || s == "forest") return ModelKind::random_forest;
  if (s == "gradient_boost" || s == "boost") return ModelKind::gradient_boost;
  if (s == "mlp") return ModelKind::mlp;
  throw InvalidArgument("unknown model kind '" + std::string(s) + "'");
}

// Defaults are implementer-chosen; none are prescribed for trip models.
struct Hyperparams {
  // forest
  int trees = 50;
  int forest_max_depth = 8;
  int features_per_split = 0;  // 0 = max(1, n/3)
  int min_samples_leaf = 1;
  // boosting
  int stages = 100;
  double learning_rate = 0.1;
  int boost_max_depth = 3;
  // mlp
  int hidden = 8;
  int epochs = 500;
  double step_size = 0.1;
  // linear
  double ridge = 1e-8;  // relative ridge used only when the Gram matrix is singular
};

inline void validate(ModelKind kind, const Hyperparams& h) {
  switch (kind) {
    case ModelKind::linear:
      if (!(h.ridge > 0)) throw InvalidArgument("linear: ridge must be positive");
      break;
    case ModelKind::random_forest:
      if (h.trees < 1) throw InvalidArgument("random_forest: trees must be >= 1");
      if (h.forest_max_depth < 1) throw InvalidArgument("random_forest: max depth must be >= 1");
      if (h.features_per_split < 0 || h.min_samples_leaf < 1)
        throw InvalidArgument("random_forest: invalid split parameters");
      break;
    case ModelKind::gradient_boost:
      if (h.stages < 1) throw InvalidArgument("gradient_boost: stages must be >= 1");
      if (!(h.learning_rate > 0.0 && h.learning_rate <= 1.0))
        throw InvalidArgument("gradient_boost: learning rate must be in (0, 1]");
      if (h.boost_max_depth < 1) throw InvalidArgument("gradient_boost: max depth must be >= 1");
      break;
    case ModelKind::mlp:
      if (h.hidden < 1) throw InvalidArgument("mlp: hidden width must be >= 1");
      if (h.epochs < 1) throw InvalidArgument("mlp: epochs must be >= 1");
      if (!(h.step_size > 0.0)) throw InvalidArgument("mlp: step size must be positive");
      break;
  }
}

struct LinearModel {
  double intercept = 0.0;
  std::vector<double> coef;
  bool ridge_used = false;

  double predict(FeatureSpan x) const {
    double s = intercept;
    for (std::size_t i = 0; i < coef.size(); ++i) s += coef[i] * x[i];
    return s;
  }
};

struct RandomForest {
  std::vector<RegressionTree> trees;

  double predict(FeatureSpan x) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict(x);
    return s / static_cast<double>(trees.size());
  }
};

struct GradientBoost {
  double initial = 0.0;
  double learning_rate = 0.1;
  std::vector<RegressionTree> stages;

  double predict_prefix(FeatureSpan x, std::size_t m) const {
    double s = initial;
    for (std::size_t i = 0; i < std::min(m, stages.size()); ++i) s += learning_rate * stages[i].predict(x);
    return s;
  }
  double predict(FeatureSpan x) const { return predict_prefix(x, stages.size()); }
};

// One hidden tanh layer, linear output.
struct Mlp {
  std::size_t inputs = 0;
  std::size_t hidden = 0;
  std::vector<double> w1;  // hidden x inputs, row-major
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  double b2 = 0.0;

  double predict(FeatureSpan x) const {
    double out = b2;
    for (std::size_t k = 0; k < hidden; ++k) {
      double a = b1[k];
      for (std::size_t j = 0; j < inputs; ++j) a += w1[k * inputs + j] * x[j];
      out += w2[k] * std::tanh(a);
    }
    return out;
  }

  std::size_t param_count() const { return hidden * inputs + 2 * hidden + 1; }

  // Flat parameter order: w1, b1, w2, b2.
  std::vector<double> params() const {
    std::vector<double> p(w1);
    p.insert(p.end(), b1.begin(), b1.end());
    p.insert(p.end(), w2.begin(), w2.end());
    p.push_back(b2);
    return p;
  }

  void set_params(std::span<const double> p) {
    if (p.size() != param_count()) throw InvalidArgument("mlp: parameter vector has wrong length");
    auto it = p.begin();
    std::copy_n(it, w1.size(), w1.begin());
    it += static_cast<std::ptrdiff_t>(w1.size());
    std::copy_n(it, hidden, b1.begin());
    it += static_cast<std::ptrdiff_t>(hidden);
    std::copy_n(it, hidden, w2.begin());
    it += static_cast<std::ptrdiff_t>(hidden);
    b2 = *it;
  }

  // Mean squared error halved: (1/2N) sum (f(x) - y)^2.
  double loss(const TrainingSet& data) const {
    double s = 0.0;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const double e = predict(data.rows[r]) - data.targets[r];
      s += e * e;
    }
    return 0.5 * s / static_cast<double>(data.size());
  }

  // Analytic gradient of loss() in params() order.
  std::vector<double> gradient(const TrainingSet& data) const {
    std::vector<double> g(param_count(), 0.0);
    std::vector<double> h(hidden);
    const std::size_t ob1 = hidden * inputs, ow2 = ob1 + hidden, ob2 = ow2 + hidden;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const auto& x = data.rows[r];
      double out = b2;
      for (std::size_t k = 0; k < hidden; ++k) {
        double a = b1[k];
        for (std::size_t j = 0; j < inputs; ++j) a += w1[k * inputs + j] * x[j];
        h[k] = std::tanh(a);
        out += w2[k] * h[k];
      }
      const double e = out - data.targets[r];
      g[ob2] += e;
      for (std::size_t k = 0; k < hidden; ++k) {
        g[ow2 + k] += e * h[k];
        const double delta = e * w2[k] * (1.0 - h[k] * h[k]);
        g[ob1 + k] += delta;
        for (std::size_t j = 0; j < inputs; ++j) g[k * inputs + j] += delta * x[j];
      }
    }
    const double inv = 1.0 / static_cast<double>(data.size());
    for (double& v : g) v *= inv;
    return g;
  }

  static Mlp random(std::size_t inputs, std::size_t hidden, Rng& rng, double output_scale) {
    Mlp m;
    m.inputs = inputs;
    m.hidden = hidden;
    m.w1.resize(hidden * inputs);
    m.b1.assign(hidden, 0.0);
    m.w2.assign(hidden, 0.0);
    const double s = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(inputs, 1)));
    for (double& w : m.w1) w = s * rng.normal();
    for (double& w : m.b1) w = 0.1 * rng.normal();
    for (double& w : m.w2) w = output_scale * rng.normal();
    m.b2 = output_scale * rng.normal();
    return m;
  }
};

class TripModel {
 public:
  using Params = std::variant<LinearModel, RandomForest, GradientBoost, Mlp>;

  TripModel(std::vector<std::string> feature_names, Hyperparams hp, Params params)
      : feature_names_(std::move(feature_names)), hp_(hp), params_(std::move(params)) {}

  ModelKind kind() const { return static_cast<ModelKind>(params_.index()); }
  std::size_t n_features() const { return feature_names_.size(); }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  const Hyperparams& hyperparams() const { return hp_; }
  const Params& params() const { return params_; }

  template <typename T>
  const T& as() const { return std::get<T>(params_); }

  double predict(FeatureSpan x) const {
    if (x.size() != n_features())
      throw InvalidArgument("predict: feature vector has length " + std::to_string(x.size()) + ", model expects " +
                            std::to_string(n_features()));
    return std::visit([&](const auto& m) { return m.predict(x); }, params_);
  }

  // Trip counts used downstream cannot be negative.
  double predict_clamped(FeatureSpan x) const { return std::max(0.0, predict(x)); }

 private:
  std::vector<std::string> feature_names_;
  Hyperparams hp_;
  Params params_;
};

// ---------------------------------------------------------------------------
// Fitting

inline LinearModel fit_linear(const TrainingSet& train, double ridge) {
  const auto n = static_cast<Eigen::Index>(train.size());
  const auto p = static_cast<Eigen::Index>(train.n_features());
  Eigen::MatrixXd A(n, p + 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    A(r, 0) = 1.0;
    for (Eigen::Index j = 0; j < p; ++j) A(r, j + 1) = train.rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)];
    y(r) = train.targets[static_cast<std::size_t>(r)];
  }
  Eigen::MatrixXd gram = A.transpose() * A;
  const Eigen::VectorXd rhs = A.transpose() * y;

  LinearModel m;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  lu.setThreshold(1e-12);
  Eigen::VectorXd beta;
  if (lu.rank() == gram.rows()) {
    beta = gram.ldlt().solve(rhs);
  } else {
    // Singular: penalize the non-intercept coefficients only.
    const double lambda = ridge * std::max(1.0, gram.diagonal().maxCoeff());
    for (Eigen::Index j = 1; j <= p; ++j) gram(j, j) += lambda;
    beta = gram.ldlt().solve(rhs);
    m.ridge_used = true;
  }
  m.intercept = beta(0);
  m.coef.resize(static_cast<std::size_t>(p));
  for (Eigen::Index j = 0; j < p; ++j) m.coef[static_cast<std::size_t>(j)] = beta(j + 1);
  return m;
}

inline RandomForest fit_forest(const TrainingSet& train, const Hyperparams& hp, std::uint64_t seed) {
  RandomForest f;
  const std::size_t n = train.size();
  TreeParams tp;
  tp.max_depth = hp.forest_max_depth;
  tp.min_samples_leaf = hp.min_samples_leaf;
  tp.features_per_split = hp.features_per_split > 0
                              ? hp.features_per_split
                              : static_cast<int>(std::max<std::size_t>(1, train.n_features() / 3));
  for (int t = 0; t < hp.trees; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    std::vector<std::size_t> boot(n);
    for (auto& i : boot) i = rng.below(n);
    f.trees.push_back(fit_tree(train.rows, train.targets, std::move(boot), tp, &rng));
  }
  return f;
}

inline GradientBoost fit_boost(const TrainingSet& train, const Hyperparams& hp) {
  GradientBoost g;
  g.learning_rate = hp.learning_rate;
  const std::size_t n = train.size();
  g.initial = std::accumulate(train.targets.begin(), train.targets.end(), 0.0) / static_cast<double>(n);
  std::vector<double> pred(n, g.initial), resid(n);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  TreeParams tp;
  tp.max_depth = hp.boost_max_depth;
  tp.min_samples_leaf = hp.min_samples_leaf;
  for (int m = 0; m < hp.stages; ++m) {
    for (std::size_t i = 0; i < n; ++i) resid[i] = train.targets[i] - pred[i];
    auto tree = fit_tree(train.rows, resid, all, tp);
    for (std::size_t i = 0; i < n; ++i) pred[i] += g.learning_rate * tree.predict(train.rows[i]);
    g.stages.push_back(std::move(tree));
  }
  return g;
}

// Output weights start at zero and the output bias at the target mean, so a
// constant target is already a stationary point.
inline Mlp fit_mlp(const TrainingSet& train, const Hyperparams& hp, std::uint64_t seed) {
  Rng rng(seed);
  Mlp m = Mlp::random(train.n_features(), static_cast<std::size_t>(hp.hidden), rng, 0.0);
  m.b2 = std::accumulate(train.targets.begin(), train.targets.end(), 0.0) / static_cast<double>(train.size());
  auto p = m.params();
  for (int e = 0; e < hp.epochs; ++e) {
    const auto g = m.gradient(train);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= hp.step_size * g[i];
    m.set_params(p);
  }
  return m;
}

inline TripModel fit_model(ModelKind kind, const TrainingSet& train, const Hyperparams& hp, std::uint64_t rng_seed) {
  train.validate();
  validate(kind, hp);
  switch (kind) {
    case ModelKind::linear: return TripModel(train.feature_names, hp, fit_linear(train, hp.ridge));
    case ModelKind::random_forest: return TripModel(train.feature_names, hp, fit_forest(train, hp, rng_seed));
    case ModelKind::gradient_boost: return TripModel(train.feature_names, hp, fit_boost(train, hp));
    case ModelKind::mlp: return TripModel(train.feature_names, hp, fit_mlp(train, hp, rng_seed));
  }
  throw InvalidArgument("unknown model kind");
}

// ---------------------------------------------------------------------------
// Shapley values

struct Attribution {
  double base_value = 0.0;
  std::vector<double> phi;
};

inline constexpr std::size_t kMaxShapleyFeatures = 15;

// Exact Shapley values of `f` at `x`. The value of a coalition S is the mean
// of f over background rows with features in S replaced by x's values.
template <typename Predictor>
Attribution shapley_values(Predictor&& f, FeatureSpan x, const std::vector<std::vector<double>>& background) {
  const std::size_t n = x.size();
  if (n > kMaxShapleyFeatures)
    throw InvalidArgument("shapley: " + std::to_string(n) + " features exceeds the exact enumeration bound of " +
                          std::to_string(kMaxShapleyFeatures));
  if (background.empty()) throw InvalidArgument("shapley: background set is empty");
  for (const auto& b : background)
    if (b.size() != n) throw InvalidArgument("shapley: background row length differs from the explained point");

  const std::size_t subsets = std::size_t{1} << n;
  std::vector<double> value(subsets, 0.0);
  std::vector<double> z(n);
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    double s = 0.0;
    for (const auto& b : background) {
      for (std::size_t i = 0; i < n; ++i) z[i] = (mask >> i) & 1U ? x[i] : b[i];
      s += f(std::span<const double>(z));
    }
    value[mask] = s / static_cast<double>(background.size());
  }

  // weight[s] = s! (n - s - 1)! / n!
  std::vector<double> fact(n + 1, 1.0);
  for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> weight(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) weight[s] = fact[s] * fact[n - s - 1] / fact[n];

  Attribution a;
  a.base_value = value[0];
  a.phi.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double phi = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      phi += weight[static_cast<std::size_t>(__builtin_popcountll(mask))] * (value[mask | bit] - value[mask]);
    }
    a.phi[i] = phi;
  }
  return a;
}

inline Attribution shapley(const TripModel& model, FeatureSpan x, const TrainingSet& background) {
  if (x.size() != model.n_features()) throw InvalidArgument("shapley: feature-length mismatch");
  return shapley_values([&](FeatureSpan z) { return model.predict(z); }, x, background.rows);
}

// ---------------------------------------------------------------------------
// Feature importance

enum class ImportanceMethod { impurity, permutation };

inline double mean_squared_error(const TripModel& model, const TrainingSet& data) {
  double s = 0.0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    const double e = model.predict(data.rows[r]) - data.targets[r];
    s += e * e;
  }
  return s / static_cast<double>(data.size());
}

// impurity: split gains per feature averaged over trees, normalized to sum 1
// (all zeros when no tree splits). permutation: mean MSE increase over
// `repeats` shuffles of each column, floored at 0.
inline std::vector<double> feature_importance(const TripModel& model, ImportanceMethod method, const TrainingSet& data,
                                              std::uint64_t rng_seed, int repeats = 5) {
  const std::size_t n = model.n_features();
  std::vector<double> scores(n, 0.0);
  if (method == ImportanceMethod::impurity) {
    const std::vector<RegressionTree>* trees = nullptr;
    if (model.kind() == ModelKind::random_forest) trees = &model.as<RandomForest>().trees;
    else if (model.kind() == ModelKind::gradient_boost) trees = &model.as<GradientBoost>().stages;
    else throw InvalidArgument("impurity importance requires a tree-based model, got " + to_string(model.kind()));
    for (const auto& t : *trees) t.accumulate_gain(scores);
    for (double& s : scores) s /= static_cast<double>(trees->size());
    const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
    if (total > 0.0)
      for (double& s : scores) s /= total;
    return scores;
  }

  if (data.empty()) throw InvalidArgument("permutation importance requires evaluation data");
  if (data.n_features() != n) throw InvalidArgument("permutation importance: feature-length mismatch");
  if (repeats < 1) throw InvalidArgument("permutation importance: repeats must be >= 1");
  const double base = mean_squared_error(model, data);
  TrainingSet shuffled = data;
  for (std::size_t j = 0; j < n; ++j) {
    Rng rng(derive_seed(rng_seed, j));
    std::vector<double> column(data.size());
    double increase = 0.0;
    for (int k = 0; k < repeats; ++k) {
      for (std::size_t r = 0; r < data.size(); ++r) column[r] = data.rows[r][j];
      rng.shuffle(column);
      for (std::size_t r = 0; r < data.size(); ++r) shuffled.rows[r][j] = column[r];
      increase += mean_squared_error(model, shuffled) - base;
    }
    for (std::size_t r = 0; r < data.size(); ++r) shuffled.rows[r][j] = data.rows[r][j];
    scores[j] = std::max(0.0, increase / repeats);
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Files and bundles

// Feature columns are every column except `target`, in file order; values
// must be 0 or 1.
inline TrainingSet load_training_set(const std::filesystem::path& path, std::string_view target_column = "target") {
  auto csv = io::read_csv(path);
  const auto ct = csv.column(target_column);
  TrainingSet t;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < csv.header().size(); ++c)
    if (c != ct) {
      cols.push_back(c);
      t.feature_names.push_back(csv.header()[c]);
    }
  for (std::size_t r = 0; r < csv.size(); ++r) {
    std::vector<double> x;
    for (auto c : cols) {
      const double v = csv.number(r, c);
      if (v != 0.0 && v != 1.0) throw csv.error_at(r, "feature '" + csv.header()[c] + "' must be 0 or 1");
      x.push_back(v);
    }
    const double y = csv.number(r, ct);
    if (y < 0 || !std::isfinite(y)) throw csv.error_at(r, "target must be finite and non-negative");
    t.add(std::move(x), y);
  }
  if (t.empty()) throw ParseError(path.string() + ": no observations");
  return t;
}

inline std::vector<double> parse_feature_list(std::string_view s) {
  std::vector<double> out;
  for (const auto& tok : io::split(s, ',')) {
    if (tok == "0") out.push_back(0.0);
    else if (tok == "1") out.push_back(1.0);
    else throw InvalidArgument("feature values must be 0 or 1, got '" + tok + "'");
  }
  return out;
}

inline constexpr int kTripModelFormatVersion = 1;

namespace detail {

inline nlohmann::json tree_to_json(const RegressionTree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes())
    nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value, n.gain, n.samples});
  return nodes;
}

inline RegressionTree tree_from_json(const nlohmann::json& j) {
  std::vector<TreeNode> nodes;
  for (const auto& a : j) {
    TreeNode n;
    n.feature = a.at(0).get<int>();
    n.threshold = a.at(1).get<double>();
    n.left = a.at(2).get<int>();
    n.right = a.at(3).get<int>();
    n.value = a.at(4).get<double>();
    n.gain = a.at(5).get<double>();
    n.samples = a.at(6).get<std::size_t>();
    nodes.push_back(n);
  }
  const auto count = static_cast<int>(nodes.size());
  for (const auto& n : nodes)
    if (n.feature >= 0 && (n.left <= 0 || n.left >= count || n.right <= 0 || n.right >= count))
      throw ParseError("trip model: tree child index out of range");
  return RegressionTree(std::move(nodes));
}

}  // namespace detail

inline nlohmann::json to_json(const TripModel& m) {
  const auto& h = m.hyperparams();
  nlohmann::json j;
  j["format"] = "fourstep-trip-model";
  j["format_version"] = kTripModelFormatVersion;
  j["kind"] = to_string(m.kind());
  j["feature_names"] = m.feature_names();
  j["hyperparams"] = {{"trees", h.trees},
                      {"forest_max_depth", h.forest_max_depth},
                      {"features_per_split", h.features_per_split},
                      {"min_samples_leaf", h.min_samples_leaf},
                      {"stages", h.stages},
                      {"learning_rate", h.learning_rate},
                      {"boost_max_depth", h.boost_max_depth},
                      {"hidden", h.hidden},
                      {"epochs", h.epochs},
                      {"step_size", h.step_size},
                      {"ridge", h.ridge}};
  nlohmann::json p;
  switch (m.kind()) {
    case ModelKind::linear: {
      const auto& lm = m.as<LinearModel>();
      p = {{"intercept", lm.intercept}, {"coef", lm.coef}, {"ridge_used", lm.ridge_used}};
      break;
    }
    case ModelKind::random_forest: {
      p["trees"] = nlohmann::json::array();
      for (const auto& t : m.as<RandomForest>().trees) p["trees"].push_back(detail::tree_to_json(t));
      break;
    }
    case ModelKind::gradient_boost: {
      const auto& g = m.as<GradientBoost>();
      p = {{"initial", g.initial}, {"learning_rate", g.learning_rate}, {"stages", nlohmann::json::array()}};
      for (const auto& t : g.stages) p["stages"].push_back(detail::tree_to_json(t));
      break;
    }
    case ModelKind::mlp: {
      const auto& n = m.as<Mlp>();
      p = {{"inputs", n.inputs}, {"hidden", n.hidden}, {"w1", n.w1}, {"b1", n.b1}, {"w2", n.w2}, {"b2", n.b2},
           {"activation", "tanh"}};
      break;
    }
  }
  j["params"] = std::move(p);
  return j;
}

inline Hyperparams hyperparams_from_json(const nlohmann::json& j, Hyperparams h = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("trees", h.trees);
  get("forest_max_depth", h.forest_max_depth);
  get("features_per_split", h.features_per_split);
  get("min_samples_leaf", h.min_samples_leaf);
  get("stages", h.stages);
  get("learning_rate", h.learning_rate);
  get("boost_max_depth", h.boost_max_depth);
  get("hidden", h.hidden);
  get("epochs", h.epochs);
  get("step_size", h.step_size);
  get("ridge", h.ridge);
  return h;
}

inline TripModel trip_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "fourstep-trip-model") throw ParseError("not a trip model bundle");
    const int version = j.at("format_version").get<int>();
    if (version != kTripModelFormatVersion)
      throw VersionMismatch("trip model format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kTripModelFormatVersion) + ")");
    const auto kind = parse_model_kind(j.at("kind").get<std::string>());
    auto names = j.at("feature_names").get<std::vector<std::string>>();
    const auto hp = hyperparams_from_json(j.at("hyperparams"));
    const auto& p = j.at("params");
    switch (kind) {
      case ModelKind::linear: {
        LinearModel lm;
        lm.intercept = p.at("intercept").get<double>();
        lm.coef = p.at("coef").get<std::vector<double>>();
        lm.ridge_used = p.value("ridge_used", false);
        if (lm.coef.size() != names.size()) throw ParseError("linear model: coefficient count mismatch");
        return TripModel(std::move(names), hp, std::move(lm));
      }
      case ModelKind::random_forest: {
        RandomForest f;
        for (const auto& t : p.at("trees")) f.trees.push_back(detail::tree_from_json(t));
        if (f.trees.empty()) throw ParseError("random forest has no trees");
        return TripModel(std::move(names), hp, std::move(f));
      }
      case ModelKind::gradient_boost: {
        GradientBoost g;
        g.initial = p.at("initial").get<double>();
        g.learning_rate = p.at("learning_rate").get<double>();
        for (const auto& t : p.at("stages")) g.stages.push_back(detail::tree_from_json(t));
        return TripModel(std::move(names), hp, std::move(g));
      }
      case ModelKind::mlp: {
        Mlp n;
        n.inputs = p.at("inputs").get<std::size_t>();
        n.hidden = p.at("hidden").get<std::size_t>();
        n.w1 = p.at("w1").get<std::vector<double>>();
        n.b1 = p.at("b1").get<std::vector<double>>();
        n.w2 = p.at("w2").get<std::vector<double>>();
        n.b2 = p.at("b2").get<double>();
        if (n.inputs != names.size() || n.w1.size() != n.inputs * n.hidden || n.b1.size() != n.hidden ||
            n.w2.size() != n.hidden)
          throw ParseError("mlp: parameter shapes are inconsistent");
        return TripModel(std::move(names), hp, std::move(n));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("trip model bundle: ") + e.what());
  }
  throw ParseError("trip model bundle: unknown kind");
}

inline void save_trip_model(const TripModel& m, const std::filesystem::path& path) {
  io::write_file(path, to_json(m).dump(1) + "\n");
}

inline TripModel load_trip_model(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return trip_model_from_json(j);
}

}  // namespace fourstep::tripgen

#pragma once

// Mode choice with a categorical Naive Bayes classifier:
// P(T | D_1..D_n) ∝ P(T) * prod_i P(D_i | T), fitted by smoothed counting.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"

namespace fourstep::modechoice {

inline std::vector<std::string> default_modes() { return {"transit", "drive", "walk"}; }

struct LabeledRecord {
  std::vector<int> features;  // category index per feature
  std::string mode;
};

class NBModel {
 public:
  NBModel() = default;

  // likelihood[f][v][m] = P(D_f = v | mode m).
  NBModel(std::vector<std::string> modes, std::vector<std::string> feature_names, std::vector<int> value_counts,
          double alpha, std::vector<double> priors, std::vector<std::vector<std::vector<double>>> likelihood)
      : modes_(std::move(modes)), feature_names_(std::move(feature_names)), value_counts_(std::move(value_counts)),
        alpha_(alpha), priors_(std::move(priors)), likelihood_(std::move(likelihood)) {
    if (modes_.empty()) throw InvalidArgument("naive bayes: empty mode set");
    if (priors_.size() != modes_.size()) throw InvalidArgument("naive bayes: prior count differs from mode count");
    if (feature_names_.size() != value_counts_.size() || likelihood_.size() != value_counts_.size())
      throw InvalidArgument("naive bayes: feature tables are inconsistent");
    for (std::size_t f = 0; f < likelihood_.size(); ++f) {
      if (value_counts_[f] < 1 || likelihood_[f].size() != static_cast<std::size_t>(value_counts_[f]))
        throw InvalidArgument("naive bayes: likelihood table shape mismatch for feature " + std::to_string(f));
      for (const auto& row : likelihood_[f])
        if (row.size() != modes_.size()) throw InvalidArgument("naive bayes: likelihood row has wrong mode count");
    }
  }

  const std::vector<std::string>& modes() const { return modes_; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  const std::vector<int>& value_counts() const { return value_counts_; }
  std::size_t n_features() const { return feature_names_.size(); }
  double alpha() const { return alpha_; }
  const std::vector<double>& priors() const { return priors_; }
  double likelihood(std::size_t feature, int value, std::size_t mode) const {
    return likelihood_.at(feature).at(static_cast<std::size_t>(value)).at(mode);
  }
  const std::vector<std::vector<std::vector<double>>>& likelihoods() const { return likelihood_; }

  std::size_t mode_index(const std::string& m) const {
    auto it = std::find(modes_.begin(), modes_.end(), m);
    if (it == modes_.end()) throw InvalidArgument("label '" + m + "' is not in the mode set");
    return static_cast<std::size_t>(it - modes_.begin());
  }

 private:
  std::vector<std::string> modes_;
  std::vector<std::string> feature_names_;
  std::vector<int> value_counts_;
  double alpha_ = 1.0;
  std::vector<double> priors_;
  std::vector<std::vector<std::vector<double>>> likelihood_;
};

// priors = (count(T) + a) / (N + a |modes|)
// P(D_i = v | T) = (count(D_i = v, T) + a) / (count(T) + a |values of D_i|)
// A mode with no records and a = 0 gets a uniform conditional table.
inline NBModel fit_nb(const std::vector<LabeledRecord>& records, std::vector<std::string> modes, double alpha,
                      std::vector<std::string> feature_names = {}, std::vector<int> value_counts = {}) {
  if (records.empty()) throw InvalidArgument("fit_nb: no training records");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("fit_nb: smoothing must be finite and >= 0");
  if (modes.empty()) throw InvalidArgument("fit_nb: empty mode set");
  const std::size_t nf = records.front().features.size();
  if (feature_names.empty())
    for (std::size_t f = 0; f < nf; ++f) feature_names.push_back("x" + std::to_string(f + 1));
  if (value_counts.empty()) value_counts.assign(nf, 2);
  if (feature_names.size() != nf || value_counts.size() != nf)
    throw InvalidArgument("fit_nb: feature metadata does not match record arity");

  const std::size_t nm = modes.size();
  std::vector<double> mode_count(nm, 0.0);
  std::vector<std::vector<std::vector<double>>> joint(nf);
  for (std::size_t f = 0; f < nf; ++f)
    joint[f].assign(static_cast<std::size_t>(value_counts[f]), std::vector<double>(nm, 0.0));

  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    auto it = std::find(modes.begin(), modes.end(), rec.mode);
    if (it == modes.end()) throw InvalidArgument("fit_nb: record " + std::to_string(r) + " has unknown label '" + rec.mode + "'");
    const auto m = static_cast<std::size_t>(it - modes.begin());
    if (rec.features.size() != nf) throw InvalidArgument("fit_nb: record " + std::to_string(r) + " has wrong arity");
    mode_count[m] += 1.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const int v = rec.features[f];
      if (v < 0 || v >= value_counts[f])
        throw InvalidArgument("fit_nb: record " + std::to_string(r) + " feature " + std::to_string(f) + " value out of range");
      joint[f][static_cast<std::size_t>(v)][m] += 1.0;
    }
  }

  const double n = static_cast<double>(records.size());
  std::vector<double> priors(nm);
  for (std::size_t m = 0; m < nm; ++m) priors[m] = (mode_count[m] + alpha) / (n + alpha * static_cast<double>(nm));
  for (std::size_t f = 0; f < nf; ++f) {
    const double k = value_counts[f];
    for (std::size_t m = 0; m < nm; ++m) {
      const double denom = mode_count[m] + alpha * k;
      for (auto& row : joint[f]) row[m] = denom > 0.0 ? (row[m] + alpha) / denom : 1.0 / k;
    }
  }
  return NBModel(std::move(modes), std::move(feature_names), std::move(value_counts), alpha, std::move(priors),
                 std::move(joint));
}

inline void check_arity(const NBModel& model, std::span<const int> x) {
  if (x.size() != model.n_features())
    throw InvalidArgument("naive bayes: profile has " + std::to_string(x.size()) + " features, model expects " +
                          std::to_string(model.n_features()));
  for (std::size_t f = 0; f < x.size(); ++f)
    if (x[f] < 0 || x[f] >= model.value_counts()[f])
      throw InvalidArgument("naive bayes: feature " + std::to_string(f) + " value out of range");
}

// Log-space scores with max-shift normalization. Zero-probability modes get
// exactly 0.
inline std::vector<double> posterior(const NBModel& model, std::span<const int> x) {
  check_arity(model, x);
  const std::size_t nm = model.modes().size();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> score(nm);
  for (std::size_t m = 0; m < nm; ++m) {
    double s = model.priors()[m] > 0.0 ? std::log(model.priors()[m]) : kNegInf;
    for (std::size_t f = 0; f < x.size() && s > kNegInf; ++f) {
      const double l = model.likelihood(f, x[f], m);
      s = l > 0.0 ? s + std::log(l) : kNegInf;
    }
    score[m] = s;
  }
  const double top = *std::max_element(score.begin(), score.end());
  if (top == kNegInf) throw InvalidArgument("naive bayes: every mode has zero probability for this profile");
  double z = 0.0;
  for (double& s : score) z += (s = s == kNegInf ? 0.0 : std::exp(s - top));
  for (double& s : score) s /= z;
  return score;
}

// Argmax; ties keep the earlier mode in declared order.
inline std::size_t argmax_mode(std::span<const double> post) {
  std::size_t best = 0;
  for (std::size_t m = 1; m < post.size(); ++m)
    if (post[m] > post[best]) best = m;
  return best;
}

inline std::string predict_mode(const NBModel& model, std::span<const int> x) {
  const auto p = posterior(model, x);
  return model.modes()[argmax_mode(p)];
}

inline std::vector<int> to_categories(std::span<const double> x) {
  std::vector<int> out;
  out.reserve(x.size());
  for (double v : x) {
    const double r = std::round(v);
    if (r != v || r < 0) throw InvalidArgument("naive bayes: feature values must be non-negative integers");
    out.push_back(static_cast<int>(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

struct ModeTrainingData {
  std::vector<std::string> feature_names;
  std::vector<LabeledRecord> records;
};

// Feature columns are every column but `mode`; binary 0/1 values.
inline ModeTrainingData load_mode_training(const std::filesystem::path& path) {
  auto csv = io::read_csv(path);
  const auto cm = csv.column("mode");
  ModeTrainingData d;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < csv.header().size(); ++c)
    if (c != cm) {
      cols.push_back(c);
      d.feature_names.push_back(csv.header()[c]);
    }
  for (std::size_t r = 0; r < csv.size(); ++r) {
    LabeledRecord rec;
    for (auto c : cols) {
      const auto v = csv.integer(r, c);
      if (v != 0 && v != 1) throw csv.error_at(r, "feature '" + csv.header()[c] + "' must be 0 or 1");
      rec.features.push_back(static_cast<int>(v));
    }
    rec.mode = std::string(csv.cell(r, cm));
    d.records.push_back(std::move(rec));
  }
  if (d.records.empty()) throw ParseError(path.string() + ": no training records");
  return d;
}

inline constexpr int kModeModelFormatVersion = 1;

inline nlohmann::json to_json(const NBModel& m) {
  return {{"format", "fourstep-mode-model"},
          {"format_version", kModeModelFormatVersion},
          {"modes", m.modes()},
          {"feature_names", m.feature_names()},
          {"value_counts", m.value_counts()},
          {"alpha", m.alpha()},
          {"priors", m.priors()},
          {"likelihoods", m.likelihoods()}};
}

inline NBModel nb_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "fourstep-mode-model") throw ParseError("not a mode model bundle");
    const int version = j.at("format_version").get<int>();
    if (version != kModeModelFormatVersion)
      throw VersionMismatch("mode model format version " + std::to_string(version) + " is not supported");
    return NBModel(j.at("modes").get<std::vector<std::string>>(), j.at("feature_names").get<std::vector<std::string>>(),
                   j.at("value_counts").get<std::vector<int>>(), j.at("alpha").get<double>(),
                   j.at("priors").get<std::vector<double>>(),
                   j.at("likelihoods").get<std::vector<std::vector<std::vector<double>>>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mode model bundle: ") + e.what());
  }
}

inline void save_nb_model(const NBModel& m, const std::filesystem::path& path) {
  io::write_file(path, to_json(m).dump(1) + "\n");
}

inline NBModel load_nb_model(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return nb_model_from_json(j);
}

}  // namespace fourstep::modechoice

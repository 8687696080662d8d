#pragma once

// Image representation (2-level spatial pyramid of max detector scores plus
// the holistic embedding) and the final one-vs-rest linear classifiers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deepcamp/container.hpp"
#include "deepcamp/core.hpp"
#include "deepcamp/datamodel.hpp"
#include "deepcamp/embednet.hpp"

namespace deepcamp {

/// 1x1 and 2x2 levels: region 0 is the whole box, regions 1..4 the quadrants
/// (top-left, top-right, bottom-left, bottom-right). A patch belongs to the
/// quadrant holding its center; centers on a midline go to the lower/right
/// quadrant.
struct PyramidConfig {
  static constexpr int kRegions = 5;
  int resize_side = 64;

  static std::size_t pyramid_length(std::size_t total_clusters) { return kRegions * total_clusters; }

  int quadrant(double center_row, double center_col) const {
    const double half = resize_side / 2.0;
    const int qr = center_row < half ? 0 : 1;
    const int qc = center_col < half ? 0 : 1;
    return 1 + 2 * qr + qc;
  }
};

/// Where a patch sits and its score under every detector (columns in the
/// global cluster order).
struct ScoredPatch {
  double center_row = 0.0;
  double center_col = 0.0;
  std::span<const double> scores;
};

inline constexpr double kEmptyRegionMargin = 1.0;

/// Pyramid entry (region r, cluster j) at index r * K + j, followed by the
/// holistic embedding.
inline std::vector<double> encode(const std::vector<ScoredPatch>& patches, std::size_t total_clusters,
                                  std::span<const double> holistic, const PyramidConfig& pyr) {
  if (patches.empty()) throw PreconditionError("encode: sample has no patches");
  const std::size_t K = total_clusters;
  const double lowest = std::numeric_limits<double>::lowest();
  std::vector<double> rep(PyramidConfig::kRegions * K + holistic.size(), lowest);
  std::vector<double> floor(K, std::numeric_limits<double>::infinity());
  std::vector<bool> filled(PyramidConfig::kRegions * K, false);
  for (const auto& p : patches) {
    if (p.scores.size() != K) throw PreconditionError("encode: score vector length differs from cluster count");
    const int q = pyr.quadrant(p.center_row, p.center_col);
    for (std::size_t j = 0; j < K; ++j) {
      const double s = p.scores[j];
      floor[j] = std::min(floor[j], s);
      for (int r : {0, q}) {
        auto& cell = rep[r * K + j];
        cell = std::max(cell, s);
        filled[r * K + j] = true;
      }
    }
  }
  for (int r = 0; r < PyramidConfig::kRegions; ++r)
    for (std::size_t j = 0; j < K; ++j)
      if (!filled[r * K + j]) rep[r * K + j] = floor[j] - kEmptyRegionMargin;
  std::copy(holistic.begin(), holistic.end(), rep.begin() + static_cast<std::ptrdiff_t>(PyramidConfig::kRegions * K));
  return rep;
}

// ---------------------------------------------------------------------------
// Linear classifiers

/// Per-class supervision for the final classifier: +1 positive, -1 negative,
/// 0 ignored. For Action mode build it one-vs-rest from the class index.
using ClassTargets = std::vector<std::vector<std::int8_t>>;  // [sample][class]

inline ClassTargets one_vs_rest(const std::vector<int>& labels, int classes) {
  ClassTargets t(labels.size(), std::vector<std::int8_t>(classes, -1));
  for (std::size_t i = 0; i < labels.size(); ++i) t[i][labels[i]] = 1;
  return t;
}

struct ClassifierConfig {
  double reg = 1e-3;
  int epochs = 40;
  double eta0 = 0.05;
  std::uint64_t seed = 11;
};

struct LinearClassifier {
  Mode mode = Mode::Action;
  double reg = 0.0;
  std::vector<double> mean, scale;          // standardization
  std::vector<std::vector<double>> weights;  // [class][dim]
  std::vector<double> bias;
  std::vector<bool> trained;  // false for classes skipped for lack of positives/negatives

  std::size_t dim() const { return mean.size(); }
  std::size_t classes() const { return weights.size(); }

  friend bool operator==(const LinearClassifier&, const LinearClassifier&) = default;
};

/// One-vs-rest L2-regularized hinge loss by SGD with step
/// eta_t = eta0 / (1 + eta0 * reg * t), eta0 capped at 1/reg. Features are
/// standardized with train-split statistics. Entries labeled 0 are skipped.
inline LinearClassifier train_classifier(const std::vector<std::vector<double>>& reps, const ClassTargets& targets,
                                         Mode mode, const ClassifierConfig& cfg,
                                         std::vector<std::string>* warnings = nullptr) {
  if (reps.empty() || reps.size() != targets.size()) throw PreconditionError("train_classifier: reps/targets mismatch");
  require_config(cfg.reg > 0.0, "classifier: reg must be > 0");
  require_config(cfg.epochs >= 1, "classifier: epochs must be >= 1");
  const std::size_t n = reps.size(), d = reps[0].size(), C = targets[0].size();
  LinearClassifier m;
  m.mode = mode;
  m.reg = cfg.reg;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 1.0);
  for (const auto& r : reps) {
    if (r.size() != d) throw PreconditionError("train_classifier: representation lengths differ");
    for (std::size_t k = 0; k < d; ++k) m.mean[k] += r[k];
  }
  for (auto& v : m.mean) v /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (const auto& r : reps)
    for (std::size_t k = 0; k < d; ++k) var[k] += (r[k] - m.mean[k]) * (r[k] - m.mean[k]);
  for (std::size_t k = 0; k < d; ++k) {
    const double sd = std::sqrt(var[k] / static_cast<double>(n));
    m.scale[k] = sd > 1e-12 ? sd : 1.0;
  }
  std::vector<std::vector<double>> X(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) X[i][k] = (reps[i][k] - m.mean[k]) / m.scale[k];

  if (mode == Mode::Action) {
    std::size_t present = 0;
    for (std::size_t c = 0; c < C; ++c)
      present += std::any_of(targets.begin(), targets.end(), [&](const auto& t) { return t[c] > 0; });
    if (present < 2) throw PreconditionError("train_classifier: fewer than 2 classes present");
  }

  m.weights.assign(C, std::vector<double>(d, 0.0));
  m.bias.assign(C, 0.0);
  m.trained.assign(C, false);
  const double eta0 = std::min(cfg.eta0, 1.0 / cfg.reg);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> idx;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = targets[i][c];
      if (y == 0) continue;
      idx.push_back(i);
      has_pos = has_pos || y > 0;
      has_neg = has_neg || y < 0;
    }
    if (!has_pos || !has_neg) {
      if (warnings) warnings->push_back("class " + std::to_string(c) + " skipped: needs a positive and a negative");
      continue;
    }
    m.trained[c] = true;
    auto& w = m.weights[c];
    double& b = m.bias[c];
    Rng rng(derive_seed(cfg.seed, c));
    double t = 0.0;
    for (int e = 0; e < cfg.epochs; ++e) {
      rng.shuffle(idx);
      for (auto i : idx) {
        const double eta = eta0 / (1.0 + eta0 * cfg.reg * t);
        const double y = targets[i][c] > 0 ? 1.0 : -1.0;
        const double margin = y * (dot(w, X[i]) + b);
        const double shrink = 1.0 - eta * cfg.reg;
        for (auto& v : w) v *= shrink;
        if (margin < 1.0) {
          for (std::size_t k = 0; k < d; ++k) w[k] += eta * y * X[i][k];
          b += eta * y;
        }
        t += 1.0;
      }
    }
  }
  return m;
}

inline std::vector<double> predict(const LinearClassifier& m, std::span<const double> rep) {
  if (rep.size() != m.dim()) {
    throw PreconditionError("predict: representation length " + std::to_string(rep.size()) + " != classifier dim " +
                            std::to_string(m.dim()));
  }
  std::vector<double> x(rep.size());
  for (std::size_t k = 0; k < rep.size(); ++k) x[k] = (rep[k] - m.mean[k]) / m.scale[k];
  std::vector<double> s(m.classes());
  for (std::size_t c = 0; c < m.classes(); ++c) s[c] = dot(m.weights[c], x) + m.bias[c];
  return s;
}

inline int predict_label(const LinearClassifier& m, std::span<const double> rep) {
  const auto s = predict(m, rep);
  return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
}

inline void write_classifier(Container& c, const std::string& prefix, const LinearClassifier& m) {
  c.put_int(prefix + ".mode", m.mode == Mode::Action ? 0 : 1);
  c.put_scalar(prefix + ".reg", m.reg);
  c.put_f64(prefix + ".mean", m.mean);
  c.put_f64(prefix + ".scale", m.scale);
  std::vector<double> w;
  for (const auto& row : m.weights) w.insert(w.end(), row.begin(), row.end());
  c.put_f64(prefix + ".weights", w, {m.weights.size(), m.mean.size()});
  c.put_f64(prefix + ".bias", m.bias);
  std::vector<std::int64_t> tr(m.trained.begin(), m.trained.end());
  c.put_i64(prefix + ".trained", tr);
}

inline LinearClassifier read_classifier(const Container& c, const std::string& prefix) {
  LinearClassifier m;
  m.mode = c.integer(prefix + ".mode") == 0 ? Mode::Action : Mode::Attribute;
  m.reg = c.scalar(prefix + ".reg");
  m.mean = c.f64(prefix + ".mean");
  m.scale = c.f64(prefix + ".scale");
  m.bias = c.f64(prefix + ".bias");
  const auto& w = c.f64(prefix + ".weights");
  const std::size_t d = m.mean.size(), C = m.bias.size();
  if (m.scale.size() != d || w.size() != C * d) throw FormatError("classifier: inconsistent shapes");
  for (std::size_t k = 0; k < C; ++k) m.weights.emplace_back(w.begin() + k * d, w.begin() + (k + 1) * d);
  for (auto v : c.i64(prefix + ".trained")) m.trained.push_back(v != 0);
  if (m.trained.size() != C) throw FormatError("classifier: inconsistent shapes");
  return m;
}

}  // namespace deepcamp

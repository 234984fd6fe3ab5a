#pragma once

// ROC/AUC, threshold metrics, best-threshold selection and report rendering.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "graftnet/error.hpp"

namespace graftnet {

using json = nlohmann::json;

struct ScoredSet {
  std::vector<double> scores;  // positive-class probability
  std::vector<int> labels;     // 0 or 1
  std::string attribute;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
  std::size_t negatives() const { return labels.size() - positives(); }

  void validate() const {
    if (scores.size() != labels.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "scored set '" + attribute + "' has " + std::to_string(scores.size()) +
                      " scores but " + std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l != 0 && l != 1) {
        throw Error(ErrorCode::kInvalidArgument, "labels must be 0 or 1");
      }
    }
    for (double s : scores) {
      if (!std::isfinite(s)) throw Error(ErrorCode::kNonFinite, "non-finite score");
    }
  }
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // +inf for the (0,0) point
};

/// One point per distinct score (descending), after the (0,0) point. Tied
/// scores move together, so the lowest threshold lands on (1,1).
inline std::vector<RocPoint> roc_curve(const ScoredSet& set) {
  set.validate();
  const double pos = static_cast<double>(set.positives());
  const double neg = static_cast<double>(set.negatives());
  if (pos == 0 || neg == 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "ROC of '" + set.attribute + "' needs both positive and negative labels");
  }
  std::vector<std::size_t> order(set.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = set.scores[order[i]];
    for (; i < order.size() && set.scores[order[i]] == thr; ++i)
      (set.labels[order[i]] == 1 ? tp : fp)++;
    curve.push_back({fp / neg, tp / pos, thr});
  }
  return curve;
}

/// Trapezoidal area under a curve sorted by FPR.
inline double auc(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  return area;
}

inline double auc(const ScoredSet& set) { return auc(roc_curve(set)); }

struct MetricRow {
  double threshold = 0.0;
  double accuracy = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  double fpr = 0.0;
  bool no_positive_predictions = false;  // precision reported as 1.0
};

inline MetricRow threshold_metrics(const ScoredSet& set, double thr) {
  set.validate();
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < set.scores.size(); ++i) {
    const bool predicted = set.scores[i] >= thr;
    if (set.labels[i] == 1) {
      (predicted ? tp : fn)++;
    } else {
      (predicted ? fp : tn)++;
    }
  }
  MetricRow r;
  r.threshold = thr;
  const double n = static_cast<double>(set.scores.size());
  r.accuracy = n > 0 ? (tp + tn) / n : 0.0;
  r.no_positive_predictions = tp + fp == 0;
  r.precision = r.no_positive_predictions ? 1.0 : static_cast<double>(tp) / (tp + fp);
  r.recall = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.fpr = fp + tn ? static_cast<double>(fp) / (fp + tn) : 0.0;
  return r;
}

enum class Criterion { kYouden, kAccuracy, kF1 };

inline std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::kYouden: return "youden";
    case Criterion::kAccuracy: return "accuracy";
    case Criterion::kF1: return "f1";
  }
  return "?";
}

inline Criterion parse_criterion(const std::string& s) {
  for (auto c : {Criterion::kYouden, Criterion::kAccuracy, Criterion::kF1})
    if (to_string(c) == s) return c;
  throw Error(ErrorCode::kInvalidArgument, "unknown criterion '" + s + "' (youden|accuracy|f1)");
}

inline double criterion_value(const MetricRow& r, Criterion c) {
  switch (c) {
    case Criterion::kYouden: return r.recall - r.fpr;
    case Criterion::kAccuracy: return r.accuracy;
    case Criterion::kF1:
      return r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall)
                                        : 0.0;
  }
  return 0.0;
}

/// Scans every distinct score as a threshold; ties go to the higher threshold.
inline MetricRow best_threshold(const ScoredSet& set, Criterion criterion) {
  set.validate();
  if (set.scores.empty()) throw Error(ErrorCode::kInvalidArgument, "empty scored set");
  std::vector<double> thresholds = set.scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  MetricRow best = threshold_metrics(set, thresholds.front());
  double best_value = criterion_value(best, criterion);
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    const auto row = threshold_metrics(set, thresholds[i]);
    const double v = criterion_value(row, criterion);
    if (v > best_value) {
      best = row;
      best_value = v;
    }
  }
  return best;
}

struct TopKResult {
  std::size_t selected = 0;
  std::size_t false_positives = 0;
};

/// Counts negatives among the k highest scores; ties keep input order.
inline TopKResult top_k_false_positives(const ScoredSet& set, std::size_t k) {
  set.validate();
  if (k > set.scores.size()) {
    throw Error(ErrorCode::kOutOfRange, "k=" + std::to_string(k) + " exceeds " +
                                            std::to_string(set.scores.size()) + " samples");
  }
  std::vector<std::size_t> order(set.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  TopKResult r{k, 0};
  for (std::size_t i = 0; i < k; ++i) r.false_positives += set.labels[order[i]] == 0;
  return r;
}

// ---------------------------------------------------------------------------
// Rendering.

inline std::string format_threshold(double thr) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", thr);
  return buf;
}

/// "0.4, 0.9760, 0.9201, 0.9042, 0.0208"
inline std::string render_row(const MetricRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s, %.4f, %.4f, %.4f, %.4f", format_threshold(r.threshold).c_str(),
                r.accuracy, r.precision, r.recall, r.fpr);
  return buf;
}

struct AttributeReport {
  std::string name;  // attribute, or "attribute:class" for one-vs-rest
  std::vector<RocPoint> roc;
  double auc = 0.0;
  MetricRow best;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

struct EvaluationReport {
  Criterion criterion = Criterion::kYouden;
  std::vector<AttributeReport> attributes;
  json metadata = json::object();
};

inline AttributeReport evaluate_set(const ScoredSet& set, Criterion criterion) {
  AttributeReport r;
  r.name = set.attribute;
  r.roc = roc_curve(set);
  r.auc = auc(r.roc);
  r.best = best_threshold(set, criterion);
  r.positives = set.positives();
  r.negatives = set.negatives();
  return r;
}

/// Metric table layout: "Attribute, THR, Acc., Prec., Rec., FPR, AUC".
inline std::string render_table(const EvaluationReport& report) {
  std::ostringstream os;
  os << "Attribute, THR, Acc., Prec., Rec., FPR, AUC\n";
  for (const auto& a : report.attributes) {
    char auc_buf[32];
    std::snprintf(auc_buf, sizeof(auc_buf), "%.4f", a.auc);
    os << a.name << ", " << render_row(a.best) << ", " << auc_buf;
    if (a.best.no_positive_predictions) os << " (no positive predictions)";
    os << '\n';
  }
  return os.str();
}

inline json report_to_json(const EvaluationReport& report) {
  json attrs = json::array();
  for (const auto& a : report.attributes) {
    json roc = json::array();
    for (const auto& p : a.roc)
      roc.push_back({p.fpr, p.tpr, std::isinf(p.threshold) ? json("inf") : json(p.threshold)});
    attrs.push_back({{"attribute", a.name},
                     {"auc", a.auc},
                     {"positives", a.positives},
                     {"negatives", a.negatives},
                     {"best",
                      {{"threshold", a.best.threshold},
                       {"accuracy", a.best.accuracy},
                       {"precision", a.best.precision},
                       {"recall", a.best.recall},
                       {"fpr", a.best.fpr},
                       {"no_positive_predictions", a.best.no_positive_predictions}}},
                     {"roc", roc}});
  }
  return json{{"criterion", to_string(report.criterion)},
              {"attributes", attrs},
              {"metadata", report.metadata}};
}

/// "fpr,tpr,threshold" rows; the (0,0) point carries threshold "inf".
inline std::string render_roc_csv(const std::vector<RocPoint>& curve) {
  std::ostringstream os;
  os << "fpr,tpr,threshold\n";
  char buf[96];
  for (const auto& p : curve) {
    if (std::isinf(p.threshold)) {
      std::snprintf(buf, sizeof(buf), "%.10g,%.10g,inf\n", p.fpr, p.tpr);
    } else {
      std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g\n", p.fpr, p.tpr, p.threshold);
    }
    os << buf;
  }
  return os.str();
}

struct TopKRow {
  std::string name;
  std::size_t selected = 0;
  std::size_t false_positives = 0;
};

/// Top-K table layout: "Method, Selected, False positives".
inline std::string render_top_k_table(const std::vector<TopKRow>& rows) {
  std::ostringstream os;
  os << "Method, Selected, False positives\n";
  for (const auto& r : rows) os << r.name << ", " << r.selected << ", " << r.false_positives << '\n';
  return os.str();
}

/// Binary sets for an attribute's probabilities [N x K]: class 1 vs rest
/// for K = 2, one set per class otherwise.
inline std::vector<ScoredSet> one_vs_rest_sets(const std::string& attribute,
                                               const std::vector<std::string>& classes,
                                               std::span<const float> probs,
                                               const std::vector<int>& labels) {
  const std::size_t k = classes.size();
  if (probs.size() != labels.size() * k) {
    throw Error(ErrorCode::kShapeMismatch, "probability matrix does not match label count");
  }
  std::vector<ScoredSet> out;
  const std::size_t first = k == 2 ? 1 : 0;
  for (std::size_t c = first; c < k; ++c) {
    ScoredSet s;
    s.attribute = k == 2 ? attribute : attribute + ":" + classes[c];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.scores.push_back(probs[i * k + c]);
      s.labels.push_back(labels[i] == static_cast<int>(c) ? 1 : 0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Mean one-vs-rest AUC; the plain AUC for 2-class attributes.
inline double macro_auc(const std::vector<ScoredSet>& sets) {
  double sum = 0.0;
  for (const auto& s : sets) sum += auc(s);
  return sets.empty() ? 0.0 : sum / static_cast<double>(sets.size());
}

}  // namespace graftnet

#pragma once

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cksp {

/// k x k counts; rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}

  std::size_t k() const { return k_; }
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * k_ + pred); }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }

  std::size_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }
  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, i);
    return t;
  }
  std::size_t row_sum(std::size_t r) const {
    std::size_t s = 0;
    for (std::size_t c = 0; c < k_; ++c) s += at(r, c);
    return s;
  }
  std::size_t col_sum(std::size_t c) const {
    std::size_t s = 0;
    for (std::size_t r = 0; r < k_; ++r) s += at(r, c);
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw std::invalid_argument("confusion matrices differ in size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  /// Row-normalized percentages (recall view); empty rows are all zero.
  std::vector<std::vector<double>> row_percentages() const {
    std::vector<std::vector<double>> out(k_, std::vector<double>(k_, 0.0));
    for (std::size_t r = 0; r < k_; ++r) {
      const std::size_t n = row_sum(r);
      if (n == 0) continue;
      for (std::size_t c = 0; c < k_; ++c) out[r][c] = 100.0 * static_cast<double>(at(r, c)) / static_cast<double>(n);
    }
    return out;
  }

  std::string to_percentage_csv(const std::vector<std::string>& class_names = {}) const {
    auto name = [&](std::size_t i) { return i < class_names.size() ? class_names[i] : std::to_string(i); };
    std::ostringstream os;
    os << "true\\pred";
    for (std::size_t c = 0; c < k_; ++c) os << ',' << name(c);
    os << '\n';
    const auto pct = row_percentages();
    for (std::size_t r = 0; r < k_; ++r) {
      os << name(r);
      for (std::size_t c = 0; c < k_; ++c) os << ',' << pct[r][c];
      os << '\n';
    }
    return os.str();
  }

  std::vector<std::vector<std::size_t>> rows() const {
    std::vector<std::vector<std::size_t>> out(k_);
    for (std::size_t r = 0; r < k_; ++r)
      for (std::size_t c = 0; c < k_; ++c) out[r].push_back(at(r, c));
    return out;
  }

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

enum class Averaging { Macro, Weighted };

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  ConfusionMatrix confusion;
  std::size_t zero_divisions = 0;  // 0/0 precision or recall ratios reported as 0
};

inline Metrics metrics_from_confusion(const ConfusionMatrix& cm, Averaging avg = Averaging::Macro) {
  const std::size_t k = cm.k();
  Metrics m;
  m.confusion = cm;
  const std::size_t total = cm.total();
  m.accuracy = total == 0 ? 0.0 : static_cast<double>(cm.trace()) / static_cast<double>(total);
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      ++m.zero_divisions;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  double wsum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics cls;
    cls.support = cm.row_sum(c);
    cls.precision = ratio(cm.at(c, c), cm.col_sum(c));
    cls.recall = ratio(cm.at(c, c), cls.support);
    const double pr = cls.precision + cls.recall;
    cls.f1 = pr > 0.0 ? 2.0 * cls.precision * cls.recall / pr : 0.0;
    const double w = avg == Averaging::Macro ? 1.0 : static_cast<double>(cls.support);
    m.precision += w * cls.precision;
    m.recall += w * cls.recall;
    m.f1 += w * cls.f1;
    wsum += w;
    m.per_class.push_back(cls);
  }
  if (wsum > 0.0) {
    m.precision /= wsum;
    m.recall /= wsum;
    m.f1 /= wsum;
  }
  return m;
}

inline Metrics compute_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred, std::size_t k,
                               Averaging avg = Averaging::Macro) {
  if (truth.size() != pred.size()) throw std::invalid_argument("compute_metrics: label arrays differ in length");
  if (k == 0) throw std::invalid_argument("compute_metrics: need at least one class");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || pred[i] >= k) {
      throw std::out_of_range("compute_metrics: label out of range at position " + std::to_string(i));
    }
    ++cm.at(truth[i], pred[i]);
  }
  return metrics_from_confusion(cm, avg);
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : m.per_class) {
    per_class.push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
  }
  return {{"accuracy", m.accuracy},   {"precision", m.precision},
          {"recall", m.recall},       {"f1", m.f1},
          {"per_class", per_class},   {"confusion", m.confusion.rows()},
          {"zero_divisions", m.zero_divisions}};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

}  // namespace cksp

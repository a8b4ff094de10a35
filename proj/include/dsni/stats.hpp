#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dsni/errors.hpp"

namespace dsni {

// --- intraclass correlation ------------------------------------------------------

// One-way random-effects ICC(1,1):
//   (MS_between - MS_within) / (MS_between + (k - 1) MS_within)
// `ratings` is n_subjects x k_raters with no missing cells; may be negative.
inline double icc(const std::vector<std::vector<double>>& ratings) {
  const std::size_t n = ratings.size();
  if (n < 2) throw ConfigError("icc needs at least two subjects");
  const std::size_t k = ratings[0].size();
  if (k < 2) throw ConfigError("icc needs at least two raters");
  for (const auto& row : ratings)
    if (row.size() != k) throw ShapeError("icc: ragged ratings matrix");

  double grand = 0.0;
  std::vector<double> subject_mean(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (double v : ratings[i]) subject_mean[i] += v;
    subject_mean[i] /= static_cast<double>(k);
    grand += subject_mean[i];
  }
  grand /= static_cast<double>(n);

  double ss_between = 0.0, ss_within = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = subject_mean[i] - grand;
    ss_between += d * d;
    for (double v : ratings[i]) {
      const double w = v - subject_mean[i];
      ss_within += w * w;
    }
  }
  const double ms_between =
      static_cast<double>(k) * ss_between / static_cast<double>(n - 1);
  const double ms_within =
      ss_within / static_cast<double>(n * (k - 1));
  const double denom = ms_between + static_cast<double>(k - 1) * ms_within;
  if (denom == 0.0)
    throw NumericalError("icc undefined: zero total variance");
  return (ms_between - ms_within) / denom;
}

// --- Wilcoxon rank-sum ------------------------------------------------------------

namespace stats_detail {

inline double normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

}  // namespace stats_detail

// Two-sided Wilcoxon rank-sum on ordinal score histograms (midranks for
// ties). Default: tie-corrected normal approximation with continuity
// correction; exact enumeration over the tied-rank distribution for small
// groups when `exact` is set.
inline double wilcoxon_ranksum(const std::vector<std::int64_t>& x_counts,
                               const std::vector<std::int64_t>& y_counts,
                               bool exact = false) {
  if (x_counts.size() != y_counts.size())
    throw ShapeError("wilcoxon: histograms need equal level counts");
  const std::size_t levels = x_counts.size();
  std::int64_t n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < levels; ++i) {
    if (x_counts[i] < 0 || y_counts[i] < 0)
      throw ConfigError("wilcoxon: negative count");
    n1 += x_counts[i];
    n2 += y_counts[i];
  }
  if (n1 == 0 || n2 == 0) throw ConfigError("wilcoxon: empty group");
  const std::int64_t n = n1 + n2;

  // midrank per level
  std::vector<double> midrank(levels, 0.0);
  std::vector<std::int64_t> tie(levels, 0);
  std::int64_t before = 0;
  for (std::size_t i = 0; i < levels; ++i) {
    tie[i] = x_counts[i] + y_counts[i];
    midrank[i] = static_cast<double>(before) +
                 (static_cast<double>(tie[i]) + 1.0) / 2.0;
    before += tie[i];
  }

  double w = 0.0;  // rank sum of group x
  for (std::size_t i = 0; i < levels; ++i)
    w += static_cast<double>(x_counts[i]) * midrank[i];
  const double mean_w = static_cast<double>(n1) *
                        (static_cast<double>(n) + 1.0) / 2.0;

  if (exact) {
    if (n1 > 20 || n2 > 20)
      throw ConfigError("exact wilcoxon limited to groups of <= 20");
    // DP over score levels; states keyed by (#chosen for group x, 2*ranksum)
    // with the number of ways as the value. Doubled ranksums keep the keys
    // integral under midranks.
    std::map<std::pair<std::int64_t, std::int64_t>, double> states{
        {{0, 0}, 1.0}};
    const auto binom = [](std::int64_t nn, std::int64_t kk) {
      double r = 1.0;
      for (std::int64_t i = 1; i <= kk; ++i)
        r = r * static_cast<double>(nn - kk + i) / static_cast<double>(i);
      return r;
    };
    for (std::size_t lv = 0; lv < levels; ++lv) {
      std::map<std::pair<std::int64_t, std::int64_t>, double> next;
      const std::int64_t r2 =
          static_cast<std::int64_t>(std::llround(2.0 * midrank[lv]));
      for (const auto& [key, ways] : states) {
        for (std::int64_t k = 0; k <= std::min(tie[lv], n1 - key.first); ++k) {
          const auto nk = std::make_pair(key.first + k, key.second + k * r2);
          next[nk] += ways * binom(tie[lv], k);
        }
      }
      states = std::move(next);
    }
    double total = 0.0, tail = 0.0;
    const double obs_dev = std::abs(2.0 * w - 2.0 * mean_w);
    for (const auto& [key, ways] : states) {
      if (key.first != n1) continue;
      total += ways;
      const double dev =
          std::abs(static_cast<double>(key.second) - 2.0 * mean_w);
      if (dev >= obs_dev - 1e-9) tail += ways;
    }
    return tail / total;
  }

  // tie-corrected variance
  double tie_term = 0.0;
  for (std::size_t i = 0; i < levels; ++i) {
    const double t = static_cast<double>(tie[i]);
    tie_term += t * t * t - t;
  }
  const double nn = static_cast<double>(n);
  const double var_w =
      static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
      ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
  if (var_w <= 0.0) return 1.0;  // all observations tied

  double dev = w - mean_w;
  // continuity correction toward the null
  if (dev > 0.5)
    dev -= 0.5;
  else if (dev < -0.5)
    dev += 0.5;
  else
    dev = 0.0;
  const double z = dev / std::sqrt(var_w);
  return 2.0 * (1.0 - stats_detail::normal_cdf(std::abs(z)));
}

// --- rater tables ------------------------------------------------------------

// Per (rater, image type) counts of Likert scores 1..5.
struct RaterTable {
  struct Row {
    std::string rater;
    std::string type;  // "real" | "synthetic"
    std::array<std::int64_t, 5> counts{};
  };
  std::vector<Row> rows;

  const Row& find(const std::string& rater, const std::string& type) const {
    for (const auto& r : rows)
      if (r.rater == rater && r.type == type) return r;
    throw ConfigError("rater table row not found: " + rater + "/" + type);
  }

  // CSV with header: rater,type,score1,score2,score3,score4,score5
  static RaterTable from_csv(std::istream& is) {
    RaterTable table;
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty rater CSV");
    std::string header = line;
    header.erase(std::remove_if(header.begin(), header.end(), ::isspace),
                 header.end());
    if (header != "rater,type,score1,score2,score3,score4,score5")
      throw IoError("unexpected rater CSV header: " + line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      Row row;
      std::string field;
      if (!std::getline(ss, row.rater, ',')) throw IoError("bad CSV row");
      if (!std::getline(ss, row.type, ',')) throw IoError("bad CSV row");
      for (int i = 0; i < 5; ++i) {
        if (!std::getline(ss, field, ',')) throw IoError("bad CSV row");
        row.counts[static_cast<std::size_t>(i)] = std::stoll(field);
        if (row.counts[static_cast<std::size_t>(i)] < 0)
          throw IoError("negative score count");
      }
      table.rows.push_back(std::move(row));
    }
    return table;
  }

  static RaterTable from_csv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open rater CSV: " + path);
    return from_csv(is);
  }
};

struct ScoreSummary {
  double mean = 0.0;
  double sd = 0.0;  // population SD (divisor n), matching the reported tables
  std::int64_t n = 0;
};

inline ScoreSummary summarize_scores(const std::array<std::int64_t, 5>& counts) {
  ScoreSummary s;
  double sum = 0.0, sum2 = 0.0;
  for (int score = 1; score <= 5; ++score) {
    const double c =
        static_cast<double>(counts[static_cast<std::size_t>(score - 1)]);
    s.n += counts[static_cast<std::size_t>(score - 1)];
    sum += c * score;
    sum2 += c * score * score;
  }
  if (s.n == 0) throw ConfigError("summarize_scores: empty cell");
  s.mean = sum / static_cast<double>(s.n);
  const double var = sum2 / static_cast<double>(s.n) - s.mean * s.mean;
  s.sd = std::sqrt(std::max(0.0, var));
  return s;
}

inline std::map<std::string, ScoreSummary> summarize_raters(
    const RaterTable& table) {
  std::map<std::string, ScoreSummary> out;
  for (const auto& row : table.rows)
    out[row.rater + "/" + row.type] = summarize_scores(row.counts);
  return out;
}

}  // namespace dsni

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "handqa/errors.hpp"

namespace handqa {

// ===========================================================================
// Ground-truth handling (2-sigma MOS revision) and the three correlation
// metrics used to compare predicted hand scores against human ratings.
// ===========================================================================

inline double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population (not sample) standard deviation.
inline double population_sigma(std::span<const double> v) {
  const double mu = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

struct MosRevision {
  double revised_mos{0.0};
  std::vector<double> kept;
  std::size_t dropped{0};
};

// Single-pass 2-sigma outlier rejection: ratings farther than two population
// sigmas from the raw mean are dropped, and the revised MOS is the mean of
// what remains. With sigma = 0 everything is kept. A single pass can never
// drop all ratings (that would contradict the definition of sigma), but the
// condition is guarded anyway.
inline MosRevision revise_mos(std::span<const double> ratings) {
  if (ratings.size() < 2) {
    throw std::invalid_argument("MOS revision requires at least two ratings");
  }
  const double mu = mean_of(ratings);
  const double sigma = population_sigma(ratings);
  MosRevision out;
  for (double r : ratings) {
    if (sigma == 0.0 || std::abs(r - mu) <= 2.0 * sigma) {
      out.kept.push_back(r);
    } else {
      ++out.dropped;
    }
  }
  if (out.kept.empty()) {
    throw std::domain_error("2-sigma revision dropped every rating");
  }
  out.revised_mos = mean_of(out.kept);
  return out;
}

// ---------------------------------------------------------------------------
// Correlations.
// ---------------------------------------------------------------------------

inline void require_correlatable(std::span<const double> x,
                                 std::span<const double> y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("correlation inputs differ in length");
  }
  if (x.size() < 2) {
    throw std::invalid_argument("correlation requires at least two points");
  }
  const auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(),
                       [&](double a) { return a == v.front(); });
  };
  if (constant(x) || constant(y)) {
    throw std::domain_error("correlation undefined for constant input");
  }
}

inline double plcc(std::span<const double> x, std::span<const double> y) {
  require_correlatable(x, y);
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

// Average ranks (1-based); tied values share the mean of their rank range.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Spearman: Pearson correlation of average ranks.
inline double srcc(std::span<const double> x, std::span<const double> y) {
  require_correlatable(x, y);
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  return plcc(rx, ry);
}

namespace detail {

// Discordant-pair count via mergesort inversion counting on y after sorting
// by (x, y). Pairs tied in x contribute no inversions because y is the
// secondary sort key.
inline std::uint64_t count_inversions(std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> buf(n);
  std::uint64_t inv = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo + width < n; lo += 2 * width) {
      const std::size_t mid = lo + width;
      const std::size_t hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          inv += mid - i;
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
      std::copy(buf.begin() + lo, buf.begin() + hi, v.begin() + lo);
    }
  }
  return inv;
}

inline std::uint64_t tie_pair_count(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::uint64_t pairs = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j + 1 < v.size() && v[j + 1] == v[i]) ++j;
    const std::uint64_t t = j - i + 1;
    pairs += t * (t - 1) / 2;
    i = j + 1;
  }
  return pairs;
}

}  // namespace detail

// Kendall tau-b (tie corrected), computed with Knight's O(n log n) scheme.
inline double krcc(std::span<const double> x, std::span<const double> y) {
  require_correlatable(x, y);
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (x[a] != x[b]) return x[a] < x[b];
    return y[a] < y[b];
  });

  // Joint ties (pairs tied in both x and y).
  std::uint64_t n3 = 0;
  {
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && x[order[j + 1]] == x[order[i]] &&
             y[order[j + 1]] == y[order[i]]) {
        ++j;
      }
      const std::uint64_t t = j - i + 1;
      n3 += t * (t - 1) / 2;
      i = j + 1;
    }
  }

  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  const std::uint64_t discordant = detail::count_inversions(ys);

  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t n1 = detail::tie_pair_count({x.begin(), x.end()});
  const std::uint64_t n2 = detail::tie_pair_count({y.begin(), y.end()});
  const double concordant = static_cast<double>(n0) - static_cast<double>(n1) -
                            static_cast<double>(n2) + static_cast<double>(n3) -
                            static_cast<double>(discordant);
  const double denom =
      std::sqrt((static_cast<double>(n0) - static_cast<double>(n1)) *
                (static_cast<double>(n0) - static_cast<double>(n2)));
  return (concordant - static_cast<double>(discordant)) / denom;
}

// Mann-Whitney AUC of `score` separating positive from negative labels, with
// half credit for ties. Used both for detector ROC analysis and for the
// scorer's held-out good-vs-bad separation.
inline double mann_whitney_auc(std::span<const double> score,
                               const std::vector<bool>& positive) {
  if (score.size() != positive.size()) {
    throw std::invalid_argument("auc inputs differ in length");
  }
  std::size_t npos = 0;
  for (bool p : positive) npos += p ? 1 : 0;
  const std::size_t nneg = score.size() - npos;
  if (npos == 0 || nneg == 0) {
    throw std::domain_error("auc requires both classes");
  }
  const std::vector<double> ranks = average_ranks(score);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (positive[i]) rank_sum += ranks[i];
  }
  const double npos_d = static_cast<double>(npos);
  return (rank_sum - npos_d * (npos_d + 1.0) / 2.0) /
         (npos_d * static_cast<double>(nneg));
}

// ---------------------------------------------------------------------------
// Rating sheets and evaluation at image / T2I-model level.
// ---------------------------------------------------------------------------

struct RatingSheet {
  std::string image_id;
  std::string generator_id;
  std::vector<double> raw;
  double revised_mos{0.0};
  std::size_t kept_count{0};
};

inline RatingSheet make_rating_sheet(std::string image_id,
                                     std::string generator_id,
                                     std::vector<double> raw) {
  RatingSheet s;
  s.image_id = std::move(image_id);
  s.generator_id = std::move(generator_id);
  s.raw = std::move(raw);
  const MosRevision rev = revise_mos(s.raw);
  s.revised_mos = rev.revised_mos;
  s.kept_count = rev.kept.size();
  return s;
}

// CSV layout: image id, generator id, then one column per rater. Missing
// ratings are empty cells and are skipped.
inline std::vector<RatingSheet> load_rating_sheets(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::vector<RatingSheet> sheets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string origin = path.string() + ":" + std::to_string(lineno);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) fields.push_back(cell);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (fields.size() < 3) {
      throw DataError(origin + ": expected image id, generator id, ratings");
    }
    std::vector<double> ratings;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      if (fields[i].empty()) continue;
      try {
        std::size_t used = 0;
        const double v = std::stod(fields[i], &used);
        if (used != fields[i].size()) throw std::invalid_argument("trailing");
        ratings.push_back(v);
      } catch (const std::exception&) {
        throw DataError(origin + ": field " + std::to_string(i + 1) +
                        ": not a number: '" + fields[i] + "'");
      }
    }
    if (ratings.size() < 2) {
      throw DataError(origin + ": fewer than two ratings");
    }
    sheets.push_back(make_rating_sheet(fields[0], fields[1], std::move(ratings)));
  }
  return sheets;
}

enum class EvalLevel { image, model };

struct CorrelationReport {
  double plcc{0.0};
  double srcc{0.0};
  double krcc{0.0};
  EvalLevel level{EvalLevel::image};
  std::size_t n{0};
};

// Image level correlates (prediction, revised MOS) per image; model level
// first averages both quantities within each generator and correlates the
// group means.
inline CorrelationReport evaluate(
    const std::map<std::string, double>& predictions,
    std::span<const RatingSheet> sheets, EvalLevel level) {
  if (sheets.empty()) {
    throw std::invalid_argument("evaluation requires rating sheets");
  }
  std::vector<double> pred;
  std::vector<double> mos;
  if (level == EvalLevel::image) {
    for (const auto& s : sheets) {
      const auto it = predictions.find(s.image_id);
      if (it == predictions.end()) {
        throw DataError("no prediction for image '" + s.image_id + "'");
      }
      pred.push_back(it->second);
      mos.push_back(s.revised_mos);
    }
  } else {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>
        groups;
    for (const auto& s : sheets) {
      const auto it = predictions.find(s.image_id);
      if (it == predictions.end()) {
        throw DataError("no prediction for image '" + s.image_id + "'");
      }
      groups[s.generator_id].first.push_back(it->second);
      groups[s.generator_id].second.push_back(s.revised_mos);
    }
    if (groups.size() < 2) {
      throw std::invalid_argument(
          "model-level evaluation requires at least two generator groups");
    }
    for (const auto& [id, g] : groups) {
      pred.push_back(mean_of(g.first));
      mos.push_back(mean_of(g.second));
    }
  }
  CorrelationReport rep;
  rep.level = level;
  rep.n = pred.size();
  rep.plcc = plcc(pred, mos);
  rep.srcc = srcc(pred, mos);
  rep.krcc = krcc(pred, mos);
  return rep;
}

// Prediction files are "image_id,score" lines.
inline std::map<std::string, double> load_predictions(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::map<std::string, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string origin = path.string() + ":" + std::to_string(lineno);
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw DataError(origin + ": expected 'image_id,score'");
    }
    const std::string id = line.substr(0, comma);
    const std::string rest = line.substr(comma + 1);
    try {
      std::size_t used = 0;
      const double v = std::stod(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("trailing");
      if (!out.emplace(id, v).second) {
        throw DataError(origin + ": duplicate image id '" + id + "'");
      }
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError(origin + ": field 2: not a number: '" + rest + "'");
    }
  }
  return out;
}

}  // namespace handqa

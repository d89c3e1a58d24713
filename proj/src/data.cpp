#include "ipl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "ipl/errors.hpp"

namespace ipl {

Segment Segment::slice(std::size_t offset, std::size_t len) const {
  if (offset + len > length()) throw ConfigError("segment slice out of range");
  Segment out;
  out.states.assign(states.begin() + static_cast<std::ptrdiff_t>(offset),
                    states.begin() + static_cast<std::ptrdiff_t>(offset + len + 1));
  out.actions.assign(actions.begin() + static_cast<std::ptrdiff_t>(offset),
                     actions.begin() + static_cast<std::ptrdiff_t>(offset + len));
  out.source_trajectory = source_trajectory;
  out.start_index = start_index + offset;
  return out;
}

LabelMode parse_label_mode(const std::string& name) {
  if (name == "bernoulli") return LabelMode::bernoulli;
  if (name == "argmax") return LabelMode::argmax;
  if (name == "soft") return LabelMode::soft;
  throw ConfigError("unknown label mode '" + name + "'");
}

std::string to_string(LabelMode mode) {
  switch (mode) {
    case LabelMode::bernoulli:
      return "bernoulli";
    case LabelMode::argmax:
      return "argmax";
    case LabelMode::soft:
      return "soft";
  }
  return "unknown";
}

double SegmentWeighting::weight(std::size_t t) const {
  return discount_in_segment ? std::pow(gamma, static_cast<double>(t)) : 1.0;
}

std::vector<Transition> flatten(std::span<const Trajectory> trajectories) {
  std::vector<Transition> out;
  for (const auto& traj : trajectories)
    for (std::size_t t = 0; t < traj.length(); ++t)
      out.push_back({traj.states[t], traj.actions[t], traj.states[t + 1]});
  return out;
}

std::vector<Segment> sample_segments(std::span<const Trajectory> trajectories, std::size_t k,
                                     std::size_t n, Rng& rng) {
  if (k == 0) throw ConfigError("segment length k must be at least 1");
  // Cumulative count of valid starts per trajectory.
  std::vector<std::size_t> cumulative;
  cumulative.reserve(trajectories.size());
  std::size_t total = 0;
  for (const auto& traj : trajectories) {
    if (traj.length() >= k) total += traj.length() - k + 1;
    cumulative.push_back(total);
  }
  if (total == 0) throw ConfigError(fmt::format("segment length {} exceeds every trajectory length", k));

  std::vector<Segment> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pick = rng.below(total);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    const auto traj_id = static_cast<std::size_t>(std::distance(cumulative.begin(), it));
    const std::size_t before = traj_id == 0 ? 0 : cumulative[traj_id - 1];
    const std::size_t start = pick - before;
    const auto& traj = trajectories[traj_id];
    Segment seg;
    seg.states.assign(traj.states.begin() + static_cast<std::ptrdiff_t>(start),
                      traj.states.begin() + static_cast<std::ptrdiff_t>(start + k + 1));
    seg.actions.assign(traj.actions.begin() + static_cast<std::ptrdiff_t>(start),
                       traj.actions.begin() + static_cast<std::ptrdiff_t>(start + k));
    seg.source_trajectory = traj_id;
    seg.start_index = start;
    out.push_back(std::move(seg));
  }
  return out;
}

double segment_return(const Segment& segment, const RewardTable& reward,
                      const SegmentWeighting& weighting) {
  double total = 0.0;
  for (std::size_t t = 0; t < segment.length(); ++t)
    total += weighting.weight(t) * reward(segment.states[t], segment.actions[t]);
  return total;
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_logistic(double x) {
  // log sigma(x) = -log(1 + e^{-x}) = min(x, 0) - log1p(e^{-|x|})
  return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
}

double bradley_terry_prob(double return1, double return2) { return logistic(return1 - return2); }

PreferencePair label_pair(const Segment& seg1, const Segment& seg2, const RewardTable& reward,
                          LabelMode mode, const SegmentWeighting& weighting, Rng& rng) {
  if (seg1.length() != seg2.length()) throw ConfigError("paired segments must have equal length");
  const double r1 = segment_return(seg1, reward, weighting);
  const double r2 = segment_return(seg2, reward, weighting);
  double y = 0.5;
  switch (mode) {
    case LabelMode::bernoulli:
      y = rng.bernoulli(bradley_terry_prob(r1, r2)) ? 1.0 : 0.0;
      break;
    case LabelMode::argmax:
      y = r1 > r2 ? 1.0 : (r1 < r2 ? 0.0 : 0.5);
      break;
    case LabelMode::soft:
      y = bradley_terry_prob(r1, r2);
      break;
  }
  return {seg1, seg2, y};
}

RankingQuery label_ranking(std::vector<Segment> segments, const RewardTable& reward,
                           const SegmentWeighting& weighting, Rng& rng) {
  if (segments.size() < 2) throw ConfigError("a ranking needs at least two segments");
  for (const auto& seg : segments)
    if (seg.length() != segments.front().length()) throw ConfigError("ranked segments must have equal length");

  std::vector<double> returns(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) returns[i] = segment_return(segments[i], reward, weighting);

  std::vector<std::size_t> remaining(segments.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  RankingQuery query;
  query.permutation.reserve(segments.size());
  std::vector<double> weights;
  while (!remaining.empty()) {
    double peak = -std::numeric_limits<double>::infinity();
    for (auto idx : remaining) peak = std::max(peak, returns[idx]);
    weights.clear();
    for (auto idx : remaining) weights.push_back(std::exp(returns[idx] - peak));
    const std::size_t pick = rng.categorical(weights);
    query.permutation.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  query.segments = std::move(segments);
  return query;
}

std::vector<PreferencePair> truncate_batch(std::span<const PreferencePair> pairs, std::size_t s,
                                           std::size_t offset) {
  std::vector<PreferencePair> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs)
    out.push_back({pair.first.slice(offset, s), pair.second.slice(offset, s), pair.label});
  return out;
}

std::vector<PreferencePair> subsample_batch(std::span<const PreferencePair> pairs, std::size_t s,
                                            Rng& rng) {
  if (s == 0) throw ConfigError("subsample length must be at least 1");
  if (pairs.empty()) return {};
  std::size_t k = std::numeric_limits<std::size_t>::max();
  for (const auto& pair : pairs) {
    if (pair.first.length() != pair.second.length())
      throw ConfigError("paired segments must have equal length");
    k = std::min(k, pair.first.length());
  }
  if (s > k) throw ConfigError(fmt::format("subsample length {} exceeds segment length {}", s, k));
  const std::size_t offset = rng.below(k - s + 1);
  return truncate_batch(pairs, s, offset);
}

namespace {

std::string format_double(double x) { return fmt::format("{:.17g}", x); }

std::string segment_record(const Segment& seg) {
  return fmt::format(R"({{"states":[{}],"actions":[{}]}})", fmt::join(seg.states, ","),
                     fmt::join(seg.actions, ","));
}

}  // namespace

nlohmann::json segment_to_json(const Segment& segment) {
  return {{"states", segment.states}, {"actions", segment.actions}};
}

Segment segment_from_json(const nlohmann::json& doc) {
  Segment seg;
  seg.states = doc.at("states").get<std::vector<StateId>>();
  seg.actions = doc.at("actions").get<std::vector<ActionId>>();
  if (seg.states.size() != seg.actions.size() + 1)
    throw ConfigError("segment needs exactly one more state than actions");
  return seg;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset,
                  const std::optional<std::string>& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open dataset file for writing: " + path.string());
  if (config_hash) out << R"({"type":"meta","config_hash":")" << *config_hash << "\"}\n";
  for (const auto& pair : dataset.pairs) {
    out << R"({"type":"pair","k":)" << pair.first.length() << R"(,"seg1":)" << segment_record(pair.first)
        << R"(,"seg2":)" << segment_record(pair.second) << R"(,"y":)" << format_double(pair.label) << "}\n";
  }
  for (const auto& ranking : dataset.rankings) {
    out << R"({"type":"ranking","segments":[)";
    for (std::size_t i = 0; i < ranking.segments.size(); ++i) {
      if (i) out << ',';
      out << segment_record(ranking.segments[i]);
    }
    out << R"(],"perm":[)" << fmt::format("{}", fmt::join(ranking.permutation, ",")) << "]}\n";
  }
  for (const auto& t : dataset.transitions)
    out << R"({"type":"transition","s":)" << t.s << R"(,"a":)" << t.a << R"(,"sp":)" << t.next << "}\n";
  if (!out) throw ConfigError("failed writing dataset file: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset file: " + path.string());
  Dataset dataset;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      const auto type = rec.at("type").get<std::string>();
      if (type == "pair") {
        PreferencePair pair{segment_from_json(rec.at("seg1")), segment_from_json(rec.at("seg2")),
                            rec.at("y").get<double>()};
        if (pair.first.length() != pair.second.length() || pair.first.length() != rec.at("k").get<std::size_t>())
          throw ConfigError("pair segment lengths disagree with k");
        if (!(pair.label >= 0.0 && pair.label <= 1.0)) throw ConfigError("label outside [0, 1]");
        dataset.pairs.push_back(std::move(pair));
      } else if (type == "ranking") {
        RankingQuery query;
        for (const auto& seg : rec.at("segments")) query.segments.push_back(segment_from_json(seg));
        query.permutation = rec.at("perm").get<std::vector<std::size_t>>();
        std::vector<std::size_t> sorted = query.permutation;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i)
          if (sorted[i] != i || sorted.size() != query.segments.size())
            throw ConfigError("perm is not a permutation of the segments");
        dataset.rankings.push_back(std::move(query));
      } else if (type == "transition") {
        dataset.transitions.push_back(
            {rec.at("s").get<StateId>(), rec.at("a").get<ActionId>(), rec.at("sp").get<StateId>()});
      } else if (type != "meta") {
        throw ConfigError("unknown record type '" + type + "'");
      }
    } catch (const std::exception& e) {
      throw ParseError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()), line_no);
    }
  }
  return dataset;
}

}  // namespace ipl

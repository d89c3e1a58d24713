#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipl/mdp.hpp"
#include "ipl/rng.hpp"

namespace ipl {

/// Behavior snippet: states s_t .. s_{t+k}, actions a_t .. a_{t+k-1}.
struct Segment {
  std::vector<StateId> states;
  std::vector<ActionId> actions;
  std::size_t source_trajectory = 0;
  std::size_t start_index = 0;

  std::size_t length() const { return actions.size(); }
  /// Sub-segment of `len` transitions starting at `offset`.
  Segment slice(std::size_t offset, std::size_t len) const;

  /// Equality ignores provenance; only the behavior matters.
  bool operator==(const Segment& other) const {
    return states == other.states && actions == other.actions;
  }
};

/// label = 1 means `first` is preferred; fractional values are soft labels.
struct PreferencePair {
  Segment first;
  Segment second;
  double label = 0.5;

  PreferencePair swapped() const { return {second, first, 1.0 - label}; }
  bool operator==(const PreferencePair&) const = default;
};

/// `permutation[i]` is the index into `segments` of the i-th most preferred.
struct RankingQuery {
  std::vector<Segment> segments;
  std::vector<std::size_t> permutation;
  bool operator==(const RankingQuery&) const = default;
};

struct Transition {
  StateId s = 0;
  ActionId a = 0;
  StateId next = 0;
  bool operator==(const Transition&) const = default;
};

struct TransitionDataset {
  std::vector<Transition> transitions;
  std::string behavior_policy_id;
  bool operator==(const TransitionDataset& other) const { return transitions == other.transitions; }
};

/// Everything a JSON-lines dataset file can hold.
struct Dataset {
  std::vector<PreferencePair> pairs;
  std::vector<RankingQuery> rankings;
  std::vector<Transition> transitions;
  bool operator==(const Dataset&) const = default;
};

enum class LabelMode { bernoulli, argmax, soft };

LabelMode parse_label_mode(const std::string& name);
std::string to_string(LabelMode mode);

/// Weights applied to per-step rewards inside a segment: 1, or gamma^t when
/// `discount_in_segment` is on.
struct SegmentWeighting {
  bool discount_in_segment = false;
  double gamma = 1.0;
  double weight(std::size_t t) const;
};

/// Every transition of every trajectory, in order.
std::vector<Transition> flatten(std::span<const Trajectory> trajectories);

/// Draws `n` segments of `k` transitions uniformly over all valid
/// (trajectory, start) pairs. Trajectories shorter than k are skipped.
std::vector<Segment> sample_segments(std::span<const Trajectory> trajectories, std::size_t k,
                                     std::size_t n, Rng& rng);

double segment_return(const Segment& segment, const RewardTable& reward,
                      const SegmentWeighting& weighting = {});

/// Numerically stable logistic(x).
double logistic(double x);
/// log(logistic(x)) without overflow.
double log_logistic(double x);

/// P[segment 1 preferred] = logistic(R1 - R2).
double bradley_terry_prob(double return1, double return2);

/// bernoulli: y ~ Bernoulli(BT); argmax: 1 / 0 / 0.5 on tie; soft: y = BT.
PreferencePair label_pair(const Segment& seg1, const Segment& seg2, const RewardTable& reward,
                          LabelMode mode, const SegmentWeighting& weighting, Rng& rng);

/// Samples a Plackett-Luce ordering sequentially from segment returns.
RankingQuery label_ranking(std::vector<Segment> segments, const RewardTable& reward,
                           const SegmentWeighting& weighting, Rng& rng);

/// Cuts every pair in the batch to `s` transitions at one shared offset drawn
/// uniformly from {0, ..., k - s}. Labels are untouched.
std::vector<PreferencePair> subsample_batch(std::span<const PreferencePair> pairs, std::size_t s,
                                            Rng& rng);

/// Same as subsample_batch but with the offset chosen by the caller.
std::vector<PreferencePair> truncate_batch(std::span<const PreferencePair> pairs, std::size_t s,
                                           std::size_t offset);

/// JSON-lines persistence: one record per pair, ranking, or transition.
/// `config_hash`, when set, is written as a leading "meta" record.
void save_dataset(const std::filesystem::path& path, const Dataset& dataset,
                  const std::optional<std::string>& config_hash = std::nullopt);
Dataset load_dataset(const std::filesystem::path& path);

nlohmann::json segment_to_json(const Segment& segment);
Segment segment_from_json(const nlohmann::json& doc);

}  // namespace ipl

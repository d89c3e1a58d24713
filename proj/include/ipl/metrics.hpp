#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ipl {

struct MetricsRow {
  std::size_t step = 0;
  double pref_loss = 0.0;
  double reg_value = 0.0;
  double value_loss = 0.0;
  double mean_abs_implicit_reward = 0.0;
  double max_abs_implicit_reward = 0.0;
  std::optional<double> gt_return;
  std::optional<double> oracle_reward_gap;
  bool operator==(const MetricsRow&) const = default;
};

/// Per-checkpoint scalars; steps are strictly increasing.
class MetricsLog {
 public:
  static constexpr const char* kHeader =
      "step,pref_loss,reg_value,value_loss,mean_abs_implicit_reward,max_abs_implicit_reward,gt_return,"
      "oracle_reward_gap";

  void append(const MetricsRow& row);
  const std::vector<MetricsRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  /// Largest gt_return over all checkpoints, if any was recorded.
  std::optional<double> best_return() const;

  /// CSV with an optional leading `# ...` comment line; blank cells for
  /// missing values; reals with 17 significant digits.
  std::string to_csv(const std::string& comment = {}) const;
  void write_csv(const std::filesystem::path& path, const std::string& comment = {}) const;
  /// Parses the format produced by to_csv (comment lines are skipped).
  static MetricsLog from_csv(const std::string& text);

  bool operator==(const MetricsLog&) const = default;

 private:
  std::vector<MetricsRow> rows_;
};

}  // namespace ipl

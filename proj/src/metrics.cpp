#include "ipl/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "ipl/errors.hpp"

namespace ipl {

void MetricsLog::append(const MetricsRow& row) {
  if (!rows_.empty() && row.step <= rows_.back().step)
    throw ConfigError(fmt::format("metrics step {} does not follow step {}", row.step, rows_.back().step));
  rows_.push_back(row);
}

std::optional<double> MetricsLog::best_return() const {
  std::optional<double> best;
  for (const auto& row : rows_)
    if (row.gt_return && (!best || *row.gt_return > *best)) best = row.gt_return;
  return best;
}

std::string MetricsLog::to_csv(const std::string& comment) const {
  auto real = [](double x) { return fmt::format("{:.17g}", x); };
  auto maybe = [&](const std::optional<double>& x) { return x ? real(*x) : std::string{}; };
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += kHeader;
  out += '\n';
  for (const auto& r : rows_) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.step, real(r.pref_loss), real(r.reg_value), real(r.value_loss),
                       real(r.mean_abs_implicit_reward), real(r.max_abs_implicit_reward), maybe(r.gt_return),
                       maybe(r.oracle_reward_gap));
  }
  return out;
}

void MetricsLog::write_csv(const std::filesystem::path& path, const std::string& comment) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open metrics file for writing: " + path.string());
  out << to_csv(comment);
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
  MetricsLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kHeader) throw ParseError("unexpected metrics header", line_no);
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 8) throw ParseError("metrics row needs 8 cells", line_no);
    try {
      auto opt = [](const std::string& c) -> std::optional<double> {
        if (c.empty()) return std::nullopt;
        return std::stod(c);
      };
      MetricsRow row;
      row.step = std::stoull(cells[0]);
      row.pref_loss = std::stod(cells[1]);
      row.reg_value = std::stod(cells[2]);
      row.value_loss = std::stod(cells[3]);
      row.mean_abs_implicit_reward = std::stod(cells[4]);
      row.max_abs_implicit_reward = std::stod(cells[5]);
      row.gt_return = opt(cells[6]);
      row.oracle_reward_gap = opt(cells[7]);
      log.append(row);
    } catch (const std::invalid_argument&) {
      throw ParseError("metrics row holds a non-numeric cell", line_no);
    }
  }
  return log;
}

}  // namespace ipl

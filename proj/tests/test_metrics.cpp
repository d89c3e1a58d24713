#include <fstream>
#include <sstream>

#include "doctest.h"

#include "ipl/errors.hpp"
#include "ipl/metrics.hpp"
#include "test_util.hpp"

using namespace ipl;

TEST_CASE("metrics CSV") {
  MetricsLog log;
  CHECK(log.empty());
  CHECK_FALSE(log.best_return().has_value());
  log.append({100, 0.69314718055994529, 0.1, 0.2, 0.3, 0.4, 0.5, std::nullopt});
  log.append({200, 1.0 / 3.0, 1e-300, -2.5, 7.0, 8.0, std::nullopt, 1e-12});
  log.append({300, 0.25, 0.0, 0.0, 0.0, 0.0, 0.75, 0.0});
  CHECK(log.best_return() == 0.75);

  const std::string csv = log.to_csv("best-checkpoint convention");
  std::istringstream in(csv);
  std::string first, header, row;
  std::getline(in, first);
  std::getline(in, header);
  std::getline(in, row);
  CHECK(first == "# best-checkpoint convention");
  CHECK(header == "step,pref_loss,reg_value,value_loss,mean_abs_implicit_reward,max_abs_implicit_reward,gt_return,oracle_reward_gap");
  CHECK(row == "100,0.69314718055994529,0.10000000000000001,0.20000000000000001,0.29999999999999999,0.40000000000000002,0.5,");
  CHECK(csv.find("\n200,") != std::string::npos);
  CHECK(csv.find(",8,,9.9999999999999998e-13\n") != std::string::npos);

  CHECK(MetricsLog::from_csv(csv) == log);
  CHECK(MetricsLog::from_csv(log.to_csv()) == log);

  TempDir dir("metrics");
  log.write_csv(dir / "m.csv");
  std::ifstream f(dir / "m.csv", std::ios::binary);
  std::stringstream text;
  text << f.rdbuf();
  CHECK(text.str() == log.to_csv());
}

TEST_CASE("metrics validation") {
  MetricsLog log;
  log.append({5, 0, 0, 0, 0, 0, std::nullopt, std::nullopt});
  CHECK_THROWS_AS(log.append({5, 0, 0, 0, 0, 0, std::nullopt, std::nullopt}), ConfigError);
  CHECK_THROWS_AS(log.append({4, 0, 0, 0, 0, 0, std::nullopt, std::nullopt}), ConfigError);
  CHECK_THROWS_AS(MetricsLog::from_csv("step,loss\n"), ParseError);
  const std::string bad = std::string(MetricsLog::kHeader) + "\n1,2,3\n";
  try {
    MetricsLog::from_csv(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(MetricsLog::from_csv(std::string(MetricsLog::kHeader) + "\n1,x,0,0,0,0,,\n"), ParseError);
}

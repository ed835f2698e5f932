#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtask/error.hpp"

namespace mtask {

struct EvalRecord {
  std::optional<int> predicted_class, true_class;
  std::optional<double> predicted_portion, true_portion;
};

double accuracy(const std::vector<EvalRecord>& records);

enum class MaeSubset { All, CorrectOnly };
double mae(const std::vector<EvalRecord>& records, MaeSubset subset);

// MCCR = C * sum_{i in I} |w~_i - w-_i| / ||I||^2 with I the correctly
// classified records, computed as C * (mae_correct / n_correct) so the
// algebraic identity holds exactly in 64-bit floats. Smaller is better.
double mccr(const std::vector<EvalRecord>& records, double C = 1.0);

// EP = sum |w - w^| / sum w^ * 100, aggregate ratio against groundtruth.
double error_percentage(const std::vector<EvalRecord>& records);

struct MetricsReport {
  std::string mode, split;
  int n_total = 0;
  std::optional<int> n_correct;
  std::optional<double> accuracy, mae, mae_correct, mccr, ep_percent;
  double mccr_constant = 1.0;
  std::map<std::string, std::string> absent;  // metric -> reason it is missing

  std::string to_json() const;
};

// All metrics computed from one record set; metrics whose preconditions fail
// come back absent with the reason recorded, never as fake zeros.
MetricsReport build_report(const std::vector<EvalRecord>& records, double C = 1.0);

}  // namespace mtask

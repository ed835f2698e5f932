#include "mtask/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace mtask {

namespace {

bool has_classes(const EvalRecord& r) {
  return r.predicted_class.has_value() && r.true_class.has_value();
}

bool has_portions(const EvalRecord& r) {
  return r.predicted_portion.has_value() && r.true_portion.has_value();
}

void require_classes(const std::vector<EvalRecord>& records, const char* who) {
  if (records.empty()) throw Error(std::string(who) + ": empty record set");
  for (const EvalRecord& r : records)
    if (!has_classes(r)) throw Error(std::string(who) + ": records lack class fields");
}

void require_portions(const std::vector<EvalRecord>& records, const char* who) {
  if (records.empty()) throw Error(std::string(who) + ": empty record set");
  for (const EvalRecord& r : records) {
    if (!has_portions(r)) throw Error(std::string(who) + ": records lack portion fields");
    if (!std::isfinite(*r.predicted_portion) || !std::isfinite(*r.true_portion))
      throw Error(std::string(who) + ": non-finite portion value");
  }
}

int count_correct(const std::vector<EvalRecord>& records) {
  int n = 0;
  for (const EvalRecord& r : records)
    if (*r.predicted_class == *r.true_class) ++n;
  return n;
}

}  // namespace

double accuracy(const std::vector<EvalRecord>& records) {
  require_classes(records, "accuracy");
  return static_cast<double>(count_correct(records)) / static_cast<double>(records.size());
}

// Summation over sorted terms: the result does not depend on record order.
double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += t;
  return acc;
}

double mae(const std::vector<EvalRecord>& records, MaeSubset subset) {
  require_portions(records, "mae");
  if (subset == MaeSubset::CorrectOnly) require_classes(records, "mae");
  std::vector<double> errs;
  for (const EvalRecord& r : records) {
    if (subset == MaeSubset::CorrectOnly && *r.predicted_class != *r.true_class) continue;
    errs.push_back(std::fabs(*r.predicted_portion - *r.true_portion));
  }
  if (errs.empty()) throw Error("mae: no correctly classified records");
  return ordered_sum(errs) / static_cast<double>(errs.size());
}

double mccr(const std::vector<EvalRecord>& records, double C) {
  require_classes(records, "mccr");
  require_portions(records, "mccr");
  int n_correct = count_correct(records);
  if (n_correct == 0) throw Error("mccr: no correctly classified records");
  return C * (mae(records, MaeSubset::CorrectOnly) / n_correct);
}

double error_percentage(const std::vector<EvalRecord>& records) {
  require_portions(records, "error_percentage");
  std::vector<double> errs, truths;
  for (const EvalRecord& r : records) {
    errs.push_back(std::fabs(*r.predicted_portion - *r.true_portion));
    truths.push_back(*r.true_portion);
  }
  double truth = ordered_sum(truths);
  if (truth <= 0.0) throw Error("error_percentage: groundtruth portions sum to zero");
  return ordered_sum(errs) / truth * 100.0;
}

MetricsReport build_report(const std::vector<EvalRecord>& records, double C) {
  if (records.empty()) throw Error("build_report: empty record set");
  MetricsReport rep;
  rep.n_total = static_cast<int>(records.size());
  rep.mccr_constant = C;

  auto attempt = [&](const char* name, auto fn, auto& field) {
    try {
      field = fn();
    } catch (const Error& e) {
      rep.absent[name] = e.what();
    }
  };
  attempt("accuracy", [&] { return accuracy(records); }, rep.accuracy);
  if (rep.accuracy) rep.n_correct = count_correct(records);
  attempt("mae", [&] { return mae(records, MaeSubset::All); }, rep.mae);
  attempt("mae_correct", [&] { return mae(records, MaeSubset::CorrectOnly); }, rep.mae_correct);
  attempt("mccr", [&] { return mccr(records, C); }, rep.mccr);
  attempt("ep_percent", [&] { return error_percentage(records); }, rep.ep_percent);
  return rep;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j{{"mode", mode}, {"split", split}, {"n_total", n_total},
                   {"mccr_constant", mccr_constant}};
  if (n_correct) j["n_correct"] = *n_correct;
  if (accuracy) j["accuracy"] = *accuracy;
  if (mae) j["mae"] = *mae;
  if (mae_correct) j["mae_correct"] = *mae_correct;
  if (mccr) j["mccr"] = *mccr;
  if (ep_percent) j["ep_percent"] = *ep_percent;
  if (!absent.empty()) j["absent"] = absent;
  return j.dump();
}

}  // namespace mtask

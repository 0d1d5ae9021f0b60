#pragma once

// Paired-choice logistic regression: encoding, Newton/IRLS fitting, Wald
// statistics, McFadden pseudo R², attribute importance and profile ranking.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cdt/design.hpp"
#include "cdt/twin.hpp"

namespace cdt::estimation {

/// paper_dummy: [1, level-2 indicator of option A per attribute].
/// signed_difference: per attribute (code(a) - code(b)) / 2 with codes +/-1;
/// no intercept.
enum class Encoding { paper_dummy, signed_difference };

std::string_view to_string(Encoding e);
Encoding parse_encoding(std::string_view s);

class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RankDeficiencyError : public EstimationError {
 public:
  RankDeficiencyError(const std::string& what, std::vector<std::string> dependent)
      : EstimationError(what), dependent_columns(std::move(dependent)) {}
  std::vector<std::string> dependent_columns;
};

class SeparationError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

struct EncodedChoices {
  Encoding encoding = Encoding::paper_dummy;
  Eigen::MatrixXd X;
  Eigen::VectorXd y;  // 1 = option A chosen
  std::vector<std::string> column_names;

  Eigen::Index rows() const { return X.rows(); }
};

std::vector<std::string> column_names(const design::AttributeScheme& scheme, Encoding encoding);

/// Design row for one task.
Eigen::RowVectorXd encode_task(const design::AttributeScheme& scheme,
                               const design::ChoiceTask& task, Encoding encoding);

EncodedChoices encode(const std::vector<twin::ChoiceRecord>& records,
                      const std::vector<design::ChoiceTask>& tasks,
                      const design::AttributeScheme& scheme, Encoding encoding);

/// Columns, y and X row by row.
std::string encoded_csv(const EncodedChoices& encoded);

// Likelihood pieces, exposed for independent checking.
double log_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& beta);
Eigen::VectorXd score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& beta);
/// X' W X with W = mu (1 - mu).
Eigen::MatrixXd information(const Eigen::MatrixXd& X, const Eigen::VectorXd& beta);

/// Names of columns that are linear combinations of earlier ones.
std::vector<std::string> dependent_columns(const Eigen::MatrixXd& X,
                                           const std::vector<std::string>& names);

struct FitOptions {
  int max_iterations = 100;
  double beta_tolerance = 1e-8;
  double ll_tolerance = 1e-10;
  double separation_threshold = 15.0;
  int max_step_halvings = 30;
};

struct FittedConjointModel {
  Encoding encoding = Encoding::paper_dummy;
  std::vector<std::string> column_names;
  Eigen::VectorXd coefficients;
  Eigen::MatrixXd covariance;
  Eigen::VectorXd standard_errors;
  Eigen::VectorXd z_values;
  Eigen::VectorXd p_values;
  double log_likelihood = 0.0;
  double null_log_likelihood = 0.0;
  double pseudo_r2 = 0.0;
  std::size_t n = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> ll_trace;  // LL after each iteration

  bool has_intercept() const { return encoding == Encoding::paper_dummy; }
  double intercept() const { return has_intercept() ? coefficients[0] : 0.0; }
  /// Coefficient of attribute j (intercept skipped).
  double attribute_coefficient(std::size_t j) const {
    return coefficients[static_cast<Eigen::Index>(j + (has_intercept() ? 1 : 0))];
  }
  std::size_t attribute_count() const {
    return static_cast<std::size_t>(coefficients.size()) - (has_intercept() ? 1 : 0);
  }

  /// Builds a converged model from given or stored values; covariance is
  /// the diagonal of the squared standard errors, Wald statistics are derived.
  static FittedConjointModel from_estimates(Encoding encoding, std::vector<std::string> names,
                                            const std::vector<double>& coefficients,
                                            const std::vector<double>& standard_errors,
                                            double log_likelihood, double null_log_likelihood,
                                            std::size_t n);
};

/// Newton/IRLS from beta = 0 with step-halving. Throws RankDeficiencyError
/// or SeparationError.
FittedConjointModel fit_logit(const EncodedChoices& encoded, const FitOptions& options = {});

/// Standard normal CDF.
double normal_cdf(double x);

struct Wald {
  double z = 0.0;
  double p = 1.0;
};

/// z = beta / se, two-sided p = 2 (1 - Phi(|z|)).
Wald wald(double beta, double se);

struct WaldStats {
  Eigen::VectorXd z;
  Eigen::VectorXd p;
};

WaldStats wald_stats(const FittedConjointModel& model);

double mcfadden_r2(double log_likelihood, double null_log_likelihood);
double mcfadden_r2(const FittedConjointModel& model);

/// "<1e-12" below that, otherwise a short decimal or scientific form.
std::string format_p_value(double p);

struct ImportanceRow {
  std::string attribute;
  double utility = 0.0;  // |coefficient|
  double share = 0.0;
};

/// Rows in scheme order.
struct ImportanceTable {
  std::vector<ImportanceRow> rows;

  /// Rows by share, largest first; ties keep scheme order.
  std::vector<ImportanceRow> ranked() const;
};

ImportanceTable importance(const FittedConjointModel& model, const design::AttributeScheme& scheme);

struct RankedProfile {
  design::Profile profile;
  double utility = 0.0;
};

struct ProfileRanking {
  std::vector<RankedProfile> profiles;  // descending utility, ties lexicographic

  const RankedProfile& best() const { return profiles.front(); }
  const RankedProfile& worst() const { return profiles.back(); }
};

/// Total utility = intercept + level-2 coefficients the profile takes, over
/// the full factorial.
ProfileRanking rank_profiles(const FittedConjointModel& model, const design::AttributeScheme& scheme);

/// logistic(x(task) . beta) under the model's encoding.
double predict_choice_prob(const FittedConjointModel& model, const design::AttributeScheme& scheme,
                           const design::ChoiceTask& task);

nlohmann::ordered_json model_to_json(const FittedConjointModel& model,
                                     const design::AttributeScheme& scheme);
/// Returns the model and the scheme stored with it.
std::pair<FittedConjointModel, design::AttributeScheme> model_from_json(const nlohmann::json& j);

/// Coefficient table, importance table and best/worst profiles as text.
std::string render_report(const FittedConjointModel& model, const design::AttributeScheme& scheme);
nlohmann::ordered_json report_json(const FittedConjointModel& model,
                                   const design::AttributeScheme& scheme);

}  // namespace cdt::estimation

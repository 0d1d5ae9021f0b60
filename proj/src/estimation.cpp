#include "cdt/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "cdt/util.hpp"

namespace cdt::estimation {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view to_string(Encoding e) {
  return e == Encoding::paper_dummy ? "paper_dummy" : "signed_difference";
}

Encoding parse_encoding(std::string_view s) {
  if (s == "paper_dummy") return Encoding::paper_dummy;
  if (s == "signed_difference") return Encoding::signed_difference;
  throw std::invalid_argument("unknown encoding: " + std::string(s));
}

namespace {

void require_two_level(const design::AttributeScheme& scheme) {
  if (!scheme.all_two_level()) throw EstimationError("estimation needs a two-level scheme");
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

std::vector<std::string> column_names(const design::AttributeScheme& scheme, Encoding encoding) {
  require_two_level(scheme);
  std::vector<std::string> names;
  if (encoding == Encoding::paper_dummy) names.emplace_back("intercept");
  for (const auto& a : scheme.attributes()) names.push_back(a.name + " (" + a.levels[1] + ")");
  return names;
}

Eigen::RowVectorXd encode_task(const design::AttributeScheme& scheme,
                               const design::ChoiceTask& task, Encoding encoding) {
  require_two_level(scheme);
  design::check_profile(scheme, task.option_a);
  design::check_profile(scheme, task.option_b);
  const auto k = static_cast<Eigen::Index>(scheme.size());
  if (encoding == Encoding::paper_dummy) {
    Eigen::RowVectorXd row(k + 1);
    row[0] = 1.0;
    for (Eigen::Index j = 0; j < k; ++j) row[j + 1] = task.option_a.levels[j] == 1 ? 1.0 : 0.0;
    return row;
  }
  Eigen::RowVectorXd row(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const double ca = task.option_a.levels[j] == 1 ? 1.0 : -1.0;
    const double cb = task.option_b.levels[j] == 1 ? 1.0 : -1.0;
    row[j] = (ca - cb) / 2.0;
  }
  return row;
}

EncodedChoices encode(const std::vector<twin::ChoiceRecord>& records,
                      const std::vector<design::ChoiceTask>& tasks,
                      const design::AttributeScheme& scheme, Encoding encoding) {
  std::map<std::string, const design::ChoiceTask*, std::less<>> by_id;
  for (const auto& t : tasks) by_id.emplace(t.task_id, &t);
  EncodedChoices out;
  out.encoding = encoding;
  out.column_names = column_names(scheme, encoding);
  out.X.resize(static_cast<Eigen::Index>(records.size()),
               static_cast<Eigen::Index>(out.column_names.size()));
  out.y.resize(static_cast<Eigen::Index>(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = by_id.find(records[i].task_id);
    if (it == by_id.end()) throw EstimationError("record refers to unknown task " + records[i].task_id);
    const auto r = static_cast<Eigen::Index>(i);
    out.X.row(r) = encode_task(scheme, *it->second, encoding);
    out.y[r] = records[i].chosen == twin::Choice::A ? 1.0 : 0.0;
  }
  return out;
}

std::string encoded_csv(const EncodedChoices& encoded) {
  std::vector<std::string> header{"y"};
  header.insert(header.end(), encoded.column_names.begin(), encoded.column_names.end());
  std::string out = util::csv_row(header);
  char buf[32];
  for (Eigen::Index i = 0; i < encoded.rows(); ++i) {
    std::vector<std::string> row;
    std::snprintf(buf, sizeof buf, "%g", encoded.y[i]);
    row.emplace_back(buf);
    for (Eigen::Index j = 0; j < encoded.X.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%g", encoded.X(i, j));
      row.emplace_back(buf);
    }
    out += util::csv_row(row);
  }
  return out;
}

double log_likelihood(const MatrixXd& X, const VectorXd& y, const VectorXd& beta) {
  const VectorXd eta = X * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y[i] * eta[i] - softplus(eta[i]);
  return ll;
}

VectorXd score(const MatrixXd& X, const VectorXd& y, const VectorXd& beta) {
  const VectorXd eta = X * beta;
  VectorXd resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) resid[i] = y[i] - twin::logistic(eta[i]);
  return X.transpose() * resid;
}

MatrixXd information(const MatrixXd& X, const VectorXd& beta) {
  const VectorXd eta = X * beta;
  VectorXd w(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double mu = twin::logistic(eta[i]);
    w[i] = mu * (1.0 - mu);
  }
  return X.transpose() * w.asDiagonal() * X;
}

std::vector<std::string> dependent_columns(const MatrixXd& X, const std::vector<std::string>& names) {
  std::vector<std::string> dependent;
  std::vector<Eigen::Index> kept;
  Eigen::Index rank = 0;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    MatrixXd sub(X.rows(), static_cast<Eigen::Index>(kept.size()) + 1);
    for (std::size_t t = 0; t < kept.size(); ++t) sub.col(static_cast<Eigen::Index>(t)) = X.col(kept[t]);
    sub.col(sub.cols() - 1) = X.col(c);
    Eigen::ColPivHouseholderQR<MatrixXd> qr(sub);
    qr.setThreshold(1e-10);
    if (qr.rank() > rank) {
      rank = qr.rank();
      kept.push_back(c);
    } else {
      dependent.push_back(static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)]
                                                                    : std::to_string(c));
    }
  }
  return dependent;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Wald wald(double beta, double se) {
  if (!(se > 0.0)) throw EstimationError("standard error must be positive");
  const double z = beta / se;
  // 2 (1 - Phi(|z|)) == erfc(|z| / sqrt 2), without cancellation.
  const double p = std::clamp(std::erfc(std::abs(z) / std::sqrt(2.0)), 0.0, 1.0);
  return {z, p};
}

WaldStats wald_stats(const FittedConjointModel& model) {
  if (!model.converged) throw EstimationError("Wald statistics need a converged model");
  WaldStats out{VectorXd(model.coefficients.size()), VectorXd(model.coefficients.size())};
  for (Eigen::Index i = 0; i < model.coefficients.size(); ++i) {
    const auto w = wald(model.coefficients[i], model.standard_errors[i]);
    out.z[i] = w.z;
    out.p[i] = w.p;
  }
  return out;
}

double mcfadden_r2(double log_likelihood, double null_log_likelihood) {
  if (!(null_log_likelihood < 0.0)) throw EstimationError("null log-likelihood must be negative");
  return 1.0 - log_likelihood / null_log_likelihood;
}

double mcfadden_r2(const FittedConjointModel& model) {
  return mcfadden_r2(model.log_likelihood, model.null_log_likelihood);
}

std::string format_p_value(double p) {
  if (p < 1e-12) return "<1e-12";
  char buf[32];
  if (p < 0.001) {
    std::snprintf(buf, sizeof buf, "%.2e", p);
  } else {
    std::snprintf(buf, sizeof buf, "%.3f", p);
  }
  return buf;
}

namespace {

double null_log_likelihood(const EncodedChoices& e) {
  const double n = static_cast<double>(e.rows());
  if (e.encoding == Encoding::signed_difference) return n * std::log(0.5);
  const double successes = e.y.sum();
  const double p = successes / n;
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return successes * std::log(p) + (n - successes) * std::log1p(-p);
}

void finish_inference(FittedConjointModel& m) {
  m.standard_errors.resize(m.coefficients.size());
  for (Eigen::Index i = 0; i < m.coefficients.size(); ++i) {
    m.standard_errors[i] = std::sqrt(m.covariance(i, i));
  }
  const auto w = wald_stats(m);
  m.z_values = w.z;
  m.p_values = w.p;
  if (m.null_log_likelihood < 0.0) m.pseudo_r2 = mcfadden_r2(m);
}

}  // namespace

FittedConjointModel FittedConjointModel::from_estimates(Encoding encoding, std::vector<std::string> names,
                                                        const std::vector<double>& coefficients,
                                                        const std::vector<double>& standard_errors,
                                                        double log_likelihood, double null_log_likelihood,
                                                        std::size_t n) {
  if (names.size() != coefficients.size() || coefficients.size() != standard_errors.size()) {
    throw EstimationError("names, coefficients and standard errors must have equal length");
  }
  FittedConjointModel m;
  m.encoding = encoding;
  m.column_names = std::move(names);
  m.coefficients = Eigen::Map<const VectorXd>(coefficients.data(), static_cast<Eigen::Index>(coefficients.size()));
  m.covariance = MatrixXd::Zero(m.coefficients.size(), m.coefficients.size());
  for (std::size_t i = 0; i < standard_errors.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    m.covariance(ii, ii) = standard_errors[i] * standard_errors[i];
  }
  m.log_likelihood = log_likelihood;
  m.null_log_likelihood = null_log_likelihood;
  m.n = n;
  m.converged = true;
  finish_inference(m);
  return m;
}

FittedConjointModel fit_logit(const EncodedChoices& encoded, const FitOptions& options) {
  const MatrixXd& X = encoded.X;
  const VectorXd& y = encoded.y;
  if (X.rows() == 0) throw EstimationError("no observations to fit");
  if (X.rows() != y.size()) throw EstimationError("X and y row counts differ");
  if (static_cast<std::size_t>(X.cols()) != encoded.column_names.size()) {
    throw EstimationError("column names do not match X");
  }
  if (auto dep = dependent_columns(X, encoded.column_names); !dep.empty()) {
    throw RankDeficiencyError("design matrix is rank deficient; dependent columns: " + util::join(dep, ", "),
                              std::move(dep));
  }

  FittedConjointModel m;
  m.encoding = encoded.encoding;
  m.column_names = encoded.column_names;
  m.n = static_cast<std::size_t>(X.rows());

  VectorXd beta = VectorXd::Zero(X.cols());
  double ll = log_likelihood(X, y, beta);
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    const VectorXd g = score(X, y, beta);
    const MatrixXd H = information(X, beta);
    Eigen::LLT<MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) {
      throw SeparationError("information matrix became singular; the data are probably separable");
    }
    const VectorXd delta = llt.solve(g);

    double step = 1.0;
    VectorXd candidate = beta + delta;
    double ll_new = log_likelihood(X, y, candidate);
    for (int h = 0; h < options.max_step_halvings && ll_new < ll; ++h) {
      step *= 0.5;
      candidate = beta + step * delta;
      ll_new = log_likelihood(X, y, candidate);
    }
    if (ll_new < ll) {
      // No ascent direction left at working precision.
      m.iterations = iter;
      m.converged = true;
      break;
    }
    const double max_change = (step * delta).cwiseAbs().maxCoeff();
    const double ll_change = ll_new - ll;
    beta = candidate;
    ll = ll_new;
    m.iterations = iter;
    m.ll_trace.push_back(ll);

    if (beta.cwiseAbs().maxCoeff() > options.separation_threshold && ll_change > options.ll_tolerance) {
      throw SeparationError("a coefficient exceeded " + std::to_string(options.separation_threshold) +
                            " while the log-likelihood was still improving; the data look separable");
    }
    if (max_change < options.beta_tolerance || std::abs(ll_change) < options.ll_tolerance) {
      m.converged = true;
      break;
    }
  }

  m.coefficients = beta;
  m.log_likelihood = ll;
  m.null_log_likelihood = null_log_likelihood(encoded);
  if (m.null_log_likelihood >= 0.0) {
    throw SeparationError("every response is identical; the data are separable");
  }
  const MatrixXd H = information(X, beta);
  Eigen::LLT<MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) throw SeparationError("information matrix is singular at the estimate");
  const MatrixXd inv = llt.solve(MatrixXd::Identity(H.rows(), H.cols()));
  m.covariance = 0.5 * (inv + inv.transpose());
  if (m.converged) {
    finish_inference(m);
  } else {
    m.standard_errors = m.covariance.diagonal().cwiseSqrt();
    m.pseudo_r2 = mcfadden_r2(m);
  }
  return m;
}

std::vector<ImportanceRow> ImportanceTable::ranked() const {
  auto out = rows;
  std::stable_sort(out.begin(), out.end(),
                   [](const ImportanceRow& a, const ImportanceRow& b) { return a.share > b.share; });
  return out;
}

ImportanceTable importance(const FittedConjointModel& model, const design::AttributeScheme& scheme) {
  if (!model.converged) throw EstimationError("importance needs a converged model");
  if (model.attribute_count() != scheme.size()) {
    throw EstimationError("model has " + std::to_string(model.attribute_count()) +
                          " attribute coefficients, scheme has " + std::to_string(scheme.size()));
  }
  ImportanceTable t;
  double total = 0.0;
  for (std::size_t j = 0; j < scheme.size(); ++j) {
    const double u = std::abs(model.attribute_coefficient(j));
    t.rows.push_back({scheme[j].name, u, 0.0});
    total += u;
  }
  if (!(total > 0.0)) throw EstimationError("all attribute coefficients are zero; shares are undefined");
  for (auto& r : t.rows) r.share = r.utility / total;
  return t;
}

ProfileRanking rank_profiles(const FittedConjointModel& model, const design::AttributeScheme& scheme) {
  if (model.encoding != Encoding::paper_dummy) {
    throw EstimationError("profile ranking needs a paper_dummy model");
  }
  if (model.attribute_count() != scheme.size()) throw EstimationError("model does not match scheme");
  require_two_level(scheme);
  ProfileRanking ranking;
  for (auto& p : design::full_factorial(scheme)) {
    double u = model.intercept();
    for (std::size_t j = 0; j < scheme.size(); ++j) {
      if (p.levels[j] == 1) u += model.attribute_coefficient(j);
    }
    ranking.profiles.push_back({std::move(p), u});
  }
  std::stable_sort(ranking.profiles.begin(), ranking.profiles.end(),
                   [](const RankedProfile& a, const RankedProfile& b) { return a.utility > b.utility; });
  return ranking;
}

double predict_choice_prob(const FittedConjointModel& model, const design::AttributeScheme& scheme,
                           const design::ChoiceTask& task) {
  const auto row = encode_task(scheme, task, model.encoding);
  if (row.size() != model.coefficients.size()) throw EstimationError("model does not match scheme");
  return twin::logistic(row.dot(model.coefficients));
}

nlohmann::ordered_json model_to_json(const FittedConjointModel& m, const design::AttributeScheme& scheme) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["encoding"] = to_string(m.encoding);
  auto& cols = j["columns"] = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < m.coefficients.size(); ++i) {
    nlohmann::ordered_json c;
    c["name"] = m.column_names[static_cast<std::size_t>(i)];
    c["coefficient"] = m.coefficients[i];
    c["std_error"] = m.standard_errors.size() > i ? m.standard_errors[i] : 0.0;
    if (m.z_values.size() > i) {
      c["z"] = m.z_values[i];
      c["p"] = m.p_values[i];
    }
    cols.push_back(c);
  }
  auto& cov = j["covariance"] = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.covariance.rows(); ++r) {
    std::vector<double> row;
    for (Eigen::Index c = 0; c < m.covariance.cols(); ++c) row.push_back(m.covariance(r, c));
    cov.push_back(row);
  }
  j["log_likelihood"] = m.log_likelihood;
  j["null_log_likelihood"] = m.null_log_likelihood;
  j["pseudo_r2"] = m.pseudo_r2;
  j["n"] = m.n;
  j["iterations"] = m.iterations;
  j["converged"] = m.converged;
  j["scheme"] = scheme.to_json();
  return j;
}

std::pair<FittedConjointModel, design::AttributeScheme> model_from_json(const nlohmann::json& j) {
  try {
    auto scheme = design::AttributeScheme::from_json(j.at("scheme"));
    FittedConjointModel m;
    m.encoding = parse_encoding(j.at("encoding").get<std::string>());
    const auto& cols = j.at("columns");
    const auto p = static_cast<Eigen::Index>(cols.size());
    m.coefficients.resize(p);
    m.standard_errors.resize(p);
    for (Eigen::Index i = 0; i < p; ++i) {
      const auto& c = cols[static_cast<std::size_t>(i)];
      m.column_names.push_back(c.at("name").get<std::string>());
      m.coefficients[i] = c.at("coefficient").get<double>();
      m.standard_errors[i] = c.at("std_error").get<double>();
    }
    m.covariance = MatrixXd::Zero(p, p);
    if (j.contains("covariance")) {
      const auto& cov = j.at("covariance");
      for (Eigen::Index r = 0; r < p; ++r) {
        for (Eigen::Index c = 0; c < p; ++c) {
          m.covariance(r, c) = cov.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
        }
      }
    } else {
      m.covariance.diagonal() = m.standard_errors.cwiseAbs2();
    }
    m.log_likelihood = j.at("log_likelihood").get<double>();
    m.null_log_likelihood = j.at("null_log_likelihood").get<double>();
    m.n = j.at("n").get<std::size_t>();
    m.iterations = j.value("iterations", 0);
    m.converged = j.value("converged", true);
    if (m.converged) {
      finish_inference(m);
    } else if (m.null_log_likelihood < 0.0) {
      m.pseudo_r2 = mcfadden_r2(m);
    }
    return {std::move(m), std::move(scheme)};
  } catch (const nlohmann::json::exception& e) {
    throw EstimationError(std::string("invalid model JSON: ") + e.what());
  }
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string lpad(std::string s, std::size_t width) {
  if (s.size() < width) s.insert(0, width - s.size(), ' ');
  return s;
}

std::string table_p(double p) { return p < 0.001 ? "<0.001" : fixed(p, 3); }

}  // namespace

std::string render_report(const FittedConjointModel& m, const design::AttributeScheme& scheme) {
  std::string out;
  std::size_t name_w = 9;
  for (const auto& n : m.column_names) name_w = std::max(name_w, n.size());
  name_w += 2;

  out += "Logistic regression (" + std::string(to_string(m.encoding)) + " encoding)\n";
  out += pad("Attribute", name_w) + lpad("Coefficient", 12) + lpad("Std. error", 12) +
         lpad("Z-value", 10) + lpad("P-value", 10) + "\n";
  for (Eigen::Index i = 0; i < m.coefficients.size(); ++i) {
    auto name = m.column_names[static_cast<std::size_t>(i)];
    if (name == "intercept") name = "Intercept";
    out += pad(name, name_w) + lpad(fixed(m.coefficients[i], 3), 12) +
           lpad(fixed(m.standard_errors[i], 3), 12);
    if (m.z_values.size() > i) {
      out += lpad(fixed(m.z_values[i], 3), 10) + lpad(table_p(m.p_values[i]), 10);
    }
    out += "\n";
  }
  out += "Pseudo R2 = " + fixed(m.pseudo_r2, 3) + ", Log-Likelihood = " + fixed(m.log_likelihood, 1) +
         ", LL0 = " + fixed(m.null_log_likelihood, 2) + ", N = " + std::to_string(m.n) +
         ", iterations = " + std::to_string(m.iterations) + (m.converged ? "" : " (NOT CONVERGED)") + "\n";

  if (!m.converged) return out;

  out += "\nRelative importance\n";
  std::size_t attr_w = 9;
  for (const auto& a : scheme.attributes()) attr_w = std::max(attr_w, a.name.size());
  attr_w += 2;
  out += pad("Attribute", attr_w) + lpad("Utility", 10) + lpad("Relative importance", 22) + "\n";
  for (const auto& r : importance(m, scheme).ranked()) {
    out += pad(r.attribute, attr_w) + lpad(fixed(r.utility, 3), 10) + lpad(fixed(100.0 * r.share, 1) + "%", 22) + "\n";
  }

  if (m.encoding == Encoding::paper_dummy) {
    const auto ranking = rank_profiles(m, scheme);
    out += "\nOptimal and least preferred profiles\n";
    std::vector<std::size_t> widths;
    std::string header = pad("Ranking", 20);
    for (const auto& a : scheme.attributes()) {
      std::size_t w = a.name.size();
      for (const auto& l : a.levels) w = std::max(w, l.size());
      widths.push_back(w + 2);
      header += pad(a.name, w + 2);
    }
    out += header + "Total utility\n";
    const auto line = [&](const char* label, const RankedProfile& rp) {
      std::string s = pad(label, 20);
      for (std::size_t j = 0; j < scheme.size(); ++j) {
        s += pad(scheme[j].levels[static_cast<std::size_t>(rp.profile.levels[j])], widths[j]);
      }
      return s + fixed(rp.utility, 3) + "\n";
    };
    out += line("Highest preference", ranking.best());
    out += line("Least preference", ranking.worst());
    out += "Utility difference = " + fixed(ranking.best().utility - ranking.worst().utility, 3) + "\n";
  }
  return out;
}

nlohmann::ordered_json report_json(const FittedConjointModel& m, const design::AttributeScheme& scheme) {
  auto j = model_to_json(m, scheme);
  if (!m.converged) return j;
  for (auto& c : j["columns"]) {
    if (c.contains("p")) c["p_display"] = format_p_value(c["p"].get<double>());
  }
  auto& imp = j["importance"] = nlohmann::ordered_json::array();
  for (const auto& r : importance(m, scheme).ranked()) {
    imp.push_back({{"attribute", r.attribute}, {"utility", r.utility}, {"share", r.share}});
  }
  if (m.encoding == Encoding::paper_dummy) {
    const auto ranking = rank_profiles(m, scheme);
    const auto profile = [&](const RankedProfile& rp) {
      nlohmann::ordered_json p;
      for (std::size_t a = 0; a < scheme.size(); ++a) {
        p[scheme[a].name] = scheme[a].levels[static_cast<std::size_t>(rp.profile.levels[a])];
      }
      return nlohmann::ordered_json{{"profile", p}, {"total_utility", rp.utility}};
    };
    j["best_profile"] = profile(ranking.best());
    j["worst_profile"] = profile(ranking.worst());
  }
  return j;
}

}  // namespace cdt::estimation

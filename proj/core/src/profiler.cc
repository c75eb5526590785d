#include "hetis/profiler.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "hetis/errors.h"

namespace hetis {

void AttentionCostParams::validate() const {
  if (a < 0.0 || b < 0.0 || c < 0.0) {
    throw InvalidArgument("attention cost parameters must be non-negative");
  }
}

void TransferCostParams::validate() const {
  if (gamma < 0.0 || beta < 0.0) {
    throw InvalidArgument("transfer cost parameters must be non-negative");
  }
}

double attention_time(const AttentionCostParams& p, double heads, double units) {
  return p.a * heads + p.b * units + p.c;
}

CostEstimate transfer_time(const TransferCostParams& p, double heads, int gqa_ratio) {
  if (gqa_ratio < 1) throw InvalidArgument("transfer_time: gqa ratio must be >= 1");
  CostEstimate out;
  if (heads <= 0.0) return out;
  out.d = transfer_units_per_head(gqa_ratio) * heads;
  out.rho = p.gamma * out.d + p.beta;
  return out;
}

namespace {

// Nonnegative least squares for a handful of columns: solve OLS, drop the
// most negative coefficient, refit, until every active coefficient is >= 0.
Eigen::VectorXd clamped_least_squares(const Eigen::MatrixXd& design, const Eigen::VectorXd& y) {
  const Eigen::Index n_cols = design.cols();
  // Column scaling keeps the QR well conditioned when h, g and 1 differ by
  // many orders of magnitude.
  Eigen::VectorXd scale(n_cols);
  for (Eigen::Index j = 0; j < n_cols; ++j) {
    const double m = design.col(j).cwiseAbs().maxCoeff();
    scale(j) = m > 0.0 ? m : 1.0;
  }
  std::vector<bool> active(static_cast<std::size_t>(n_cols), true);
  Eigen::VectorXd coef = Eigen::VectorXd::Zero(n_cols);
  for (;;) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < n_cols; ++j) {
      if (active[static_cast<std::size_t>(j)]) cols.push_back(j);
    }
    coef.setZero();
    if (cols.empty()) return coef;
    Eigen::MatrixXd sub(design.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) {
      sub.col(static_cast<Eigen::Index>(k)) = design.col(cols[k]) / scale(cols[k]);
    }
    const Eigen::VectorXd sol = sub.colPivHouseholderQr().solve(y);
    Eigen::Index worst = -1;
    double worst_val = 0.0;
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const double v = sol(static_cast<Eigen::Index>(k)) / scale(cols[k]);
      coef(cols[k]) = v;
      if (v < worst_val) {
        worst_val = v;
        worst = cols[k];
      }
    }
    if (worst < 0) return coef;
    active[static_cast<std::size_t>(worst)] = false;
  }
}

int rank_of(const Eigen::MatrixXd& design) {
  Eigen::MatrixXd scaled = design;
  for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
    const double m = scaled.col(j).cwiseAbs().maxCoeff();
    if (m > 0.0) scaled.col(j) /= m;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  return static_cast<int>(qr.rank());
}

}  // namespace

AttentionCostParams fit_attention(std::span<const AttentionSample> samples) {
  if (samples.size() < 3) {
    throw FitFailure("fit_attention: need at least 3 samples, got " +
                     std::to_string(samples.size()));
  }
  std::set<double> hs;
  std::set<double> gs;
  for (const auto& s : samples) {
    hs.insert(s.heads);
    gs.insert(s.units);
  }
  if (hs.size() < 2) throw FitFailure("fit_attention: h not identifiable (one distinct value)");
  if (gs.size() < 2) throw FitFailure("fit_attention: g not identifiable (one distinct value)");

  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd design(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    design(i, 0) = s.heads;
    design(i, 1) = s.units;
    design(i, 2) = 1.0;
    y(i) = s.seconds;
  }
  if (rank_of(design) < 3) {
    throw FitFailure("fit_attention: h and g are collinear across samples");
  }
  const Eigen::VectorXd coef = clamped_least_squares(design, y);
  return {coef(0), coef(1), coef(2)};
}

TransferCostParams fit_transfer(std::span<const TransferSample> samples) {
  std::set<double> ds;
  for (const auto& s : samples) ds.insert(s.units);
  if (samples.size() < 2 || ds.size() < 2) {
    throw FitFailure("fit_transfer: d not identifiable (need two distinct transfer sizes)");
  }
  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    design(i, 0) = s.units;
    design(i, 1) = 1.0;
    y(i) = s.seconds;
  }
  const Eigen::VectorXd coef = clamped_least_squares(design, y);
  return {coef(0), coef(1)};
}

}  // namespace hetis

#include "hetis/lp.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hetis/errors.h"

namespace hetis::lp {
namespace {

constexpr double kEps = 1e-9;
constexpr double kFeasTol = 1e-7;
constexpr int kDegenerateLimit = 50;

class Tableau {
 public:
  Tableau(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_((rows + 1) * (cols + 1), 0.0), basis_(rows, 0) {}

  double& at(std::size_t r, std::size_t c) { return data_[r * (cols_ + 1) + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * (cols_ + 1) + c]; }
  double& rhs(std::size_t r) { return at(r, cols_); }
  double rhs(std::size_t r) const { return at(r, cols_); }
  // Objective row stored at index rows_: reduced costs, and -objective in rhs.
  double& obj(std::size_t c) { return at(rows_, c); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::vector<std::size_t>& basis() { return basis_; }

  void pivot(std::size_t pr, std::size_t pc) {
    const double p = at(pr, pc);
    for (std::size_t c = 0; c <= cols_; ++c) at(pr, c) /= p;
    for (std::size_t r = 0; r <= rows_; ++r) {
      if (r == pr) continue;
      const double f = at(r, pc);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c <= cols_; ++c) at(r, c) -= f * at(pr, c);
      at(r, pc) = 0.0;
    }
    basis_[pr] = pc;
  }

  // Runs simplex iterations over columns [0, allowed). Returns false when
  // unbounded.
  bool optimize(std::size_t allowed) {
    int degenerate = 0;
    const std::size_t max_iter = 50 * (rows_ + cols_) + 1000;
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
      const bool bland = degenerate >= kDegenerateLimit;
      std::size_t pc = allowed;
      double best = -kEps;
      for (std::size_t c = 0; c < allowed; ++c) {
        const double rc = obj(c);
        if (rc < best) {
          pc = c;
          if (bland) break;
          best = rc;
        }
      }
      if (pc == allowed) return true;
      std::size_t pr = rows_;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < rows_; ++r) {
        const double a = at(r, pc);
        if (a <= kEps) continue;
        const double ratio = rhs(r) / a;
        if (ratio < best_ratio - 1e-12 ||
            (ratio <= best_ratio + 1e-12 && pr < rows_ && basis_[r] < basis_[pr])) {
          best_ratio = ratio;
          pr = r;
        }
      }
      if (pr == rows_) return false;
      degenerate = best_ratio <= 1e-12 ? degenerate + 1 : 0;
      pivot(pr, pc);
    }
    throw InternalError("simplex iteration limit exceeded");
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> data_;
  std::vector<std::size_t> basis_;
};

}  // namespace

Solution solve(const LinearProgram& program) {
  const std::size_t n = program.num_vars();
  const std::size_t m = program.num_rows();

  // Normalise every row to rhs >= 0 and unit max coefficient.
  struct NormRow {
    std::vector<std::pair<std::size_t, double>> terms;
    Sense sense;
    double rhs;
  };
  std::vector<NormRow> rows;
  rows.reserve(m);
  std::size_t n_slack = 0;
  std::size_t n_art = 0;
  for (const Row& row : program.rows()) {
    double scale = 0.0;
    for (const auto& [v, a] : row.terms) {
      if (v >= n) throw InvalidArgument("lp: variable index out of range");
      scale = std::max(scale, std::abs(a));
    }
    if (scale == 0.0) scale = 1.0;
    NormRow nr{row.terms, row.sense, row.rhs / scale};
    for (auto& t : nr.terms) t.second /= scale;
    if (nr.rhs < 0.0) {
      nr.rhs = -nr.rhs;
      for (auto& t : nr.terms) t.second = -t.second;
      if (nr.sense == Sense::kLessEqual) {
        nr.sense = Sense::kGreaterEqual;
      } else if (nr.sense == Sense::kGreaterEqual) {
        nr.sense = Sense::kLessEqual;
      }
    }
    if (nr.sense != Sense::kEqual) ++n_slack;
    if (nr.sense != Sense::kLessEqual) ++n_art;
    rows.push_back(std::move(nr));
  }

  // Column layout: [structural | slack/surplus | artificial].
  const std::size_t art_begin = n + n_slack;
  const std::size_t cols = art_begin + n_art;
  Tableau t(m, cols);
  std::size_t slack = n;
  std::size_t art = art_begin;
  for (std::size_t r = 0; r < m; ++r) {
    for (const auto& [v, a] : rows[r].terms) t.at(r, v) += a;
    t.rhs(r) = rows[r].rhs;
    switch (rows[r].sense) {
      case Sense::kLessEqual:
        t.at(r, slack) = 1.0;
        t.basis()[r] = slack++;
        break;
      case Sense::kGreaterEqual:
        t.at(r, slack++) = -1.0;
        t.at(r, art) = 1.0;
        t.basis()[r] = art++;
        break;
      case Sense::kEqual:
        t.at(r, art) = 1.0;
        t.basis()[r] = art++;
        break;
    }
  }

  Solution out;
  // Phase 1: minimise the sum of artificials.
  if (n_art > 0) {
    for (std::size_t c = 0; c <= cols; ++c) t.obj(c) = 0.0;
    for (std::size_t c = art_begin; c < cols; ++c) t.obj(c) = 1.0;
    for (std::size_t r = 0; r < m; ++r) {
      if (t.basis()[r] >= art_begin) {
        for (std::size_t c = 0; c <= cols; ++c) t.obj(c) -= t.at(r, c);
      }
    }
    t.optimize(cols);
    if (-t.obj(cols) > kFeasTol) {
      out.status = Status::kInfeasible;
      return out;
    }
    // Drive remaining (zero-valued) artificials out of the basis.
    for (std::size_t r = 0; r < m; ++r) {
      if (t.basis()[r] < art_begin) continue;
      for (std::size_t c = 0; c < art_begin; ++c) {
        if (std::abs(t.at(r, c)) > kEps) {
          t.pivot(r, c);
          break;
        }
      }
    }
  }

  // Phase 2 over structural and slack columns only.
  for (std::size_t c = 0; c <= cols; ++c) t.obj(c) = 0.0;
  for (std::size_t v = 0; v < n; ++v) t.obj(v) = program.cost()[v];
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t b = t.basis()[r];
    const double cb = b < n ? program.cost()[b] : 0.0;
    if (cb == 0.0) continue;
    for (std::size_t c = 0; c <= cols; ++c) t.obj(c) -= cb * t.at(r, c);
  }
  for (std::size_t r = 0; r < m; ++r) {
    // Redundant rows keep a zero artificial in the basis; freeze it.
    if (t.basis()[r] >= art_begin) {
      for (std::size_t c = art_begin; c < cols; ++c) t.at(r, c) = 0.0;
    }
  }
  if (!t.optimize(art_begin)) {
    out.status = Status::kUnbounded;
    return out;
  }

  out.status = Status::kOptimal;
  out.x.assign(n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t b = t.basis()[r];
    if (b < n) out.x[b] = std::max(0.0, t.rhs(r));
  }
  out.objective = 0.0;
  for (std::size_t v = 0; v < n; ++v) out.objective += program.cost()[v] * out.x[v];
  return out;
}

}  // namespace hetis::lp

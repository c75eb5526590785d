#pragma once

#include <cstddef>
#include <vector>

namespace hetis::lp {

enum class Sense { kLessEqual, kEqual, kGreaterEqual };

enum class Status { kOptimal, kInfeasible, kUnbounded };

struct Row {
  std::vector<std::pair<std::size_t, double>> terms;  // (variable, coefficient)
  Sense sense = Sense::kLessEqual;
  double rhs = 0.0;
};

// minimize c^T x subject to rows, x >= 0.
class LinearProgram {
 public:
  explicit LinearProgram(std::size_t n_vars) : cost_(n_vars, 0.0) {}

  std::size_t num_vars() const { return cost_.size(); }
  std::size_t num_rows() const { return rows_.size(); }

  void set_cost(std::size_t var, double c) { cost_.at(var) = c; }
  void add_row(Row row) { rows_.push_back(std::move(row)); }

  const std::vector<double>& cost() const { return cost_; }
  const std::vector<Row>& rows() const { return rows_; }

 private:
  std::vector<double> cost_;
  std::vector<Row> rows_;
};

struct Solution {
  Status status = Status::kInfeasible;
  double objective = 0.0;
  std::vector<double> x;
};

// Dense two-phase primal simplex. Rows are equilibrated before solving;
// Dantzig pricing falls back to Bland's rule on degenerate stalls.
Solution solve(const LinearProgram& program);

}  // namespace hetis::lp

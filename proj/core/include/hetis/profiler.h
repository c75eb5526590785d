#pragma once

#include <span>
#include <vector>

namespace hetis {

// Decode attention time on one device: tau = a*h + b*g + c, where h counts
// resident query heads and g counts cached head-token units (one K or one V
// vector of one KV head for one token, one layer).
struct AttentionCostParams {
  double a = 0.0;  // seconds per query head
  double b = 0.0;  // seconds per head-token unit
  double c = 0.0;  // fixed seconds

  void validate() const;
};

// Alpha-beta model of head-wise traffic between a primary worker and an
// attention worker: rho = gamma*d + beta, d = (2 + 2/r)*h transfer units.
struct TransferCostParams {
  double gamma = 0.0;  // seconds per transfer unit
  double beta = 0.0;   // fixed seconds per message

  void validate() const;
};

struct CostEstimate {
  double tau = 0.0;  // attention compute seconds
  double rho = 0.0;  // transfer seconds
  double d = 0.0;    // transfer units
};

double attention_time(const AttentionCostParams& p, double heads, double units);

// Returns rho and d only; tau is left at zero. A worker with no offloaded
// heads receives no message, so h == 0 yields rho == 0 rather than beta.
CostEstimate transfer_time(const TransferCostParams& p, double heads, int gqa_ratio);

// Transfer units moved per offloaded query head: q and output per head plus
// K and V per KV group.
inline double transfer_units_per_head(int gqa_ratio) {
  return 2.0 + 2.0 / static_cast<double>(gqa_ratio);
}

struct AttentionSample {
  double heads = 0.0;
  double units = 0.0;
  double seconds = 0.0;
};

struct TransferSample {
  double units = 0.0;
  double seconds = 0.0;
};

// Ordinary least squares on (h, g, 1). Negative coefficients are clamped to
// zero and the remaining terms refit. Throws FitFailure when h or g is not
// identifiable from the samples.
AttentionCostParams fit_attention(std::span<const AttentionSample> samples);

// Least-squares line through (d, seconds) with the same clamping rule.
TransferCostParams fit_transfer(std::span<const TransferSample> samples);

// Profiling grid: every combination of the given head counts and cache sizes,
// timed with `truth`. `noise` is a per-sample multiplicative factor source
// (1.0 for noiseless data).
template <typename NoiseFn>
std::vector<AttentionSample> make_attention_grid(const AttentionCostParams& truth,
                                                 std::span<const double> heads,
                                                 std::span<const double> units, NoiseFn&& noise) {
  std::vector<AttentionSample> out;
  out.reserve(heads.size() * units.size());
  for (double h : heads) {
    for (double g : units) {
      out.push_back({h, g, attention_time(truth, h, g) * noise()});
    }
  }
  return out;
}

}  // namespace hetis

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hetis/cluster.h"

namespace hetis {

struct TraceEntry {
  double arrival_s = 0.0;
  std::int64_t prompt_tokens = 1;
  std::int64_t output_tokens = 1;
};

// Token-length distribution parsed from "const:N", "uniform:LO,HI" or
// "lognormal:MU,SIGMA" (of the natural log of the length). Samples are
// rounded and clamped to [1, max_tokens].
class LengthDist {
 public:
  enum class Kind { kConst, kUniform, kLognormal };

  static LengthDist parse(const std::string& text);
  static LengthDist constant(std::int64_t n);
  static LengthDist lognormal(double mu, double sigma);

  std::int64_t sample(std::mt19937_64& rng) const;
  double mean() const;
  std::string to_string() const;

  Kind kind() const { return kind_; }

  std::int64_t max_tokens = 32768;

 private:
  Kind kind_ = Kind::kConst;
  double p1_ = 1.0;
  double p2_ = 0.0;
};

// Arrival rate `rate` (req/s) from `start` until `end` seconds.
struct RateSegment {
  double start = 0.0;
  double end = 0.0;
  double rate = 0.0;
};

// Poisson arrivals over [0, duration).
std::vector<TraceEntry> poisson_trace(double rate, double duration, const LengthDist& prompt,
                                      const LengthDist& output, std::uint64_t seed);

// Piecewise-constant rate; segments must not overlap.
std::vector<TraceEntry> piecewise_trace(const std::vector<RateSegment>& segments,
                                        const LengthDist& prompt, const LengthDist& output,
                                        std::uint64_t seed);

// A rate that climbs linearly from 0 to `peak` over `ramp` seconds, holds for
// `hold` seconds and falls back to 0 over `ramp` seconds, in `steps` segments
// per ramp.
std::vector<RateSegment> ramp_profile(double peak, double ramp, double hold, int steps);

// JSON lines with arrival_s, prompt_tokens, output_tokens. Entries are
// returned sorted by arrival (stable).
std::vector<TraceEntry> parse_trace(const std::string& jsonl);
std::vector<TraceEntry> load_trace(const std::string& path);
std::string trace_to_jsonl(const std::vector<TraceEntry>& trace);

WorkloadProfile profile_of(const std::vector<TraceEntry>& trace, double mean_batch);

}  // namespace hetis

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hetis/errors.h"
#include "hetis/workload.h"

namespace hetis {
namespace {

TEST(LengthDist, ParsesTheThreeForms) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(LengthDist::parse("const:128").sample(rng), 128);
  const LengthDist u = LengthDist::parse("uniform:10,20");
  for (int k = 0; k < 200; ++k) {
    const auto v = u.sample(rng);
    EXPECT_GE(v, 10);
    EXPECT_LE(v, 20);
  }
  EXPECT_EQ(LengthDist::parse("lognormal:6.5,0.5").kind(), LengthDist::Kind::kLognormal);
}

TEST(LengthDist, RejectsMalformedText) {
  for (const char* bad : {"", "const", "const:0", "uniform:5,2", "lognormal:1", "lognormal:1,-1",
                          "gamma:1,2", "const:abc"}) {
    EXPECT_THROW(LengthDist::parse(bad), InvalidArgument) << bad;
  }
}

TEST(LengthDist, LognormalMeanMatchesSamples) {
  const LengthDist d = LengthDist::lognormal(5.0, 0.4);
  std::mt19937_64 rng(7);
  double sum = 0.0;
  const int n = 20000;
  for (int k = 0; k < n; ++k) sum += static_cast<double>(d.sample(rng));
  EXPECT_NEAR(sum / n / d.mean(), 1.0, 0.02);
}

TEST(LengthDist, SamplesAreClamped) {
  LengthDist d = LengthDist::lognormal(20.0, 0.1);
  d.max_tokens = 4096;
  std::mt19937_64 rng(3);
  EXPECT_EQ(d.sample(rng), 4096);
}

TEST(PoissonTrace, RateAndOrdering) {
  const auto t = poisson_trace(4.0, 500.0, LengthDist::constant(10), LengthDist::constant(5), 42);
  EXPECT_NEAR(static_cast<double>(t.size()) / 2000.0, 1.0, 0.1);
  for (std::size_t k = 1; k < t.size(); ++k) EXPECT_LE(t[k - 1].arrival_s, t[k].arrival_s);
  EXPECT_LT(t.back().arrival_s, 500.0);
}

TEST(PoissonTrace, SameSeedSameTrace) {
  const auto a = poisson_trace(1.0, 100.0, LengthDist::lognormal(6, 0.5), LengthDist::constant(5), 9);
  const auto b = poisson_trace(1.0, 100.0, LengthDist::lognormal(6, 0.5), LengthDist::constant(5), 9);
  EXPECT_EQ(trace_to_jsonl(a), trace_to_jsonl(b));
  const auto c = poisson_trace(1.0, 100.0, LengthDist::lognormal(6, 0.5), LengthDist::constant(5), 10);
  EXPECT_NE(trace_to_jsonl(a), trace_to_jsonl(c));
}

TEST(RampProfile, ClimbsHoldsAndFalls) {
  const auto segs = ramp_profile(2.5, 60, 30, 10);
  ASSERT_EQ(segs.size(), 21u);
  EXPECT_DOUBLE_EQ(segs.front().start, 0.0);
  EXPECT_LT(segs.front().rate, 0.2);
  EXPECT_DOUBLE_EQ(segs[10].rate, 2.5);
  EXPECT_DOUBLE_EQ(segs.back().end, 150.0);
  EXPECT_LT(segs.back().rate, 0.2);
  for (std::size_t k = 1; k < segs.size(); ++k) EXPECT_DOUBLE_EQ(segs[k].start, segs[k - 1].end);
}

TEST(PiecewiseTrace, OverlapRejected) {
  EXPECT_THROW(piecewise_trace({{0, 10, 1}, {5, 15, 1}}, LengthDist::constant(1), LengthDist::constant(1), 0),
               InvalidArgument);
}

TEST(PiecewiseTrace, ZeroRateSegmentIsEmpty) {
  const auto t = piecewise_trace({{0, 50, 0}, {50, 100, 2}}, LengthDist::constant(1),
                                 LengthDist::constant(1), 5);
  ASSERT_FALSE(t.empty());
  EXPECT_GE(t.front().arrival_s, 50.0);
}

TEST(Trace, JsonLinesRoundTrip) {
  const auto a = poisson_trace(2.0, 20.0, LengthDist::constant(33), LengthDist::constant(7), 1);
  const auto b = parse_trace(trace_to_jsonl(a));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_DOUBLE_EQ(a[k].arrival_s, b[k].arrival_s);
    EXPECT_EQ(a[k].prompt_tokens, b[k].prompt_tokens);
  }
}

TEST(Trace, ParseErrorsCarryTheLine) {
  try {
    parse_trace("{\"arrival_s\": 0, \"prompt_tokens\": 5, \"output_tokens\": 3}\n{broken\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_trace("{\"arrival_s\": 0, \"prompt_tokens\": 0, \"output_tokens\": 3}"), ParseError);
  EXPECT_THROW(parse_trace("{\"arrival_s\": 0}"), ParseError);
}

TEST(Trace, SortedByArrivalAndBlankLinesSkipped) {
  const auto t = parse_trace(
      "{\"arrival_s\": 3, \"prompt_tokens\": 1, \"output_tokens\": 1}\n\n"
      "{\"arrival_s\": 1, \"prompt_tokens\": 2, \"output_tokens\": 1}\n");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].prompt_tokens, 2);
}

TEST(Trace, MissingFileIsNotFound) {
  try {
    load_trace("/nonexistent/trace.jsonl");
    FAIL();
  } catch (const NotFound& e) {
    EXPECT_NE(std::string(e.what()).find("trace not found"), std::string::npos);
  }
}

TEST(ProfileOf, Means) {
  const std::vector<TraceEntry> t{{0, 100, 10}, {1, 300, 30}};
  const WorkloadProfile p = profile_of(t, 4);
  EXPECT_DOUBLE_EQ(p.mean_prompt_len, 200);
  EXPECT_DOUBLE_EQ(p.mean_output_len, 20);
  EXPECT_DOUBLE_EQ(p.mean_batch, 4);
  EXPECT_THROW(profile_of({}, 4), InvalidArgument);
}

}  // namespace
}  // namespace hetis

#include "hetis/workload.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "hetis/config_io.h"
#include "hetis/errors.h"

namespace hetis {

namespace {

std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidArgument(what + ": '" + item + "' is not a number");
    }
  }
  return out;
}

}  // namespace

LengthDist LengthDist::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw InvalidArgument("length distribution '" + text + "' must look like kind:params");
  }
  const std::string kind = text.substr(0, colon);
  const std::vector<double> p = parse_numbers(text.substr(colon + 1), "length distribution");
  LengthDist d;
  if (kind == "const") {
    if (p.size() != 1 || p[0] < 1) throw InvalidArgument("const:N needs one value >= 1");
    d.kind_ = Kind::kConst;
    d.p1_ = std::round(p[0]);
  } else if (kind == "uniform") {
    if (p.size() != 2 || p[0] < 1 || p[1] < p[0]) {
      throw InvalidArgument("uniform:LO,HI needs 1 <= LO <= HI");
    }
    d.kind_ = Kind::kUniform;
    d.p1_ = std::round(p[0]);
    d.p2_ = std::round(p[1]);
  } else if (kind == "lognormal") {
    if (p.size() != 2 || p[1] < 0) throw InvalidArgument("lognormal:MU,SIGMA needs SIGMA >= 0");
    d.kind_ = Kind::kLognormal;
    d.p1_ = p[0];
    d.p2_ = p[1];
  } else {
    throw InvalidArgument("unknown length distribution '" + kind + "'");
  }
  return d;
}

LengthDist LengthDist::constant(std::int64_t n) {
  return parse("const:" + std::to_string(n));
}

LengthDist LengthDist::lognormal(double mu, double sigma) {
  LengthDist d;
  d.kind_ = Kind::kLognormal;
  d.p1_ = mu;
  d.p2_ = sigma;
  return d;
}

std::int64_t LengthDist::sample(std::mt19937_64& rng) const {
  double v = p1_;
  switch (kind_) {
    case Kind::kConst:
      break;
    case Kind::kUniform:
      v = static_cast<double>(std::uniform_int_distribution<std::int64_t>(
          static_cast<std::int64_t>(p1_), static_cast<std::int64_t>(p2_))(rng));
      break;
    case Kind::kLognormal:
      v = std::round(std::lognormal_distribution<double>(p1_, p2_)(rng));
      break;
  }
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(v), 1, max_tokens);
}

double LengthDist::mean() const {
  switch (kind_) {
    case Kind::kConst:
      return p1_;
    case Kind::kUniform:
      return 0.5 * (p1_ + p2_);
    case Kind::kLognormal:
      return std::exp(p1_ + 0.5 * p2_ * p2_);
  }
  return p1_;
}

std::string LengthDist::to_string() const {
  std::ostringstream os;
  switch (kind_) {
    case Kind::kConst:
      os << "const:" << p1_;
      break;
    case Kind::kUniform:
      os << "uniform:" << p1_ << ',' << p2_;
      break;
    case Kind::kLognormal:
      os << "lognormal:" << p1_ << ',' << p2_;
      break;
  }
  return os.str();
}

std::vector<TraceEntry> poisson_trace(double rate, double duration, const LengthDist& prompt,
                                      const LengthDist& output, std::uint64_t seed) {
  if (!(rate > 0.0)) throw InvalidArgument("rate must be > 0");
  if (!(duration >= 0.0)) throw InvalidArgument("duration must be >= 0");
  return piecewise_trace({{0.0, duration, rate}}, prompt, output, seed);
}

std::vector<TraceEntry> piecewise_trace(const std::vector<RateSegment>& segments,
                                        const LengthDist& prompt, const LengthDist& output,
                                        std::uint64_t seed) {
  std::vector<RateSegment> segs = segments;
  std::stable_sort(segs.begin(), segs.end(),
                   [](const RateSegment& a, const RateSegment& b) { return a.start < b.start; });
  for (std::size_t k = 0; k < segs.size(); ++k) {
    if (segs[k].end < segs[k].start || segs[k].rate < 0.0) {
      throw InvalidArgument("rate segments need end >= start and rate >= 0");
    }
    if (k > 0 && segs[k].start < segs[k - 1].end) {
      throw InvalidArgument("rate segments overlap");
    }
  }
  std::mt19937_64 rng(seed);
  std::vector<TraceEntry> out;
  for (const RateSegment& s : segs) {
    if (s.rate <= 0.0) continue;
    std::exponential_distribution<double> gap(s.rate);
    for (double t = s.start + gap(rng); t < s.end; t += gap(rng)) {
      TraceEntry e;
      e.arrival_s = t;
      e.prompt_tokens = prompt.sample(rng);
      e.output_tokens = output.sample(rng);
      out.push_back(e);
    }
  }
  return out;
}

std::vector<RateSegment> ramp_profile(double peak, double ramp, double hold, int steps) {
  if (steps < 1 || !(ramp > 0.0) || hold < 0.0 || peak < 0.0) {
    throw InvalidArgument("ramp_profile: bad parameters");
  }
  std::vector<RateSegment> out;
  const double dt = ramp / steps;
  for (int k = 0; k < steps; ++k) {
    out.push_back({k * dt, (k + 1) * dt, peak * (k + 0.5) / steps});
  }
  if (hold > 0.0) out.push_back({ramp, ramp + hold, peak});
  for (int k = 0; k < steps; ++k) {
    out.push_back({ramp + hold + k * dt, ramp + hold + (k + 1) * dt,
                   peak * (steps - k - 0.5) / steps});
  }
  return out;
}

std::vector<TraceEntry> parse_trace(const std::string& jsonl) {
  std::vector<TraceEntry> out;
  std::istringstream in(jsonl);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      TraceEntry e;
      e.arrival_s = j.at("arrival_s").get<double>();
      e.prompt_tokens = j.at("prompt_tokens").get<std::int64_t>();
      e.output_tokens = j.at("output_tokens").get<std::int64_t>();
      if (e.arrival_s < 0.0 || e.prompt_tokens < 1 || e.output_tokens < 1) {
        throw ParseError("trace line " + std::to_string(lineno) +
                         ": arrival_s must be >= 0 and token counts >= 1");
      }
      out.push_back(e);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const TraceEntry& a, const TraceEntry& b) {
    return a.arrival_s < b.arrival_s;
  });
  return out;
}

std::vector<TraceEntry> load_trace(const std::string& path) {
  return parse_trace(read_text_file(path, "trace"));
}

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace) {
  std::string out;
  for (const TraceEntry& e : trace) {
    nlohmann::json j;
    j["arrival_s"] = e.arrival_s;
    j["prompt_tokens"] = e.prompt_tokens;
    j["output_tokens"] = e.output_tokens;
    out += j.dump();
    out += '\n';
  }
  return out;
}

WorkloadProfile profile_of(const std::vector<TraceEntry>& trace, double mean_batch) {
  if (trace.empty()) throw InvalidArgument("profile_of: empty trace");
  WorkloadProfile p;
  double prompt = 0.0;
  double output = 0.0;
  for (const auto& e : trace) {
    prompt += static_cast<double>(e.prompt_tokens);
    output += static_cast<double>(e.output_tokens);
  }
  p.mean_prompt_len = prompt / static_cast<double>(trace.size());
  p.mean_output_len = output / static_cast<double>(trace.size());
  p.mean_batch = mean_batch;
  p.validate();
  return p;
}

}  // namespace hetis

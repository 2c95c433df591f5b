#pragma once

#include <chrono>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "mapet/errors.hpp"

namespace mapet {

struct MetricsRecord {
  std::string phase;  // pretrain | finetune | probe | eval_tokens | eval
  std::size_t step = 0;
  double epoch = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> top1;
  std::optional<double> top5;

  nlohmann::json to_json() const {
    nlohmann::json j{{"phase", phase}, {"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}};
    if (top1) j["top1"] = *top1;
    if (top5) j["top5"] = *top5;
    return j;
  }
};

// Newline-delimited JSON. Wall-clock time goes to a sidecar
// "<path>.timing.ndjson" so the main log is a pure function of config and
// seed. Steps must not decrease within a phase.
class MetricsLogger {
 public:
  MetricsLogger() = default;

  explicit MetricsLogger(const std::string& path)
      : out_(path, std::ios::trunc), timing_(path + ".timing.ndjson", std::ios::trunc),
        start_(std::chrono::steady_clock::now()) {
    if (!out_ || !timing_) throw DataError("metrics: cannot create " + path);
  }

  bool enabled() const { return out_.is_open(); }

  void log(const MetricsRecord& r) {
    if (r.top1) detail::check(*r.top1 >= 0.0 && *r.top1 <= 1.0, "metrics: top1 outside [0, 1]");
    if (r.top5) detail::check(*r.top5 >= 0.0 && *r.top5 <= 1.0, "metrics: top5 outside [0, 1]");
    if (r.phase == last_phase_) detail::check(r.step >= last_step_, "metrics: step index went backwards");
    last_phase_ = r.phase;
    last_step_ = r.step;
    ++count_;
    if (!enabled()) return;
    out_ << r.to_json().dump() << '\n';
    out_.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    timing_ << nlohmann::json{{"phase", r.phase}, {"step", r.step}, {"wall_clock", secs}}.dump() << '\n';
  }

  std::size_t count() const { return count_; }

 private:
  std::ofstream out_, timing_;
  std::chrono::steady_clock::time_point start_{};
  std::string last_phase_;
  std::size_t last_step_ = 0;
  std::size_t count_ = 0;
};

}  // namespace mapet

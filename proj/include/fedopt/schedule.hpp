#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "fedopt/error.hpp"

namespace fedopt {

enum class ScheduleKind { Constant, MultiStage, ReduceOnPlateau };

// Learning-rate multiplier over communication rounds.
struct Schedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double decay = 0.1;                             // MultiStage factor per milestone
  std::vector<double> milestones = {0.5, 0.75};   // fractions of T
  std::size_t patience = 10;                      // ReduceOnPlateau
  double factor = 0.1;

  void validate() const {
    if (!(decay > 0.0)) throw ParameterError("schedule: decay must be > 0");
    for (double f : milestones) {
      if (!(f > 0.0 && f < 1.0)) throw ParameterError("schedule: milestone fractions must be in (0, 1)");
    }
    if (kind == ScheduleKind::ReduceOnPlateau && (!(factor > 0.0) || patience == 0)) {
      throw ParameterError("schedule: plateau needs factor > 0 and patience >= 1");
    }
  }
};

// Tracks plateau state; multiplier(t, T) is pure for the other kinds.
class ScheduleState {
 public:
  explicit ScheduleState(Schedule schedule) : schedule_(std::move(schedule)) { schedule_.validate(); }

  double multiplier(std::size_t t, std::size_t total_rounds) const {
    switch (schedule_.kind) {
      case ScheduleKind::Constant:
        return 1.0;
      case ScheduleKind::MultiStage: {
        double m = 1.0;
        for (double f : schedule_.milestones) {
          if (static_cast<double>(t) >= f * static_cast<double>(total_rounds)) m *= schedule_.decay;
        }
        return m;
      }
      case ScheduleKind::ReduceOnPlateau:
        return plateau_multiplier_;
    }
    return 1.0;
  }

  // Feed the round's monitored loss (ReduceOnPlateau only).
  void observe(double loss) {
    if (schedule_.kind != ScheduleKind::ReduceOnPlateau) return;
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      return;
    }
    if (++stale_ >= schedule_.patience) {
      plateau_multiplier_ *= schedule_.factor;
      stale_ = 0;
    }
  }

  const Schedule& schedule() const noexcept { return schedule_; }

 private:
  Schedule schedule_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  double plateau_multiplier_ = 1.0;
};

inline double apply_schedule(const ScheduleState& state, std::size_t t, std::size_t total_rounds) {
  if (t >= total_rounds) throw ParameterError("apply_schedule: t must be < T");
  return state.multiplier(t, total_rounds);
}

}  // namespace fedopt

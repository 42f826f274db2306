#include <gtest/gtest.h>

#include "fedopt/schedule.hpp"

using namespace fedopt;

namespace {

ScheduleState multistage() {
  Schedule s;
  s.kind = ScheduleKind::MultiStage;
  return ScheduleState(s);
}

ScheduleState plateau(std::size_t patience, double factor) {
  Schedule s;
  s.kind = ScheduleKind::ReduceOnPlateau;
  s.patience = patience;
  s.factor = factor;
  return ScheduleState(s);
}

}  // namespace

TEST(MultiStage, Examples) {
  const auto s = multistage();
  EXPECT_EQ(apply_schedule(s, 0, 100), 1.0);
  EXPECT_NEAR(apply_schedule(s, 99, 100), 0.01, 1e-15);
}

TEST(MultiStage, Boundaries) {
  const auto s = multistage();
  for (std::size_t T : {4u, 10u, 100u, 101u, 1000u}) {
    for (std::size_t t = 0; t < T; ++t) {
      const double m = apply_schedule(s, t, T);
      if (2 * t < T) {
        EXPECT_EQ(m, 1.0) << t << "/" << T;
      } else if (4 * t < 3 * T) {
        EXPECT_NEAR(m, 0.1, 1e-15) << t << "/" << T;
      } else {
        EXPECT_NEAR(m, 0.01, 1e-15) << t << "/" << T;
      }
    }
  }
}

TEST(Constant, AlwaysOne) {
  const ScheduleState s{Schedule{}};
  for (std::size_t t = 0; t < 50; ++t) EXPECT_EQ(apply_schedule(s, t, 50), 1.0);
}

TEST(Plateau, StrictlyDecreasingLossNeverDecays) {
  auto s = plateau(1, 0.5);
  for (std::size_t t = 0; t < 500; ++t) {
    s.observe(1000.0 - static_cast<double>(t));
    EXPECT_EQ(apply_schedule(s, t, 500), 1.0);
  }
}

TEST(Plateau, DecaysAfterPatienceUnimprovedRounds) {
  auto s = plateau(3, 0.1);
  s.observe(1.0);
  s.observe(1.0);
  s.observe(2.0);
  EXPECT_EQ(s.multiplier(0, 10), 1.0);
  s.observe(1.5);  // third round without improvement
  EXPECT_NEAR(s.multiplier(0, 10), 0.1, 1e-15);
  s.observe(0.5);  // improvement resets the counter
  s.observe(0.6);
  s.observe(0.6);
  EXPECT_NEAR(s.multiplier(0, 10), 0.1, 1e-15);
  s.observe(0.7);
  EXPECT_NEAR(s.multiplier(0, 10), 0.01, 1e-15);
}

TEST(Plateau, ObserveIgnoredForOtherKinds) {
  auto s = multistage();
  for (int i = 0; i < 100; ++i) s.observe(1.0);
  EXPECT_EQ(s.multiplier(0, 10), 1.0);
}

TEST(Schedule, Validation) {
  Schedule s;
  s.kind = ScheduleKind::MultiStage;
  s.milestones = {0.5, 1.0};
  EXPECT_THROW(ScheduleState{s}, ParameterError);
  s.milestones = {0.0};
  EXPECT_THROW(ScheduleState{s}, ParameterError);
  s.milestones = {0.5};
  s.decay = 0.0;
  EXPECT_THROW(ScheduleState{s}, ParameterError);
  Schedule p;
  p.kind = ScheduleKind::ReduceOnPlateau;
  p.patience = 0;
  EXPECT_THROW(ScheduleState{p}, ParameterError);
  EXPECT_THROW(apply_schedule(multistage(), 10, 10), ParameterError);
}

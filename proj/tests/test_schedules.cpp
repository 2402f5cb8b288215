#include <gtest/gtest.h>

#include <cmath>

#include "disent/schedules.hpp"

using namespace disent;

TEST(Capacity, EndpointsAndMidpoint) {
  const CapacitySchedule s{0.0, 25.0, 1000};
  EXPECT_EQ(capacity_at(s, 0), 0.0);
  EXPECT_EQ(capacity_at(s, 500), 12.5);
  EXPECT_EQ(capacity_at(s, 1000), 25.0);
  EXPECT_EQ(capacity_at(s, 90000), 25.0);
}

TEST(Capacity, MonotoneAndPure) {
  const CapacitySchedule s{2.0, 25.0, 777};
  double prev = -1.0;
  for (std::uint64_t i = 0; i < 2000; i += 3) {
    const double c = capacity_at(s, i);
    EXPECT_GE(c, prev);
    EXPECT_EQ(c, capacity_at(s, i));
    EXPECT_LE(c, 25.0);
    prev = c;
  }
}

TEST(Capacity, Validation) {
  EXPECT_THROW((CapacitySchedule{5.0, 1.0, 10}.validate()), ConfigError);
  EXPECT_THROW((CapacitySchedule{-1.0, 1.0, 10}.validate()), ConfigError);
  EXPECT_THROW((CapacitySchedule{0.0, 1.0, 0}.validate()), ConfigError);
  EXPECT_NO_THROW((CapacitySchedule{0.0, 25.0, 1}.validate()));
}

TEST(ReconWeight, ConstantAndLinear) {
  for (std::uint64_t i : {0u, 10u, 100000u}) EXPECT_EQ(recon_weight_at({1.0, 1.0, 5}, i), 1.0);
  const ReconWeightSchedule s{5.0, 1.0, 100};
  EXPECT_EQ(recon_weight_at(s, 0), 5.0);
  EXPECT_EQ(recon_weight_at(s, 50), 3.0);
  EXPECT_EQ(recon_weight_at(s, 100), 1.0);
  EXPECT_EQ(recon_weight_at(s, 1000), 1.0);
  double prev = 6.0;
  for (std::uint64_t i = 0; i <= 120; ++i) {
    EXPECT_LE(recon_weight_at(s, i), prev);
    prev = recon_weight_at(s, i);
  }
  EXPECT_THROW((ReconWeightSchedule{0.0, 1.0, 10}.validate()), ConfigError);
}

TEST(Plateau, StrictlyDecreasingNeverChangesLr) {
  PlateauLRState s;
  s.current_lr = 1e-3;
  for (int e = 0; e < 50; ++e) EXPECT_EQ(plateau_update(s, 100.0 - e), 1e-3);
}

TEST(Plateau, TraceWithPatienceTwo) {
  PlateauLRState s;
  s.current_lr = 0.001;
  s.patience = 2;
  const double values[] = {10, 9, 9, 9, 9};
  std::vector<double> lrs;
  for (double v : values) lrs.push_back(plateau_update(s, v));
  EXPECT_EQ(lrs[0], 0.001);
  EXPECT_EQ(lrs[3], 0.001);
  EXPECT_EQ(lrs[4], 0.001 * 0.95);
  EXPECT_EQ(s.epochs_since_best, 0u);
}

TEST(Plateau, GeometricDecayFlooredAtMinLr) {
  PlateauLRState s;
  s.current_lr = 0.001;
  s.patience = 0;
  s.min_lr = 5e-4;
  plateau_update(s, 1.0);
  double expected = 0.001;
  for (int k = 1; k <= 30; ++k) {
    const double lr = plateau_update(s, 1.0);
    expected = std::max(expected * 0.95, 5e-4);
    EXPECT_EQ(lr, expected);
    EXPECT_GE(lr, s.min_lr);
  }
  EXPECT_EQ(s.current_lr, 5e-4);
}

TEST(Plateau, SmallImprovementBelowThresholdCounts) {
  PlateauLRState s;
  s.patience = 1;
  s.threshold = 1e-2;
  plateau_update(s, 100.0);
  plateau_update(s, 99.5);  // under 1% better: not an improvement
  EXPECT_EQ(s.epochs_since_best, 1u);
  EXPECT_EQ(s.best_value, 100.0);
  plateau_update(s, 98.0);
  EXPECT_EQ(s.epochs_since_best, 0u);
}

TEST(Plateau, NaNIsAnError) {
  PlateauLRState s;
  EXPECT_THROW(plateau_update(s, std::nan("")), NumericError);
}

TEST(Plateau, NeverIncreasesLr) {
  PlateauLRState s;
  s.patience = 1;
  double prev = s.current_lr;
  const double trace[] = {5, 6, 4, 4, 4, 3, 7, 7, 7, 1, 1, 1, 1};
  for (double v : trace) {
    const double lr = plateau_update(s, v);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

#include <gtest/gtest.h>

#include "properties.hpp"

namespace {

void expect_clean(const props::Outcome& o, std::size_t cases) {
  EXPECT_EQ(o.cases, cases) << o.name;
  EXPECT_EQ(o.failures, 0u) << o.name << " worst deviation " << o.worst;
}

}  // namespace

TEST(Properties, SEAttenuation) { expect_clean(props::se_attenuation(400, 1), 400); }

TEST(Properties, AnomalyMapRange) { expect_clean(props::map_range(400, 2), 400); }

TEST(Properties, GeneratorLossScaleInvariance) { expect_clean(props::lg_scale_invariance(400, 3), 400); }

TEST(Properties, AurocMonotoneInvariance) { expect_clean(props::auroc_monotone(400, 4), 400); }

TEST(Properties, GaussianNormalization) { expect_clean(props::gaussian_normalization(400, 5), 400); }

TEST(Properties, DilatedConvMatchesInterleavedKernel) { expect_clean(props::dilated_conv_equivalence(200, 6), 200); }

TEST(Properties, AurocMatchesPairwiseOracle) { expect_clean(props::auroc_matches_pairwise(1000, 7), 1000); }

#include <gtest/gtest.h>

#include "grc/mask.hpp"
#include "oracle.hpp"

using namespace grc;

namespace {
std::vector<std::size_t> allowed_cols(const AttentionMask& m, std::size_t i) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < m.size(); ++j)
    if (m.allowed(i, j)) out.push_back(j);
  return out;
}
}  // namespace

TEST(GrcMask, FirstReconRowSeesOnlyLatentsAndItself) {
  const auto m = build_grc_mask({3, 2, 2, 1});
  EXPECT_EQ(allowed_cols(m, 5), (std::vector<std::size_t>{3, 4, 5}));
}

TEST(GrcMask, LatentRowsSeeContextCausally) {
  const auto m = build_grc_mask({3, 2, 2, 1});
  EXPECT_EQ(allowed_cols(m, 4), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(allowed_cols(m, 3), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(GrcMask, NoReconSegmentIsCausal) {
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t m = 0; m < 4; ++m)
      EXPECT_EQ(build_grc_mask({k, m, 0, 0}).materialize(), build_causal_mask(k + m).materialize());
}

TEST(CausalMask, Counts) {
  const auto one = build_causal_mask(1);
  EXPECT_TRUE(one.allowed(0, 0));
  EXPECT_EQ(one.allowed_count(), 1u);
  EXPECT_EQ(build_causal_mask(4).allowed_count(), 10u);
  EXPECT_EQ(build_causal_mask(4).materialize(), build_grc_mask({4, 0, 0, 0}).materialize());
  EXPECT_EQ(build_causal_mask(0).allowed_count(), 0u);
}

TEST(GrcMask, MatchesSegmentRulePredicate) {
  for (std::size_t k = 0; k <= 6; ++k)
    for (std::size_t m = 0; m <= 6; ++m)
      for (std::size_t t = 0; t <= 6; ++t) {
        const auto mask = build_grc_mask({k, m, t, 0});
        for (std::size_t i = 0; i < k + m + t; ++i)
          for (std::size_t j = 0; j < k + m + t; ++j)
            ASSERT_EQ(mask.allowed(i, j), oracle::grc_allowed(k, m, t, i, j)) << k << m << t << i << j;
      }
}

TEST(GrcMask, RestrictsCausal) {
  for (std::size_t k = 0; k <= 5; ++k)
    for (std::size_t m = 0; m <= 5; ++m)
      for (std::size_t t = 0; t <= 5; ++t) {
        const auto g = build_grc_mask({k, m, t, 0});
        const auto c = build_causal_mask(k + m + t);
        for (std::size_t i = 0; i < g.size(); ++i)
          for (std::size_t j = 0; j < g.size(); ++j)
            if (g.allowed(i, j)) {
        ASSERT_TRUE(c.allowed(i, j));
      }
      }
}

TEST(GrcMask, RejectsBadLayout) {
  EXPECT_THROW(build_grc_mask({3, 2, 2, 2}), ShapeError);
  EXPECT_THROW(build_grc_mask({3, 2, 0, 1}), ShapeError);
}

TEST(DenseMask, RejectsForwardAttention) {
  std::vector<std::uint8_t> bits{1, 1, 0, 1};
  EXPECT_THROW(AttentionMask::from_dense(2, bits), ShapeError);
  bits = {1, 0, 1, 1};
  const auto m = AttentionMask::from_dense(2, bits);
  EXPECT_EQ(m.materialize(), bits);
}

#include <gtest/gtest.h>

#include "shrinklm/ops.hpp"
#include "shrinklm/optim.hpp"

using namespace shrinklm;

namespace {

// Gives p the gradient g by differentiating sum(p * g).
void set_grad(Tensor<double>& p, std::vector<double> g) {
  backward(sum(mul(p, Tensor<double>::from(p.shape(), std::move(g)))));
}

}  // namespace

TEST(Lion, HandWorkedStep) {
  // p=1, m=0, g=2, lr=0.1, no decay: c = 0.2 -> sign 1 -> p = 0.9; m = 0.1.
  auto p = Tensor<double>::from({1}, {1.0}, true);
  set_grad(p, {2.0});
  Lion<double> opt({0.9, 0.95, 0.0});
  std::vector<NamedTensor<double>> params{{"w", p}};
  opt.step(params, 0.1);
  EXPECT_DOUBLE_EQ(p.item(), 0.9);
  EXPECT_NEAR(opt.momentum(p)[0], 0.1, 1e-15);
}

TEST(Lion, BetaTwoOfZeroPutsGradInMomentum) {
  auto p = Tensor<double>::from({2}, {1.0, -2.0}, true);
  set_grad(p, {1.0, 0.0});
  Lion<double> opt({0.9, 0.0, 0.0});
  std::vector<NamedTensor<double>> params{{"w", p}};
  opt.step(params, 0.1);
  EXPECT_DOUBLE_EQ(p.data()[0], 0.9);
  EXPECT_DOUBLE_EQ(p.data()[1], -2.0);  // sign(0) = 0
  EXPECT_DOUBLE_EQ(opt.momentum(p)[0], 1.0);
}

TEST(Lion, WeightDecayMasked) {
  EXPECT_TRUE(decay_enabled("layers.0.in.weight"));
  EXPECT_TRUE(decay_enabled("tok_emb"));
  EXPECT_FALSE(decay_enabled("layers.0.in.bias"));
  EXPECT_FALSE(decay_enabled("layers.3.ln.gain"));
  EXPECT_FALSE(decay_enabled("layers.3.q_ln.gain"));
  EXPECT_FALSE(decay_enabled("final_ln.gain"));
  EXPECT_FALSE(decay_enabled("head.bias"));

  auto w = Tensor<double>::from({1}, {2.0}, true), b = Tensor<double>::from({1}, {2.0}, true);
  Lion<double> opt({0.9, 0.95, 0.5});
  std::vector<NamedTensor<double>> params{{"x.weight", w}, {"x.bias", b}};
  opt.step(params, 0.1);  // zero grads: only decay moves anything
  EXPECT_DOUBLE_EQ(w.item(), 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(b.item(), 2.0);
}

TEST(Lion, SkipsFrozenParameters) {
  auto p = Tensor<double>::from({1}, {1.0}, true);
  auto frozen = Tensor<double>::from({1}, {1.0}, false);
  Lion<double> opt;
  std::vector<NamedTensor<double>> params{{"a.weight", p}, {"b.weight", frozen}};
  opt.step(params, 0.1);
  EXPECT_EQ(frozen.item(), 1.0);
  EXPECT_FALSE(opt.has_state(frozen));
  EXPECT_TRUE(opt.has_state(p));
}

TEST(Lion, StateExportImport) {
  auto p = Tensor<double>::from({2}, {1.0, 2.0}, true);
  set_grad(p, {0.5, -0.5});
  Lion<double> opt;
  std::vector<NamedTensor<double>> params{{"w", p}};
  opt.step(params, 0.01);
  auto state = opt.export_state(params);
  Lion<double> other;
  other.import_state(params, state);
  EXPECT_EQ(other.momentum(p), opt.momentum(p));
  state["w"].push_back(1.0);
  EXPECT_THROW(other.import_state(params, state), UsageError);
}

TEST(LrSchedule, WarmupCosineShape) {
  LrSchedule s{1.0, 100, 1100, 0.1};
  EXPECT_DOUBLE_EQ(s.at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.at(50), 0.5);
  EXPECT_DOUBLE_EQ(s.at(100), 1.0);
  EXPECT_NEAR(s.at(600), 0.55, 1e-12);
  EXPECT_NEAR(s.at(1100), 0.1, 1e-12);
  EXPECT_NEAR(s.at(5000), 0.1, 1e-12);  // clamped past the end
  double prev = s.at(100);
  for (std::uint64_t t = 101; t <= 1100; ++t) {
    const double v = s.at(t);
    EXPECT_LE(v, prev + 1e-15);
    EXPECT_LT(prev - v, 0.01);
    prev = v;
  }
  EXPECT_LT(std::abs(s.at(99) - s.at(100)), 0.011);
}

TEST(LrSchedule, Violations) {
  EXPECT_EQ((LrSchedule{1.0, 100, 100}.violations().size()), 1u);
  EXPECT_EQ((LrSchedule{-1.0, 100, 50, 2.0}.violations().size()), 3u);
  EXPECT_TRUE((LrSchedule{1.0, 0, 1}.violations().empty()));
}

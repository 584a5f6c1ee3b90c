#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "support/gradcheck.hpp"
#include "stairs/checkpoint.hpp"
#include "stairs/nn.hpp"

using namespace stairs;
using stairs::testing::random_tensor;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar GRU written from the gate equations, one unit at a time.
std::vector<double> gru_oracle(const std::vector<double>& h, const std::vector<double>& x, const GruParams& p) {
  const std::size_t d = h.size();
  auto dot_col = [&](const std::vector<double>& v, const Tensor& w, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += v[k] * w.at(k * d + j);
    return s;
  };
  std::vector<double> r(d), z(d), out(d);
  for (std::size_t j = 0; j < d; ++j) {
    z[j] = sig(dot_col(x, p.w_xz, j) + dot_col(h, p.w_hz, j) + p.b_z.at(j));
    r[j] = sig(dot_col(x, p.w_xr, j) + dot_col(h, p.w_hr, j) + p.b_r.at(j));
  }
  std::vector<double> rh(d);
  for (std::size_t j = 0; j < d; ++j) rh[j] = r[j] * h[j];
  for (std::size_t j = 0; j < d; ++j) {
    const double n = std::tanh(dot_col(x, p.w_xn, j) + dot_col(rh, p.w_hn, j) + p.b_n.at(j));
    out[j] = (1.0 - z[j]) * h[j] + z[j] * n;
  }
  return out;
}

}  // namespace

TEST(Gru, MatchesGateEquations) {
  Rng rng(11);
  ParamSet reg;
  const GruParams p = GruParams::create(5, rng, reg, "gru");
  EXPECT_EQ(reg.size(), 9u);
  const Tensor h = random_tensor({3, 5}, rng), x = random_tensor({3, 5}, rng);
  const Tensor out = gru_cell(h, x, p);
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<double> hs(5), xs(5);
    for (std::size_t j = 0; j < 5; ++j) {
      hs[j] = h.at(s * 5 + j);
      xs[j] = x.at(s * 5 + j);
    }
    const auto expect = gru_oracle(hs, xs, p);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(out.at(s * 5 + j), expect[j], 1e-13);
  }
}

TEST(Gru, SaturatedUpdateGateKeepsState) {
  Rng rng(12);
  ParamSet reg;
  GruParams p = GruParams::create(3, rng, reg, "gru");
  for (auto& v : p.b_z.mutable_data()) v = -1e3;  // z ~ 0
  const Tensor h = random_tensor({2, 3}, rng), x = random_tensor({2, 3}, rng);
  const Tensor out = gru_cell(h, x, p);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.at(i), h.at(i), 1e-12);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  // After one step with bias correction, m_hat = g and v_hat = g^2, so the
  // update is lr * g / (|g| + eps).
  std::vector<NamedParameter> params{{"w", Tensor::from({3}, {1.0, 2.0, -1.0}, true)}};
  auto g = params[0].value.mutable_grad();
  g[0] = 0.5;
  g[1] = -4.0;
  g[2] = 1e-3;
  AdamState st;
  st.learning_rate = 0.01;
  adam_step(params, st);
  const double eps = st.epsilon;
  EXPECT_NEAR(params[0].value.at(0), 1.0 - 0.01 * 0.5 / (0.5 + eps), 1e-15);
  EXPECT_NEAR(params[0].value.at(1), 2.0 + 0.01 * 4.0 / (4.0 + eps), 1e-15);
  EXPECT_NEAR(params[0].value.at(2), -1.0 - 0.01 * 1e-3 / (1e-3 + eps), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, SecondStepMatchesRecurrence) {
  std::vector<NamedParameter> params{{"w", Tensor::from({1}, {0.0}, true)}};
  AdamState st;
  st.learning_rate = 0.1;
  const double g1 = 2.0, g2 = -1.0;
  params[0].value.mutable_grad()[0] = g1;
  adam_step(params, st);
  params[0].value.zero_grad();
  params[0].value.mutable_grad()[0] = g2;
  adam_step(params, st);
  const double m1 = 0.1 * g1, v1 = 0.001 * g1 * g1;
  const double m2 = 0.9 * m1 + 0.1 * g2, v2 = 0.999 * v1 + 0.001 * g2 * g2;
  const double step1 = 0.1 * g1 / (std::abs(g1) + st.epsilon);
  const double step2 = 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + st.epsilon);
  EXPECT_NEAR(params[0].value.at(0), -step1 - step2, 1e-14);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::vector<NamedParameter> params{{"layer.w", Tensor::from({1}, {0.0}, true)}};
  params[0].value.mutable_grad()[0] = std::nan("");
  AdamState st;
  try {
    adam_step(params, st);
    FAIL() << "expected throw";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<NamedParameter> params{{"a", Tensor::from({2}, {0.0, 0.0}, true)},
                                     {"b", Tensor::from({1}, {0.0}, true)}};
  params[0].value.mutable_grad()[0] = 3.0;
  params[0].value.mutable_grad()[1] = 0.0;
  params[1].value.mutable_grad()[0] = 4.0;
  // The scale factor carries a 1e-12 guard in its denominator.
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(params[0].value.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(params[1].value.grad()[0], 0.8, 1e-12);
  const double after = clip_grad_norm(params, 10.0);
  EXPECT_NEAR(after, 1.0, 1e-12);
  EXPECT_NEAR(params[1].value.grad()[0], 0.8, 1e-12);
}

TEST(ParamSet, CopyAndCompare) {
  Rng rng(1);
  ParamSet a, b;
  a.add("x", uniform_param({3, 2}, 3, rng));
  b.add("x", uniform_param({3, 2}, 3, rng));
  EXPECT_FALSE(a.same_values(b));
  b.copy_from(a);
  EXPECT_TRUE(a.same_values(b));
  EXPECT_THROW(a.add("x", Tensor::zeros({1})), std::invalid_argument);
  EXPECT_EQ(a.numel(), 6u);
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(2);
  ParamSet p;
  p.add("embed.w", uniform_param({4, 3}, 4, rng));
  p.add("head.b", uniform_param({7}, 2, rng));
  const auto bytes = encode_checkpoint(p, R"({"k":1})");
  const Checkpoint c = decode_checkpoint(bytes);
  EXPECT_EQ(c.metadata, R"({"k":1})");
  ASSERT_EQ(c.entries.size(), 2u);
  EXPECT_EQ(c.entries[0].name, "embed.w");
  EXPECT_EQ(c.entries[0].shape, (Shape{4, 3}));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(c.entries[0].values[i], p.get("embed.w").at(i));
  EXPECT_EQ(encode_checkpoint(p, R"({"k":1})"), bytes);

  const auto path = std::filesystem::temp_directory_path() / "stairs_test_ckpt.bin";
  save_checkpoint(path, p, "{}");
  EXPECT_EQ(load_checkpoint(path).entries[1].values, c.entries[1].values);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsDamagedArchives) {
  ParamSet p;
  p.add("w", Tensor::full({2}, 1.0, true));
  auto bytes = encode_checkpoint(p, "{}");
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_ANY_THROW(decode_checkpoint(bad_magic));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_ANY_THROW(decode_checkpoint(truncated));
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_ANY_THROW(decode_checkpoint(trailing));
}

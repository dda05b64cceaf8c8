#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pwclo/headmask.hpp"
#include "pwclo/kittio.hpp"
#include "pwclo/net.hpp"

using namespace pwclo;
using ad::Tensor;

namespace {

kitti::FramePair desk_pair(std::uint64_t seed) {
  kitti::SynthOptions so;
  so.seed = seed;
  so.n_points = net::NetConfig::desk().num_points;
  return kitti::synth_scene(so);
}

// Plain-array FC stack: ReLU on hidden layers, linear output.
std::vector<double> fc_forward(const ad::ParameterStore& store, const Mlp& fc, std::vector<double> x) {
  for (std::size_t l = 0; l < fc.depth(); ++l) {
    const Tensor& w = store.get(fc.weight_name(l)).value;
    const Tensor& b = store.get(fc.bias_name(l)).value;
    std::vector<double> y(w.dim(1));
    for (std::size_t j = 0; j < y.size(); ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
      y[j] = l + 1 < fc.depth() ? std::max(0.0, s) : s;
    }
    x = std::move(y);
  }
  return x;
}

// Average-pooling head: mean embedding -> fc_q, fc_t -> normalized q.
geom::Pose reference_head(const ad::ParameterStore& store, const Tensor& embedding, const std::string& prefix,
                          const net::NetConfig& c, std::size_t width) {
  const std::size_t n = embedding.dim(0);
  std::vector<double> mean(width, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < width; ++j) mean[j] += embedding.at(r, j) / static_cast<double>(n);
  const Mlp fq = head::make_fc(prefix + "/fc_q", width, c.fc_hidden1, c.fc_hidden2, 4);
  const Mlp ft = head::make_fc(prefix + "/fc_t", width, c.fc_hidden1, c.fc_hidden2, 3);
  const auto q = fc_forward(store, fq, mean);
  const auto t = fc_forward(store, ft, mean);
  return geom::Pose({q[0], q[1], q[2], q[3]}, {t[0], t[1], t[2]});
}

}  // namespace

TEST(NetConfig, PresetsValidate) {
  EXPECT_NO_THROW(net::NetConfig::full().validate());
  EXPECT_NO_THROW(net::NetConfig::desk().validate());
  EXPECT_EQ(net::NetConfig::full().level_points[0], 2048u);
  EXPECT_EQ(net::NetConfig::desk().num_points, 512u);
  EXPECT_THROW(net::NetConfig::preset("huge"), std::invalid_argument);
}

TEST(NetConfig, UnknownKeyIsNamed) {
  net::NetConfig c;
  try {
    c.set("mask_enabeld", "false");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("mask_enabeld"), std::string::npos);
  }
}

TEST(NetConfig, TextRoundTrip) {
  net::NetConfig c = net::NetConfig::desk();
  c.mask_enabled = false;
  c.costvol_variant = cv::Variant::kUniform;
  c.widths = {4, 8, 12, 16};
  std::stringstream ss;
  net::write_config(ss, c);
  const net::NetConfig back = net::parse_config(ss, net::NetConfig::full());
  EXPECT_EQ(back.entries(), c.entries());
}

TEST(NetConfig, RejectsInconsistentLevels) {
  net::NetConfig c = net::NetConfig::desk();
  c.level_points = {128, 256, 32, 16};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Network, DeskParameterCountPinned) {
  const net::Network network(net::NetConfig::desk());
  EXPECT_EQ(net::count_parameters(network.init_parameters(1)), 121396u);
}

TEST(Network, ForwardInvariants) {
  const net::Network network(net::NetConfig::desk());
  const auto store = network.init_parameters(3);
  const auto pair = desk_pair(5);
  ad::Tape tape;
  const auto out = network.forward(tape, store, pair.pc1, pair.pc2);
  ASSERT_EQ(out.poses.size(), 4u);
  ASSERT_EQ(out.levels.size(), 4u);
  const auto& c = network.config();
  for (std::size_t l = 0; l < 4; ++l) {
    const Tensor& q = out.poses[l].q.value();
    EXPECT_NEAR(std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]), 1.0, 1e-9);
    EXPECT_EQ(out.levels[l].coords.dim(0), c.level_points[l]);
    ASSERT_TRUE(out.levels[l].mask.has_value());
    const Tensor& m = *out.levels[l].mask;
    for (std::size_t ch = 0; ch < m.dim(1); ++ch) {
      double s = 0;
      for (std::size_t r = 0; r < m.dim(0); ++r) s += m.at(r, ch);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Network, DeterministicGivenInputs) {
  const net::Network network(net::NetConfig::desk());
  const auto store = network.init_parameters(3);
  const auto pair = desk_pair(6);
  net::ForwardOptions fo;
  fo.fps_seed = 11;
  ad::Tape t1, t2;
  const auto a = network.forward(t1, store, pair.pc1, pair.pc2, fo).pose_values();
  const auto b = network.forward(t2, store, pair.pc1, pair.pc2, fo).pose_values();
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_EQ(a[l].q(), b[l].q());
    EXPECT_EQ(a[l].t(), b[l].t());
  }
}

TEST(Network, NoMaskEqualsAveragePoolingHead) {
  net::NetConfig c = net::NetConfig::desk();
  c.mask_enabled = false;
  const net::Network network(c);
  const auto store = network.init_parameters(4);
  const auto pair = desk_pair(7);
  ad::Tape tape;
  const auto out = network.forward(tape, store, pair.pc1, pair.pc2);
  ASSERT_EQ(out.poses.size(), 4u);
  const auto poses = out.pose_values();
  for (const auto& lvl : out.levels) EXPECT_FALSE(lvl.mask.has_value());

  // Coarsest: the initial head. Finer levels: residual head composed onto the coarser pose.
  geom::Pose expect = reference_head(store, out.levels[3].embedding, "embed", c, c.widths[3]);
  EXPECT_LT(geom::angular_distance(poses[3].q(), expect.q()), 1e-7);
  EXPECT_LT(geom::norm(geom::operator-(poses[3].t(), expect.t())), 1e-12);
  for (int l = 2; l >= 0; --l) {
    const geom::Pose delta =
        reference_head(store, out.levels[l].embedding, "refine/l" + std::to_string(l + 1), c, c.widths[l]);
    expect = geom::pose_compose(delta, poses[l + 1]);
    EXPECT_LT(geom::angular_distance(poses[l].q(), expect.q()), 1e-7) << l;
    EXPECT_LT(geom::norm(geom::operator-(poses[l].t(), expect.t())), 1e-12) << l;
  }
}

TEST(Network, NoRefinementEmitsOnePose) {
  net::NetConfig c = net::NetConfig::desk();
  c.refinement_enabled = false;
  const net::Network network(c);
  const auto store = network.init_parameters(4);
  const auto pair = desk_pair(8);
  ad::Tape tape;
  EXPECT_EQ(network.forward(tape, store, pair.pc1, pair.pc2).poses.size(), 1u);
}

TEST(Network, AblationsRun) {
  for (const char* key : {"mask_optimization", "warp_enabled"}) {
    net::NetConfig c = net::NetConfig::desk();
    c.set(key, "false");
    const net::Network network(c);
    const auto store = network.init_parameters(2);
    const auto pair = desk_pair(9);
    ad::Tape tape;
    EXPECT_EQ(network.forward(tape, store, pair.pc1, pair.pc2).poses.size(), 4u) << key;
  }
  net::NetConfig c = net::NetConfig::desk();
  c.first_embedding = net::FirstEmbedding::kLast;
  c.costvol_variant = cv::Variant::kUniform;
  const net::Network network(c);
  const auto store = network.init_parameters(2);
  const auto pair = desk_pair(10);
  ad::Tape tape;
  EXPECT_EQ(network.forward(tape, store, pair.pc1, pair.pc2).poses.size(), 4u);
}

TEST(Network, ValidateRejectsForeignStore) {
  const net::Network desk(net::NetConfig::desk());
  net::NetConfig wide = net::NetConfig::desk();
  wide.widths = {16, 16, 32, 64};
  EXPECT_NO_THROW(desk.validate(desk.init_parameters(1)));
  EXPECT_THROW(desk.validate(net::Network(wide).init_parameters(1)), ad::ShapeError);
}

TEST(Network, RejectsWrongPointCount) {
  const net::Network network(net::NetConfig::desk());
  const auto store = network.init_parameters(1);
  const auto pair = desk_pair(1);
  kitti::SynthOptions so;
  so.n_points = 100;
  const auto small = kitti::synth_scene(so);
  ad::Tape tape;
  EXPECT_THROW(network.forward(tape, store, small.pc1, pair.pc2), std::invalid_argument);
}

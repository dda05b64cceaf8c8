#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "pwclo/kittio.hpp"

using namespace pwclo;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> pack(const std::vector<float>& v) {
  std::vector<unsigned char> out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

double max_residual(const pc::PointCloud& a, const pc::PointCloud& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.coords.size(); ++i) worst = std::max(worst, std::fabs(a.coords[i] - b.coords[i]));
  return worst;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pwclo_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kIdentityCalib =
    "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n"
    "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n";

}  // namespace

TEST(Velodyne, TwoRecordsParseBitExactly) {
  const std::vector<float> raw{1.5f, -2.25f, 0.125f, 0.9f, 1e-7f, 3.0e4f, -0.0f, 0.1f};
  const auto pc = kitti::parse_velodyne(pack(raw));
  ASSERT_EQ(pc.size(), 2u);
  const double expect[6] = {1.5, -2.25, 0.125, 1e-7f, 3.0e4f, -0.0f};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(pc.coords[i], expect[i]);
  EXPECT_TRUE(std::signbit(pc.coords[5]));
  EXPECT_FALSE(pc.features.has_value());
}

TEST(Velodyne, EmptyInputGivesEmptyCloud) {
  EXPECT_EQ(kitti::parse_velodyne({}).size(), 0u);
}

TEST(Velodyne, TruncatedRecordRejected) {
  for (std::size_t len : {1u, 15u, 17u, 31u}) {
    std::vector<unsigned char> bytes(len, 0);
    EXPECT_THROW(kitti::parse_velodyne(bytes), kitti::FormatError) << len;
  }
}

TEST(Velodyne, NonFiniteRecordsDropped) {
  const float nan = std::numeric_limits<float>::quiet_NaN(), inf = std::numeric_limits<float>::infinity();
  const std::vector<float> raw{1, 2, 3, 0, nan, 0, 0, 0, 4, 5, 6, 0, 0, inf, 0, 0, 7, 8, 9, nan};
  std::size_t dropped = 0;
  const auto pc = kitti::parse_velodyne(pack(raw), &dropped);
  EXPECT_EQ(pc.size(), 3u);
  EXPECT_EQ(dropped, 2u);
  EXPECT_EQ(pc.coords[6], 7.0);
}

TEST(Velodyne, FileRoundTrip) {
  const fs::path dir = scratch_dir("velo");
  const std::vector<float> raw{0.5f, 1.5f, 2.5f, 0.0f};
  {
    std::ofstream out(dir / "000000.bin", std::ios::binary);
    const auto b = pack(raw);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  EXPECT_EQ(kitti::read_velodyne_bin((dir / "000000.bin").string()).coords[2], 2.5);
  EXPECT_THROW(kitti::read_velodyne_bin((dir / "missing.bin").string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Calib, IdentityAndLegacyKey) {
  std::istringstream a(kIdentityCalib);
  EXPECT_EQ(kitti::parse_calib(a).tr, geom::Transform4::identity());
  std::istringstream b("Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n");
  const auto c = kitti::parse_calib(b);
  EXPECT_EQ(c.tr(0, 1), -1.0);
  EXPECT_EQ(c.tr(2, 0), 1.0);
}

TEST(Calib, MalformedRejected) {
  for (const char* text : {"P0: 1 0 0 0 0 1 0 0 0 0 1 0\n", "Tr: 1 0 0 0 0 1 0 0 0 0 1\n",
                           "Tr: 2 0 0 0 0 1 0 0 0 0 1 0\n", "Tr: 1 0 0 0 0 1 0 0 0 0 1 x\n", ""}) {
    std::istringstream in(text);
    EXPECT_THROW(kitti::parse_calib(in), kitti::FormatError) << text;
  }
}

TEST(Poses, RoundTripAtNineDigits) {
  std::vector<geom::Transform4> poses;
  for (int i = 0; i < 5; ++i)
    poses.push_back(geom::pose_to_matrix(
        geom::Pose(geom::Quaternion::from_axis_angle({0.1, 1, 0.2}, 0.1 * i), {1.0 * i, -0.3 * i, 12.3456789 * i})));
  std::stringstream ss;
  kitti::write_poses(ss, poses);
  const auto back = kitti::parse_poses(ss);
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t k = 0; k < poses.size(); ++k)
    for (int i = 0; i < 12; ++i) {
      const double a = poses[k].m[i], b = back[k].m[i];
      EXPECT_LE(std::fabs(a - b), 5e-9 * std::max(1.0, std::fabs(a)));
    }
}

TEST(Poses, MalformedRejected) {
  for (const char* text : {"1 0 0 0 0 1 0 0 0 0 1\n", "1 0 0 0 0 1 0 0 0 0 1 0 7\n", "1 0 0 0 0 1 0 0 0 0 1 nan?\n",
                           "a b c d e f g h i j k l\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(kitti::parse_poses(in), kitti::FormatError) << text;
  }
}

TEST(Preprocess, CropAndGroundRemoval) {
  pc::PointCloud raw;
  raw.coords = ad::Tensor::matrix(5, 3, {0, 0, 0,  20, 0, 0,  0, 1.5, 0,  0, 0, -16,  14.9, 1.17, 14.9});
  std::istringstream c(kIdentityCalib);
  const auto out = kitti::preprocess(raw, kitti::parse_calib(c));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out.point(0), (geom::Vec3{0, 0, 0}));
  EXPECT_EQ(out.point(1), (geom::Vec3{14.9, 1.17, 14.9}));
  EXPECT_EQ(kitti::crop_and_remove_ground(out).coords, out.coords);
}

TEST(Preprocess, CalibrationApplied) {
  pc::PointCloud raw;
  raw.coords = ad::Tensor::matrix(1, 3, {5, 0, 0});
  kitti::Calibration calib;
  calib.tr = geom::Transform4::from_3x4({0, -1, 0, 0, 0, 0, -1, 0, 1, 0, 0, 0});
  const auto out = kitti::preprocess(raw, calib);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.point(0), (geom::Vec3{0, 0, 5}));
}

TEST(RelativeGt, MatchesMatrixConvention) {
  const auto pi = geom::pose_to_matrix(geom::Pose(geom::Quaternion::from_axis_angle({0, 1, 0}, 0.3), {1, 2, 3}));
  const auto pj = geom::pose_to_matrix(geom::Pose(geom::Quaternion::from_axis_angle({0, 1, 0.1}, 0.5), {2, 2, 5}));
  const geom::Pose rel = kitti::relative_gt(pi, pj);
  const geom::Vec3 p{0.7, -1.2, 9.0};
  // World point seen in frame i must map to the same world point seen in frame j.
  const geom::Vec3 world = pi.apply(p);
  const geom::Vec3 in_j = pj.inverse().apply(world);
  const geom::Vec3 got = rel.apply(p);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[c], in_j[c], 1e-12);
}

TEST(Augment, PreservesClosedLoop) {
  kitti::SynthOptions so;
  so.seed = 3;
  const auto pair = kitti::synth_scene(so);
  ASSERT_LT(max_residual(kitti::warp_cloud(pair.pc1, pair.gt), pair.pc2), 1e-9);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto aug = kitti::augment(pair, {5.0, 0.5}, s);
    EXPECT_LT(max_residual(kitti::warp_cloud(aug.pc1, aug.gt), aug.pc2), 1e-9) << s;
    EXPECT_EQ(aug.pc2.coords, pair.pc2.coords);
  }
}

TEST(Augment, ZeroSigmasIsIdentityAndSeedDeterministic) {
  kitti::SynthOptions so;
  so.seed = 4;
  const auto pair = kitti::synth_scene(so);
  const auto same = kitti::augment(pair, {0.0, 0.0}, 17);
  EXPECT_EQ(same.pc1.coords, pair.pc1.coords);
  EXPECT_EQ(same.gt.q(), pair.gt.q());
  const auto a = kitti::augment(pair, {}, 17), b = kitti::augment(pair, {}, 17), c = kitti::augment(pair, {}, 18);
  EXPECT_EQ(a.pc1.coords, b.pc1.coords);
  EXPECT_NE(a.pc1.coords, c.pc1.coords);
}

TEST(Synth, BoundsAndDeterminism) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    kitti::SynthOptions so;
    so.seed = s;
    const auto p = kitti::synth_scene(so);
    EXPECT_EQ(p.pc1.size(), 512u);
    EXPECT_EQ(p.pc2.size(), 512u);
    EXPECT_LE(geom::rotation_angle(p.gt.q()), 10.0 * M_PI / 180 + 1e-12);
    EXPECT_LE(geom::norm(p.gt.t()), 0.5 + 1e-12);
    EXPECT_LT(max_residual(kitti::warp_cloud(p.pc1, p.gt), p.pc2), 1e-9);
  }
  kitti::SynthOptions so;
  so.seed = 8;
  so.noise_sigma = 0.01;
  so.dropout = 0.1;
  const auto a = kitti::synth_scene(so), b = kitti::synth_scene(so);
  EXPECT_EQ(a.pc2.coords, b.pc2.coords);
  EXPECT_LT(a.pc2.size(), 512u);
  EXPECT_GT(a.pc2.size(), 400u);
}

TEST(Synth, ZeroBoundsGiveIdentity) {
  kitti::SynthOptions so;
  so.max_rot_deg = 0;
  so.max_trans_m = 0;
  const auto p = kitti::synth_scene(so);
  EXPECT_EQ(p.pc1.coords, p.pc2.coords);
}

TEST(Synth, DatasetRoundTrip) {
  const fs::path dir = scratch_dir("synthset");
  std::vector<kitti::FramePair> pairs;
  for (std::uint64_t s = 0; s < 3; ++s) {
    kitti::SynthOptions so;
    so.seed = s;
    so.n_points = 64;
    so.noise_sigma = 0.01;
    pairs.push_back(kitti::synth_scene(so));
  }
  kitti::write_synth_dataset(dir.string(), pairs);
  const auto back = kitti::read_synth_dataset(dir.string());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].pc1.coords, pairs[i].pc1.coords);
    EXPECT_EQ(back[i].pc2.coords, pairs[i].pc2.coords);
    EXPECT_LT(geom::angular_distance(back[i].gt.q(), pairs[i].gt.q()), 1e-12);
  }
  {
    std::ofstream(dir / "index.txt") << "pwclo-synth 1\ncount 2\n";
  }
  EXPECT_THROW(kitti::read_synth_dataset(dir.string()), kitti::FormatError);
  fs::remove_all(dir);
}

TEST(Sequence, ReadsKittiLayout) {
  const fs::path root = scratch_dir("kitti");
  fs::create_directories(root / "sequences/07/velodyne");
  fs::create_directories(root / "poses");
  std::ofstream(root / "sequences/07/calib.txt") << kIdentityCalib;
  for (int f = 0; f < 3; ++f) {
    const std::vector<float> raw{1.0f * f, 0, 2, 0, 0, 0, 30, 0};
    const auto b = pack(raw);
    char name[16];
    std::snprintf(name, sizeof name, "%06d.bin", f);
    std::ofstream(root / "sequences/07/velodyne" / name, std::ios::binary)
        .write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  std::ofstream(root / "poses/07.txt") << "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 1\n1 0 0 0 0 1 0 0 0 0 1 2\n";
  const kitti::KittiSequence seq(root.string(), "07");
  EXPECT_EQ(seq.frame_count(), 3u);
  ASSERT_TRUE(seq.has_poses());
  EXPECT_EQ(seq.frame(2).size(), 1u);
  const auto pr = seq.pair(0);
  EXPECT_NEAR(pr.gt.t()[2], -1.0, 1e-12);
  fs::remove_all(root);
}

TEST(MalformedCorpus, RejectedWithoutCrash) {
  const fs::path dir = scratch_dir("corpus");
  const std::vector<std::pair<std::string, std::string>> files{
      {"short.bin", std::string(7, '\x01')}, {"odd.bin", std::string(33, '\0')}, {"calib_empty.txt", ""},
      {"calib_garbage.txt", "Tr: \xff\xfe\n"}, {"poses_short.txt", "1 2 3\n"}, {"poses_text.txt", "hello world\n"}};
  for (const auto& [name, content] : files) {
    std::ofstream(dir / name, std::ios::binary) << content;
    const std::string p = (dir / name).string();
    if (name.ends_with(".bin"))
      EXPECT_THROW(kitti::read_velodyne_bin(p), kitti::FormatError) << name;
    else if (name.starts_with("calib"))
      EXPECT_THROW(kitti::read_calib(p), kitti::FormatError) << name;
    else
      EXPECT_THROW(kitti::read_poses(p), kitti::FormatError) << name;
  }
  fs::remove_all(dir);
}

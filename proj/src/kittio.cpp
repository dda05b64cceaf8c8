#include "pwclo/kittio.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace pwclo::kitti {

namespace fs = std::filesystem;
using geom::Pose;
using geom::Transform4;
using geom::Vec3;
using geom::operator+;
using geom::operator-;
using geom::operator*;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ifstream open_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

// Strict whitespace-separated doubles; any garbage token is an error.
std::vector<double> parse_numbers(std::string_view line, const std::string& context) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i == line.size()) break;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    const char* first = line.data() + i;
    const char* last = line.data() + j;
    if (*first == '+') ++first;
    double v = 0;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
      throw FormatError(context + ": bad number '" + std::string(line.substr(i, j - i)) + "'");
    }
    out.push_back(v);
    i = j;
  }
  return out;
}

std::array<double, 12> to_block(const std::vector<double>& v, const std::string& context) {
  if (v.size() != 12) throw FormatError(context + ": expected 12 values, got " + std::to_string(v.size()));
  std::array<double, 12> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace

pc::PointCloud parse_velodyne(std::span<const unsigned char> bytes, std::size_t* dropped) {
  if (bytes.size() % 16 != 0) {
    throw FormatError("velodyne data length " + std::to_string(bytes.size()) + " is not a multiple of 16");
  }
  const std::size_t n = bytes.size() / 16;
  std::vector<Vec3> pts;
  pts.reserve(n);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p{};
    bool finite = true;
    for (std::size_t j = 0; j < 3; ++j) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, bytes.data() + 16 * i + 4 * j, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      const float f = std::bit_cast<float>(bits);
      finite = finite && std::isfinite(f);
      p[j] = f;
    }
    if (finite) {
      pts.push_back(p);
    } else {
      ++bad;
    }
  }
  if (dropped) *dropped = bad;
  return pc::PointCloud::from_points(pts);
}

pc::PointCloud read_velodyne_bin(const std::string& path, std::size_t* dropped) {
  const std::string data = read_file(path);
  try {
    return parse_velodyne({reinterpret_cast<const unsigned char*>(data.data()), data.size()}, dropped);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

Calibration parse_calib(std::istream& in) {
  std::string line;
  while (std::getline(in, line)) {
    std::string_view sv(line);
    for (std::string_view key : {"Tr:", "Tr_velo_to_cam:"}) {
      if (sv.substr(0, key.size()) != key) continue;
      Calibration c;
      c.tr = Transform4::from_3x4(to_block(parse_numbers(sv.substr(key.size()), "calib Tr"), "calib Tr"));
      if (c.tr.orthonormality_error() > 1e-4) throw FormatError("calib Tr rotation block is not orthonormal");
      return c;
    }
  }
  throw FormatError("calib has no Tr row");
}

Calibration read_calib(const std::string& path) {
  auto in = open_text(path);
  try {
    return parse_calib(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<Transform4> parse_poses(std::istream& in) {
  std::vector<Transform4> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    const std::string ctx = "pose line " + std::to_string(lineno);
    out.push_back(Transform4::from_3x4(to_block(parse_numbers(line, ctx), ctx)));
  }
  return out;
}

std::vector<Transform4> read_poses(const std::string& path) {
  auto in = open_text(path);
  try {
    return parse_poses(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_poses(std::ostream& out, std::span<const Transform4> poses) {
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << std::setprecision(9);
  for (const auto& p : poses) {
    const auto b = p.to_3x4();
    for (std::size_t i = 0; i < 12; ++i) out << (i ? " " : "") << b[i];
    out << '\n';
  }
  out.flags(flags);
  out.precision(prec);
}

pc::PointCloud transform_cloud(const pc::PointCloud& in, const Transform4& t) {
  pc::PointCloud out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Vec3 p = t.apply(in.point(i));
    for (std::size_t j = 0; j < 3; ++j) out.coords[3 * i + j] = p[j];
  }
  return out;
}

pc::PointCloud warp_cloud(const pc::PointCloud& in, const Pose& pose) {
  pc::PointCloud out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Vec3 p = pose.apply(in.point(i));
    for (std::size_t j = 0; j < 3; ++j) out.coords[3 * i + j] = p[j];
  }
  return out;
}

pc::PointCloud crop_and_remove_ground(const pc::PointCloud& in, const PreprocessOptions& opts) {
  const double y_max = opts.sensor_height - opts.ground_clearance;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Vec3 p = in.point(i);
    if (std::fabs(p[0]) <= opts.half_width && std::fabs(p[2]) <= opts.half_width && p[1] <= y_max) keep.push_back(i);
  }
  pc::PointCloud out;
  out.coords = ad::Tensor(ad::Shape{keep.size(), 3});
  for (std::size_t r = 0; r < keep.size(); ++r)
    for (std::size_t j = 0; j < 3; ++j) out.coords[3 * r + j] = in.coords[3 * keep[r] + j];
  if (in.features) {
    const std::size_t c = in.features->dim(1);
    out.features = ad::Tensor(ad::Shape{keep.size(), c});
    for (std::size_t r = 0; r < keep.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) (*out.features)[c * r + j] = (*in.features)[c * keep[r] + j];
  }
  return out;
}

pc::PointCloud preprocess(const pc::PointCloud& raw, const Calibration& calib, const PreprocessOptions& opts) {
  return crop_and_remove_ground(transform_cloud(raw, calib.tr), opts);
}

Pose relative_gt(const Transform4& pose_i, const Transform4& pose_j) {
  return geom::matrix_to_pose(pose_j.inverse() * pose_i, 1e-4);
}

Transform4 draw_augmentation(const AugmentSigmas& sigmas, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double yaw = unit(rng) * sigmas.rot_deg * kDeg;
  const double pitch = unit(rng) * sigmas.rot_deg * kDeg;
  const double roll = unit(rng) * sigmas.rot_deg * kDeg;
  Vec3 t{};
  for (auto& v : t) v = unit(rng) * sigmas.trans_m;
  return geom::pose_to_matrix(Pose(geom::euler_to_quat(yaw, pitch, roll), t));
}

FramePair augment(const FramePair& pair, const AugmentSigmas& sigmas, std::uint64_t seed) {
  if (sigmas.rot_deg == 0.0 && sigmas.trans_m == 0.0) return pair;
  const Transform4 aug = draw_augmentation(sigmas, seed);
  FramePair out = pair;
  out.pc1 = transform_cloud(pair.pc1, aug);
  // pc2 = T_p pc1 = (T_p aug^-1) (aug pc1)
  out.gt = geom::matrix_to_pose(geom::pose_to_matrix(pair.gt) * aug.inverse());
  return out;
}

FramePair synth_scene(const SynthOptions& opts) {
  if (opts.n_points < 8) throw std::invalid_argument("synth_scene needs at least 8 points");
  if (opts.dropout < 0.0 || opts.dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(opts.extent_m > 0.0)) throw std::invalid_argument("scene extent must be positive");
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };

  // Structure: a few vertical walls, some boxes and tilted planes, camera y
  // pointing down, everything above the ground.
  struct Patch {
    Vec3 origin, du, dv;
  };
  std::vector<Patch> patches;
  const int walls = 2 + static_cast<int>(rng() % 3);
  for (int w = 0; w < walls; ++w) {
    const double heading = uniform(0.0, std::numbers::pi);
    const double len = uniform(8.0, 20.0);
    const Vec3 dir{std::cos(heading), 0.0, std::sin(heading)};
    const Vec3 center{uniform(-10.0, 10.0), 0.0, uniform(-10.0, 10.0)};
    patches.push_back({center - (len / 2) * dir + Vec3{0, 1.1, 0}, len * dir, Vec3{0, -uniform(2.0, 5.0), 0}});
  }
  const int boxes = 3 + static_cast<int>(rng() % 4);
  for (int b = 0; b < boxes; ++b) {
    const Vec3 c{uniform(-12.0, 12.0), 1.1, uniform(-12.0, 12.0)};
    const double sx = uniform(0.5, 2.5), sz = uniform(0.5, 2.5), h = uniform(1.0, 3.0);
    patches.push_back({c, Vec3{sx, 0, 0}, Vec3{0, -h, 0}});
    patches.push_back({c, Vec3{0, 0, sz}, Vec3{0, -h, 0}});
    patches.push_back({c + Vec3{sx, 0, 0}, Vec3{0, 0, sz}, Vec3{0, -h, 0}});
    patches.push_back({c + Vec3{0, 0, sz}, Vec3{sx, 0, 0}, Vec3{0, -h, 0}});
    patches.push_back({c + Vec3{0, -h, 0}, Vec3{sx, 0, 0}, Vec3{0, 0, sz}});
  }
  // Tilted planes make every translation axis observable.
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int tilted = 2 + static_cast<int>(rng() % 2);
  for (int t = 0; t < tilted; ++t) {
    Vec3 a{gauss(rng), gauss(rng), gauss(rng)}, b{gauss(rng), gauss(rng), gauss(rng)};
    a = (1.0 / geom::norm(a)) * a;
    b = b - geom::dot(a, b) * a;
    b = (1.0 / geom::norm(b)) * b;
    const double la = uniform(3.0, 8.0), lb = uniform(3.0, 8.0);
    const Vec3 c{uniform(-10.0, 10.0), uniform(-3.0, 0.0), uniform(-10.0, 10.0)};
    patches.push_back({c - (la / 2) * a - (lb / 2) * b, la * a, lb * b});
  }
  std::vector<double> area(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) area[i] = geom::norm(patches[i].du) * geom::norm(patches[i].dv);
  std::discrete_distribution<std::size_t> pick(area.begin(), area.end());

  const std::size_t clutter = opts.n_points / 5;
  std::vector<Vec3> pts;
  pts.reserve(opts.n_points);
  for (std::size_t i = 0; i < opts.n_points - clutter; ++i) {
    const Patch& p = patches[pick(rng)];
    pts.push_back(p.origin + u01(rng) * p.du + u01(rng) * p.dv);
  }
  for (std::size_t i = 0; i < clutter; ++i) pts.push_back({uniform(-14.0, 14.0), uniform(-2.0, 1.1), uniform(-14.0, 14.0)});
  // Layout above is drawn on a 30 m square; scale it to the requested extent.
  const double scale = opts.extent_m / 30.0;
  for (Vec3& p : pts) p = scale * p;

  // Pose: uniform axis, angle and translation magnitude within the bounds.
  std::normal_distribution<double> unit(0.0, 1.0);
  auto random_dir = [&] {
    Vec3 a{unit(rng), unit(rng), unit(rng)};
    const double n = geom::norm(a);
    return n > 0 ? (1.0 / n) * a : Vec3{0, 1, 0};
  };
  const Vec3 axis = random_dir();
  const double angle = uniform(0.0, opts.max_rot_deg * kDeg);
  const Vec3 tdir = random_dir();
  const double tmag = uniform(0.0, opts.max_trans_m);
  const Pose gt = opts.max_rot_deg == 0.0 && opts.max_trans_m == 0.0
                      ? Pose::identity()
                      : Pose(geom::Quaternion::from_axis_angle(axis, angle), tmag * tdir);

  std::vector<Vec3> moved;
  moved.reserve(pts.size());
  std::normal_distribution<double> noise(0.0, opts.noise_sigma > 0 ? opts.noise_sigma : 1.0);
  for (const Vec3& p : pts) {
    Vec3 q = gt.apply(p);
    if (opts.noise_sigma > 0) {
      for (auto& v : q) v += noise(rng);
    }
    if (opts.dropout > 0 && u01(rng) < opts.dropout) continue;
    moved.push_back(q);
  }
  if (moved.empty()) moved.push_back(gt.apply(pts.front()));

  FramePair pair;
  pair.pc1 = pc::PointCloud::from_points(pts);
  pair.pc2 = pc::PointCloud::from_points(moved);
  pair.gt = gt;
  pair.sequence = "synth";
  pair.frame = 0;
  return pair;
}

namespace {

constexpr const char* kSynthHeader = "pwclo-synth 1";

void write_points(const fs::path& path, const pc::PointCloud& pc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3 p = pc.point(i);
    out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

pc::PointCloud read_points(const fs::path& path) {
  auto in = open_text(path.string());
  std::vector<Vec3> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    const std::string ctx = path.string() + ":" + std::to_string(lineno);
    const auto v = parse_numbers(line, ctx);
    if (v.size() != 3) throw FormatError(ctx + ": expected 3 values");
    pts.push_back({v[0], v[1], v[2]});
  }
  return pc::PointCloud::from_points(pts);
}

std::string cloud_name(std::size_t i, int which) {
  std::ostringstream ss;
  ss << "pair_" << std::setw(6) << std::setfill('0') << i << '_' << which << ".txt";
  return ss.str();
}

}  // namespace

void write_synth_dataset(const std::string& dir, std::span<const FramePair> pairs) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    write_points(fs::path(dir) / cloud_name(i, 1), pairs[i].pc1);
    write_points(fs::path(dir) / cloud_name(i, 2), pairs[i].pc2);
  }
  const fs::path index = fs::path(dir) / "index.txt";
  const fs::path tmp = fs::path(dir) / "index.txt.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << kSynthHeader << '\n';
    out << "# pc1 pc2 qw qx qy qz tx ty tz\n";
    out << "count " << pairs.size() << '\n';
    out << std::setprecision(17);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& q = pairs[i].gt.q();
      const auto& t = pairs[i].gt.t();
      out << cloud_name(i, 1) << ' ' << cloud_name(i, 2) << ' ' << q.w << ' ' << q.x << ' ' << q.y << ' ' << q.z
          << ' ' << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, index);
}

std::vector<FramePair> read_synth_dataset(const std::string& dir) {
  const fs::path index = fs::path(dir) / "index.txt";
  auto in = open_text(index.string());
  std::string line;
  if (!std::getline(in, line) || line != kSynthHeader) throw FormatError(index.string() + ": bad header");
  std::size_t count = 0;
  bool have_count = false;
  std::vector<FramePair> out;
  while (std::getline(in, line)) {
    if (blank(line) || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string a, b;
    ss >> a;
    if (!have_count) {
      if (a != "count" || !(ss >> count)) throw FormatError(index.string() + ": missing count");
      have_count = true;
      continue;
    }
    ss >> b;
    std::string rest;
    std::getline(ss, rest);
    const auto v = parse_numbers(rest, index.string());
    if (v.size() != 7) throw FormatError(index.string() + ": expected 7 pose values");
    FramePair pair;
    pair.pc1 = read_points(fs::path(dir) / a);
    pair.pc2 = read_points(fs::path(dir) / b);
    pair.gt = Pose(geom::Quaternion{v[0], v[1], v[2], v[3]}, Vec3{v[4], v[5], v[6]});
    pair.sequence = "synth";
    pair.frame = out.size();
    out.push_back(std::move(pair));
  }
  if (!have_count || out.size() != count) throw FormatError(index.string() + ": count mismatch");
  return out;
}

KittiSequence::KittiSequence(std::string root, std::string sequence, PreprocessOptions opts)
    : root_(std::move(root)), sequence_(std::move(sequence)), opts_(opts) {
  const fs::path seq = fs::path(root_) / "sequences" / sequence_;
  calib_ = read_calib((seq / "calib.txt").string());
  const fs::path velo = seq / "velodyne";
  if (!fs::is_directory(velo)) throw std::runtime_error("missing " + velo.string());
  for (const auto& e : fs::directory_iterator(velo)) {
    if (e.path().extension() == ".bin") ++frame_count_;
  }
  const fs::path poses = fs::path(root_) / "poses" / (sequence_ + ".txt");
  if (fs::exists(poses)) {
    poses_ = read_poses(poses.string());
    if (poses_.size() != frame_count_) {
      throw FormatError(poses.string() + ": " + std::to_string(poses_.size()) + " poses for " +
                        std::to_string(frame_count_) + " frames");
    }
  }
}

pc::PointCloud KittiSequence::frame(std::size_t index) const {
  if (index >= frame_count_) throw std::out_of_range("frame index out of range");
  std::ostringstream name;
  name << std::setw(6) << std::setfill('0') << index << ".bin";
  const fs::path file = fs::path(root_) / "sequences" / sequence_ / "velodyne" / name.str();
  return preprocess(read_velodyne_bin(file.string()), calib_, opts_);
}

FramePair KittiSequence::pair(std::size_t index) const {
  FramePair p;
  p.pc1 = frame(index);
  p.pc2 = frame(index + 1);
  if (has_poses()) p.gt = relative_gt(poses_[index], poses_[index + 1]);
  p.sequence = sequence_;
  p.frame = index;
  return p;
}

}  // namespace pwclo::kitti

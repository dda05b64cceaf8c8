#include "pwclo/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace pwclo::train {

using ad::Tensor;
using ad::Var;
using geom::operator-;

std::vector<double> LossParams::weights(std::size_t levels) const {
  if (levels == 1) return {alphas.at(0)};
  if (levels != alphas.size()) {
    throw std::invalid_argument("have " + std::to_string(alphas.size()) + " alphas for " + std::to_string(levels) +
                                " output levels");
  }
  std::vector<double> w = alphas;
  if (!finest_first) std::reverse(w.begin(), w.end());
  return w;
}

void init_loss_parameters(ad::ParameterStore& store, const LossParams& lp) {
  store.add(kSxName, Tensor::scalar(lp.s_x_init));
  store.add(kSqName, Tensor::scalar(lp.s_q_init));
}

Var level_loss(const head::PoseVar& pred, const geom::Pose& gt, Var s_x, Var s_q) {
  ad::Tape& tape = *pred.q.tape;
  const auto& gq = gt.q();
  const auto& gtt = gt.t();
  Var q_gt = tape.constant(Tensor(ad::Shape{1, 4}, std::vector<double>{gq.w, gq.x, gq.y, gq.z}));
  Var t_gt = tape.constant(Tensor(ad::Shape{1, 3}, std::vector<double>{gtt[0], gtt[1], gtt[2]}));

  // Both signs of q describe the same rotation; compare on the w >= 0 side.
  // gt goes through the same normalization so an exact match cancels to zero.
  const double sign = pred.q.value()[0] < 0.0 ? -1.0 : 1.0;
  Var q = ad::scale(pred.q, sign);
  q = ad::div(q, ad::norm_rows(q));
  if (gq.w < 0.0) q_gt = ad::scale(q_gt, -1.0);
  q_gt = ad::div(q_gt, ad::norm_rows(q_gt));

  Var t_err = ad::sum_all(ad::abs(ad::sub(t_gt, pred.t)));
  Var q_err = ad::sum_all(ad::norm_rows(ad::sub(q_gt, q)));
  Var lt = ad::add(ad::mul(t_err, ad::exp(ad::neg(s_x))), s_x);
  Var lq = ad::add(ad::mul(q_err, ad::exp(ad::neg(s_q))), s_q);
  return ad::add(lt, lq);
}

LossBreakdown total_loss(ad::Tape& tape, const ad::ParameterStore& store, const net::NetOutput& out,
                         const geom::Pose& gt, std::span<const double> alphas) {
  if (out.poses.empty()) throw std::invalid_argument("network output has no poses");
  if (alphas.size() != out.poses.size()) {
    throw std::invalid_argument("have " + std::to_string(alphas.size()) + " alphas for " +
                                std::to_string(out.poses.size()) + " output levels");
  }
  Var s_x = tape.parameter(store, kSxName);
  Var s_q = tape.parameter(store, kSqName);
  LossBreakdown r;
  for (std::size_t l = 0; l < out.poses.size(); ++l) {
    r.levels.push_back(level_loss(out.poses[l], gt, s_x, s_q));
    Var weighted = ad::scale(r.levels.back(), alphas[l]);
    r.total = l == 0 ? weighted : ad::add(r.total, weighted);
  }
  return r;
}

double learning_rate(const AdamOptions& opts, std::uint64_t step) {
  const double k = opts.decay_steps ? static_cast<double>(step / opts.decay_steps) : 0.0;
  return std::max(opts.lr_floor, opts.lr * std::pow(opts.decay_rate, k));
}

StepStatus optimizer_step(ad::ParameterStore& params, const ad::GradientMap& grads, OptimState& state) {
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) {
      if (!std::isfinite(v)) return {false, "non-finite gradient in " + name + " at step " + std::to_string(state.step)};
    }
    const auto& p = params.get(name);
    if (p.value.shape() != g.shape()) throw ad::ShapeError("gradient shape mismatch for " + name);
  }
  const auto& o = state.options;
  const double lr = learning_rate(o, state.step);
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (const auto& [name, g] : grads) {
    auto& p = params.get(name);
    if (!p.trainable) continue;
    if (!state.m.contains(name)) {
      state.m.add(name, Tensor(g.shape(), 0.0));
      state.v.add(name, Tensor(g.shape(), 0.0));
    }
    Tensor& m = state.m.get(name).value;
    Tensor& v = state.v.get(name).value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.epsilon);
    }
  }
  ++state.step;
  return {};
}

void write_log_row(std::ostream& out, const StepRecord& r) {
  std::ostringstream ss;
  ss << std::setprecision(17) << r.step << ',' << r.lr << ',' << r.total;
  for (std::size_t l = 0; l < net::kLevels; ++l) {
    ss << ',';
    if (l < r.levels.size()) ss << r.levels[l];
  }
  ss << ',' << r.s_x << ',' << r.s_q << '\n';
  out << ss.str();
  out.flush();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  h = mix(h ^ a);
  h = mix(h ^ b);
  return mix(h ^ c);
}

kitti::FramePair prepare_pair(const kitti::FramePair& pair, std::size_t n, std::uint64_t seed, bool augment,
                              const kitti::AugmentSigmas& sigmas) {
  kitti::FramePair p = augment ? kitti::augment(pair, sigmas, derive_seed(seed, 3)) : pair;
  p.pc1 = pc::random_sample(p.pc1, n, derive_seed(seed, 1));
  p.pc2 = pc::random_sample(p.pc2, n, derive_seed(seed, 2));
  return p;
}

std::size_t sample_index(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed, std::uint64_t step,
                         std::size_t b) {
  const std::uint64_t flat = step * batch_size + b;
  const std::uint64_t epoch = flat / dataset_size;
  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5eed, epoch));
  for (std::size_t i = dataset_size; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
  return perm[flat % dataset_size];
}

BatchResult compute_batch(const net::Network& network, const ad::ParameterStore& store,
                          std::span<const kitti::FramePair> dataset, const TrainOptions& opts, std::uint64_t step) {
  BatchResult br;
  const double inv = 1.0 / static_cast<double>(opts.batch_size);
  for (std::size_t b = 0; b < opts.batch_size; ++b) {
    const std::size_t idx = sample_index(dataset.size(), opts.batch_size, opts.seed, step, b);
    const std::uint64_t s = derive_seed(opts.seed, step, b, 1);
    const kitti::FramePair pair = prepare_pair(dataset[idx], network.config().num_points, s, opts.augment, opts.sigmas);
    net::ForwardOptions fo;
    if (opts.random_fps) fo.fps_seed = derive_seed(s, 4);

    ad::Tape tape;
    const net::NetOutput out = network.forward(tape, store, pair.pc1, pair.pc2, fo);
    const auto w = opts.loss.weights(out.poses.size());
    const LossBreakdown loss = total_loss(tape, store, out, pair.gt, w);
    Var scaled = ad::scale(loss.total, inv);
    ad::GradientMap g = tape.backward(scaled, store);

    br.total += loss.total.value().item() * inv;
    br.levels.resize(loss.levels.size(), 0.0);
    for (std::size_t l = 0; l < loss.levels.size(); ++l) br.levels[l] += loss.levels[l].value().item() * inv;
    if (br.grads.empty()) {
      br.grads = std::move(g);
    } else {
      for (auto& [name, t] : br.grads) {
        const Tensor& add = g.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += add[i];
      }
    }
  }
  return br;
}

TrainResult train_loop(const net::Network& network, ad::ParameterStore& store, OptimState& state,
                       std::span<const kitti::FramePair> dataset, const TrainOptions& opts, std::ostream* log,
                       std::ostream* incidents) {
  TrainResult result;
  if (dataset.empty() || opts.batch_size == 0) return result;
  if (!store.contains(kSxName)) init_loss_parameters(store, opts.loss);

  auto checkpoint = [&] {
    if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, store, state);
  };
  while (state.step < opts.steps) {
    const std::uint64_t step = state.step;
    BatchResult br = compute_batch(network, store, dataset, opts, step);
    StepRecord rec;
    rec.step = step + 1;
    rec.lr = learning_rate(state.options, step);
    rec.total = br.total;
    rec.levels = br.levels;
    const StepStatus st = optimizer_step(store, br.grads, state);
    if (!st.applied) {
      ++result.rejected;
      if (incidents) *incidents << st.message << '\n';
      // The batch is a pure function of the step, so a rejected step would
      // repeat forever; stop instead.
      break;
    }
    rec.s_x = store.get(kSxName).value.item();
    rec.s_q = store.get(kSqName).value.item();
    if (log) write_log_row(*log, rec);
    result.records.push_back(std::move(rec));
    ++result.steps_run;
    if (opts.checkpoint_every && state.step % opts.checkpoint_every == 0) checkpoint();
  }
  if (result.steps_run > 0) checkpoint();
  return result;
}

namespace {

constexpr const char* kCheckpointMagic = "pwclo-checkpoint 1";

}  // namespace

void save_checkpoint(const std::string& path, const ad::ParameterStore& store, const OptimState& state) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << kCheckpointMagic << '\n';
    ad::write_parameters(out, store);
    out << "step " << state.step << '\n';
    ad::write_parameters(out, state.m);
    ad::write_parameters(out, state.v);
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

void load_checkpoint(const std::string& path, ad::ParameterStore& store, OptimState& state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw std::runtime_error(path + ": not a training checkpoint");
  ad::ParameterStore params = ad::read_parameters(in);
  std::string key;
  std::uint64_t step = 0;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated before step");
  std::istringstream ss(line);
  if (!(ss >> key >> step) || key != "step") throw std::runtime_error(path + ": malformed step line");
  ad::ParameterStore m = ad::read_parameters(in);
  ad::ParameterStore v = ad::read_parameters(in);
  store = std::move(params);
  state.step = step;
  state.m = std::move(m);
  state.v = std::move(v);
}

PairErrors evaluate_pair(const net::Network& network, const ad::ParameterStore& store, const kitti::FramePair& pair,
                         std::uint64_t seed) {
  const kitti::FramePair p = prepare_pair(pair, network.config().num_points, seed, false, {});
  ad::Tape tape;
  const net::NetOutput out = network.forward(tape, store, p.pc1, p.pc2);
  PairErrors e;
  for (const auto& pose : out.pose_values()) {
    e.rot_deg.push_back(geom::angular_distance(pose.q(), pair.gt.q()) * 180.0 / 3.14159265358979323846);
    e.trans_m.push_back(geom::norm(pose.t() - pair.gt.t()));
  }
  return e;
}

}  // namespace pwclo::train

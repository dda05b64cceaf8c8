#include "pwclo/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pwclo/costvol.hpp"
#include "pwclo/headmask.hpp"
#include "pwclo/net.hpp"
#include "pwclo/pcops.hpp"
#include "pwclo/train.hpp"

namespace pwclo::gradsuite {

using ad::GradCheckOptions;
using ad::GradCheckResult;
using ad::ParameterStore;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

// Values bounded away from zero so relu/abs kinks stay outside the FD stencil.
Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = 0.1, double hi = 1.0) {
  std::uniform_real_distribution<double> mag(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
  return t;
}

Tensor random_coords(std::size_t n, std::mt19937_64& rng, double extent = 2.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  Tensor t(Shape{n, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Scalar readout with fixed random weights, so no output cancels another.
Var readout(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = y.tape->constant(random_tensor(y.shape(), rng, 0.5, 1.5));
  return ad::sum_all(ad::mul(y, w));
}

GradCheckResult merge(std::string name, std::vector<GradCheckResult> parts) {
  GradCheckResult r;
  r.name = std::move(name);
  for (auto& p : parts) {
    r.checked += p.checked;
    r.kinks += p.kinks;
    r.max_raw_error = std::max(r.max_raw_error, p.max_raw_error);
    if (p.max_error >= r.max_error) {
      r.max_error = p.max_error;
      r.worst_location = p.name + " " + p.worst_location;
    }
  }
  return r;
}

Check unary(const std::string& op, Shape shape, std::function<Var(Var)> f, std::uint64_t seed) {
  return {op, 1e-4, [=] {
            std::mt19937_64 rng(seed);
            return ad::check_input_gradients(
                op, [f, seed](Tape&, const std::vector<Var>& x) { return readout(f(x[0]), seed + 1); },
                {random_tensor(shape, rng)});
          }};
}

Check binary(const std::string& op, Shape a, Shape b, std::function<Var(Var, Var)> f, std::uint64_t seed) {
  return {op, 1e-4, [=] {
            std::mt19937_64 rng(seed);
            return ad::check_input_gradients(
                op, [f, seed](Tape&, const std::vector<Var>& x) { return readout(f(x[0], x[1]), seed + 1); },
                {random_tensor(a, rng), random_tensor(b, rng)});
          }};
}

Var broken_square(Var x) {
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= y[i];
  const std::size_t px = x.id;
  return x.tape->record(std::move(y), {px}, [px](Tape& t, std::size_t self) {
    Tensor g = t.value(px);
    const Tensor& up = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 3.0 * g[i] * up[i];  // should be 2x
    t.accumulate(px, g);
  });
}

pc::CloudVar cloud(Tape& tape, const std::vector<Var>& x, std::size_t xyz, std::size_t feat) {
  (void)tape;
  return {x[xyz], x[feat]};
}

void add_tensor_ops(std::vector<Check>& s, std::uint64_t seed) {
  using ad::Elementwise;
  s.push_back(binary("add", {3, 4}, {4}, ad::add, seed + 1));
  s.push_back(binary("sub", {3, 4}, {3, 1}, ad::sub, seed + 2));
  s.push_back(binary("mul", {2, 3, 4}, {3, 4}, ad::mul, seed + 3));
  s.push_back(binary("div", {3, 4}, {3, 4}, ad::div, seed + 4));
  s.push_back(unary("relu", {4, 5}, ad::relu, seed + 5));
  s.push_back(unary("exp", {4, 5}, ad::exp, seed + 6));
  s.push_back(unary("neg", {4, 5}, ad::neg, seed + 7));
  s.push_back(unary("abs", {4, 5}, ad::abs, seed + 8));
  s.push_back(unary("scale", {4, 5}, [](Var a) { return ad::scale(a, -1.7); }, seed + 9));
  s.push_back(binary("matmul", {3, 4}, {4, 5}, ad::matmul, seed + 10));
  s.push_back(binary("matmul_batched", {2, 3, 4}, {4, 2}, ad::matmul, seed + 11));
  s.push_back(unary("transpose", {3, 5}, ad::transpose, seed + 12));
  s.push_back(unary("reshape", {3, 4}, [](Var a) { return ad::reshape(a, {2, 6}); }, seed + 13));
  s.push_back(unary("softmax", {4, 5}, [](Var a) { return ad::softmax(a, 0); }, seed + 14));
  s.push_back(unary("softmax_axis1", {2, 3, 4}, [](Var a) { return ad::softmax(a, 1); }, seed + 15));
  s.push_back(unary("sum", {3, 4, 2}, [](Var a) { return ad::sum(a, 1); }, seed + 16));
  s.push_back(unary("max", {3, 4, 2}, [](Var a) { return ad::max(a, 1); }, seed + 17));
  s.push_back(unary("sum_all", {3, 4}, ad::sum_all, seed + 18));
  s.push_back(binary("concat", {3, 2}, {3, 4}, [](Var a, Var b) { return ad::concat({a, b}, 1); }, seed + 19));
  s.push_back(unary("slice", {5, 4}, [](Var a) { return ad::slice(a, 0, 1, 4); }, seed + 20));
  s.push_back(unary("gather_rows", {5, 3},
                    [](Var a) {
                      const std::vector<std::size_t> idx{4, 0, 0, 2, 4, 1};
                      return ad::gather_rows(a, idx);
                    },
                    seed + 21));
  s.push_back(unary("repeat_rows", {3, 2}, [](Var a) { return ad::repeat_rows(a, 3); }, seed + 22));
  s.push_back(unary("norm_rows", {5, 3}, ad::norm_rows, seed + 23));
  s.push_back(binary("quat_mul", {3, 4}, {3, 4}, ad::quat_mul, seed + 24));
  s.push_back(unary("quat_to_rotmat", {1, 4}, ad::quat_to_rotmat, seed + 25));
}

// Zero-initialized biases put whole rows exactly on a relu kink (all-dead
// hidden rows give a pre-activation of exactly 0); nudge every trainable off it.
void jitter(ParameterStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += u(rng);
  }
}

// Input and parameter gradients of one block.
GradCheckResult check_block(const std::string& op, const ad::InputLoss& loss, const std::vector<Tensor>& inputs,
                            ParameterStore& store, std::size_t max_param_elements) {
  jitter(store, std::hash<std::string>{}(op));
  GradCheckOptions in_opts;
  GradCheckResult a = ad::check_input_gradients(op + " inputs", loss, inputs, in_opts);
  GradCheckOptions p_opts;
  p_opts.max_elements = max_param_elements;
  GradCheckResult b = ad::check_parameter_gradients(
      op + " params",
      [&](Tape& tape, const ParameterStore&) {
        std::vector<Var> xs;
        for (const auto& t : inputs) xs.push_back(tape.constant(t));
        return loss(tape, xs);
      },
      store, {}, p_opts);
  return merge(op, {a, b});
}

}  // namespace

std::vector<Check> default_suite(const SuiteOptions& opts) {
  std::vector<Check> s;
  const std::uint64_t seed = opts.seed * 1000;
  add_tensor_ops(s, seed);

  s.push_back({"set_conv", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 101);
                 const Mlp mlp("sc", pc::set_conv_input_width(3), {6, 5});
                 auto store = std::make_shared<ParameterStore>();
                 mlp.init(*store, rng);
                 const std::vector<Tensor> in{random_coords(24, rng), random_tensor({24, 3}, rng)};
                 ad::InputLoss loss = [store, mlp, seed](Tape& tape, const std::vector<Var>& x) {
                   auto r = pc::set_conv(tape, *store, cloud(tape, x, 0, 1), 8, 4, mlp);
                   return ad::add(readout(*r.cloud.features, seed + 102), readout(r.cloud.xyz, seed + 103));
                 };
                 return check_block("set_conv", loss, in, *store, 0);
               }});

  s.push_back({"set_upconv", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 111);
                 const Mlp gather("ug", 3 + 4, {5});
                 const Mlp fuse("uf", 5 + 3, {4});
                 auto store = std::make_shared<ParameterStore>();
                 gather.init(*store, rng);
                 fuse.init(*store, rng);
                 const std::vector<Tensor> in{random_coords(16, rng), random_tensor({16, 3}, rng), random_coords(6, rng),
                                              random_tensor({6, 4}, rng)};
                 ad::InputLoss loss = [store, gather, fuse, seed](Tape& tape, const std::vector<Var>& x) {
                   Var y = pc::set_upconv(tape, *store, cloud(tape, x, 0, 1), cloud(tape, x, 2, 3), 3, gather, fuse);
                   return readout(y, seed + 112);
                 };
                 return check_block("set_upconv", loss, in, *store, 0);
               }});

  auto costvol_check = [seed](const std::string& op, cv::Variant variant, std::uint64_t off) {
    return [seed, op, variant, off] {
      std::mt19937_64 rng(seed + off);
      const auto params = cv::CostVolume::make("cv", 3, 5, 2, 4, 3, variant);
      auto store = std::make_shared<ParameterStore>();
      params.init(*store, rng);
      const std::vector<Tensor> in{random_coords(12, rng), random_tensor({12, 3}, rng), random_coords(14, rng),
                                   random_tensor({14, 3}, rng)};
      ad::InputLoss loss = [store, params, seed](Tape& tape, const std::vector<Var>& x) {
        Var y = cv::attentive_cost_volume(tape, *store, cloud(tape, x, 0, 1), cloud(tape, x, 2, 3), params);
        return readout(y, seed + 122);
      };
      return check_block(op, loss, in, *store, 0);
    };
  };
  s.push_back({"attentive_cost_volume", 1e-4, costvol_check("attentive_cost_volume", cv::Variant::kAttentive, 121)});
  s.push_back({"uniform_cost_volume", 1e-4, costvol_check("uniform_cost_volume", cv::Variant::kUniform, 131)});

  s.push_back({"make_mask", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 141);
                 const Mlp mlp("mask", 4 + 4 + 3, {6, 4});
                 auto store = std::make_shared<ParameterStore>();
                 mlp.init(*store, rng);
                 const std::vector<Tensor> in{random_tensor({10, 4}, rng), random_tensor({10, 3}, rng),
                                              random_tensor({10, 4}, rng)};
                 ad::InputLoss loss = [store, mlp, seed](Tape& tape, const std::vector<Var>& x) {
                   return readout(head::make_mask(tape, *store, x[0], x[1], x[2], mlp), seed + 142);
                 };
                 return check_block("make_mask", loss, in, *store, 0);
               }});

  s.push_back({"pose_head", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 151);
                 const Mlp fq = head::make_fc("fq", 5, 6, 4, 4);
                 const Mlp ft = head::make_fc("ft", 5, 6, 4, 3);
                 auto store = std::make_shared<ParameterStore>();
                 head::init_pose_fc(*store, rng, fq, ft);
                 // Push the head away from its near-identity start so q has real structure.
                 for (auto& [name, p] : *store) {
                   for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += 0.3 * random_tensor({1}, rng)[0];
                 }
                 const std::vector<Tensor> in{random_tensor({9, 5}, rng), random_tensor({9, 5}, rng)};
                 ad::InputLoss loss = [store, fq, ft, seed](Tape& tape, const std::vector<Var>& x) {
                   Var mask = ad::softmax(x[1], 0);
                   head::PoseVar p = head::pose_head(tape, *store, x[0], mask, fq, ft);
                   return ad::add(readout(p.q, seed + 152), readout(p.t, seed + 153));
                 };
                 return check_block("pose_head", loss, in, *store, 0);
               }});

  s.push_back({"warp_refine", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 161);
                 const auto block = head::WarpRefineBlock::make("wr", 5, 3, 4, 2, 6, 5, 3, 3, 3,
                                                                cv::Variant::kAttentive, true);
                 auto store = std::make_shared<ParameterStore>();
                 block.init(*store, rng);
                 // pc1 (16), pc2 (16) at this level; coarse level with 6 points.
                 std::vector<Tensor> in{random_coords(16, rng), random_tensor({16, 3}, rng), random_coords(16, rng),
                                        random_tensor({16, 3}, rng), random_coords(6, rng), random_tensor({6, 5}, rng),
                                        random_tensor({6, 5}, rng), random_tensor({1, 4}, rng, 0.3, 1.0),
                                        random_tensor({1, 3}, rng, 0.05, 0.2)};
                 in[7][0] = 2.0;  // keep the coarse rotation moderate
                 ad::InputLoss loss = [store, block, seed](Tape& tape, const std::vector<Var>& x) {
                   head::LevelState coarse;
                   coarse.pc1 = {x[4], std::nullopt};
                   coarse.embedding = x[5];
                   coarse.mask = ad::softmax(x[6], 0);
                   coarse.has_mask = true;
                   coarse.pose = {ad::div(x[7], ad::norm_rows(x[7])), x[8]};
                   head::LevelState out = head::warp_refine(tape, *store, coarse, cloud(tape, x, 0, 1),
                                                            cloud(tape, x, 2, 3), block, {});
                   return ad::add(ad::add(readout(out.embedding, seed + 162), readout(out.mask, seed + 163)),
                                  ad::add(readout(out.pose.q, seed + 164), readout(out.pose.t, seed + 165)));
                 };
                 return check_block("warp_refine", loss, in, *store, 0);
               }});

  s.push_back({"level_loss", 1e-4, [seed] {
                 std::mt19937_64 rng(seed + 171);
                 const geom::Pose gt(geom::Quaternion::from_axis_angle({0.3, 1.0, -0.2}, 0.2), {0.4, -0.1, 0.3});
                 std::vector<Tensor> in{random_tensor({1, 4}, rng), random_tensor({1, 3}, rng),
                                        Tensor::scalar(0.3), Tensor::scalar(-1.2)};
                 in[0][0] = 1.5;
                 return ad::check_input_gradients(
                     "level_loss",
                     [gt](Tape&, const std::vector<Var>& x) {
                       return train::level_loss({x[0], x[1]}, gt, x[2], x[3]);
                     },
                     in);
               }});

  if (opts.include_end_to_end) {
    s.push_back({"end_to_end", 1e-3, [seed] {
                   const net::Network network(net::NetConfig::desk());
                   ParameterStore store = network.init_parameters(seed + 181);
                   train::init_loss_parameters(store, {});
                   jitter(store, seed + 184);
                   kitti::SynthOptions so;
                   so.seed = seed + 182;
                   so.n_points = network.config().num_points;
                   const auto pair = kitti::synth_scene(so);
                   const train::LossParams lp;
                   GradCheckOptions go;
                   go.max_elements = 2;
                   go.seed = seed + 183;
                   return ad::check_parameter_gradients(
                       "end_to_end",
                       [&](Tape& tape, const ParameterStore& st) {
                         const auto out = network.forward(tape, st, pair.pc1, pair.pc2);
                         return train::total_loss(tape, st, out, pair.gt, lp.weights(out.poses.size())).total;
                       },
                       store, {}, go);
                 }});
  }

  if (opts.inject_broken) s.push_back(unary("broken_square", {3, 3}, broken_square, seed + 999));
  return s;
}

std::vector<Outcome> run(const std::vector<Check>& checks, const std::string& only) {
  std::vector<Outcome> out;
  for (const auto& c : checks) {
    if (!only.empty() && c.op != only) continue;
    out.push_back({c.op, c.tolerance, c.run()});
  }
  return out;
}

}  // namespace pwclo::gradsuite

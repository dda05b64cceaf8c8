#include "pwclo/headmask.hpp"

#include <iomanip>
#include <stdexcept>

namespace pwclo::head {

geom::Pose PoseVar::value() const {
  const ad::Tensor& qv = q.value();
  const ad::Tensor& tv = t.value();
  return geom::Pose({qv[0], qv[1], qv[2], qv[3]}, {tv[0], tv[1], tv[2]});
}

PoseVar pose_constant(ad::Tape& tape, const geom::Pose& pose) {
  const auto& q = pose.q();
  const auto& t = pose.t();
  return {tape.constant(ad::Tensor(ad::Shape{1, 4}, {q.w, q.x, q.y, q.z})),
          tape.constant(ad::Tensor(ad::Shape{1, 3}, {t[0], t[1], t[2]}))};
}

ad::Var make_mask(ad::Tape& tape, const ad::ParameterStore& store, ad::Var embedding, ad::Var features,
                  std::optional<ad::Var> prior, const Mlp& mlp) {
  const std::size_t n = embedding.dim(0);
  if (features.dim(0) != n || (prior && prior->dim(0) != n)) {
    throw ad::ShapeError("mask inputs disagree on point count");
  }
  std::vector<ad::Var> parts{embedding};
  if (prior) parts.push_back(*prior);
  parts.push_back(features);
  return ad::softmax(mlp.apply(tape, store, ad::concat(parts, 1)), 0);
}

ad::Var pool_embedding(ad::Var embedding, std::optional<ad::Var> mask) {
  const std::size_t n = embedding.dim(0), c = embedding.dim(1);
  if (!mask) return ad::reshape(ad::scale(ad::sum(embedding, 0), 1.0 / static_cast<double>(n)), ad::Shape{1, c});
  if (mask->shape() != embedding.shape()) {
    throw ad::ShapeError("mask shape " + ad::shape_str(mask->shape()) + " differs from embedding " +
                         ad::shape_str(embedding.shape()));
  }
  return ad::reshape(ad::sum(ad::mul(embedding, *mask), 0), ad::Shape{1, c});
}

PoseVar pose_head(ad::Tape& tape, const ad::ParameterStore& store, ad::Var embedding, std::optional<ad::Var> mask,
                  const Mlp& fc_q, const Mlp& fc_t) {
  if (fc_q.out_width() != 4 || fc_t.out_width() != 3) {
    throw ad::ShapeError("pose FC heads must output widths 4 and 3");
  }
  ad::Var pooled = pool_embedding(embedding, mask);
  ad::Var q_raw = fc_q.apply(tape, store, pooled);
  ad::Var q = ad::div(q_raw, ad::norm_rows(q_raw));
  return {q, fc_t.apply(tape, store, pooled)};
}

ad::Var warp_points(const PoseVar& pose, ad::Var xyz) {
  ad::Var r = ad::quat_to_rotmat(pose.q);
  return ad::add(ad::matmul(xyz, ad::transpose(r)), pose.t);
}

PoseVar compose(const PoseVar& delta, const PoseVar& coarse) {
  return {ad::quat_mul(delta.q, coarse.q), warp_points(delta, coarse.t)};
}

Mlp make_fc(const std::string& prefix, std::size_t in, std::size_t fc1, std::size_t fc2, std::size_t out) {
  return Mlp(prefix, in, {fc1, fc2, out}, /*activate_last=*/false);
}

void init_pose_fc(ad::ParameterStore& store, std::mt19937_64& rng, const Mlp& fc_q, const Mlp& fc_t) {
  fc_q.init(store, rng);
  fc_t.init(store, rng);
  // Start both heads close to the identity pose.
  const std::size_t last = fc_q.depth() - 1;
  for (double& v : store.get(fc_q.weight_name(last)).value.data()) v *= 0.01;
  store.get(fc_q.bias_name(last)).value[0] = 1.0;
  for (double& v : store.get(fc_t.weight_name(fc_t.depth() - 1)).value.data()) v *= 0.01;
}

WarpRefineBlock WarpRefineBlock::make(const std::string& prefix, std::size_t coarse_width, std::size_t feature_width,
                                      std::size_t width, std::size_t mlp_layers, std::size_t fc1, std::size_t fc2,
                                      std::size_t k1, std::size_t k2, std::size_t upconv_k, cv::Variant variant,
                                      bool mask_prior) {
  WarpRefineBlock b;
  b.upconv_k = upconv_k;
  const std::vector<std::size_t> hidden(std::max<std::size_t>(mlp_layers, 1), width);
  b.up_embed_gather = Mlp(prefix + "/up_embed/gather", 3 + coarse_width, hidden);
  b.up_embed_fuse = Mlp(prefix + "/up_embed/fuse", width + feature_width, {width});
  b.up_mask_gather = Mlp(prefix + "/up_mask/gather", 3 + coarse_width, hidden);
  b.up_mask_fuse = Mlp(prefix + "/up_mask/fuse", width + feature_width, {width});
  b.cost_volume = cv::CostVolume::make(prefix + "/cv", feature_width, width, mlp_layers, k1, k2, variant);
  b.refine = Mlp(prefix + "/refine", 2 * width + feature_width, hidden);
  b.mask = Mlp(prefix + "/mask", (mask_prior ? 2 * width : width) + feature_width, hidden);
  b.fc_q = make_fc(prefix + "/fc_q", width, fc1, fc2, 4);
  b.fc_t = make_fc(prefix + "/fc_t", width, fc1, fc2, 3);
  return b;
}

void WarpRefineBlock::init(ad::ParameterStore& store, std::mt19937_64& rng) const {
  for (const Mlp* m : {&up_embed_gather, &up_embed_fuse, &up_mask_gather, &up_mask_fuse}) m->init(store, rng);
  cost_volume.init(store, rng);
  refine.init(store, rng);
  mask.init(store, rng);
  init_pose_fc(store, rng, fc_q, fc_t);
}

void WarpRefineBlock::validate(const ad::ParameterStore& store) const {
  for (const Mlp* m : {&up_embed_gather, &up_embed_fuse, &up_mask_gather, &up_mask_fuse, &refine, &mask, &fc_q, &fc_t})
    m->validate(store);
  cost_volume.validate(store);
}

LevelState warp_refine(ad::Tape& tape, const ad::ParameterStore& store, const LevelState& coarse,
                       const pc::CloudVar& pc1, const pc::CloudVar& pc2, const WarpRefineBlock& block,
                       const RefineOptions& options, RefineTrace* trace) {
  if (!pc1.features || !pc2.features) throw std::invalid_argument("warp_refine needs pyramid features");
  // (1) propagate the coarse embedding and mask to this level
  pc::CloudVar sparse_e{coarse.pc1.xyz, coarse.embedding};
  ad::Var ce = pc::set_upconv(tape, store, pc1, sparse_e, block.upconv_k, block.up_embed_gather, block.up_embed_fuse);
  std::optional<ad::Var> cm;
  if (options.mask_enabled && options.mask_optimization && coarse.has_mask) {
    pc::CloudVar sparse_m{coarse.pc1.xyz, coarse.mask};
    cm = pc::set_upconv(tape, store, pc1, sparse_m, block.upconv_k, block.up_mask_gather, block.up_mask_fuse);
  }
  // (2) warp PC1 by the coarse pose
  ad::Var warped = options.warp ? warp_points(coarse.pose, pc1.xyz) : pc1.xyz;
  // (3) re-embedding between the warped PC1 and PC2
  ad::Var re = cv::attentive_cost_volume(tape, store, pc::CloudVar{warped, pc1.features}, pc2, block.cost_volume);
  // (4) embedding refinement
  ad::Var e = block.refine.apply(tape, store, ad::concat({ce, re, *pc1.features}, 1));
  // (5) mask refinement
  LevelState out{pc1, pc2, e, ad::Var{}, false, {}};
  if (options.mask_enabled) {
    out.mask = make_mask(tape, store, e, *pc1.features, cm, block.mask);
    out.has_mask = true;
  }
  // (6) residual pose, (7) composition onto the coarse pose
  PoseVar delta = pose_head(tape, store, e, out.has_mask ? std::optional<ad::Var>(out.mask) : std::nullopt,
                            block.fc_q, block.fc_t);
  out.pose = compose(delta, coarse.pose);
  if (trace) {
    trace->warped_xyz = warped;
    trace->coarse_embedding = ce;
    trace->coarse_mask = cm.value_or(ad::Var{});
    trace->residual = delta;
  }
  return out;
}

void write_mask_table(std::ostream& out, const ad::Tensor& coords, const ad::Tensor& mask) {
  const std::size_t n = coords.dim(0);
  if (mask.dim(0) != n) throw ad::ShapeError("mask rows do not match coordinates");
  const std::size_t c = mask.dim(1);
  out << "x,y,z,weight\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < n; ++i) {
    double w = 0.0;
    for (std::size_t j = 0; j < c; ++j) w += mask[i * c + j];
    out << coords[3 * i] << ',' << coords[3 * i + 1] << ',' << coords[3 * i + 2] << ',' << w << '\n';
  }
}

}  // namespace pwclo::head

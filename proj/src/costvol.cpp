#include "pwclo/costvol.hpp"

#include <stdexcept>

namespace pwclo::cv {

namespace {

std::vector<std::size_t> widths(std::size_t out, std::size_t layers) {
  return std::vector<std::size_t>(std::max<std::size_t>(layers, 1), out);
}

}  // namespace

CostVolume CostVolume::make(const std::string& prefix, std::size_t feature_width, std::size_t out_width,
                            std::size_t mlp_layers, std::size_t k1, std::size_t k2, Variant variant) {
  CostVolume c;
  c.k1 = k1;
  c.k2 = k2;
  c.variant = variant;
  const std::size_t in1 = pair_encoding_width(feature_width, feature_width);
  const std::size_t in2 = pair_encoding_width(out_width, out_width);
  c.u1 = Mlp(prefix + "/u1", in1, widths(out_width, mlp_layers));
  c.v1 = Mlp(prefix + "/v1", in1, widths(out_width, mlp_layers));
  c.u2 = Mlp(prefix + "/u2", in2, widths(out_width, mlp_layers));
  c.v2 = Mlp(prefix + "/v2", in2, widths(out_width, mlp_layers));
  return c;
}

void CostVolume::init(ad::ParameterStore& store, std::mt19937_64& rng) const {
  for (const Mlp* m : {&u1, &v1, &u2, &v2}) m->init(store, rng);
}

void CostVolume::validate(const ad::ParameterStore& store) const {
  for (const Mlp* m : {&u1, &v1, &u2, &v2}) m->validate(store);
}

ad::Var pair_encoding(ad::Var relative, ad::Var center_features, ad::Var neighbor_features) {
  return ad::concat({relative, ad::norm_rows(relative), center_features, neighbor_features}, 1);
}

ad::Var attention_encode_u(ad::Tape& tape, const ad::ParameterStore& store, ad::Var relative, ad::Var center_features,
                           ad::Var neighbor_features, const Mlp& u) {
  return u.apply(tape, store, pair_encoding(relative, center_features, neighbor_features));
}

ad::Var feature_encode_v(ad::Tape& tape, const ad::ParameterStore& store, ad::Var relative, ad::Var center_features,
                         ad::Var neighbor_features, const Mlp& v) {
  return v.apply(tape, store, pair_encoding(relative, center_features, neighbor_features));
}

ad::Var attentive_aggregate(ad::Tape& tape, const ad::ParameterStore& store, ad::Var query_xyz,
                            ad::Var query_features, ad::Var reference_xyz, ad::Var reference_features,
                            std::size_t k, const Mlp& u, const Mlp& v, Variant variant, ad::Tensor* weights_out) {
  const std::size_t n = query_xyz.dim(0);
  if (k < 1 || k > reference_xyz.dim(0)) {
    throw std::invalid_argument("cost volume k=" + std::to_string(k) + " out of bounds for " +
                                std::to_string(reference_xyz.dim(0)) + " reference points");
  }
  if (u.out_width() != v.out_width()) throw ad::ShapeError("u and v encodings differ in width");
  const std::size_t c = v.out_width();
  pc::Grouping g = pc::group_relative(query_xyz, reference_xyz, k);
  ad::Var center_f = ad::repeat_rows(query_features, k);
  ad::Var neighbor_f = ad::gather_rows(reference_features, g.neighbors.indices);
  ad::Var encoded = pair_encoding(g.relative, center_f, neighbor_f);
  ad::Var values = ad::reshape(v.apply(tape, store, encoded), ad::Shape{n, k, c});
  if (variant == Variant::kUniform) {
    if (weights_out) *weights_out = ad::Tensor(ad::Shape{n, k, c}, 1.0 / static_cast<double>(k));
    return ad::scale(ad::sum(values, 1), 1.0 / static_cast<double>(k));
  }
  ad::Var logits = ad::reshape(u.apply(tape, store, encoded), ad::Shape{n, k, c});
  ad::Var weights = ad::softmax(logits, 1);
  if (weights_out) *weights_out = weights.value();
  return ad::sum(ad::mul(weights, values), 1);
}

ad::Var attentive_cost_volume(ad::Tape& tape, const ad::ParameterStore& store, const pc::CloudVar& pc1,
                              const pc::CloudVar& pc2, const CostVolume& params, CostVolumeTrace* trace) {
  if (pc1.size() == 0 || pc2.size() == 0) throw std::invalid_argument("cost volume needs non-empty clouds");
  if (!pc1.features || !pc2.features) throw std::invalid_argument("cost volume needs features on both clouds");
  if (params.k2 > pc1.size()) {
    throw std::invalid_argument("cost volume k2=" + std::to_string(params.k2) + " exceeds PC1 size " +
                                std::to_string(pc1.size()));
  }
  const std::size_t want = pair_encoding_width(pc1.feature_width(), pc2.feature_width());
  if (params.u1.in_width() != want) {
    throw ad::ShapeError(params.u1.prefix() + ": expects width " + std::to_string(params.u1.in_width()) +
                         ", input builds " + std::to_string(want));
  }
  // Stage 1: PC1 points attend to their neighbours in PC2.
  ad::Var pe = attentive_aggregate(tape, store, pc1.xyz, *pc1.features, pc2.xyz, *pc2.features, params.k1, params.u1,
                                   params.v1, params.variant, trace ? &trace->stage1_weights : nullptr);
  // Stage 2: PC1 points attend to their PC1 neighbours' point embeddings.
  return attentive_aggregate(tape, store, pc1.xyz, pe, pc1.xyz, pe, params.k2, params.u2, params.v2, params.variant,
                             trace ? &trace->stage2_weights : nullptr);
}

}  // namespace pwclo::cv

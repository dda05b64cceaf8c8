#include "pwclo/net.hpp"

#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace pwclo::net {

NetConfig NetConfig::full() { return NetConfig{}; }

NetConfig NetConfig::desk() {
  NetConfig c;
  c.num_points = 512;
  c.level_points = {128, 64, 32, 16};
  c.widths = {8, 16, 32, 64};
  c.setconv_k = 8;
  c.costvol_k1 = 4;
  c.costvol_k2 = 4;
  c.upconv_k = 4;
  c.fc_hidden1 = 64;
  c.fc_hidden2 = 32;
  return c;
}

NetConfig NetConfig::preset(const std::string& name) {
  if (name == "full") return full();
  if (name == "desk") return desk();
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk or full)");
}

void NetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid net config: " + msg); };
  if (num_points < level_points[0]) fail("num_points must be at least level_points[0]");
  for (std::size_t i = 0; i + 1 < kLevels; ++i) {
    if (level_points[i] <= level_points[i + 1]) fail("level_points must be strictly decreasing");
  }
  if (level_points[kLevels - 1] < 1) fail("level_points must be positive");
  for (auto w : widths) {
    if (w == 0) fail("widths must be positive");
  }
  if (mlp_layers == 0 || fc_hidden1 == 0 || fc_hidden2 == 0) fail("layer widths must be positive");
  if (setconv_k == 0 || costvol_k1 == 0 || costvol_k2 == 0 || upconv_k == 0) fail("neighbour counts must be positive");
  if (setconv_k > num_points) fail("setconv_k exceeds num_points");
  for (std::size_t i = 0; i + 1 < kLevels; ++i) {
    if (setconv_k > level_points[i]) fail("setconv_k exceeds level " + std::to_string(i + 1) + " size");
    if (upconv_k > level_points[i + 1]) fail("upconv_k exceeds level " + std::to_string(i + 2) + " size");
  }
  for (auto n : level_points) {
    if (costvol_k1 > n || costvol_k2 > n) fail("cost volume k exceeds a level size");
  }
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || v.front() == '-') {
    throw std::invalid_argument("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(out);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::array<std::size_t, kLevels> parse_levels(const std::string& key, const std::string& v) {
  std::array<std::size_t, kLevels> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= kLevels) break;
    out[i++] = parse_size(key, item);
  }
  if (i != kLevels || ss.rdbuf()->in_avail() > 0) {
    throw std::invalid_argument("config key '" + key + "': expected 4 comma-separated integers, got '" + v + "'");
  }
  return out;
}

std::string join(const std::array<std::size_t, kLevels>& a) {
  std::string s;
  for (std::size_t i = 0; i < kLevels; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void NetConfig::set(const std::string& key, const std::string& value) {
  if (key == "num_points") num_points = parse_size(key, value);
  else if (key == "level_points") level_points = parse_levels(key, value);
  else if (key == "widths") widths = parse_levels(key, value);
  else if (key == "setconv_k") setconv_k = parse_size(key, value);
  else if (key == "costvol_k1") costvol_k1 = parse_size(key, value);
  else if (key == "costvol_k2") costvol_k2 = parse_size(key, value);
  else if (key == "upconv_k") upconv_k = parse_size(key, value);
  else if (key == "mlp_layers") mlp_layers = parse_size(key, value);
  else if (key == "fc_hidden1") fc_hidden1 = parse_size(key, value);
  else if (key == "fc_hidden2") fc_hidden2 = parse_size(key, value);
  else if (key == "first_embedding") {
    if (value == "penultimate") first_embedding = FirstEmbedding::kPenultimate;
    else if (value == "last") first_embedding = FirstEmbedding::kLast;
    else throw std::invalid_argument("config key 'first_embedding': expected penultimate or last");
  } else if (key == "mask_enabled") mask_enabled = parse_bool(key, value);
  else if (key == "mask_optimization") mask_optimization = parse_bool(key, value);
  else if (key == "warp_enabled") warp_enabled = parse_bool(key, value);
  else if (key == "refinement_enabled") refinement_enabled = parse_bool(key, value);
  else if (key == "costvol_variant") {
    if (value == "attentive") costvol_variant = cv::Variant::kAttentive;
    else if (value == "uniform") costvol_variant = cv::Variant::kUniform;
    else throw std::invalid_argument("config key 'costvol_variant': expected attentive or uniform");
  } else if (key == "xyz_input_features") {
    xyz_input_features = parse_bool(key, value);
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> NetConfig::entries() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"num_points", std::to_string(num_points)},
      {"level_points", join(level_points)},
      {"widths", join(widths)},
      {"setconv_k", std::to_string(setconv_k)},
      {"costvol_k1", std::to_string(costvol_k1)},
      {"costvol_k2", std::to_string(costvol_k2)},
      {"upconv_k", std::to_string(upconv_k)},
      {"mlp_layers", std::to_string(mlp_layers)},
      {"fc_hidden1", std::to_string(fc_hidden1)},
      {"fc_hidden2", std::to_string(fc_hidden2)},
      {"first_embedding", first_embedding == FirstEmbedding::kPenultimate ? "penultimate" : "last"},
      {"mask_enabled", b(mask_enabled)},
      {"mask_optimization", b(mask_optimization)},
      {"warp_enabled", b(warp_enabled)},
      {"refinement_enabled", b(refinement_enabled)},
      {"costvol_variant", costvol_variant == cv::Variant::kAttentive ? "attentive" : "uniform"},
      {"xyz_input_features", b(xyz_input_features)},
  };
}

NetConfig parse_config(std::istream& in, NetConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

NetConfig load_config(const std::string& path, NetConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return parse_config(in, std::move(base));
}

void write_config(std::ostream& out, const NetConfig& config) {
  for (const auto& [k, v] : config.entries()) out << k << " = " << v << '\n';
}

std::vector<geom::Pose> NetOutput::pose_values() const {
  std::vector<geom::Pose> out;
  for (const auto& p : poses) out.push_back(p.value());
  return out;
}

std::size_t count_parameters(const ad::ParameterStore& store) { return store.count_trainable(); }

// ---------------------------------------------------------------------------

Network::Network(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const std::size_t layers = c.mlp_layers;
  auto hidden = [layers](std::size_t w) { return std::vector<std::size_t>(layers, w); };
  std::size_t in_width = c.xyz_input_features ? 3 : 0;
  for (std::size_t i = 0; i < kLevels; ++i) {
    pyramid_[i] = Mlp("pyramid/l" + std::to_string(i + 1), pc::set_conv_input_width(in_width), hidden(c.widths[i]));
    in_width = c.widths[i];
  }
  const std::size_t el = c.embedding_level();
  first_cv_ = cv::CostVolume::make("embed/cv", c.widths[el], c.widths[el], layers, c.costvol_k1, c.costvol_k2,
                                   c.costvol_variant);
  if (el != kLevels - 1) {
    carry_ = Mlp("embed/carry", pc::set_conv_input_width(c.widths[el]), hidden(c.widths[kLevels - 1]));
  }
  const std::size_t top = c.widths[kLevels - 1];
  init_mask_ = Mlp("embed/mask", 2 * top, hidden(top));
  init_fc_q_ = head::make_fc("embed/fc_q", top, c.fc_hidden1, c.fc_hidden2, 4);
  init_fc_t_ = head::make_fc("embed/fc_t", top, c.fc_hidden1, c.fc_hidden2, 3);
  if (c.refinement_enabled) {
    for (std::size_t i = 0; i + 1 < kLevels; ++i) {
      refine_.push_back(head::WarpRefineBlock::make("refine/l" + std::to_string(i + 1), c.widths[i + 1], c.widths[i],
                                                    c.widths[i], layers, c.fc_hidden1, c.fc_hidden2, c.costvol_k1,
                                                    c.costvol_k2, c.upconv_k, c.costvol_variant,
                                                    c.mask_enabled && c.mask_optimization));
    }
  }
}

ad::ParameterStore Network::init_parameters(std::uint64_t seed) const {
  ad::ParameterStore store;
  std::mt19937_64 rng(seed);
  for (const auto& m : pyramid_) m.init(store, rng);
  first_cv_.init(store, rng);
  if (carry_) carry_->init(store, rng);
  init_mask_.init(store, rng);
  head::init_pose_fc(store, rng, init_fc_q_, init_fc_t_);
  for (const auto& b : refine_) b.init(store, rng);
  return store;
}

void Network::validate(const ad::ParameterStore& store) const {
  for (const auto& m : pyramid_) m.validate(store);
  first_cv_.validate(store);
  if (carry_) carry_->validate(store);
  init_mask_.validate(store);
  init_fc_q_.validate(store);
  init_fc_t_.validate(store);
  for (const auto& b : refine_) b.validate(store);
}

NetOutput Network::forward(ad::Tape& tape, const ad::ParameterStore& store, const pc::PointCloud& pc1,
                           const pc::PointCloud& pc2, const ForwardOptions& options) const {
  const auto& c = config_;
  if (pc1.size() != c.num_points || pc2.size() != c.num_points) {
    throw std::invalid_argument("forward expects " + std::to_string(c.num_points) + " points per cloud, got " +
                                std::to_string(pc1.size()) + " and " + std::to_string(pc2.size()));
  }
  std::mt19937_64 fps_rng(options.fps_seed.value_or(0));
  auto fps_start = [&](std::size_t n) -> std::size_t {
    return options.fps_seed ? static_cast<std::size_t>(fps_rng() % n) : 0;
  };

  // Siamese pyramid: shared parameters, separate FPS per cloud.
  std::array<pc::CloudVar, kLevels> l1, l2;
  std::array<std::vector<std::size_t>, kLevels> centers1;
  pc::CloudVar cur1{tape.constant(pc1.coords), std::nullopt};
  pc::CloudVar cur2{tape.constant(pc2.coords), std::nullopt};
  if (c.xyz_input_features) {
    cur1.features = cur1.xyz;
    cur2.features = cur2.xyz;
  }
  for (std::size_t i = 0; i < kLevels; ++i) {
    auto r1 = pc::set_conv(tape, store, cur1, c.level_points[i], c.setconv_k, pyramid_[i], std::nullopt,
                           fps_start(cur1.size()));
    auto r2 = pc::set_conv(tape, store, cur2, c.level_points[i], c.setconv_k, pyramid_[i], std::nullopt,
                           fps_start(cur2.size()));
    l1[i] = cur1 = r1.cloud;
    l2[i] = cur2 = r2.cloud;
    centers1[i] = std::move(r1.centers);
  }

  // Initial embedding, mask and pose at the coarsest level.
  const std::size_t el = c.embedding_level();
  const std::size_t top = kLevels - 1;
  ad::Var embedding = cv::attentive_cost_volume(tape, store, l1[el], l2[el], first_cv_);
  if (carry_) {
    pc::CloudVar lifted{l1[el].xyz, embedding};
    embedding = *pc::set_conv(tape, store, lifted, c.level_points[top], c.setconv_k, *carry_,
                              std::span<const std::size_t>(centers1[top]))
                     .cloud.features;
  }
  head::LevelState state{l1[top], l2[top], embedding, ad::Var{}, false, {}};
  if (c.mask_enabled) {
    state.mask = head::make_mask(tape, store, embedding, *l1[top].features, std::nullopt, init_mask_);
    state.has_mask = true;
  }
  state.pose = head::pose_head(tape, store, embedding, state.has_mask ? std::optional<ad::Var>(state.mask) : std::nullopt,
                               init_fc_q_, init_fc_t_);

  std::vector<head::LevelState> states{state};
  if (c.refinement_enabled) {
    head::RefineOptions ro{c.warp_enabled, c.mask_enabled, c.mask_optimization};
    for (std::size_t i = top; i-- > 0;) {
      state = head::warp_refine(tape, store, state, l1[i], l2[i], refine_[i], ro);
      states.push_back(state);
    }
  }

  NetOutput out;
  for (auto it = states.rbegin(); it != states.rend(); ++it) {
    out.poses.push_back(it->pose);
    LevelOutput lo{it->pc1.xyz.value(), it->embedding.value(), std::nullopt};
    if (it->has_mask) lo.mask = it->mask.value();
    out.levels.push_back(std::move(lo));
  }
  return out;
}

}  // namespace pwclo::net

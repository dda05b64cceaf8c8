// pwclo: synth / train / infer / eval / gradcheck front end.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "pwclo/evalkit.hpp"
#include "pwclo/gradsuite.hpp"
#include "pwclo/kittio.hpp"
#include "pwclo/net.hpp"
#include "pwclo/train.hpp"

namespace fs = std::filesystem;
using namespace pwclo;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kAcceptance = 3 };

// Usage errors (bad flag values, unknown config keys) vs data errors (files).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kOutputRootEnv = "PWCLO_OUTPUT_ROOT";

fs::path resolve_out(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
  }
  return p;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Same digest `git hash-object` reports for the content.
std::string git_blob_sha1(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr);
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return ss.str();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Manifest {
 public:
  Manifest(std::string command, fs::path out_dir) : out_dir_(std::move(out_dir)) {
    j_["command"] = std::move(command);
    j_["output_dir"] = out_dir_.string();
    j_["started"] = utc_now();
  }
  nlohmann::json& operator[](const char* key) { return j_[key]; }
  void config(const std::string& path, const std::string& text) {
    j_["config_path"] = path;
    j_["config_hash"] = git_blob_sha1(text);
  }
  void write() {
    j_["finished"] = utc_now();
    fs::create_directories(out_dir_);
    std::ofstream out(out_dir_ / "manifest.json");
    out << j_.dump(2) << '\n';
    if (!out) throw DataError("cannot write manifest in " + out_dir_.string());
  }

 private:
  fs::path out_dir_;
  nlohmann::json j_;
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t count = 10;
  std::uint64_t seed = 0;
  std::size_t points = 512;
  double max_rot = 10.0;
  double max_trans = 0.5;
  double noise = 0.0;
  double dropout = 0.0;
  double extent = 7.5;
};

int cmd_synth(const SynthArgs& a) {
  const fs::path out = resolve_out(a.out);
  Manifest manifest("synth", out);
  std::vector<kitti::FramePair> pairs;
  for (std::size_t i = 0; i < a.count; ++i) {
    kitti::SynthOptions o;
    o.n_points = a.points;
    o.max_rot_deg = a.max_rot;
    o.max_trans_m = a.max_trans;
    o.noise_sigma = a.noise;
    o.dropout = a.dropout;
    o.extent_m = a.extent;
    o.seed = train::derive_seed(a.seed, i);
    pairs.push_back(kitti::synth_scene(o));
    pairs.back().frame = i;
  }
  try {
    kitti::write_synth_dataset(out.string(), pairs);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  manifest["seed"] = a.seed;
  manifest["config_path"] = nullptr;
  manifest["parameters"] = {{"count", a.count},     {"points", a.points}, {"max_rot_deg", a.max_rot},
                            {"max_trans_m", a.max_trans}, {"noise", a.noise},   {"dropout", a.dropout},
                            {"extent_m", a.extent}};
  manifest.write();
  std::cout << "wrote " << a.count << " pairs to " << out.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct NetArgs {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> ablations;
};

// Ablations of the network; each maps to config keys.
void apply_ablation(net::NetConfig& c, const std::string& name) {
  if (name == "no-mask") c.mask_enabled = false;
  else if (name == "no-mask-opt") c.mask_optimization = false;
  else if (name == "no-warp") c.warp_enabled = false;
  else if (name == "no-refine") c.refinement_enabled = false;
  else if (name == "uniform-cv") c.costvol_variant = cv::Variant::kUniform;
  else if (name == "last-embedding") c.first_embedding = net::FirstEmbedding::kLast;
  else throw UsageError("unknown ablation '" + name + "'");
}

net::NetConfig build_config(const NetArgs& a, std::string* config_text) {
  net::NetConfig c;
  try {
    c = net::NetConfig::preset(a.preset);
    if (!a.config.empty()) {
      std::istringstream in(read_text(a.config));
      c = net::parse_config(in, c);
    }
    for (const auto& kv : a.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& ab : a.ablations) apply_ablation(c, ab);
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::ostringstream ss;
  net::write_config(ss, c);
  *config_text = ss.str();
  return c;
}

std::vector<kitti::FramePair> load_dataset(const std::string& data, const std::string& kitti_root,
                                           const std::vector<std::string>& sequences) {
  try {
    if (!data.empty()) return kitti::read_synth_dataset(data);
    std::vector<kitti::FramePair> pairs;
    for (const auto& s : sequences) {
      kitti::KittiSequence seq(kitti_root, s);
      for (std::size_t i = 0; i + 1 < seq.frame_count(); ++i) pairs.push_back(seq.pair(i));
    }
    return pairs;
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

struct TrainArgs {
  NetArgs net;
  std::string data, kitti_root;
  std::vector<std::string> sequences;
  std::string out;
  std::uint64_t steps = 1000;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 1;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t decay_steps = 200000;
  double decay_rate = 0.7, lr_floor = 1e-5;
  double s_x = 0.0, s_q = -2.5;
  std::vector<double> alphas{1.6, 0.8, 0.4, 0.2};
  bool coarsest_first = false;
  bool augment = false;
  double aug_rot = 2.0, aug_trans = 0.1;
  std::uint64_t checkpoint_every = 0;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  std::string config_text;
  const net::NetConfig config = build_config(a.net, &config_text);
  const fs::path out = resolve_out(a.out);
  fs::create_directories(out);
  Manifest manifest("train", out);
  manifest.config(a.net.config, config_text);
  manifest["seed"] = a.seed;

  const auto dataset = load_dataset(a.data, a.kitti_root, a.sequences);
  const net::Network network(config);

  train::TrainOptions to;
  to.batch_size = a.batch;
  to.steps = a.steps;
  to.seed = a.seed;
  to.checkpoint_every = a.checkpoint_every;
  to.checkpoint_path = (out / "checkpoint.bin").string();
  to.augment = a.augment;
  to.sigmas = {a.aug_rot, a.aug_trans};
  to.loss.s_x_init = a.s_x;
  to.loss.s_q_init = a.s_q;
  to.loss.alphas = a.alphas;
  to.loss.finest_first = !a.coarsest_first;
  if (a.alphas.size() != net::kLevels) throw UsageError("--alphas needs 4 values");

  ad::ParameterStore store;
  train::OptimState state;
  if (a.resume) {
    try {
      train::load_checkpoint(to.checkpoint_path, store, state);
      network.validate(store);
    } catch (const std::exception& e) {
      throw DataError(std::string("cannot resume: ") + e.what());
    }
  } else {
    store = network.init_parameters(a.init_seed);
    train::init_loss_parameters(store, to.loss);
  }
  state.options = {a.beta1, a.beta2, a.eps, a.lr, a.decay_steps, a.decay_rate, a.lr_floor};

  {
    std::ofstream cfg(out / "config.txt");
    cfg << config_text;
  }
  const fs::path log_path = out / "train_log.csv";
  const bool fresh_log = !a.resume || !fs::exists(log_path);
  std::ofstream log(log_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot write " + log_path.string());
  if (fresh_log) {
    for (const auto& [k, v] : config.entries()) log << "# " << k << " = " << v << '\n';
    log << "# head = " << (config.mask_enabled ? "embedding-mask" : "average-pooling") << '\n';
    log << train::kLogHeader << '\n';
  }

  std::cerr << "train: " << dataset.size() << " pairs, step " << state.step << " -> " << a.steps << ", "
            << net::count_parameters(store) << " parameters\n";
  const auto result = train::train_loop(network, store, state, dataset, to, &log, &std::cerr);
  if (result.rejected) std::cerr << "train: stopped after a rejected step\n";

  manifest["steps_run"] = result.steps_run;
  manifest["final_step"] = state.step;
  manifest["dataset_pairs"] = dataset.size();
  manifest["hyperparameters"] = {{"batch", a.batch},           {"lr", a.lr},
                                 {"beta1", a.beta1},           {"beta2", a.beta2},
                                 {"epsilon", a.eps},           {"decay_steps", a.decay_steps},
                                 {"decay_rate", a.decay_rate}, {"lr_floor", a.lr_floor},
                                 {"s_x", a.s_x},               {"s_q", a.s_q},
                                 {"alphas", a.alphas},         {"augment", a.augment},
                                 {"init_seed", a.init_seed}};
  manifest.write();
  if (!result.records.empty()) {
    std::cout << "step " << result.records.back().step << " loss " << result.records.back().total << '\n';
  }
  return result.rejected ? kData : kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  NetArgs net;
  std::string checkpoint;
  std::string data, kitti_root, sequence;
  std::string out;
  std::uint64_t seed = 0;
  bool export_mask = false;
};

int cmd_infer(const InferArgs& a) {
  std::string config_text;
  const net::NetConfig config = build_config(a.net, &config_text);
  const net::Network network(config);
  const fs::path out = resolve_out(a.out);
  Manifest manifest("infer", out);
  manifest.config(a.net.config, config_text);
  manifest["seed"] = a.seed;

  ad::ParameterStore store;
  train::OptimState unused;
  try {
    train::load_checkpoint(a.checkpoint, store, unused);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  try {
    network.validate(store);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint does not match config: ") + e.what());
  }

  std::vector<std::string> seqs;
  if (!a.sequence.empty()) seqs.push_back(a.sequence);
  const auto pairs = load_dataset(a.data, a.kitti_root, seqs);
  fs::create_directories(out);
  if (a.export_mask) fs::create_directories(out / "masks");

  std::vector<geom::Pose> rel;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto p = train::prepare_pair(pairs[i], config.num_points, train::derive_seed(a.seed, i), false, {});
    ad::Tape tape;
    const auto o = network.forward(tape, store, p.pc1, p.pc2);
    rel.push_back(o.pose_values().front());
    if (a.export_mask && o.levels.front().mask) {
      std::ostringstream name;
      name << "pair_" << std::setw(6) << std::setfill('0') << i << ".csv";
      std::ofstream mf(out / "masks" / name.str());
      head::write_mask_table(mf, o.levels.front().coords, *o.levels.front().mask);
    }
  }
  eval::Trajectory traj = rel.empty() ? eval::Trajectory::from_poses({geom::Transform4::identity()})
                                      : eval::accumulate(rel);
  eval::save_kitti_trajectory((out / "trajectory.txt").string(), traj);
  // Synthetic pairs always carry gt; chain it so eval can score the run.
  if (!a.data.empty() && !pairs.empty()) {
    std::vector<geom::Pose> gt;
    for (const auto& p : pairs) gt.push_back(p.gt);
    eval::save_kitti_trajectory((out / "gt_trajectory.txt").string(), eval::accumulate(gt));
  }
  manifest["checkpoint"] = a.checkpoint;
  manifest["frames"] = traj.size();
  manifest.write();
  std::cout << "wrote " << traj.size() << " poses to " << (out / "trajectory.txt").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> est, gt;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  if (a.est.size() != a.gt.size()) throw UsageError("--est and --gt must be given the same number of times");
  const fs::path out = resolve_out(a.out.empty() ? "eval" : a.out);
  Manifest manifest("eval", out);
  manifest["seed"] = nullptr;
  manifest["config_path"] = nullptr;
  double t_sum = 0, r_sum = 0;
  std::size_t n = 0;
  nlohmann::json per = nlohmann::json::array();
  std::cout << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < a.est.size(); ++i) {
    eval::Trajectory est, gt;
    for (auto [path, traj] : {std::pair{&a.est[i], &est}, std::pair{&a.gt[i], &gt}}) {
      if (!fs::exists(*path)) throw DataError("missing file " + *path);
      try {
        *traj = eval::load_kitti_trajectory(*path);
      } catch (const std::exception& e) {
        throw DataError(e.what());
      }
    }
    if (est.size() != gt.size()) {
      throw DataError("length mismatch: " + a.est[i] + " has " + std::to_string(est.size()) + " poses, " + a.gt[i] +
                      " has " + std::to_string(gt.size()));
    }
    const auto m = eval::kitti_errors(est, gt);
    const std::string name = fs::path(a.gt[i]).stem().string();
    if (m.insufficient_length) {
      std::cout << name << "  insufficient length (< 100 m)\n";
    } else {
      std::cout << name << "  t_rel " << m.t_rel << " %  r_rel " << m.r_rel << " deg/100m\n";
      t_sum += m.t_rel;
      r_sum += m.r_rel;
      ++n;
    }
    const std::array<eval::NamedTrajectory, 2> named{{{name + "_est", &est}, {name + "_gt", &gt}}};
    const auto rep = eval::emit_plot_data(named, &m, (out / name).string());
    for (const auto& f : rep.failures) std::cerr << "eval: " << f << '\n';
    per.push_back({{"sequence", name}, {"t_rel", m.t_rel}, {"r_rel", m.r_rel},
                   {"insufficient_length", m.insufficient_length}});
  }
  if (n > 0) std::cout << "mean  t_rel " << t_sum / n << " %  r_rel " << r_sum / n << " deg/100m\n";
  manifest["sequences"] = per;
  manifest.write();
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  std::string op;
  bool inject_broken = false;
  bool skip_end_to_end = false;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradArgs& a) {
  gradsuite::SuiteOptions so;
  so.seed = a.seed;
  so.inject_broken = a.inject_broken;
  so.include_end_to_end = !a.skip_end_to_end;
  const auto checks = gradsuite::default_suite(so);
  if (!a.op.empty() && std::none_of(checks.begin(), checks.end(), [&](const auto& c) { return c.op == a.op; })) {
    throw UsageError("unknown op '" + a.op + "'");
  }
  bool ok = true;
  for (const auto& c : checks) {
    if (!a.op.empty() && c.op != a.op) continue;
    const auto o = gradsuite::run({c}).front();
    std::cout << (o.passed() ? "ok   " : "FAIL ") << std::left << std::setw(24) << o.op << " max_rel_err "
              << std::scientific << std::setprecision(3) << o.result.max_error << " raw "
              << o.result.max_raw_error << "  (tol " << o.tolerance << ", "
              << o.result.checked << " elements";
    if (o.result.kinks > 0) std::cout << ", " << o.result.kinks << " at kinks";
    std::cout << ")";
    if (!o.passed()) std::cout << "  worst at " << o.result.worst_location;
    std::cout << std::defaultfloat << '\n';
    ok = ok && o.passed();
  }
  return ok ? kOk : kAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud odometry network: data synthesis, training, inference, evaluation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic rigid-motion dataset");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--count", sa.count, "number of pairs");
  synth->add_option("--seed", sa.seed);
  synth->add_option("--points", sa.points, "points per cloud")->check(CLI::Range(8, 1 << 24));
  synth->add_option("--max-rot", sa.max_rot, "max rotation, degrees");
  synth->add_option("--max-trans", sa.max_trans, "max translation, meters");
  synth->add_option("--noise", sa.noise, "per-point Gaussian noise sigma, meters");
  synth->add_option("--dropout", sa.dropout, "fraction of frame-2 points dropped")->check(CLI::Range(0.0, 0.99));
  synth->add_option("--extent", sa.extent, "side of the square scene, meters")->check(CLI::PositiveNumber);

  auto add_net = [](CLI::App* c, NetArgs& n) {
    c->add_option("--preset", n.preset, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    c->add_option("--config", n.config, "key = value config file applied over the preset");
    c->add_option("--set", n.sets, "override one config key (key=value)");
    c->add_option("--ablation", n.ablations, "no-mask, no-mask-opt, no-warp, no-refine, uniform-cv, last-embedding");
  };

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train on a synthetic dataset or KITTI sequences");
  add_net(trn, ta.net);
  auto* data_opt = trn->add_option("--data", ta.data, "synthetic dataset directory");
  auto* kitti_opt = trn->add_option("--kitti", ta.kitti_root, "KITTI odometry root");
  data_opt->excludes(kitti_opt);
  trn->add_option("--sequences", ta.sequences, "KITTI sequence ids")->needs(kitti_opt);
  trn->add_option("--out", ta.out, "run directory")->required();
  trn->add_option("--steps", ta.steps, "train until this step count");
  trn->add_option("--batch", ta.batch)->check(CLI::PositiveNumber);
  trn->add_option("--seed", ta.seed, "data order / sampling seed");
  trn->add_option("--init-seed", ta.init_seed, "parameter initialization seed");
  trn->add_option("--lr", ta.lr);
  trn->add_option("--beta1", ta.beta1);
  trn->add_option("--beta2", ta.beta2);
  trn->add_option("--epsilon", ta.eps);
  trn->add_option("--decay-steps", ta.decay_steps);
  trn->add_option("--decay-rate", ta.decay_rate);
  trn->add_option("--lr-floor", ta.lr_floor);
  trn->add_option("--sx", ta.s_x, "initial s_x");
  trn->add_option("--sq", ta.s_q, "initial s_q");
  trn->add_option("--alphas", ta.alphas, "level weights, finest first")->expected(4);
  trn->add_flag("--coarsest-first", ta.coarsest_first, "apply the first alpha to the coarsest level");
  trn->add_flag("--augment", ta.augment, "random rigid augmentation of frame 1");
  trn->add_option("--aug-rot", ta.aug_rot, "augmentation sigma per Euler angle, degrees");
  trn->add_option("--aug-trans", ta.aug_trans, "augmentation sigma per axis, meters");
  trn->add_option("--checkpoint-every", ta.checkpoint_every);
  trn->add_flag("--resume", ta.resume, "continue from <out>/checkpoint.bin");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "estimate a trajectory over consecutive frame pairs");
  add_net(inf, ia.net);
  inf->add_option("--checkpoint", ia.checkpoint)->required();
  auto* idata = inf->add_option("--data", ia.data, "synthetic dataset directory");
  auto* ikitti = inf->add_option("--kitti", ia.kitti_root, "KITTI odometry root");
  idata->excludes(ikitti);
  inf->add_option("--sequence", ia.sequence)->needs(ikitti);
  inf->add_option("--out", ia.out)->required();
  inf->add_option("--seed", ia.seed, "point subsampling seed");
  inf->add_flag("--export-mask", ia.export_mask, "write per-point finest-level mask weights");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "KITTI odometry metrics of estimated vs ground-truth trajectories");
  evl->add_option("--est", ea.est, "estimated trajectory file (repeatable)")->required();
  evl->add_option("--gt", ea.gt, "ground-truth trajectory file (repeatable)")->required();
  evl->add_option("--out", ea.out, "plot data directory");

  GradArgs ga;
  auto* grd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grd->add_option("--op", ga.op, "run a single op");
  grd->add_flag("--inject-broken", ga.inject_broken, "include an op with a deliberately wrong gradient");
  grd->add_flag("--skip-end-to-end", ga.skip_end_to_end);
  grd->add_option("--seed", ga.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*trn) {
      if (ta.data.empty() && ta.kitti_root.empty()) throw UsageError("train needs --data or --kitti");
      return cmd_train(ta);
    }
    if (*inf) {
      if (ia.data.empty() && ia.kitti_root.empty()) throw UsageError("infer needs --data or --kitti");
      return cmd_infer(ia);
    }
    if (*evl) return cmd_eval(ea);
    if (*grd) return cmd_gradcheck(ga);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

// streamloc command-line front end: data generation, augmentation, the four
// training phases, online detection, evaluation, the ablation grid, and
// gradient checking. Every run validates its JSON config strictly (unknown
// keys are usage errors) and writes a manifest with content hashes of its
// inputs and outputs, so any artifact can be regenerated byte-identically.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "streamloc/augment.hpp"
#include "streamloc/checkpoint.hpp"
#include "streamloc/common.hpp"
#include "streamloc/data.hpp"
#include "streamloc/eval.hpp"
#include "streamloc/gradcheck.hpp"
#include "streamloc/networks.hpp"
#include "streamloc/ops.hpp"
#include "streamloc/pipeline.hpp"
#include "streamloc/sha256.hpp"
#include "streamloc/tensor.hpp"
#include "streamloc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace streamloc {
namespace {

// ---------------------------------------------------------------------------
// Strict config parsing
// ---------------------------------------------------------------------------

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object())
    fail(ErrorKind::kUsage, "config: '" + where + "' must be an object");
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      fail(ErrorKind::kUsage,
           "config: unknown key '" + where + "." + item.key() + "'");
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage,
         "config: bad value for '" + where + "." + key + "': " + e.what());
  }
}

struct CliConfig {
  CorpusConfig corpus;
  PipelineConfig pipeline;
  C3DConfig pr_net, ar_net;
  F2GConfig f2g_net;
  DetectorConfig det_net;
  PhaseConfig pr_opt, ar_opt, det_opt;
  F2GPhaseConfig f2g_opt;
  std::vector<double> thetas;
  int seq_len = 8;
  AblationConfig ablation;  // fully resolved from the ablation section
};

void parse_corpus(const json& j, CorpusConfig& c) {
  check_keys(j,
             {"train_streams", "val_streams", "min_instances", "max_instances",
              "num_classes", "height", "width", "duration_min", "duration_max",
              "gap_min", "gap_max", "noise_level"},
             "corpus");
  read_key(j, "train_streams", c.train_streams, "corpus");
  read_key(j, "val_streams", c.val_streams, "corpus");
  read_key(j, "min_instances", c.min_instances, "corpus");
  read_key(j, "max_instances", c.max_instances, "corpus");
  read_key(j, "num_classes", c.proto.num_classes, "corpus");
  read_key(j, "height", c.proto.height, "corpus");
  read_key(j, "width", c.proto.width, "corpus");
  read_key(j, "duration_min", c.proto.duration_min, "corpus");
  read_key(j, "duration_max", c.proto.duration_max, "corpus");
  read_key(j, "gap_min", c.proto.gap_min, "corpus");
  read_key(j, "gap_max", c.proto.gap_max, "corpus");
  read_key(j, "noise_level", c.proto.noise_level, "corpus");
}

void parse_pipeline(const json& j, PipelineConfig& p) {
  check_keys(j,
             {"tau", "test_stride", "train_stride", "horizon",
              "min_event_windows"},
             "pipeline");
  read_key(j, "tau", p.tau, "pipeline");
  read_key(j, "test_stride", p.test_stride, "pipeline");
  read_key(j, "train_stride", p.train_stride, "pipeline");
  read_key(j, "horizon", p.horizon, "pipeline");
  read_key(j, "min_event_windows", p.min_event_windows, "pipeline");
}

void parse_c3d(const json& j, C3DConfig& c, const std::string& where) {
  check_keys(j,
             {"in_channels", "height", "width", "widths", "feature_dim",
              "out_dim", "dropout_p"},
             where);
  read_key(j, "in_channels", c.in_channels, where);
  read_key(j, "height", c.height, where);
  read_key(j, "width", c.width, where);
  read_key(j, "widths", c.widths, where);
  read_key(j, "feature_dim", c.feature_dim, where);
  read_key(j, "out_dim", c.out_dim, where);
  read_key(j, "dropout_p", c.dropout_p, where);
}

void parse_f2g(const json& j, F2GConfig& c) {
  check_keys(j,
             {"in_channels", "height", "width", "content_widths",
              "motion_widths", "lstm_channels", "fuse_width", "decoder_widths",
              "horizon"},
             "f2g_net");
  read_key(j, "in_channels", c.in_channels, "f2g_net");
  read_key(j, "height", c.height, "f2g_net");
  read_key(j, "width", c.width, "f2g_net");
  read_key(j, "content_widths", c.content_widths, "f2g_net");
  read_key(j, "motion_widths", c.motion_widths, "f2g_net");
  read_key(j, "lstm_channels", c.lstm_channels, "f2g_net");
  read_key(j, "fuse_width", c.fuse_width, "f2g_net");
  read_key(j, "decoder_widths", c.decoder_widths, "f2g_net");
  read_key(j, "horizon", c.horizon, "f2g_net");
}

void parse_det(const json& j, DetectorConfig& c) {
  check_keys(j, {"input_dim", "lstm_width", "num_layers", "dropout_p", "out_dim"},
             "det_net");
  read_key(j, "input_dim", c.input_dim, "det_net");
  read_key(j, "lstm_width", c.lstm_width, "det_net");
  read_key(j, "num_layers", c.num_layers, "det_net");
  read_key(j, "dropout_p", c.dropout_p, "det_net");
  read_key(j, "out_dim", c.out_dim, "det_net");
}

void parse_phase(const json& j, PhaseConfig& c, const std::string& where) {
  check_keys(j,
             {"optimizer", "lr", "momentum", "weight_decay", "rho", "eps",
              "epochs", "batch_size", "steps_per_epoch", "weighted"},
             where);
  read_key(j, "optimizer", c.optimizer, where);
  read_key(j, "lr", c.lr, where);
  read_key(j, "momentum", c.momentum, where);
  read_key(j, "weight_decay", c.weight_decay, where);
  read_key(j, "rho", c.rho, where);
  read_key(j, "eps", c.eps, where);
  read_key(j, "epochs", c.epochs, where);
  read_key(j, "batch_size", c.batch_size, where);
  read_key(j, "steps_per_epoch", c.steps_per_epoch, where);
  read_key(j, "weighted", c.weighted, where);
  if (c.optimizer != "sgd" && c.optimizer != "rmsprop")
    fail(ErrorKind::kUsage,
         "config: " + where + ".optimizer must be 'sgd' or 'rmsprop'");
}

void parse_f2g_phase(const json& j, F2GPhaseConfig& c) {
  check_keys(j,
             {"lr", "iterations", "gdl_weight", "log_every", "val_pairs",
              "action_bias"},
             "f2g_opt");
  read_key(j, "lr", c.lr, "f2g_opt");
  read_key(j, "iterations", c.iterations, "f2g_opt");
  read_key(j, "gdl_weight", c.gdl_weight, "f2g_opt");
  read_key(j, "log_every", c.log_every, "f2g_opt");
  read_key(j, "val_pairs", c.val_pairs, "f2g_opt");
  read_key(j, "action_bias", c.action_bias, "f2g_opt");
}

void parse_ablation(const json& j, const CliConfig& base, AblationConfig& a) {
  check_keys(j,
             {"seeds", "train_streams", "val_streams", "min_instances",
              "max_instances", "duration_min", "duration_max",
              "val_duration_min", "val_duration_max", "pr_epochs", "ar_epochs",
              "det_epochs", "steps_per_epoch", "f2g_iterations",
              "f2g_val_pairs", "thetas"},
             "ablation");
  a.corpus = base.corpus;
  a.pr_net = base.pr_net;
  a.ar_net = base.ar_net;
  a.f2g_net = base.f2g_net;
  a.det_net = base.det_net;
  a.pr_opt = base.pr_opt;
  a.ar_opt = base.ar_opt;
  a.det_opt = base.det_opt;
  a.f2g_opt = base.f2g_opt;
  a.pipeline = base.pipeline;
  a.seq_len = base.seq_len;
  read_key(j, "seeds", a.seeds, "ablation");
  read_key(j, "train_streams", a.corpus.train_streams, "ablation");
  read_key(j, "val_streams", a.corpus.val_streams, "ablation");
  read_key(j, "min_instances", a.corpus.min_instances, "ablation");
  read_key(j, "max_instances", a.corpus.max_instances, "ablation");
  read_key(j, "duration_min", a.corpus.proto.duration_min, "ablation");
  read_key(j, "duration_max", a.corpus.proto.duration_max, "ablation");
  a.val_corpus = a.corpus;
  a.has_val_corpus = true;
  read_key(j, "val_duration_min", a.val_corpus.proto.duration_min, "ablation");
  read_key(j, "val_duration_max", a.val_corpus.proto.duration_max, "ablation");
  read_key(j, "pr_epochs", a.pr_opt.epochs, "ablation");
  read_key(j, "ar_epochs", a.ar_opt.epochs, "ablation");
  read_key(j, "det_epochs", a.det_opt.epochs, "ablation");
  read_key(j, "f2g_iterations", a.f2g_opt.iterations, "ablation");
  read_key(j, "f2g_val_pairs", a.f2g_opt.val_pairs, "ablation");
  read_key(j, "thetas", a.thetas, "ablation");
  if (j.contains("steps_per_epoch")) {
    int steps = 0;
    read_key(j, "steps_per_epoch", steps, "ablation");
    a.pr_opt.steps_per_epoch = steps;
    a.ar_opt.steps_per_epoch = steps;
  }
}

CliConfig parse_config(const json& j) {
  check_keys(j,
             {"corpus", "pipeline", "pr_net", "ar_net", "f2g_net", "det_net",
              "pr_opt", "ar_opt", "det_opt", "f2g_opt", "eval", "seq_len",
              "ablation"},
             "<root>");
  CliConfig c;
  c.det_opt.optimizer = "rmsprop";
  c.det_opt.weighted = true;
  c.det_opt.epochs = 3;
  c.det_opt.steps_per_epoch = 0;
  c.thetas = default_thetas();
  if (j.contains("corpus")) parse_corpus(j.at("corpus"), c.corpus);
  if (j.contains("pipeline")) parse_pipeline(j.at("pipeline"), c.pipeline);
  if (j.contains("pr_net")) parse_c3d(j.at("pr_net"), c.pr_net, "pr_net");
  c.ar_net = c.pr_net;  // AR shares the PR architecture except out_dim
  c.ar_net.out_dim = 2 * c.corpus.proto.num_classes;
  if (j.contains("ar_net")) parse_c3d(j.at("ar_net"), c.ar_net, "ar_net");
  if (j.contains("f2g_net")) parse_f2g(j.at("f2g_net"), c.f2g_net);
  c.det_net.input_dim = 4 * c.pr_net.feature_dim;
  c.det_net.out_dim = c.corpus.proto.num_classes + 1;
  if (j.contains("det_net")) parse_det(j.at("det_net"), c.det_net);
  if (j.contains("pr_opt")) parse_phase(j.at("pr_opt"), c.pr_opt, "pr_opt");
  if (j.contains("ar_opt")) parse_phase(j.at("ar_opt"), c.ar_opt, "ar_opt");
  if (j.contains("det_opt")) parse_phase(j.at("det_opt"), c.det_opt, "det_opt");
  if (j.contains("f2g_opt")) parse_f2g_phase(j.at("f2g_opt"), c.f2g_opt);
  if (j.contains("eval")) {
    check_keys(j.at("eval"), {"thetas"}, "eval");
    read_key(j.at("eval"), "thetas", c.thetas, "eval");
  }
  read_key(j, "seq_len", c.seq_len, "<root>");
  if (j.contains("ablation")) parse_ablation(j.at("ablation"), c, c.ablation);
  else parse_ablation(json::object(), c, c.ablation);

  // Cross-section consistency; catches silently mismatched dimensions early.
  if (c.ar_net.feature_dim != c.pr_net.feature_dim)
    fail(ErrorKind::kUsage,
         "config: pr_net.feature_dim and ar_net.feature_dim must match");
  if (c.det_net.input_dim != 4 * c.pr_net.feature_dim)
    fail(ErrorKind::kUsage,
         "config: det_net.input_dim must equal 4 * pr_net.feature_dim");
  if (c.pr_net.out_dim != 2)
    fail(ErrorKind::kUsage, "config: pr_net.out_dim must be 2");
  if (c.ar_net.out_dim != 2 * c.corpus.proto.num_classes)
    fail(ErrorKind::kUsage,
         "config: ar_net.out_dim must equal 2 * corpus.num_classes");
  if (c.det_net.out_dim != c.corpus.proto.num_classes + 1)
    fail(ErrorKind::kUsage,
         "config: det_net.out_dim must equal corpus.num_classes + 1");
  if (c.f2g_net.horizon != c.pipeline.horizon)
    fail(ErrorKind::kUsage,
         "config: f2g_net.horizon must equal pipeline.horizon");
  c.pipeline.validate();
  return c;
}

json load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::kUsage, "cannot open config file '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage, "config '" + path + "': " + e.what());
  }
  if (!j.is_object())
    fail(ErrorKind::kUsage, "config '" + path + "': top level must be an object");
  return j;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

// Content hashes for one input/output path: a file hashes as itself, a
// directory as every regular file under it (sorted relative paths).
std::map<std::string, std::string> hash_tree(const std::string& path) {
  std::map<std::string, std::string> out;
  fs::path p(path);
  std::error_code ec;
  if (fs::is_directory(p, ec)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(p))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files)
      out[fs::relative(f, p).generic_string()] = Sha256::file_hex(f.string());
  } else if (fs::is_regular_file(p, ec)) {
    out[p.filename().generic_string()] = Sha256::file_hex(path);
  } else {
    fail(ErrorKind::kData, "input path '" + path + "' does not exist");
  }
  return out;
}

struct RunContext {
  std::string command;
  json config;       // verbatim parsed config file
  uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> inputs;  // paths hashed into the manifest

  fs::path out(const std::string& rel) const { return fs::path(out_dir) / rel; }

  void prepare() const {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
      fail(ErrorKind::kState,
           "cannot create output directory '" + out_dir + "': " + ec.message());
  }

  // Written after all outputs so the manifest can attest to them.
  void write_manifest() const {
    ordered_json m;
    m["command"] = command;
    m["seed"] = seed;
    m["config"] = config;
    ordered_json ins = ordered_json::object();
    for (const std::string& path : inputs) {
      ordered_json tree = ordered_json::object();
      for (const auto& [rel, hex] : hash_tree(path)) tree[rel] = hex;
      ins[path] = tree;
    }
    m["inputs"] = ins;
    ordered_json outs = ordered_json::object();
    for (const auto& [rel, hex] : hash_tree(out_dir))
      if (rel != "manifest.json") outs[rel] = hex;
    m["outputs"] = outs;
    std::ofstream os(out("manifest.json"));
    if (!os)
      fail(ErrorKind::kState, "cannot write manifest in '" + out_dir + "'");
    os << m.dump(2) << "\n";
  }
};

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::kState, "cannot write '" + path.string() + "'");
  os << content;
  if (!os) fail(ErrorKind::kState, "write to '" + path.string() + "' failed");
}

// Training log: one JSON object per line, also echoed to stdout.
struct LogFile {
  std::ofstream os;
  explicit LogFile(const fs::path& path) : os(path, std::ios::trunc) {
    if (!os)
      fail(ErrorKind::kState, "cannot open log file '" + path.string() + "'");
  }
  LogSink sink() {
    return [this](const TrainLogEntry& e) {
      const std::string line = log_entry_json(e);
      os << line << "\n";
      os.flush();
      std::cout << line << "\n";
    };
  }
};

// ---------------------------------------------------------------------------
// Checkpoint helpers
// ---------------------------------------------------------------------------

void save_net(const fs::path& path, const std::string& config_str,
              std::vector<Parameter*> params) {
  save_checkpoint(path.string(), config_str, params);
}

Dataset load_split(const std::string& dir) { return read_dataset(dir); }

std::unique_ptr<C3DNet> load_c3d(const C3DConfig& cfg, const fs::path& path,
                                 uint64_t seed) {
  Rng rng(seed);
  auto net = std::make_unique<C3DNet>(cfg, Dtype::kF32, rng);
  load_checkpoint(path.string(), cfg.str(), net->parameters());
  return net;
}

std::unique_ptr<F2GNet> load_f2g(const F2GConfig& cfg, const fs::path& path,
                                 uint64_t seed) {
  Rng rng(seed);
  auto net = std::make_unique<F2GNet>(cfg, Dtype::kF32, rng);
  load_checkpoint(path.string(), cfg.str(), net->parameters());
  return net;
}

std::unique_ptr<DetectorNet> load_det(const DetectorConfig& cfg,
                                      const fs::path& path, uint64_t seed) {
  Rng rng(seed);
  auto net = std::make_unique<DetectorNet>(cfg, Dtype::kF32, rng);
  load_checkpoint(path.string(), cfg.str(), net->parameters());
  return net;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const CliConfig& cfg, RunContext& ctx) {
  ctx.prepare();
  Rng root(ctx.seed);
  const Dataset train = make_corpus_split(cfg.corpus, cfg.corpus.train_streams,
                                          root.fork("train").next_u64(), "train");
  const Dataset val = make_corpus_split(cfg.corpus, cfg.corpus.val_streams,
                                        root.fork("val").next_u64(), "val");
  write_dataset(train, ctx.out("train").string());
  write_dataset(val, ctx.out("val").string());
  ctx.write_manifest();
  std::cout << "wrote " << train.streams.size() << " train / "
            << val.streams.size() << " val streams to " << ctx.out_dir << "\n";
  return 0;
}

int cmd_augment(const CliConfig&, RunContext& ctx, const std::string& data) {
  ctx.prepare();
  ctx.inputs.push_back(data);
  const Dataset ds = load_split(data);
  int dropped = 0;
  const Dataset aug = augment_dataset(ds, &dropped);
  write_dataset(aug, ctx.out_dir);
  ctx.write_manifest();
  std::cout << "augmented " << ds.streams.size() << " -> " << aug.streams.size()
            << " streams (" << dropped << " degenerate intervals dropped)\n";
  return 0;
}

int cmd_train_c3d(const CliConfig& cfg, RunContext& ctx, const std::string& train_dir,
                  const std::string& val_dir, bool is_ar) {
  ctx.prepare();
  ctx.inputs = {train_dir, val_dir};
  const Dataset train = load_split(train_dir);
  const Dataset val = load_split(val_dir);
  const C3DConfig& ncfg = is_ar ? cfg.ar_net : cfg.pr_net;
  Rng rng = Rng(ctx.seed).fork(is_ar ? "ar-init" : "pr-init");
  C3DNet net(ncfg, Dtype::kF32, rng);
  LogFile log(ctx.out("train_log.jsonl"));
  const PhaseConfig& pcfg = is_ar ? cfg.ar_opt : cfg.pr_opt;
  TrainResult res =
      is_ar ? train_ar(net, train, val, pcfg, cfg.pipeline.tau,
                       cfg.pipeline.train_stride, ctx.seed, log.sink())
            : train_pr(net, train, val, pcfg, cfg.pipeline.tau,
                       cfg.pipeline.train_stride, ctx.seed, log.sink());
  save_net(ctx.out(is_ar ? "ar.ckpt" : "pr.ckpt"), ncfg.str(), net.parameters());
  ctx.write_manifest();
  std::cout << "best val accuracy " << res.best_val << "\n";
  return 0;
}

int cmd_train_f2g(const CliConfig& cfg, RunContext& ctx,
                  const std::string& train_dir, const std::string& val_dir) {
  ctx.prepare();
  ctx.inputs = {train_dir, val_dir};
  const Dataset train = load_split(train_dir);
  const Dataset val = load_split(val_dir);
  Rng rng = Rng(ctx.seed).fork("f2g-init");
  F2GNet net(cfg.f2g_net, Dtype::kF32, rng);
  LogFile log(ctx.out("train_log.jsonl"));
  TrainResult res = train_f2g(net, train, val, cfg.f2g_opt, ctx.seed, log.sink());
  save_net(ctx.out("f2g.ckpt"), cfg.f2g_net.str(), net.parameters());
  ctx.write_manifest();
  std::cout << "best val loss " << res.best_val << " (copy-last baseline "
            << res.baseline_val << ")\n";
  return 0;
}

int cmd_train_det(const CliConfig& cfg, RunContext& ctx,
                  const std::string& train_dir, const std::string& val_dir,
                  const std::string& ckpt_dir, const PipelineConfig& pcfg) {
  ctx.prepare();
  const fs::path cp(ckpt_dir);
  ctx.inputs = {train_dir, val_dir, (cp / "pr.ckpt").string(),
                (cp / "ar.ckpt").string()};
  const bool want_f2g = pcfg.use_f2g && !pcfg.oracle_future;
  if (want_f2g) ctx.inputs.push_back((cp / "f2g.ckpt").string());
  for (size_t i = 2; i < ctx.inputs.size(); ++i)
    if (!fs::exists(ctx.inputs[i]))
      fail(ErrorKind::kState, "missing upstream checkpoint '" + ctx.inputs[i] +
                                  "' (train the earlier phases first)");
  const Dataset train = load_split(train_dir);
  const Dataset val = load_split(val_dir);
  auto pr = load_c3d(cfg.pr_net, cp / "pr.ckpt", 1);
  auto ar = load_c3d(cfg.ar_net, cp / "ar.ckpt", 2);
  std::unique_ptr<F2GNet> f2g;
  if (want_f2g) f2g = load_f2g(cfg.f2g_net, cp / "f2g.ckpt", 3);
  Rng rng = Rng(ctx.seed).fork("det-init");
  DetectorNet net(cfg.det_net, Dtype::kF32, rng);
  LogFile log(ctx.out("train_log.jsonl"));
  TrainResult res = train_det(net, *pr, *ar, f2g.get(), train, val, pcfg,
                              cfg.det_opt, cfg.seq_len, ctx.seed, log.sink());
  save_net(ctx.out("det.ckpt"), cfg.det_net.str(), net.parameters());
  ctx.write_manifest();
  std::cout << "best val balanced accuracy " << res.best_val << "\n";
  return 0;
}

int cmd_detect(const CliConfig& cfg, RunContext& ctx, const std::string& ckpt_dir,
               const std::string& stream_path, const PipelineConfig& pcfg) {
  ctx.prepare();
  const fs::path cp(ckpt_dir);
  const bool want_f2g = pcfg.use_f2g && !pcfg.oracle_future;
  ctx.inputs = {stream_path, (cp / "pr.ckpt").string(),
                (cp / "ar.ckpt").string(), (cp / "det.ckpt").string()};
  if (want_f2g) ctx.inputs.push_back((cp / "f2g.ckpt").string());
  for (size_t i = 1; i < ctx.inputs.size(); ++i)
    if (!fs::exists(ctx.inputs[i]))
      fail(ErrorKind::kState, "missing checkpoint '" + ctx.inputs[i] + "'");

  auto pr = load_c3d(cfg.pr_net, cp / "pr.ckpt", 1);
  auto ar = load_c3d(cfg.ar_net, cp / "ar.ckpt", 2);
  std::unique_ptr<F2GNet> f2g;
  if (want_f2g) f2g = load_f2g(cfg.f2g_net, cp / "f2g.ckpt", 3);
  auto det = load_det(cfg.det_net, cp / "det.ckpt", 4);

  std::vector<AnnotatedStream> streams;
  if (fs::is_directory(stream_path)) {
    Dataset ds = load_split(stream_path);
    streams = std::move(ds.streams);
  } else {
    AnnotatedStream s;
    s.frames = read_frames_file(stream_path);
    s.id = fs::path(stream_path).stem().string();
    streams.push_back(std::move(s));
  }

  std::ostringstream detections;
  for (const AnnotatedStream& s : streams) {
    OnlinePipeline pipe(pcfg, *pr, *ar, f2g.get(), *det);
    StreamResult res;
    const int64_t len = s.length();
    for (int64_t t = 0; t < len; ++t) {
      Tensor oracle;
      if (pcfg.oracle_future && t >= pcfg.tau - 1)
        oracle = slice_frames(s.frames, t + 1, pcfg.horizon);
      std::optional<WindowPrediction> p =
          pipe.step(slice_frames(s.frames, t, 1).reshaped(
                        {s.frames.dim(1), s.frames.dim(2), s.frames.dim(3)}),
                    oracle);
      if (p) {
        ordered_json line;
        line["stream_id"] = s.id;
        line["t"] = p->t;
        line["label"] = p->label;
        line["probs"] = p->probs;
        std::cout << line.dump() << "\n";
        res.predictions.push_back(*p);
      }
    }
    const int k = static_cast<int>(cfg.det_net.out_dim) - 1;
    res.events = events_from_predictions(res.predictions, pcfg, k);
    res.per_frame_scores = per_frame_scores(res.predictions, pcfg, len, k);
    res.ar_forwards = pipe.ar_forwards();
    res.causal = !pcfg.oracle_future;
    detections << detection_json(s.id, pcfg, res) << "\n";
  }
  write_text(ctx.out("detections.jsonl"), detections.str());
  ctx.write_manifest();
  return 0;
}

std::string results_table_text(const std::map<double, ApTable>& tables,
                               const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "theta ";
  for (const std::string& name : class_names) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), " %14s", name.substr(0, 14).c_str());
    os << buf;
  }
  os << "            mAP\n";
  for (const auto& [theta, table] : tables) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%5.2f ", theta);
    os << buf;
    for (size_t c = 0; c < class_names.size(); ++c) {
      auto it = table.per_class.find(static_cast<int>(c));
      if (it == table.per_class.end())
        std::snprintf(buf, sizeof(buf), " %14s", "-");
      else
        std::snprintf(buf, sizeof(buf), " %14.3f", it->second);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), " %14.3f", table.mean);
    os << buf << "\n";
  }
  return os.str();
}

std::string results_table_json(const std::map<double, ApTable>& tables,
                               const std::vector<std::string>& class_names) {
  ordered_json root;
  root["classes"] = class_names;
  ordered_json rows = ordered_json::array();
  for (const auto& [theta, table] : tables) {
    ordered_json row;
    row["theta"] = theta;
    ordered_json per = ordered_json::object();
    for (const auto& [cls, ap] : table.per_class)
      per[class_names[static_cast<size_t>(cls)]] = ap;
    row["per_class"] = per;
    ordered_json skipped = ordered_json::array();
    for (int cls : table.skipped_classes)
      skipped.push_back(class_names[static_cast<size_t>(cls)]);
    row["skipped"] = skipped;
    row["map"] = table.mean;
    rows.push_back(row);
  }
  root["rows"] = rows;
  return root.dump(2) + "\n";
}

int cmd_eval(const CliConfig& cfg, RunContext& ctx, const std::string& detections,
             const std::string& data_dir) {
  ctx.prepare();
  ctx.inputs = {detections, data_dir};
  const Dataset ds = load_split(data_dir);
  std::map<std::string, const AnnotatedStream*> by_id;
  for (const AnnotatedStream& s : ds.streams) by_id[s.id] = &s;

  std::ifstream is(detections);
  if (!is) fail(ErrorKind::kData, "cannot open detections '" + detections + "'");
  std::vector<StreamEval> corpus;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::string stream_id;
    StreamResult res = detection_from_json(line, &stream_id);
    auto it = by_id.find(stream_id);
    if (it == by_id.end())
      fail(ErrorKind::kData,
           "detections reference unknown stream '" + stream_id + "'");
    corpus.push_back({std::move(res.events), it->second->intervals});
  }
  if (corpus.empty()) fail(ErrorKind::kData, "no detection records found");

  const auto tables = map_table(corpus, static_cast<int>(ds.class_names.size()),
                                cfg.thetas);
  const std::string text = results_table_text(tables, ds.class_names);
  write_text(ctx.out("results.txt"), text);
  write_text(ctx.out("results.json"), results_table_json(tables, ds.class_names));
  ctx.write_manifest();
  std::cout << text;
  return 0;
}

int cmd_ablate(const CliConfig& cfg, RunContext& ctx) {
  ctx.prepare();
  LogFile log(ctx.out("ablate_log.jsonl"));
  AblationReport rep = run_ablation(cfg.ablation, log.sink());
  const std::string text = ablation_table_text(rep, cfg.ablation.thetas);
  write_text(ctx.out("ablation.txt"), text);
  write_text(ctx.out("ablation.json"), ablation_table_json(rep) + "\n");
  ctx.write_manifest();
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck: finite-difference battery over every layer family
// ---------------------------------------------------------------------------

struct NamedCheck {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

Tensor randn_param(Rng& rng, const Shape& shape, double scale = 0.5) {
  return Tensor::randn(shape, scale, rng, Dtype::kF64);
}

Parameter make_param(const std::string& name, Tensor value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  p.value.impl_->requires_grad = true;
  return p;
}

int cmd_gradcheck(RunContext& ctx) {
  ctx.prepare();
  constexpr double kTol = 1e-4;
  const uint64_t base_seed = ctx.seed == 0 ? 7 : ctx.seed;
  // Independent stream per check so adding or removing one never changes
  // the draws of the others.
  auto check_rng = [&](const std::string& name) {
    Rng parent(base_seed);
    return parent.fork(name);
  };
  std::vector<NamedCheck> checks;

  auto run = [&](const std::string& name, std::vector<Parameter*> params,
                 const std::function<Tensor()>& loss, int64_t max_elems = 6) {
    GradCheckReport rep = finite_difference_check(params, loss, 1e-5, max_elems);
    checks.push_back({name, rep.max_rel_err, rep.passed(kTol)});
    std::cout << "gradcheck " << name << ": max_rel_err=" << rep.max_rel_err
              << (rep.passed(kTol) ? " pass" : " FAIL") << "\n";
  };

  {  // conv3d against a fixed random projection
    Rng rng = check_rng("conv3d");
    Parameter x = make_param("x", randn_param(rng, {1, 2, 3, 5, 5}));
    Parameter k = make_param("k", randn_param(rng, {2, 2, 2, 3, 3}));
    const Tensor proj = randn_param(rng, {1, 2, 2, 5, 5});
    run("conv3d", {&x, &k}, [&]() {
      return ops::sum(ops::mul(
          ops::conv3d(x.value, k.value, Int3{1, 1, 1}, Int3{0, 1, 1}), proj));
    });
  }
  {  // conv2d, strided
    Rng rng = check_rng("conv2d");
    Parameter x = make_param("x", randn_param(rng, {1, 2, 6, 6}));
    Parameter k = make_param("k", randn_param(rng, {3, 2, 3, 3}));
    const Tensor proj = randn_param(rng, {1, 3, 3, 3});
    run("conv2d", {&x, &k}, [&]() {
      return ops::sum(ops::mul(
          ops::conv2d(x.value, k.value, Int2{2, 2}, Int2{1, 1}), proj));
    });
  }
  {  // deconv2d, strided upsampling
    Rng rng = check_rng("deconv2d");
    Parameter y = make_param("y", randn_param(rng, {1, 3, 3, 3}));
    Parameter k = make_param("k", randn_param(rng, {3, 2, 4, 4}));
    const Tensor proj = randn_param(rng, {1, 2, 6, 6});
    run("deconv2d", {&y, &k}, [&]() {
      return ops::sum(ops::mul(
          ops::deconv2d(y.value, k.value, Int2{2, 2}, Int2{1, 1}), proj));
    });
  }
  {  // maxpool3d (random input makes ties measure-zero)
    Rng rng = check_rng("maxpool3d");
    Parameter x = make_param("x", randn_param(rng, {1, 2, 4, 6, 6}, 1.0));
    const Tensor proj = randn_param(rng, {1, 2, 2, 3, 3});
    run("maxpool3d", {&x}, [&]() {
      return ops::sum(ops::mul(
          ops::maxpool3d(x.value, Int3{2, 2, 2}, Int3{2, 2, 2}), proj));
    });
  }
  {  // dense LSTM cell, two chained steps
    Rng rng = check_rng("lstm_cell");
    const int64_t din = 3, dh = 4, n = 2;
    auto mk = [&](const std::string& name, const Shape& s) {
      return make_param(name, randn_param(rng, s));
    };
    std::vector<Parameter> ps;
    for (const char* g : {"i", "f", "g", "o"}) {
      ps.push_back(mk(std::string("wx") + g, {dh, din}));
      ps.push_back(mk(std::string("wh") + g, {dh, dh}));
      ps.push_back(mk(std::string("b") + g, {dh}));
    }
    ps.push_back(mk("x0", {n, din}));
    ps.push_back(mk("x1", {n, din}));
    const Tensor proj = randn_param(rng, {n, dh});
    std::vector<Parameter*> ptrs;
    for (Parameter& p : ps) ptrs.push_back(&p);
    run("lstm_cell", ptrs, [&]() {
      ops::LstmParams lp{ps[0].value, ps[1].value,  ps[2].value, ps[3].value,
                         ps[4].value, ps[5].value,  ps[6].value, ps[7].value,
                         ps[8].value, ps[9].value,  ps[10].value, ps[11].value};
      ops::LstmState st{Tensor::zeros({n, dh}, Dtype::kF64),
                        Tensor::zeros({n, dh}, Dtype::kF64)};
      st = ops::lstm_cell(ps[12].value, st, lp);
      st = ops::lstm_cell(ps[13].value, st, lp);
      return ops::sum(ops::mul(st.h, proj));
    }, 3);
  }
  {  // convolutional LSTM cell
    Rng rng = check_rng("conv_lstm_cell");
    const int64_t cin = 2, ch = 3, hw = 4;
    std::vector<Parameter> ps;
    auto mk = [&](const std::string& name, const Shape& s) {
      ps.push_back(make_param(name, randn_param(rng, s)));
    };
    for (const char* g : {"i", "f", "g", "o"}) {
      mk(std::string("kx") + g, {ch, cin, 3, 3});
      mk(std::string("kh") + g, {ch, ch, 3, 3});
      mk(std::string("b") + g, {ch});
    }
    mk("x", {1, cin, hw, hw});
    const Tensor proj = randn_param(rng, {1, ch, hw, hw});
    std::vector<Parameter*> ptrs;
    for (Parameter& p : ps) ptrs.push_back(&p);
    run("conv_lstm_cell", ptrs, [&]() {
      ops::ConvLstmParams cp{ps[0].value, ps[1].value,  ps[2].value,
                             ps[3].value, ps[4].value,  ps[5].value,
                             ps[6].value, ps[7].value,  ps[8].value,
                             ps[9].value, ps[10].value, ps[11].value};
      ops::LstmState st{Tensor::zeros({1, ch, hw, hw}, Dtype::kF64),
                        Tensor::zeros({1, ch, hw, hw}, Dtype::kF64)};
      st = ops::conv_lstm_cell(ps[12].value, st, cp);
      return ops::sum(ops::mul(st.h, proj));
    }, 3);
  }
  {  // weighted cross-entropy
    Rng rng = check_rng("softmax_cross_entropy");
    Parameter logits = make_param("logits", randn_param(rng, {4, 3}, 1.0));
    Tensor onehot = Tensor::zeros({4, 3}, Dtype::kF64);
    for (int64_t i = 0; i < 4; ++i) {
      auto b = onehot.buf<double>();
      b[static_cast<size_t>(i * 3 + i % 3)] = 1.0;
    }
    const Tensor w = Tensor::from_values({3}, std::vector<double>{0.5, 0.9, 0.75}, Dtype::kF64);
    run("softmax_cross_entropy", {&logits}, [&]() {
      return ops::softmax_cross_entropy(logits.value, onehot, w);
    }, -1);
  }
  {  // image loss (L2 + gradient-difference term)
    Rng rng = check_rng("image_loss");
    Parameter pred = make_param("pred", randn_param(rng, {2, 1, 5, 5}, 1.0));
    const Tensor target = randn_param(rng, {2, 1, 5, 5}, 1.0);
    run("image_loss", {&pred}, [&]() {
      return ops::image_loss(pred.value, target, 1.0);
    }, -1);
  }
  {  // full C3D network (eval mode keeps the loss deterministic)
    Rng rng = check_rng("c3d_net");
    C3DConfig cc;
    cc.height = 8;
    cc.width = 8;
    cc.widths = {2, 2, 3, 3, 3, 3, 3, 3};
    cc.feature_dim = 6;
    cc.out_dim = 3;
    Rng nr = rng.fork("c3d");
    C3DNet net(cc, Dtype::kF64, nr);
    Rng xr = rng.fork("c3d-x");
    const Tensor x = Tensor::randn({1, 1, 16, 8, 8}, 0.5, xr, Dtype::kF64);
    Tensor onehot = Tensor::zeros({1, 3}, Dtype::kF64);
    onehot.buf<double>()[1] = 1.0;
    run("c3d_net", net.parameters(), [&]() {
      return ops::softmax_cross_entropy(net.forward(x, Mode::kEval).logits,
                                        onehot);
    }, 2);
  }
  {  // future-frame generator, full BPTT through warm-up and rollout
    Rng rng = check_rng("f2g_net");
    F2GConfig fc;
    fc.height = 8;
    fc.width = 8;
    fc.content_widths = {2, 3};
    fc.motion_widths = {2, 3};
    fc.lstm_channels = 3;
    fc.fuse_width = 4;
    fc.decoder_widths = {3, 2};
    fc.horizon = 2;
    Rng nr = rng.fork("f2g");
    F2GNet net(fc, Dtype::kF64, nr);
    Rng xr = rng.fork("f2g-x");
    Tensor ctx_frames = Tensor::uniform({16, 1, 8, 8}, 0.1, 0.9, xr, Dtype::kF64);
    Tensor targets = Tensor::uniform({2, 1, 8, 8}, 0.1, 0.9, xr, Dtype::kF64);
    run("f2g_net", net.parameters(), [&]() {
      return net.train_loss(ctx_frames, targets, 1.0);
    }, 2);
  }
  {  // detection LSTM, two steps with threaded state
    Rng rng = check_rng("detector_net");
    DetectorConfig dc;
    dc.input_dim = 8;
    dc.lstm_width = 4;
    dc.out_dim = 3;
    Rng nr = rng.fork("det");
    DetectorNet net(dc, Dtype::kF64, nr);
    Rng xr = rng.fork("det-x");
    // Three steps with the loss summed over all of them keep every layer's
    // gradients well away from the finite-difference noise floor.
    const Tensor x0 = Tensor::randn({1, 8}, 1.0, xr, Dtype::kF64);
    const Tensor x1 = Tensor::randn({1, 8}, 1.0, xr, Dtype::kF64);
    const Tensor x2 = Tensor::randn({1, 8}, 1.0, xr, Dtype::kF64);
    Tensor onehot = Tensor::zeros({1, 3}, Dtype::kF64);
    onehot.buf<double>()[2] = 1.0;
    run("detector_net", net.parameters(), [&]() {
      DetectorNet::State st = net.initial_state(1);
      DetectorNet::Out o1 = net.forward(x0, st, Mode::kEval, nullptr);
      DetectorNet::Out o2 = net.forward(x1, o1.state, Mode::kEval, nullptr);
      DetectorNet::Out o3 = net.forward(x2, o2.state, Mode::kEval, nullptr);
      Tensor loss = ops::softmax_cross_entropy(o1.logits, onehot);
      loss = ops::add(loss, ops::softmax_cross_entropy(o2.logits, onehot));
      return ops::add(loss, ops::softmax_cross_entropy(o3.logits, onehot));
    }, 3);
  }

  ordered_json rep;
  rep["tolerance"] = kTol;
  ordered_json arr = ordered_json::array();
  bool all_pass = true;
  for (const NamedCheck& c : checks) {
    ordered_json jc;
    jc["name"] = c.name;
    jc["max_rel_err"] = c.max_rel_err;
    jc["pass"] = c.pass;
    arr.push_back(jc);
    all_pass = all_pass && c.pass;
  }
  rep["checks"] = arr;
  rep["all_pass"] = all_pass;
  write_text(ctx.out("gradcheck.json"), rep.dump(2) + "\n");
  ctx.write_manifest();
  if (!all_pass)
    fail(ErrorKind::kNumeric, "gradient check failed (see gradcheck.json)");
  std::cout << "all " << checks.size() << " gradient checks passed\n";
  return 0;
}

}  // namespace
}  // namespace streamloc

int main(int argc, char** argv) {
  using namespace streamloc;

  CLI::App app{"streamloc: online temporal action localization on synthetic "
               "video streams"};
  app.require_subcommand(1);

  std::string config_path = "configs/defaults.json";
  uint64_t seed = 0;
  std::string out_dir;
  std::string data_dir, train_dir, val_dir, ckpt_dir, stream_path, detections;
  bool no_f2g = false, serial_cascade = false, oracle_future = false;

  auto add_common = [&](CLI::App* sub, bool needs_out = true) {
    sub->add_option("--config", config_path, "JSON config file")
        ->capture_default_str();
    sub->add_option("--seed", seed, "run seed")->capture_default_str();
    auto* out = sub->add_option("--out", out_dir, "output directory");
    if (needs_out) out->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data",
                                     "generate the synthetic corpus (train/ "
                                     "and val/ splits)");
  add_common(gen);

  CLI::App* aug = app.add_subcommand("augment",
                                     "write a temporally augmented copy of a "
                                     "dataset");
  add_common(aug);
  aug->add_option("--data", data_dir, "input dataset directory")->required();

  CLI::App* tpr = app.add_subcommand("train-pr", "train the proposal network");
  CLI::App* tar = app.add_subcommand("train-ar",
                                     "train the action-phase network");
  CLI::App* tfg = app.add_subcommand("train-f2g",
                                     "train the future frame generator");
  CLI::App* tdt = app.add_subcommand("train-det",
                                     "train the detection LSTM on frozen "
                                     "upstream networks");
  for (CLI::App* sub : {tpr, tar, tfg, tdt}) {
    add_common(sub);
    sub->add_option("--train-data", train_dir, "training dataset directory")
        ->required();
    sub->add_option("--val-data", val_dir, "validation dataset directory")
        ->required();
  }
  tdt->add_option("--checkpoint-dir", ckpt_dir,
                  "directory with pr.ckpt / ar.ckpt / f2g.ckpt")
      ->required();
  tdt->add_flag("--no-f2g", no_f2g, "train without generated future features");
  tdt->add_flag("--serial-cascade", serial_cascade,
                "gate AR features behind PR decisions");
  tdt->add_flag("--oracle-future", oracle_future,
                "use true future frames instead of generated ones");

  CLI::App* det = app.add_subcommand("detect",
                                     "run the online pipeline over streams");
  add_common(det);
  det->add_option("--checkpoint-dir", ckpt_dir,
                  "directory with pr/ar/f2g/det checkpoints")
      ->required();
  det->add_option("--stream", stream_path,
                  "dataset directory or single .slvd frames file")
      ->required();
  det->add_flag("--no-f2g", no_f2g, "disable generated future features");
  det->add_flag("--serial-cascade", serial_cascade,
                "gate AR behind PR decisions");
  det->add_flag("--oracle-future", oracle_future,
                "use true future frames (output is marked non-causal)");

  CLI::App* evl = app.add_subcommand("eval",
                                     "score detections against ground truth");
  add_common(evl);
  evl->add_option("--detections", detections, "detections.jsonl from detect")
      ->required();
  evl->add_option("--data", data_dir, "dataset directory with ground truth")
      ->required();

  CLI::App* abl = app.add_subcommand("ablate",
                                     "run the ablation grid over setups and "
                                     "seeds");
  add_common(abl);

  CLI::App* gck = app.add_subcommand("gradcheck",
                                     "finite-difference checks for every "
                                     "layer family");
  add_common(gck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    RunContext ctx;
    ctx.seed = seed;
    ctx.out_dir = out_dir;

    if (app.got_subcommand(gck)) {
      ctx.command = "gradcheck";
      ctx.config = json::object();
      return cmd_gradcheck(ctx);
    }

    ctx.config = load_config_file(config_path);
    const CliConfig cfg = parse_config(ctx.config);
    PipelineConfig pcfg = cfg.pipeline;
    pcfg.use_f2g = !no_f2g;
    pcfg.serial_cascade = serial_cascade;
    pcfg.oracle_future = oracle_future;
    pcfg.validate();

    if (app.got_subcommand(gen)) {
      ctx.command = "gen-data";
      return cmd_gen_data(cfg, ctx);
    }
    if (app.got_subcommand(aug)) {
      ctx.command = "augment";
      return cmd_augment(cfg, ctx, data_dir);
    }
    if (app.got_subcommand(tpr)) {
      ctx.command = "train-pr";
      return cmd_train_c3d(cfg, ctx, train_dir, val_dir, false);
    }
    if (app.got_subcommand(tar)) {
      ctx.command = "train-ar";
      return cmd_train_c3d(cfg, ctx, train_dir, val_dir, true);
    }
    if (app.got_subcommand(tfg)) {
      ctx.command = "train-f2g";
      return cmd_train_f2g(cfg, ctx, train_dir, val_dir);
    }
    if (app.got_subcommand(tdt)) {
      ctx.command = "train-det";
      return cmd_train_det(cfg, ctx, train_dir, val_dir, ckpt_dir, pcfg);
    }
    if (app.got_subcommand(det)) {
      ctx.command = "detect";
      return cmd_detect(cfg, ctx, ckpt_dir, stream_path, pcfg);
    }
    if (app.got_subcommand(evl)) {
      ctx.command = "eval";
      return cmd_eval(cfg, ctx, detections, data_dir);
    }
    if (app.got_subcommand(abl)) {
      ctx.command = "ablate";
      return cmd_ablate(cfg, ctx);
    }
    std::cerr << "no command selected\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error [" << error_kind_name(e.kind()) << "]: " << e.what()
              << "\n";
    return e.kind() == ErrorKind::kUsage ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

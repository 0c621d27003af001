#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "streamloc/data.hpp"
#include "streamloc/eval.hpp"
#include "streamloc/networks.hpp"
#include "streamloc/optim.hpp"
#include "streamloc/pipeline.hpp"

namespace streamloc {

// One line of the training log.
struct TrainLogEntry {
  std::string phase;
  int epoch = 0;
  int64_t step = 0;
  double loss = 0.0;
  double val_metric = 0.0;
  uint64_t seed = 0;
};
std::string log_entry_json(const TrainLogEntry& e);
using LogSink = std::function<void(const TrainLogEntry&)>;

// Per-class weights against imbalance: w_k = 1 - count_k / (2 * max count).
std::vector<double> class_weights(const std::vector<int64_t>& counts);

struct PhaseConfig {
  std::string optimizer = "sgd";  // "sgd" | "rmsprop"
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double rho = 0.9;   // rmsprop decay
  double eps = 1e-8;  // rmsprop epsilon
  int epochs = 30;
  int batch_size = 8;
  // Batches drawn per epoch; 0 sweeps every window once per epoch.
  int steps_per_epoch = 150;
  bool weighted = false;  // class-weighted cross-entropy
};

struct F2GPhaseConfig {
  double lr = 1e-3;  // plain SGD, no momentum
  int64_t iterations = 5000;
  double gdl_weight = 1.0;
  int64_t log_every = 250;
  int val_pairs = 48;
  // Fraction of sampled contexts forced to overlap an action instance.
  double action_bias = 0.5;
};

struct TrainResult {
  double best_val = 0.0;
  double initial_loss = 0.0;  // first batch, before any update
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
  std::vector<double> val_curve;
  // Validation confusion at the best epoch, [true][predicted].
  std::vector<std::vector<int64_t>> confusion;
  double baseline_val = 0.0;  // f2g: copy-last-frame validation loss
};

// Window enumeration at a fixed stride; labels per the requested head.
enum class LabelKind { kPr, kAr, kDet };
struct WindowRef {
  int stream = 0;
  int64_t start = 0;
  int label = 0;
};
std::vector<WindowRef> enumerate_windows(const Dataset& ds, int tau, int stride,
                                         LabelKind kind);

TrainResult train_pr(C3DNet& net, const Dataset& train, const Dataset& val,
                     const PhaseConfig& cfg, int tau, int stride, uint64_t seed,
                     const LogSink& log);
TrainResult train_ar(C3DNet& net, const Dataset& train, const Dataset& val,
                     const PhaseConfig& cfg, int tau, int stride, uint64_t seed,
                     const LogSink& log);
TrainResult train_f2g(F2GNet& net, const Dataset& train, const Dataset& val,
                      const F2GPhaseConfig& cfg, uint64_t seed,
                      const LogSink& log);

// Frozen-upstream features for detector training, cached per window. The
// generated/oracle variants are filled only when requested.
struct WindowPieces {
  Tensor pr, ar;          // current window fc7, AR always computed here
  Tensor pr_gen, ar_gen;  // future window built from generated frames
  Tensor pr_gt, ar_gt;    // future window built from true frames
  int pr_label = 0, pr_gen_label = 0, pr_gt_label = 0;
};
struct StreamPieces {
  std::vector<WindowPieces> windows;
  std::vector<int> det_labels;
};
std::vector<StreamPieces> extract_detector_pieces(
    const Dataset& ds, const PipelineConfig& pcfg, const C3DNet& pr,
    const C3DNet& ar, const F2GNet* f2g, bool want_generated, bool want_oracle);

// Sequences of seq_len consecutive windows (remainder dropped), features
// assembled per the pipeline flags (future source, cascade gating).
struct FeatureSequence {
  std::vector<Tensor> steps;  // each [1, 4F]
  std::vector<int> labels;
};
std::vector<FeatureSequence> assemble_sequences(
    const std::vector<StreamPieces>& pieces, const PipelineConfig& pcfg,
    int feature_dim, int seq_len);

TrainResult train_det_cached(DetectorNet& net,
                             const std::vector<FeatureSequence>& train_seqs,
                             const std::vector<FeatureSequence>& val_seqs,
                             const PhaseConfig& cfg, int num_classes,
                             uint64_t seed, const LogSink& log);
TrainResult train_det(DetectorNet& net, const C3DNet& pr, const C3DNet& ar,
                      const F2GNet* f2g, const Dataset& train,
                      const Dataset& val, const PipelineConfig& pcfg,
                      const PhaseConfig& cfg, int seq_len, uint64_t seed,
                      const LogSink& log);

// Full-pipeline detection quality on a dataset.
std::map<double, ApTable> evaluate_pipeline(const Dataset& ds,
                                            const PipelineConfig& pcfg,
                                            const C3DNet& pr, const C3DNet& ar,
                                            const F2GNet* f2g,
                                            const DetectorNet& det,
                                            const std::vector<double>& thetas);

// Corpus synthesis: per-stream specs derived from a prototype.
struct CorpusConfig {
  int train_streams = 200;
  int val_streams = 50;
  int min_instances = 2;
  int max_instances = 6;
  StreamSpec proto;  // num_instances / seed / id overridden per stream
};
Dataset make_corpus_split(const CorpusConfig& cfg, int num_streams,
                          uint64_t seed, const std::string& prefix);

// Ablation grid: the six setups at shared seeds and corpora. The validation
// corpus may draw from a wider playback-speed (duration) range than the
// training corpus so the speed-augmentation comparison carries real signal.
struct AblationConfig {
  std::vector<uint64_t> seeds = {1, 2, 3};
  CorpusConfig corpus;
  CorpusConfig val_corpus;  // defaults to `corpus` when left untouched
  bool has_val_corpus = false;
  C3DConfig pr_net, ar_net;
  F2GConfig f2g_net;
  DetectorConfig det_net;
  PhaseConfig pr_opt, ar_opt, det_opt;
  F2GPhaseConfig f2g_opt;
  PipelineConfig pipeline;
  std::vector<double> thetas = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  int seq_len = 8;
};
struct AblationCell {
  std::string setup;
  uint64_t seed = 0;
  double mean_map = 0.0;
  std::map<double, double> map_by_theta;
};
struct AblationReport {
  std::vector<std::string> setups;  // row order
  std::vector<AblationCell> cells;
  std::map<std::string, double> mean_by_setup;
};
const std::vector<std::string>& ablation_setups();
AblationReport run_ablation(const AblationConfig& cfg, const LogSink& log);
std::string ablation_table_text(const AblationReport& rep,
                                const std::vector<double>& thetas);
std::string ablation_table_json(const AblationReport& rep);

}  // namespace streamloc

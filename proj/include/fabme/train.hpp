#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "fabme/data.hpp"
#include "fabme/model.hpp"

namespace fabme {

struct LossWeights {
  double box = 2.0;
  double obj = 1.0;
  double cls = 1.0;
};

struct TrainConfig {
  double lr = 0.005;
  double warmup_epochs = 3.0;
  double momentum = 0.937;
  double weight_decay = 1e-4;
  Index batch_size = 16;
  Index patience = 50;
  Index max_epochs = 150;
  std::uint64_t seed = 0;
  LossWeights loss;
  /// Decode settings used for validation mAP.
  double eval_conf_threshold = 0.001;
  double eval_nms_iou = 0.5;

  void validate() const;
};

/// Keys: lr, warmup_epochs, momentum, weight_decay, batch_size, patience,
/// max_epochs, seed, box_weight, obj_weight, cls_weight, eval_conf, eval_nms.
bool is_train_config_key(std::string_view key);
/// key=value lines, '#' comments; unknown keys throw.
TrainConfig parse_train_config(std::string_view text, TrainConfig base = {});
std::string format_train_config(const TrainConfig& cfg);

/// Linear warmup over `warmup_epochs`, then constant. `epoch_progress` counts
/// fractional epochs from 0.
double learning_rate(const TrainConfig& cfg, double epoch_progress);

struct SgdState {
  std::vector<Buffer> velocity;  ///< one per non-buffer parameter, lazily sized
};

/// v <- momentum v + g + wd p (wd only for ParamKind::Weight); p <- p - lr v.
/// Missing gradients count as zero. A non-finite gradient or update throws
/// NonFiniteError naming the parameter, with nothing committed.
void sgd_step(const ParamList& params, SgdState& state, double lr, double momentum, double weight_decay);
void sgd_step(const ParamList& params, SgdState& state, const TrainConfig& cfg, double epoch_progress);

/// Stops after `patience` consecutive updates without a strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(Index patience);
  /// Returns true when training should stop.
  bool update(double metric);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  Index best_index() const { return best_index_; }
  Index stale() const { return stale_; }

 private:
  Index patience_;
  double best_ = -1.0;
  Index best_index_ = -1;
  Index seen_ = 0;
  Index stale_ = 0;
  bool improved_ = false;
};

/// One positive cell.
struct Assignment {
  Index image = 0;
  Index level = 0;
  Index row = 0;
  Index col = 0;
  int class_id = 1;
  Box box;  ///< pixels in the network input frame
};

/// Center-cell assignment. The level is picked by the longer box side
/// (< 2*8 px: stride 8, < 2*16 px: stride 16, else stride 32); a cell already
/// taken keeps its first target.
std::vector<Assignment> assign_targets(const std::vector<std::vector<Annotation>>& targets, Index image_w,
                                       Index image_h, const std::vector<Index>& strides,
                                       const std::vector<std::pair<Index, Index>>& grid_sizes);

struct LossBreakdown {
  double box = 0;
  double obj = 0;
  double cls = 0;
  double total = 0;
  Index positives = 0;
};

/// Scalar loss with an analytic backward to the head maps:
///   box * sum(1 - GIoU) / P + obj * sum(BCE over all cells) / N + cls * sum(BCE on positives) / P
/// with P positives (at least 1) and N images.
Tensor detection_loss(const HeadOutputs& heads, const std::vector<std::vector<Annotation>>& targets,
                      Index image_w, Index image_h, const LossWeights& weights = {},
                      LossBreakdown* breakdown = nullptr);

/// Generalized IoU and its gradient with respect to (x1, y1, x2, y2) of `pred`.
double giou(const Box& pred, const Box& target, std::array<double, 4>* grad = nullptr);

/// Weave texture (sinusoids plus noise) with 1-3 non-overlapping defects per
/// image, one annotation per defect, classes drawn from 1..n_classes.
std::vector<Sample> gen_synth_dataset(Index n_images, int n_classes, std::uint64_t seed, Index size = 64);

struct EvalOptions {
  double conf_threshold = 0.001;
  double nms_iou = 0.5;
  Index batch_size = 16;
};

/// Normalized center box to pixel corners in a w x h image.
Box annotation_box(const Annotation& a, double w, double h);

std::vector<GroundTruth> ground_truth(const std::vector<Sample>& samples);
std::vector<Detection> predict(Model& model, const std::vector<Sample>& samples, const EvalOptions& options = {});
EvalReport evaluate(Model& model, const std::vector<Sample>& samples, const EvalOptions& options = {});

struct EpochRecord {
  Index epoch = 0;  ///< 1-based
  double lr = 0;
  double train_loss = 0;
  double val_map50 = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  Index best_epoch = 0;
  double best_map50 = 0;
  bool stopped_early = false;
  std::vector<NamedTensor> best_state;
};

struct TrainOutputs {
  /// When set: history.csv, best.ckpt and last.ckpt are written here.
  std::filesystem::path dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains in place and leaves the model at its best-mAP state. A non-finite
/// loss, activation or update saves the current (last finite) state to
/// dir/last_finite.ckpt and throws NonFiniteError.
TrainResult train(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const TrainOutputs& outputs = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

struct AblationRow {
  std::string label;    ///< "baseline", "+EMCA", "+C2F-VMamba(C2F3)", ...
  std::string variant;  ///< preset name
  Index params = 0;
  double best_map50 = 0;
  Index best_epoch = 0;
  Index epochs_run = 0;
  double seconds = 0;
};

/// Cumulative ablation: baseline, baseline + EMCA, then EMCA + C2F-VMamba at
/// C2F3, each trained from the same seed on the same data.
std::vector<AblationRow> run_ablation(const std::string& scale, Index num_classes, const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& val_set, const TrainConfig& cfg,
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// label,variant,params,mAP50,delta_mAP50,best_epoch,epochs,seconds
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace fabme

#include "fabme/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "key_value.hpp"

namespace fabme {

namespace fs = std::filesystem;

namespace {

double sigmoid_of(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// BCE with logits: log(1 + e^z) - t z, stable for large |z|.
double bce_logits(double z, double t) { return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))); }

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace

Box annotation_box(const Annotation& a, double w, double h) {
  return {(a.cx - a.w / 2) * w, (a.cy - a.h / 2) * h, (a.cx + a.w / 2) * w, (a.cy + a.h / 2) * h};
}

void TrainConfig::validate() const {
  if (!(lr > 0) || !(warmup_epochs > 0) || !(momentum > 0) || !(weight_decay > 0)) {
    throw Error("train config: lr, warmup_epochs, momentum and weight_decay must be positive");
  }
  if (momentum >= 1) throw Error("train config: momentum must be < 1");
  if (batch_size < 1 || max_epochs < 1) throw Error("train config: batch_size and max_epochs must be positive");
  if (patience < 1) throw Error("train config: patience must be >= 1");
  if (!(loss.box >= 0) || !(loss.obj >= 0) || !(loss.cls >= 0)) throw Error("train config: loss weights must be >= 0");
}

double learning_rate(const TrainConfig& cfg, double epoch_progress) {
  return cfg.lr * std::clamp(epoch_progress / cfg.warmup_epochs, 0.0, 1.0);
}

void sgd_step(const ParamList& params, SgdState& state, double lr, double momentum, double weight_decay) {
  // Compute everything first so a non-finite result leaves params and state untouched.
  std::vector<std::pair<Buffer, Buffer>> updates;
  std::size_t slot = 0;
  for (const auto& p : params) {
    if (p.kind == ParamKind::Buffer) continue;
    if (p.tensor.has_grad() && !p.tensor.grad().allFinite()) throw NonFiniteError("non-finite gradient in " + p.name);
    Buffer v = slot < state.velocity.size() ? state.velocity[slot] : Buffer::Zero(p.tensor.numel());
    ++slot;
    if (v.size() != p.tensor.numel()) throw Error("sgd state does not match parameter " + p.name);
    v *= momentum;
    if (p.tensor.has_grad()) v += p.tensor.grad();
    if (p.kind == ParamKind::Weight) v += weight_decay * p.tensor.values();
    Buffer value = p.tensor.values() - lr * v;
    if (!value.allFinite()) throw NonFiniteError("non-finite update for " + p.name);
    updates.emplace_back(std::move(v), std::move(value));
  }
  state.velocity.resize(updates.size());
  slot = 0;
  for (const auto& p : params) {
    if (p.kind == ParamKind::Buffer) continue;
    Tensor t = p.tensor;
    state.velocity[slot] = std::move(updates[slot].first);
    t.mutable_values() = std::move(updates[slot].second);
    ++slot;
  }
}

void sgd_step(const ParamList& params, SgdState& state, const TrainConfig& cfg, double epoch_progress) {
  sgd_step(params, state, learning_rate(cfg, epoch_progress), cfg.momentum, cfg.weight_decay);
}

EarlyStopper::EarlyStopper(Index patience) : patience_(patience) {
  if (patience < 1) throw Error("early stopping patience must be >= 1");
}

bool EarlyStopper::update(double metric) {
  improved_ = best_index_ < 0 || metric > best_;
  if (improved_) {
    best_ = metric;
    best_index_ = seen_;
    stale_ = 0;
  } else {
    ++stale_;
  }
  ++seen_;
  return stale_ >= patience_;
}

std::vector<Assignment> assign_targets(const std::vector<std::vector<Annotation>>& targets, Index image_w,
                                       Index image_h, const std::vector<Index>& strides,
                                       const std::vector<std::pair<Index, Index>>& grid_sizes) {
  std::vector<Assignment> out;
  const double W = static_cast<double>(image_w);
  const double H = static_cast<double>(image_h);
  for (std::size_t n = 0; n < targets.size(); ++n) {
    for (const auto& a : targets[n]) {
      const Box box = annotation_box(a, W, H);
      const double side = std::max(box.width(), box.height());
      std::size_t level = 0;
      while (level + 1 < strides.size() && side >= 2.0 * static_cast<double>(strides[level])) ++level;
      const double s = static_cast<double>(strides[level]);
      const auto [rows, cols] = grid_sizes[level];
      const Index row = std::clamp<Index>(static_cast<Index>(a.cy * H / s), 0, rows - 1);
      const Index col = std::clamp<Index>(static_cast<Index>(a.cx * W / s), 0, cols - 1);
      const bool taken = std::any_of(out.begin(), out.end(), [&](const Assignment& o) {
        return o.image == static_cast<Index>(n) && o.level == static_cast<Index>(level) && o.row == row &&
               o.col == col;
      });
      if (!taken) out.push_back({static_cast<Index>(n), static_cast<Index>(level), row, col, a.class_id, box});
    }
  }
  return out;
}

double giou(const Box& p, const Box& g, std::array<double, 4>* grad) {
  const double iw_raw = std::min(p.x2, g.x2) - std::max(p.x1, g.x1);
  const double ih_raw = std::min(p.y2, g.y2) - std::max(p.y1, g.y1);
  const bool overlap = iw_raw > 0 && ih_raw > 0;
  const double iw = overlap ? iw_raw : 0.0;
  const double ih = overlap ? ih_raw : 0.0;
  const double inter = iw * ih;
  const double pw = p.x2 - p.x1, ph = p.y2 - p.y1;
  const double uni = pw * ph + g.area() - inter;
  const double cw = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
  const double ch = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
  const double c = cw * ch;
  const double value = inter / uni - 1.0 + uni / c;
  if (grad) {
    // d(I/U + U/C) with U = A + G - I.
    std::array<double, 4> d_inter{}, d_area{}, d_enc{};
    if (overlap) {
      d_inter[0] = p.x1 > g.x1 ? -ih : 0.0;
      d_inter[2] = p.x2 < g.x2 ? ih : 0.0;
      d_inter[1] = p.y1 > g.y1 ? -iw : 0.0;
      d_inter[3] = p.y2 < g.y2 ? iw : 0.0;
    }
    d_area = {-ph, -pw, ph, pw};
    d_enc[0] = p.x1 < g.x1 ? -ch : 0.0;
    d_enc[2] = p.x2 > g.x2 ? ch : 0.0;
    d_enc[1] = p.y1 < g.y1 ? -cw : 0.0;
    d_enc[3] = p.y2 > g.y2 ? cw : 0.0;
    for (int k = 0; k < 4; ++k) {
      const double d_uni = d_area[k] - d_inter[k];
      (*grad)[k] = d_inter[k] / uni - inter * d_uni / (uni * uni) + d_uni / c - uni * d_enc[k] / (c * c);
    }
  }
  return value;
}

Tensor detection_loss(const HeadOutputs& heads, const std::vector<std::vector<Annotation>>& targets, Index image_w,
                      Index image_h, const LossWeights& weights, LossBreakdown* breakdown) {
  if (heads.maps.empty() || heads.maps.size() != heads.strides.size()) throw Error("loss: malformed head outputs");
  const Index batch = heads.maps.front().shape().n;
  if (static_cast<Index>(targets.size()) != batch) throw Error("loss: one target list per image required");
  const Index channels = heads.maps.front().shape().c;
  const Index classes = channels - 5;
  std::vector<std::pair<Index, Index>> grids;
  for (const auto& m : heads.maps) {
    if (m.shape().n != batch || m.shape().c != channels) throw Error("loss: head maps disagree in batch or channels");
    grids.emplace_back(m.shape().h, m.shape().w);
  }
  for (const auto& list : targets)
    for (const auto& a : list)
      if (a.class_id < 1 || a.class_id > classes) throw Error("loss: target class outside the head's classes");

  const auto assigned = assign_targets(targets, image_w, image_h, heads.strides, grids);
  const double inv_n = 1.0 / static_cast<double>(batch);
  const double inv_p = 1.0 / static_cast<double>(std::max<std::size_t>(1, assigned.size()));

  std::vector<Buffer> grads;
  for (const auto& m : heads.maps) grads.push_back(Buffer::Zero(m.numel()));

  LossBreakdown parts;
  parts.positives = static_cast<Index>(assigned.size());

  // Objectness over every cell; positives flipped below.
  for (std::size_t l = 0; l < heads.maps.size(); ++l) {
    const Shape& s = heads.maps[l].shape();
    const Index plane = s.plane();
    const auto& v = heads.maps[l].values();
    for (Index n = 0; n < batch; ++n) {
      const Index base = (n * channels + 4) * plane;
      for (Index i = 0; i < plane; ++i) {
        const double z = v[base + i];
        parts.obj += bce_logits(z, 0.0);
        grads[l][base + i] = weights.obj * inv_n * sigmoid_of(z);
      }
    }
  }

  for (const auto& a : assigned) {
    const std::size_t l = static_cast<std::size_t>(a.level);
    const Shape& s = heads.maps[l].shape();
    const Index plane = s.plane();
    const Index cell = a.row * s.w + a.col;
    const auto& v = heads.maps[l].values();
    Buffer& g = grads[l];
    auto at = [&](Index ch) { return (a.image * channels + ch) * plane + cell; };

    const double z_obj = v[at(4)];
    parts.obj += bce_logits(z_obj, 1.0) - bce_logits(z_obj, 0.0);
    g[at(4)] = weights.obj * inv_n * (sigmoid_of(z_obj) - 1.0);

    for (Index k = 0; k < classes; ++k) {
      const double z = v[at(5 + k)];
      const double t = (k + 1 == a.class_id) ? 1.0 : 0.0;
      parts.cls += bce_logits(z, t);
      g[at(5 + k)] += weights.cls * inv_p * (sigmoid_of(z) - t);
    }

    const double tx = v[at(0)], ty = v[at(1)], tw = v[at(2)], th = v[at(3)];
    const Index stride = heads.strides[l];
    const Box pred = decode_box(tx, ty, tw, th, a.row, a.col, stride);
    std::array<double, 4> dg{};
    parts.box += 1.0 - giou(pred, a.box, &dg);
    // dLoss/d(x1,y1,x2,y2) = -dGIoU; map through the decode.
    const double sd = static_cast<double>(stride);
    const double sx = sigmoid_of(tx), sy = sigmoid_of(ty), sw = sigmoid_of(tw), sh = sigmoid_of(th);
    const double dcx = 2.0 * sd * sx * (1 - sx);
    const double dcy = 2.0 * sd * sy * (1 - sy);
    const double dw = 8.0 * sd * sw * sw * (1 - sw);
    const double dh = 8.0 * sd * sh * sh * (1 - sh);
    const double scale = -weights.box * inv_p;
    g[at(0)] += scale * (dg[0] + dg[2]) * dcx;
    g[at(1)] += scale * (dg[1] + dg[3]) * dcy;
    g[at(2)] += scale * 0.5 * (dg[2] - dg[0]) * dw;
    g[at(3)] += scale * 0.5 * (dg[3] - dg[1]) * dh;
  }

  parts.box *= weights.box * inv_p;
  parts.obj *= weights.obj * inv_n;
  parts.cls *= weights.cls * inv_p;
  parts.total = parts.box + parts.obj + parts.cls;
  if (breakdown) *breakdown = parts;

  Buffer value(1);
  value[0] = parts.total;
  std::vector<Tensor> parents(heads.maps.begin(), heads.maps.end());
  return make_result({1, 1, 1, 1}, std::move(value), "detection_loss", parents,
                     [grads = std::move(grads)](detail::Node& self) {
                       const double up = self.grad[0];
                       for (std::size_t l = 0; l < grads.size(); ++l) {
                         auto& p = *self.parents[l];
                         if (p.requires_grad) p.grad_buffer() += up * grads[l];
                       }
                     });
}

std::vector<Sample> gen_synth_dataset(Index n_images, int n_classes, std::uint64_t seed, Index size) {
  if (n_classes < 1 || n_classes > kNumDefectClasses) throw Error("synth: n_classes must be in 1..20");
  if (n_images < 0) throw Error("synth: n_images must be >= 0");
  if (size < 32) throw Error("synth: image size must be >= 32");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n_images));
  for (Index i = 0; i < n_images; ++i) {
    std::seed_seq seq{static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(i)};
    Rng rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 6.0);

    std::vector<double> px(static_cast<std::size_t>(size * size));
    const double period = 4.0 + 3.0 * u(rng);
    const double phase = 2 * std::numbers::pi * u(rng);
    const double base = 110.0 + 30.0 * u(rng);
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double weave = std::sin(2 * std::numbers::pi * x / period + phase) * std::sin(2 * std::numbers::pi * y / period);
        px[static_cast<std::size_t>(y * size + x)] = base + 18.0 * weave + noise(rng);
      }

    Sample s;
    s.id = "synth_" + std::to_string(i);
    std::vector<std::array<Index, 4>> placed;  // x0, y0, w, h
    const int count = 1 + static_cast<int>(u(rng) * 3);
    for (int d = 0; d < count; ++d) {
      const int cls = 1 + static_cast<int>(u(rng) * n_classes);
      const int shape = (cls - 1) % 10;
      const double sign = ((cls - 1) / 10 + (cls - 1)) % 2 == 0 ? 1.0 : -1.0;
      auto rnd = [&](Index lo, Index hi) { return lo + static_cast<Index>(u(rng) * static_cast<double>(hi - lo + 1)); };
      Index w = 0, h = 0;
      switch (shape) {
        case 1: w = rnd(2, 3), h = rnd(14, 28); break;   // vertical streak
        case 2: w = rnd(14, 28), h = rnd(2, 3); break;   // horizontal streak
        case 6: w = h = rnd(10, 18); break;              // diagonal
        default: w = h = rnd(7, 13); break;
      }
      bool ok = false;
      Index x0 = 0, y0 = 0;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        x0 = rnd(1, size - w - 1);
        y0 = rnd(1, size - h - 1);
        ok = std::none_of(placed.begin(), placed.end(), [&](const auto& p) {
          return x0 < p[0] + p[2] + 2 && p[0] < x0 + w + 2 && y0 < p[1] + p[3] + 2 && p[1] < y0 + h + 2;
        });
      }
      if (!ok) continue;
      placed.push_back({x0, y0, w, h});
      const double amp = sign * (60.0 + 20.0 * u(rng));
      const double cx = x0 + (w - 1) / 2.0, cy = y0 + (h - 1) / 2.0;
      const double rx = w / 2.0, ry = h / 2.0;
      for (Index y = y0; y < y0 + h; ++y) {
        for (Index x = x0; x < x0 + w; ++x) {
          const double dx = (x - cx) / rx, dy = (y - cy) / ry;
          const double r = std::sqrt(dx * dx + dy * dy);
          double k = 0.0;
          switch (shape) {
            case 0: k = r < 1.0 ? 0.4 + 0.6 * (1.0 - r * r) : 0.0; break;                      // blob
            case 1:
            case 2:
            case 3: k = 1.0; break;                                                              // streaks, square
            case 4: k = std::abs(r - 0.7) < 0.22 ? 1.0 : 0.0; break;                             // ring
            case 5: k = (std::abs(dx) < 0.25 || std::abs(dy) < 0.25) ? 1.0 : 0.0; break;         // cross
            case 6: k = std::abs(dx - dy) < 0.3 ? 1.0 : 0.0; break;                              // diagonal
            case 7: k = (std::abs(dx) > 0.6 || std::abs(dy) > 0.6) ? 1.0 : 0.0; break;           // hollow square
            case 8: k = ((x - x0) / 2 + (y - y0) / 2) % 2 == 0 ? 1.0 : 0.0; break;               // checker
            default: k = ((x - x0) % 3 == 1 && (y - y0) % 3 == 1) ? 1.0 : 0.0; break;            // dots
          }
          px[static_cast<std::size_t>(y * size + x)] += amp * k;
        }
      }
      const double S = static_cast<double>(size);
      s.annotations.push_back({cls, (x0 + w / 2.0) / S, (y0 + h / 2.0) / S, w / S, h / S});
    }

    s.image = Image(size, size, 1);
    for (std::size_t k = 0; k < px.size(); ++k)
      s.image.pixels[k] = static_cast<std::uint8_t>(std::clamp(std::lround(px[k]), 0L, 255L));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<GroundTruth> ground_truth(const std::vector<Sample>& samples) {
  std::vector<GroundTruth> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (const auto& a : s.annotations) {
      out.push_back({static_cast<Index>(i), a.class_id,
                     annotation_box(a, static_cast<double>(s.image.width), static_cast<double>(s.image.height))});
    }
  }
  return out;
}

std::vector<Detection> predict(Model& model, const std::vector<Sample>& samples, const EvalOptions& options) {
  std::vector<Detection> out;
  const DecodeOptions decode_opts{options.conf_threshold, options.nms_iou, 300};
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(options.batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(options.batch_size));
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].image);
    const auto heads = model.forward(images_to_tensor(batch, model.spec().in_channels), Mode::Eval);
    const auto per_image = decode(heads, decode_opts);
    for (std::size_t k = 0; k < per_image.size(); ++k) {
      for (auto d : per_image[k]) {
        d.image = static_cast<Index>(start + k);
        out.push_back(d);
      }
    }
  }
  return out;
}

EvalReport evaluate(Model& model, const std::vector<Sample>& samples, const EvalOptions& options) {
  const auto dets = predict(model, samples, options);
  return map50(dets, ground_truth(samples), static_cast<int>(model.spec().num_classes));
}

void write_history_csv(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "epoch,lr,train_loss,val_map50\n";
  for (const auto& r : history) out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_map50 << '\n';
}

TrainResult train(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const TrainOutputs& outputs) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training set");
  if (val_set.empty()) throw Error("train: empty validation set");
  if (!outputs.dir.empty()) fs::create_directories(outputs.dir);

  const ParamList params = model.parameters();
  SgdState sgd;
  EarlyStopper stopper(cfg.patience);
  TrainResult result;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  const Index iters = (static_cast<Index>(train_set.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const EvalOptions eval_opts{cfg.eval_conf_threshold, cfg.eval_nms_iou, cfg.batch_size};

  for (Index epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    double loss_sum = 0.0;
    double lr = 0.0;
    Index it = 0;
    EpochRecord rec;
    try {
      for (; it < iters; ++it) {
        const std::size_t start = static_cast<std::size_t>(it * cfg.batch_size);
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<const Image*> images;
        std::vector<std::vector<Annotation>> targets;
        for (std::size_t k = start; k < end; ++k) {
          images.push_back(&train_set[order[k]].image);
          targets.push_back(train_set[order[k]].annotations);
        }
        const Tensor x = images_to_tensor(images, model.spec().in_channels);
        const double progress = static_cast<double>(epoch) + static_cast<double>(it + 1) / static_cast<double>(iters);
        lr = learning_rate(cfg, progress);
        const Tensor loss = detection_loss(model.forward(x, Mode::Train), targets, x.shape().w, x.shape().h, cfg.loss);
        if (!std::isfinite(loss.item())) throw NonFiniteError("non-finite loss");
        for (const auto& p : params) {
          Tensor t = p.tensor;
          t.zero_grad();
        }
        loss.backward();
        sgd_step(params, sgd, lr, cfg.momentum, cfg.weight_decay);
        loss_sum += loss.item();
      }
      rec = {epoch + 1, lr, loss_sum / static_cast<double>(iters), evaluate(model, val_set, eval_opts).map50};
    } catch (const NonFiniteError& e) {
      // Updates are only committed when finite, so the model still holds the last finite state.
      std::string msg = "training diverged at epoch " + std::to_string(epoch + 1) +
                        (it < iters ? " iteration " + std::to_string(it + 1) : std::string(" validation")) + ": " +
                        e.what();
      if (!outputs.dir.empty()) {
        model.save(outputs.dir / "last_finite.ckpt");
        msg += "; last finite state saved to " + (outputs.dir / "last_finite.ckpt").string();
      }
      throw NonFiniteError(msg);
    }

    result.history.push_back(rec);
    const bool stop = stopper.update(rec.val_map50);
    if (stopper.improved()) {
      result.best_epoch = rec.epoch;
      result.best_map50 = rec.val_map50;
      result.best_state = model.state();
      if (!outputs.dir.empty()) model.save(outputs.dir / "best.ckpt");
    }
    if (!outputs.dir.empty()) {
      model.save(outputs.dir / "last.ckpt");
      write_history_csv(outputs.dir / "history.csv", result.history);
    }
    if (outputs.on_epoch) outputs.on_epoch(rec);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  model.load_state(result.best_state);
  return result;
}

}  // namespace fabme

namespace fabme {

namespace {

constexpr std::array<std::string_view, 13> kTrainKeys{"lr",         "warmup_epochs", "momentum",  "weight_decay",
                                                     "batch_size", "patience",      "max_epochs", "seed",
                                                     "box_weight", "obj_weight",    "cls_weight", "eval_conf",
                                                     "eval_nms"};

}  // namespace

bool is_train_config_key(std::string_view key) {
  return std::find(kTrainKeys.begin(), kTrainKeys.end(), key) != kTrainKeys.end();
}

TrainConfig parse_train_config(std::string_view text, TrainConfig base) {
  TrainConfig c = base;
  const std::string ctx = "train config";
  kv::for_each(text, ctx, [&](const std::string& key, const std::string& v, int) {
    auto num = [&](auto& field) { field = kv::parse_number<std::decay_t<decltype(field)>>(v, key, ctx); };
    if (key == "lr") num(c.lr);
    else if (key == "warmup_epochs") num(c.warmup_epochs);
    else if (key == "momentum") num(c.momentum);
    else if (key == "weight_decay") num(c.weight_decay);
    else if (key == "batch_size") num(c.batch_size);
    else if (key == "patience") num(c.patience);
    else if (key == "max_epochs") num(c.max_epochs);
    else if (key == "seed") num(c.seed);
    else if (key == "box_weight") num(c.loss.box);
    else if (key == "obj_weight") num(c.loss.obj);
    else if (key == "cls_weight") num(c.loss.cls);
    else if (key == "eval_conf") num(c.eval_conf_threshold);
    else if (key == "eval_nms") num(c.eval_nms_iou);
    else throw Error(ctx + ": unknown key '" + key + "'");
  });
  c.validate();
  return c;
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "lr=" << c.lr << "\nwarmup_epochs=" << c.warmup_epochs << "\nmomentum=" << c.momentum
      << "\nweight_decay=" << c.weight_decay << "\nbatch_size=" << c.batch_size << "\npatience=" << c.patience
      << "\nmax_epochs=" << c.max_epochs << "\nseed=" << c.seed << "\nbox_weight=" << c.loss.box
      << "\nobj_weight=" << c.loss.obj << "\ncls_weight=" << c.loss.cls << "\neval_conf=" << c.eval_conf_threshold
      << "\neval_nms=" << c.eval_nms_iou << '\n';
  return out.str();
}

std::vector<AblationRow> run_ablation(const std::string& scale, Index num_classes, const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& val_set, const TrainConfig& cfg,
                                      const std::function<void(const AblationRow&)>& on_row) {
  const std::array<std::pair<const char*, const char*>, 3> steps{
      {{"baseline", "baseline"}, {"+EMCA", "emca-only"}, {"+C2F-VMamba(C2F3)", "fabme"}}};
  std::vector<AblationRow> rows;
  for (const auto& [label, variant] : steps) {
    GraphSpec spec = GraphSpec::preset(variant, scale);
    spec.num_classes = num_classes;
    spec.seed = cfg.seed;
    Model model(spec);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(model, train_set, val_set, cfg);
    AblationRow row{label,
                    variant,
                    model.count_params(),
                    r.best_map50,
                    r.best_epoch,
                    static_cast<Index>(r.history.size()),
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "label,variant,params,mAP50,delta_mAP50,best_epoch,epochs,seconds\n";
  const auto precision = out.precision(6);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double delta = i == 0 ? 0.0 : r.best_map50 - rows[i - 1].best_map50;
    out << r.label << ',' << r.variant << ',' << r.params << ',' << r.best_map50 << ',' << delta << ','
        << r.best_epoch << ',' << r.epochs_run << ',' << r.seconds << '\n';
  }
  out.precision(precision);
}

}  // namespace fabme

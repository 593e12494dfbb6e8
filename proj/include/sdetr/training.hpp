// Pretraining and finetuning loops with resumable checkpoints and a
// per-step metrics CSV.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sdetr/backbone.hpp"
#include "sdetr/checkpoint.hpp"
#include "sdetr/config.hpp"
#include "sdetr/hungarian.hpp"
#include "sdetr/losses.hpp"
#include "sdetr/optim.hpp"
#include "sdetr/synthetic_data.hpp"
#include "sdetr/transformer.hpp"
#include "sdetr/view_pipeline.hpp"

namespace sdetr {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled by exactly one worker, so results written by index are ordered.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Pretraining

/// Frozen-backbone quantities of one view pair. Index i of every per-region
/// field refers to the same proposal.
template <class T>
struct PairFeatures {
  BasicTensor<T> features1, features2;               // H₁×W₁×C_b
  BasicTensor<T> z1, z2;                             // n×C_b object-level
  std::optional<BasicTensor<T>> target1, target2;    // n×C' region targets (crop- or object-level)
  std::vector<BoxCxCyWH> boxes1, boxes2;             // proposals, normalized per view

  template <class To>
  PairFeatures<To> cast() const {
    PairFeatures<To> out;
    out.features1 = sdetr::cast<To>(features1);
    out.features2 = sdetr::cast<To>(features2);
    out.z1 = sdetr::cast<To>(z1);
    out.z2 = sdetr::cast<To>(z2);
    if (target1) out.target1 = sdetr::cast<To>(*target1);
    if (target2) out.target2 = sdetr::cast<To>(*target2);
    out.boxes1 = boxes1;
    out.boxes2 = boxes2;
    return out;
  }
};

inline std::vector<BoxCxCyWH> normalize_boxes(const std::vector<BoxXYXY>& boxes, float width, float height) {
  std::vector<BoxCxCyWH> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(to_cxcywh(b, width, height).box);
  return out;
}

/// Backbone features for a pair. Region targets are skipped when
/// `with_targets` is false (λ₀ = 0 needs none).
inline PairFeatures<float> prepare_pair(const FrozenBackbone& backbone, const ViewPair& pair, RegionTarget target,
                                        bool with_targets = true) {
  PairFeatures<float> f;
  f.features1 = backbone.extract(pair.view1);
  f.features2 = backbone.extract(pair.view2);
  f.z1 = backbone.object_level_features(f.features1, pair.proposals1);
  f.z2 = backbone.object_level_features(f.features2, pair.proposals2);
  if (with_targets) {
    if (target == RegionTarget::kCrop) {
      f.target1 = backbone.crop_level_features(pair.view1, pair.proposals1);
      f.target2 = backbone.crop_level_features(pair.view2, pair.proposals2);
    } else {
      f.target1 = f.z1;
      f.target2 = f.z2;
    }
  }
  f.boxes1 = normalize_boxes(pair.proposals1, static_cast<float>(pair.view1.width), static_cast<float>(pair.view1.height));
  f.boxes2 = normalize_boxes(pair.proposals2, static_cast<float>(pair.view2.width), static_cast<float>(pair.view2.height));
  return f;
}

template <class T>
struct PretrainLoss {
  BasicTensor<T> total, loc, global, region;
  bool has_region = false;

  LossBreakdown breakdown(const LossWeights& w) const {
    LossBreakdown b;
    b.loc = loc.item();
    b.global_disc = global.item();
    b.region_disc = region.item();
    b.total = total.item();
    b.weights = w;
    return b;
  }
};

/// One direction: decode view `ctx_self` conditioned on the other view's
/// regions and supervise with this view's proposal boxes. The region
/// target comes from the other view.
template <class T>
void pretrain_direction(const DetrModel<T>& model, const Context<T>& ctx_self, const BasicTensor<T>& z_other,
                        const std::vector<BoxCxCyWH>& boxes_self, const std::optional<BasicTensor<T>>& target_other,
                        bool aux, const MatchCoefficients& coeffs, std::vector<BasicTensor<T>>& loc_terms,
                        std::vector<BasicTensor<T>>& region_terms) {
  const auto outputs = model.decode_layers(ctx_self, z_other);
  const std::size_t first = aux ? 0 : outputs.size() - 1;
  for (std::size_t l = first; l < outputs.size(); ++l) {
    const auto pred = model.predict(outputs[l]);
    const auto sigma = hungarian(matching_cost(pred.boxes, pred.match, boxes_self, coeffs));
    loc_terms.push_back(loc_loss_direction(pred.boxes, pred.match, boxes_self, sigma, coeffs));
    if (l + 1 == outputs.size() && target_other) {
      region_terms.push_back(region_disc_direction(pred.semantic, *target_other, sigma));
    }
  }
}

template <class T>
BasicTensor<T> stack_rows(const std::vector<BasicTensor<T>>& rows) {
  std::vector<BasicTensor<T>> parts;
  parts.reserve(rows.size());
  for (const auto& r : rows) parts.push_back(reshape(r, {1, r.numel()}));
  return concat(parts, 0);
}

template <class T>
BasicTensor<T> mean_of(const std::vector<BasicTensor<T>>& terms, std::size_t count) {
  if (terms.empty()) return BasicTensor<T>::scalar(T(0));
  BasicTensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, T(1) / static_cast<T>(count));
}

/// Full pretraining objective over a batch. loc and region are summed over the
/// two directions and averaged over pairs; the global term averages the
/// cosine over the batch.
template <class T>
PretrainLoss<T> pretrain_loss(const DetrModel<T>& model, const std::vector<PairFeatures<T>>& batch,
                              const LossWeights& weights, bool aux = false, const MatchCoefficients& coeffs = {}) {
  if (batch.empty()) throw std::invalid_argument("pretrain_loss: empty batch");
  std::vector<BasicTensor<T>> loc_terms, region_terms, pooled1, pooled2;
  bool has_region = true;
  for (const auto& f : batch) {
    if (f.boxes1.size() != model.config().queries || f.boxes2.size() != model.config().queries) {
      throw std::invalid_argument("pretrain_loss: proposal count must equal the query count");
    }
    const auto c1 = model.encode(f.features1);
    const auto c2 = model.encode(f.features2);
    has_region = has_region && f.target1 && f.target2;
    pretrain_direction(model, c2, f.z1, f.boxes2, f.target1, aux, coeffs, loc_terms, region_terms);
    pretrain_direction(model, c1, f.z2, f.boxes1, f.target2, aux, coeffs, loc_terms, region_terms);
    pooled1.push_back(DetrModel<T>::pool_context(c1));
    pooled2.push_back(DetrModel<T>::pool_context(c2));
  }
  PretrainLoss<T> out;
  out.loc = mean_of(loc_terms, batch.size());
  out.has_region = has_region;
  out.region = has_region ? mean_of(region_terms, batch.size()) : BasicTensor<T>::scalar(T(0));
  const auto p1 = stack_rows(pooled1), p2 = stack_rows(pooled2);
  out.global = global_disc_loss(model.project(p1), p1, model.project(p2), p2);
  out.total = weighted_total(out.loc, out.global, out.region, weights);
  return out;
}

struct StepRecord {
  std::uint64_t step = 0;   // 1-based index of the optimizer step
  std::uint64_t epoch = 0;  // 0-based epoch the step belongs to
  double lr = 0;
  LossBreakdown loss;
};

/// Position inside a schedule; enough to resume exactly.
struct Progress {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t step_in_epoch = 0;
  std::uint64_t epoch_seed = 0;
  bool epoch_open = false;

  std::string to_text() const {
    std::ostringstream os;
    os << step << ' ' << epoch << ' ' << step_in_epoch << ' ' << epoch_seed << ' ' << (epoch_open ? 1 : 0);
    return os.str();
  }
  static Progress from_text(const std::string& s) {
    Progress p;
    int open = 0;
    std::istringstream is(s);
    if (!(is >> p.step >> p.epoch >> p.step_in_epoch >> p.epoch_seed >> open)) {
      throw CheckpointError("checkpoint: malformed progress record");
    }
    p.epoch_open = open != 0;
    return p;
  }
};

inline const char* kMetricsHeader = "step,epoch,lr,loss_total,loss_loc,loss_g,loss_r";

inline std::string format_metrics_row(const StepRecord& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.loc
     << ',' << r.loss.global_disc << ',' << r.loss.region_disc;
  return os.str();
}

/// Metrics CSV writer. On open, rows for steps beyond `keep_through` are
/// dropped so a resumed run continues the file without duplicates.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, std::uint64_t keep_through) : path_(path) {
    std::vector<std::string> rows;
    if (keep_through > 0 && std::filesystem::exists(path)) {
      std::istringstream in(read_file(path));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) <= keep_through) rows.push_back(line);
      }
    }
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
    out_ << kMetricsHeader << '\n';
    for (const auto& r : rows) out_ << r << '\n';
    out_.flush();
  }

  void append(const StepRecord& r) {
    if (!out_.is_open()) return;
    out_ << format_metrics_row(r) << '\n';
    out_.flush();
    if (!out_) throw std::runtime_error("write failed for metrics file " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline void store_optimizer(Checkpoint& ck, const AdamW& opt, const ParamStore<float>& ps) {
  for (const auto& n : opt.trainable()) {
    ck.add_tensor("optim.m." + n, ps.get(n).shape(), opt.first_moment(n));
    ck.add_tensor("optim.v." + n, ps.get(n).shape(), opt.second_moment(n));
  }
  ck.add_text("meta.optim_step", std::to_string(opt.step_count()));
}

inline void restore_optimizer(const Checkpoint& ck, AdamW& opt) {
  for (const auto& n : opt.trainable()) {
    const auto& m = ck.tensor("optim.m." + n);
    const auto& v = ck.tensor("optim.v." + n);
    if (m.values.size() != opt.first_moment(n).size() || v.values.size() != opt.second_moment(n).size()) {
      throw CheckpointError("checkpoint: optimizer state shape mismatch for " + n);
    }
    opt.first_moment(n) = m.values;
    opt.second_moment(n) = v.values;
  }
  opt.set_step_count(std::stoull(ck.text("meta.optim_step")));
}

/// Config text without keys that may legitimately change across a resume.
inline std::string resumable_config_text(const RunConfig& cfg) {
  std::istringstream in(cfg.to_text());
  std::string out, line;
  while (std::getline(in, line)) {
    if (line.rfind("train.max_steps", 0) == 0 || line.rfind("runtime.threads", 0) == 0) continue;
    out += line + "\n";
  }
  return out;
}

inline RunConfig config_from_checkpoint(const Checkpoint& ck) {
  RunConfig cfg;
  cfg.apply_text(ck.text("meta.config"), "checkpoint meta.config");
  return cfg;
}

class Pretrainer {
 public:
  Pretrainer(RunConfig cfg, std::vector<Image> images)
      : cfg_(std::move(cfg)),
        images_(std::move(images)),
        backbone_(cfg_.backbone_seed),
        model_(model_config(cfg_, backbone_), cfg_.seed),
        opt_(model_.params(), model_.params().names(), optimizer_config(cfg_)),
        rng_(mix_seed(cfg_.seed ^ 0x7EA1ULL)) {
    cfg_.validate();
    if (images_.size() < cfg_.batch) {
      throw std::invalid_argument("pretrain: " + std::to_string(images_.size()) + " images cannot fill a batch of " +
                                  std::to_string(cfg_.batch));
    }
    view_cfg_ = cfg_.views;
    if (!cfg_.augment) view_cfg_.augment = AugmentConfig::none();
  }

  static TransformerConfig model_config(const RunConfig& cfg, const FrozenBackbone& backbone) {
    TransformerConfig m = cfg.model;
    m.backbone_channels = static_cast<std::size_t>(backbone.out_channels());
    return m;
  }

  static AdamWConfig optimizer_config(const RunConfig& cfg) { return cfg.optim; }

  const RunConfig& config() const { return cfg_; }
  const Progress& progress() const { return progress_; }
  DetrModel<float>& model() { return model_; }
  const FrozenBackbone& backbone() const { return backbone_; }
  AdamW& optimizer() { return opt_; }
  std::size_t steps_per_epoch() const { return images_.size() / cfg_.batch; }

  bool finished() const {
    return progress_.epoch >= cfg_.schedule.epochs || (cfg_.max_steps > 0 && progress_.step >= cfg_.max_steps);
  }

  /// One optimizer step on the next batch; nullopt once the schedule is done.
  std::optional<StepRecord> step() {
    if (finished()) return std::nullopt;
    if (!progress_.epoch_open) {
      progress_.epoch_seed = rng_.next_u64();
      progress_.step_in_epoch = 0;
      progress_.epoch_open = true;
    }
    const auto order = shuffled_indices(images_.size(), progress_.epoch_seed);
    const std::size_t b = cfg_.batch, base = progress_.step_in_epoch * b;
    std::vector<PairFeatures<float>> batch(b);
    const bool with_targets = cfg_.loss.region > 0;
    parallel_for(b, cfg_.threads, [&](std::size_t i) {
      const ViewPair pair = build_view_pair(images_[order[base + i]], view_cfg_, item_seed(progress_.epoch_seed, base + i));
      batch[i] = prepare_pair(backbone_, pair, cfg_.region_target, with_targets);
    });
    StepRecord rec;
    rec.epoch = progress_.epoch;
    rec.lr = cfg_.schedule.lr_at(cfg_.optim.lr, progress_.epoch);
    opt_.set_lr(rec.lr);
    model_.params().zero_grad();
    const auto loss = pretrain_loss(model_, batch, cfg_.loss, cfg_.aux_loss);
    rec.loss = loss.breakdown(cfg_.loss);
    backward(loss.total);
    opt_.clip_grad_norm(cfg_.clip);
    opt_.step();
    ++progress_.step;
    rec.step = progress_.step;
    if (++progress_.step_in_epoch == steps_per_epoch()) {
      ++progress_.epoch;
      progress_.epoch_open = false;
    }
    return rec;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.add_text("meta.kind", "pretrain");
    ck.add_text("meta.config", cfg_.to_text());
    ck.add_text("meta.rng", rng_.state());
    ck.add_text("meta.progress", progress_.to_text());
    ck.add_params(model_.params());
    store_optimizer(ck, opt_, model_.params());
    return ck;
  }

  void resume(const Checkpoint& ck) {
    if (ck.text("meta.kind") != "pretrain") throw CheckpointError("resume: not a pretraining checkpoint");
    if (resumable_config_text(config_from_checkpoint(ck)) != resumable_config_text(cfg_)) {
      throw CheckpointError("resume: checkpoint config differs from the current run config");
    }
    ck.load_params(model_.params());
    restore_optimizer(ck, opt_);
    rng_.set_state(ck.text("meta.rng"));
    progress_ = Progress::from_text(ck.text("meta.progress"));
  }

  /// Runs to completion, writing metrics.csv, one checkpoint per finished
  /// epoch (epoch_NNN.sdtr) and final.sdtr into out_dir.
  std::vector<StepRecord> run(const std::filesystem::path& out_dir,
                              const std::function<void(const StepRecord&)>& on_step = {}) {
    std::filesystem::create_directories(out_dir);
    MetricsLog log(out_dir / "metrics.csv", progress_.step);
    std::vector<StepRecord> records;
    while (auto rec = step()) {
      log.append(*rec);
      if (on_step) on_step(*rec);
      records.push_back(*rec);
      if (!progress_.epoch_open) checkpoint().save(out_dir / epoch_file(progress_.epoch));
    }
    checkpoint().save(out_dir / "final.sdtr");
    return records;
  }

  static std::string epoch_file(std::uint64_t epochs_done) {
    std::ostringstream os;
    os << "epoch_" << std::setw(3) << std::setfill('0') << epochs_done << ".sdtr";
    return os.str();
  }

 private:
  RunConfig cfg_;
  ViewConfig view_cfg_;
  std::vector<Image> images_;
  FrozenBackbone backbone_;
  DetrModel<float> model_;
  AdamW opt_;
  Rng rng_;
  Progress progress_;
};

// ---------------------------------------------------------------------------
// Finetuning

template <class T>
struct FinetuneSample {
  BasicTensor<T> features;  // H₁×W₁×C_b, or the cached decoder output in head-only mode
  std::vector<BoxCxCyWH> boxes;
  std::vector<int> labels;
};

/// Mean set-prediction loss over a batch, decoder run with no region input.
template <class T>
BasicTensor<T> finetune_loss(const DetrModel<T>& model, const std::vector<FinetuneSample<T>>& batch,
                             bool features_are_decoded = false) {
  if (batch.empty()) throw std::invalid_argument("finetune_loss: empty batch");
  std::vector<BasicTensor<T>> terms;
  for (const auto& s : batch) {
    const auto q = features_are_decoded ? s.features : model.decode(model.encode(s.features), std::nullopt);
    terms.push_back(finetune_set_loss(model.classify(q), model.predict_boxes(q), s.boxes, s.labels));
  }
  return mean_of(terms, batch.size());
}

inline bool is_finetune_trainable(const std::string& name, bool heads_only) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (heads_only) return starts("box.") || starts("class.");
  return !(starts("sem.") || starts("match.") || starts("projector.") || starts("region_proj."));
}

inline LabeledImage flip_labeled(const LabeledImage& li) {
  LabeledImage out{li.path, flip_horizontal(li.image), {}, li.labels};
  const auto w = static_cast<float>(li.image.width);
  for (const auto& b : li.boxes) out.boxes.push_back({w - b.x2, b.y1, w - b.x1, b.y2});
  return out;
}

inline constexpr std::size_t kNumClasses = kNumShapeClasses;

class Finetuner {
 public:
  /// `init` supplies pretrained transformer weights; without it the model
  /// is trained from its seeded random initialization. `seed` drives the
  /// model init, the class head and the data order.
  Finetuner(RunConfig cfg, std::vector<LabeledImage> train, const Checkpoint* init, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        seed_(seed),
        data_(std::move(train)),
        backbone_(cfg_.backbone_seed),
        model_(Pretrainer::model_config(cfg_, backbone_), seed),
        rng_(mix_seed(seed ^ 0xF17EULL)) {
    cfg_.validate();
    if (data_.empty()) throw std::invalid_argument("finetune: empty training set");
    if (init) {
      init->load_params(model_.params());
      initialized_from_checkpoint_ = true;
    }
    model_.add_class_head(kNumClasses, seed);
    std::vector<std::string> trainable;
    for (const auto& n : model_.params().names()) {
      if (is_finetune_trainable(n, cfg_.heads_only)) trainable.push_back(n);
    }
    AdamWConfig oc = cfg_.optim;
    oc.lr = cfg_.finetune_lr;
    opt_.emplace(model_.params(), trainable, oc);
    cache_[0].resize(data_.size());
    cache_[1].resize(data_.size());
  }

  DetrModel<float>& model() { return model_; }
  const DetrModel<float>& model() const { return model_; }
  const FrozenBackbone& backbone() const { return backbone_; }
  AdamW& optimizer() { return *opt_; }
  const Progress& progress() const { return progress_; }
  bool initialized_from_checkpoint() const { return initialized_from_checkpoint_; }
  std::size_t steps_per_epoch() const { return std::max<std::size_t>(1, data_.size() / cfg_.finetune_batch); }

  bool finished() const { return progress_.epoch >= cfg_.finetune_schedule.epochs; }

  std::optional<StepRecord> step() {
    if (finished()) return std::nullopt;
    if (!progress_.epoch_open) {
      progress_.epoch_seed = rng_.next_u64();
      progress_.step_in_epoch = 0;
      progress_.epoch_open = true;
    }
    const auto order = shuffled_indices(data_.size(), progress_.epoch_seed);
    const std::size_t b = std::min(cfg_.finetune_batch, data_.size());
    const std::size_t base = progress_.step_in_epoch * b;
    std::vector<FinetuneSample<float>> batch(b);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t idx = order[base + i];
      Rng flip_rng(item_seed(progress_.epoch_seed, base + i));
      const bool flip = cfg_.finetune_flip && flip_rng.bernoulli(0.5);
      batch[i] = sample(idx, flip);
    }
    StepRecord rec;
    rec.epoch = progress_.epoch;
    rec.lr = cfg_.finetune_schedule.lr_at(cfg_.finetune_lr, progress_.epoch);
    opt_->set_lr(rec.lr);
    model_.params().zero_grad();
    const auto loss = finetune_loss(model_, batch, cfg_.heads_only);
    rec.loss.loc = rec.loss.total = loss.item();
    backward(loss);
    opt_->clip_grad_norm(cfg_.clip);
    opt_->step();
    ++progress_.step;
    rec.step = progress_.step;
    if (++progress_.step_in_epoch == steps_per_epoch()) {
      ++progress_.epoch;
      progress_.epoch_open = false;
    }
    return rec;
  }

  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {}) {
    std::vector<StepRecord> records;
    while (auto rec = step()) {
      if (on_step) on_step(*rec);
      records.push_back(*rec);
    }
    return records;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.add_text("meta.kind", "finetune");
    ck.add_text("meta.config", cfg_.to_text());
    ck.add_text("meta.rng", rng_.state());
    ck.add_text("meta.progress", progress_.to_text());
    ck.add_params(model_.params());
    return ck;
  }

 private:
  FinetuneSample<float> sample(std::size_t idx, bool flip) {
    auto& slot = cache_[flip ? 1 : 0][idx];
    if (!slot) {
      const LabeledImage li = flip ? flip_labeled(data_[idx]) : data_[idx];
      FinetuneSample<float> s;
      s.features = backbone_.extract(li.image);
      if (cfg_.heads_only) {
        NoGradGuard guard;
        s.features = model_.decode(model_.encode(s.features), std::nullopt);
      }
      s.boxes = normalize_boxes(li.boxes, static_cast<float>(li.image.width), static_cast<float>(li.image.height));
      s.labels = li.labels;
      slot = std::move(s);
    }
    return *slot;
  }

  RunConfig cfg_;
  std::uint64_t seed_;
  std::vector<LabeledImage> data_;
  FrozenBackbone backbone_;
  DetrModel<float> model_;
  std::optional<AdamW> opt_;
  Rng rng_;
  Progress progress_;
  bool initialized_from_checkpoint_ = false;
  std::vector<std::optional<FinetuneSample<float>>> cache_[2];
};

}  // namespace sdetr

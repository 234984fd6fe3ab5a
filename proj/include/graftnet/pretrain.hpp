#pragma once

// Trunk pretraining over independent single-label sub-datasets. Every batch
// comes from one sub-dataset and activates only that attribute's head.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "graftnet/backbone.hpp"
#include "graftnet/dataset.hpp"
#include "graftnet/optim.hpp"
#include "graftnet/tape.hpp"

namespace graftnet {

enum class SamplingMode { kUniform, kSizeProportional };
enum class LrSchedule { kConstant, kCosine };

inline std::string to_string(SamplingMode m) {
  return m == SamplingMode::kUniform ? "uniform" : "size-proportional";
}

inline SamplingMode parse_sampling_mode(const std::string& s) {
  if (s == "uniform") return SamplingMode::kUniform;
  if (s == "size-proportional") return SamplingMode::kSizeProportional;
  throw Error(ErrorCode::kInvalidArgument, "unknown sampling mode '" + s + "'");
}

inline std::string to_string(LrSchedule s) {
  return s == LrSchedule::kConstant ? "constant" : "cosine";
}

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw Error(ErrorCode::kInvalidArgument, "unknown learning-rate schedule '" + s + "'");
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `warmup` steps, then constant or cosine decay to zero.
inline float scheduled_lr(LrSchedule schedule, float base, std::size_t step, std::size_t total,
                          std::size_t warmup = 0) {
  if (step < warmup) {
    return base * static_cast<float>(step + 1) / static_cast<float>(warmup);
  }
  if (schedule == LrSchedule::kConstant || total <= warmup + 1) return base;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return static_cast<float>(0.5 * base * (1.0 + std::cos(M_PI * t)));
}

struct PretrainConfig {
  std::size_t steps = 800;
  std::size_t batch_size = 32;
  float learning_rate = 0.05f;
  LrSchedule schedule = LrSchedule::kCosine;
  std::size_t warmup_steps = 50;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  SamplingMode sampling = SamplingMode::kUniform;
  std::size_t export_depth = 11;
  BackboneConfig backbone;
  bool verify_isolation = true;
  // Cap on train images per attribute used for the final accuracy pass; 0 = all.
  std::size_t eval_limit = 0;
  // Closing phase: BN statistics are re-estimated over all sub-datasets, then
  // the last `settle_steps` steps run with BN in inference mode so the heads
  // adapt to the shared statistics they will see at inference.
  std::size_t settle_steps = 100;
  std::size_t bn_recalibration_batches = 20;

  void validate() const {
    if (steps == 0) throw Error(ErrorCode::kInvalidArgument, "step count must be positive");
    if (settle_steps > steps) {
      throw Error(ErrorCode::kInvalidArgument, "settle steps exceed the step count");
    }
    if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
    if (!(learning_rate > 0.0f)) {
      throw Error(ErrorCode::kInvalidArgument, "learning rate must be positive");
    }
    backbone.validate();
    if (export_depth > backbone.block_count) {
      throw Error(ErrorCode::kOutOfRange, "export depth exceeds block count");
    }
  }
};

inline void to_json(json& j, const PretrainConfig& c) {
  j = json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"schedule", to_string(c.schedule)},
           {"warmup_steps", c.warmup_steps},
           {"momentum", c.momentum},
           {"seed", c.seed},
           {"sampling", to_string(c.sampling)},
           {"export_depth", c.export_depth},
           {"backbone", c.backbone},
           {"verify_isolation", c.verify_isolation},
           {"eval_limit", c.eval_limit},
           {"settle_steps", c.settle_steps},
           {"bn_recalibration_batches", c.bn_recalibration_batches}};
}

inline void from_json(const json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.schedule = parse_lr_schedule(j.value("schedule", to_string(d.schedule)));
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.momentum = j.value("momentum", d.momentum);
  c.seed = j.value("seed", d.seed);
  c.sampling = parse_sampling_mode(j.value("sampling", to_string(d.sampling)));
  c.backbone = j.contains("backbone") ? j.at("backbone").get<BackboneConfig>() : d.backbone;
  c.export_depth = j.value("export_depth", c.backbone.block_count);
  c.verify_isolation = j.value("verify_isolation", d.verify_isolation);
  c.eval_limit = j.value("eval_limit", d.eval_limit);
  c.settle_steps = j.value("settle_steps", d.settle_steps);
  c.bn_recalibration_batches = j.value("bn_recalibration_batches", d.bn_recalibration_batches);
}

// ---------------------------------------------------------------------------
// Retraining policy.

struct RetrainPolicy {
  int threshold = 5;
  int labels_since_last_retrain = 0;
};

inline bool should_retrain(const RetrainPolicy& policy, int newly_added_labels) {
  if (policy.threshold < 1) {
    throw Error(ErrorCode::kInvalidArgument, "retrain threshold must be >= 1");
  }
  return policy.labels_since_last_retrain + newly_added_labels >= policy.threshold;
}

// ---------------------------------------------------------------------------
// Batch sampling.

struct Batch {
  std::size_t attribute_id = 0;
  Tensor images;
  std::vector<int> labels;
};

/// Validates sub-datasets and assigns attribute ids by position.
inline void register_subdatasets(std::vector<SubDataset>& datasets) {
  if (datasets.empty()) throw Error(ErrorCode::kInvalidArgument, "no sub-datasets");
  std::set<std::string> names;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    auto& d = datasets[i];
    if (d.train.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "sub-dataset '" + d.attribute + "' is empty");
    }
    if (!names.insert(d.attribute).second) {
      throw Error(ErrorCode::kDuplicateAttribute, "attribute '" + d.attribute + "' registered twice");
    }
    std::set<std::string> train_refs;
    for (const auto& s : d.train) {
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= d.classes.size()) {
        throw Error(ErrorCode::kUnknownClassIndex,
                    "sample '" + s.ref + "' of '" + d.attribute + "' has invalid label");
      }
      train_refs.insert(s.ref);
    }
    for (const auto& s : d.test) {
      if (train_refs.count(s.ref)) {
        throw Error(ErrorCode::kDuplicatePath,
                    "sample '" + s.ref + "' of '" + d.attribute + "' is in both splits");
      }
    }
    d.attribute_id = i;
  }
}

/// Picks a sub-dataset per batch, then draws its samples without replacement
/// from a per-dataset shuffled pass, reshuffling when a pass is exhausted.
class BatchSampler {
 public:
  BatchSampler(const std::vector<SubDataset>& datasets, SamplingMode mode, std::uint64_t seed)
      : datasets_(&datasets), mode_(mode), rng_(seed) {
    if (datasets.empty()) throw Error(ErrorCode::kInvalidArgument, "no sub-datasets");
    std::vector<double> weights;
    for (const auto& d : datasets) {
      if (d.train.empty()) {
        throw Error(ErrorCode::kInvalidArgument, "sub-dataset '" + d.attribute + "' is empty");
      }
      weights.push_back(mode == SamplingMode::kUniform ? 1.0 : static_cast<double>(d.train.size()));
      order_.emplace_back(d.train.size());
      std::iota(order_.back().begin(), order_.back().end(), std::size_t{0});
      cursor_.push_back(d.train.size());  // forces a shuffle on first use
    }
    pick_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  }

  std::size_t next_dataset() { return pick_(rng_); }

  /// Sample indices of the next batch from dataset `d`.
  std::vector<std::size_t> next_indices(std::size_t d, std::size_t batch_size) {
    auto& order = order_[d];
    const std::size_t n = std::min(batch_size, order.size());
    if (cursor_[d] + n > order.size()) {
      std::shuffle(order.begin(), order.end(), rng_);
      cursor_[d] = 0;
    }
    std::vector<std::size_t> out(order.begin() + cursor_[d], order.begin() + cursor_[d] + n);
    cursor_[d] += n;
    return out;
  }

  Batch next(std::size_t batch_size) {
    const std::size_t d = next_dataset();
    const auto idx = next_indices(d, batch_size);
    const auto& data = (*datasets_)[d];
    Batch b;
    b.attribute_id = data.attribute_id;
    b.images = stack_images(data.train, idx);
    for (auto i : idx) b.labels.push_back(data.train[i].label);
    return b;
  }

 private:
  const std::vector<SubDataset>* datasets_;
  SamplingMode mode_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> pick_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
};

// ---------------------------------------------------------------------------
// One dynamic-graph step.

struct StepResult {
  float loss = 0.0f;
  float accuracy = 0.0f;
  bool isolated = true;  // all inactive heads bit-identical across the step
};

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.raw(), b.raw(), a.numel() * sizeof(float)) == 0;
}

/// Forward through every block -> pooling -> head[attribute_id] -> CE, then
/// one optimizer step over the shared blocks and the active head.
inline StepResult dynamic_step(BackboneModel& model, const Batch& batch, SgdMomentum<float>& opt,
                               float learning_rate, float momentum, bool verify_isolation,
                               Mode bn_mode = Mode::kTrain) {
  if (batch.attribute_id >= model.heads.size()) {
    throw Error(ErrorCode::kUnknownAttribute,
                "no head for attribute id " + std::to_string(batch.attribute_id));
  }
  std::vector<Tensor> before;
  if (verify_isolation) {
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      if (h == batch.attribute_id) continue;
      before.push_back(model.heads[h].weight.value);
      before.push_back(model.heads[h].bias.value);
    }
  }
  auto params = model.block_parameters();
  for (auto* p : model.head_parameters(batch.attribute_id)) params.push_back(p);
  zero_grads<float>(params);

  Tape<float> tape;
  Tensor probs;
  const Var loss = model.forward_loss(tape, batch.images, 0, batch.attribute_id, batch.labels,
                                      bn_mode, &probs);
  tape.backward(loss);
  opt.step(params, learning_rate, momentum);

  StepResult r;
  r.loss = tape.value(loss)[0];
  const std::size_t k = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (probs[i * k + c] > probs[i * k + arg]) arg = c;
    correct += static_cast<int>(arg) == batch.labels[i];
  }
  r.accuracy = static_cast<float>(correct) / static_cast<float>(batch.labels.size());
  if (verify_isolation) {
    std::size_t j = 0;
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      if (h == batch.attribute_id) continue;
      r.isolated = r.isolated && bit_identical(before[j++], model.heads[h].weight.value);
      r.isolated = r.isolated && bit_identical(before[j++], model.heads[h].bias.value);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

/// Re-estimates the BN running statistics of every unfrozen block as the
/// plain average of batch statistics over `batches_per_dataset` batches from
/// each sub-dataset in turn. The exponential average kept during training is
/// dominated by whichever sub-datasets supplied the last few batches.
inline void recalibrate_batch_norm(BackboneModel& model, const std::vector<SubDataset>& datasets,
                                   std::size_t batches_per_dataset, std::size_t batch_size,
                                   std::uint64_t seed) {
  if (batches_per_dataset == 0) return;
  BatchSampler sampler(datasets, SamplingMode::kUniform, seed);
  std::size_t t = 0;
  for (std::size_t round = 0; round < batches_per_dataset; ++round) {
    for (std::size_t d = 0; d < datasets.size(); ++d, ++t) {
      const auto idx = sampler.next_indices(d, batch_size);
      Tensor a = stack_images(datasets[d].train, idx);
      for (auto& block : model.blocks) {
        if (block.frozen) {
          a = block.infer(a);
          continue;
        }
        for (auto& l : block.layers) {
          a = kernels::conv2d_forward(a, l.weight.value, l.bias.value, l.stride, kPadding);
          const float saved = l.bn.momentum;
          l.bn.momentum = 1.0f / static_cast<float>(t + 1);
          kernels::BatchNormCache<float> cache;
          a = kernels::batch_norm_train(a, l.bn, cache);
          l.bn.momentum = saved;
          a = kernels::relu_forward(a);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

struct PretrainLogEntry {
  std::size_t step = 0;
  std::string attribute;
  float loss = 0.0f;
  float accuracy = 0.0f;
  float learning_rate = 0.0f;
  bool isolated = true;

  json to_json() const {
    return json{{"step", step}, {"attr", attribute}, {"loss", loss},
                {"acc", accuracy}, {"lr", learning_rate}, {"isolated", isolated}};
  }
};

struct PretrainResult {
  TrunkWeights trunk;
  BackboneModel model;  // full model with heads, for audit
  std::vector<PretrainLogEntry> log;
  std::map<std::string, double> train_accuracy;  // inference-mode, after training
};

/// Top-1 accuracy of one head over `samples` in inference mode.
inline double head_accuracy(const BackboneModel& model, const std::string& attribute,
                            const std::vector<Sample>& samples, std::size_t limit = 0,
                            std::size_t chunk = 64) {
  const std::size_t n = limit ? std::min(limit, samples.size()) : samples.size();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const Tensor p = model.infer(stack_images(samples, idx), attribute);
    const std::size_t k = p.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (p[r * k + c] > p[r * k + arg]) arg = c;
      correct += static_cast<int>(arg) == samples[idx[r]].label;
    }
  }
  return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

/// FNV-1a over the labels and pixel bytes of the train split.
inline std::uint64_t dataset_digest(const SubDataset& d) {
  std::vector<std::uint8_t> bytes(d.attribute.begin(), d.attribute.end());
  for (const auto& s : d.train) {
    bytes.push_back(static_cast<std::uint8_t>(s.label));
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.image.raw());
    bytes.insert(bytes.end(), p, p + s.image.numel() * sizeof(float));
  }
  return fnv1a64(bytes);
}

using PretrainObserver = std::function<void(const PretrainLogEntry&)>;

inline PretrainResult pretrain(std::vector<SubDataset> datasets, const PretrainConfig& config,
                               const PretrainObserver& observer = {}) {
  config.validate();
  register_subdatasets(datasets);
  PretrainResult result;
  result.model = build_backbone(config.backbone, config.seed);
  std::mt19937_64 head_rng(config.seed ^ 0x5eedu);
  for (const auto& d : datasets)
    result.model.add_head(d.attribute, d.classes, Pooling::kGap, config.backbone.block_count,
                          head_rng);
  set_trainable(result.model, 0);

  BatchSampler sampler(datasets, config.sampling, config.seed + 1);
  SgdMomentum<float> opt;
  const std::size_t settle_from = config.steps - config.settle_steps;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (step == settle_from) {
      recalibrate_batch_norm(result.model, datasets, config.bn_recalibration_batches,
                             config.batch_size, config.seed + 2);
    }
    const Mode bn_mode = step < settle_from ? Mode::kTrain : Mode::kInfer;
    const Batch batch = sampler.next(config.batch_size);
    const float lr = scheduled_lr(config.schedule, config.learning_rate, step, config.steps,
                                  config.warmup_steps);
    const auto& attr = datasets[batch.attribute_id].attribute;
    StepResult r;
    try {
      r = dynamic_step(result.model, batch, opt, lr, config.momentum, config.verify_isolation,
                       bn_mode);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFinite) throw;
      throw Error(ErrorCode::kNonFinite, "non-finite value at step " + std::to_string(step) +
                                             " (attribute '" + attr + "'): " + e.what());
    }
    if (!std::isfinite(r.loss)) {
      throw Error(ErrorCode::kNonFinite, "non-finite loss at step " + std::to_string(step) +
                                             " (attribute '" + attr +
                                             "', loss=" + std::to_string(r.loss) + ")");
    }
    PretrainLogEntry e{step, attr, r.loss, r.accuracy, lr, r.isolated};
    if (observer) observer(e);
    result.log.push_back(std::move(e));
  }
  if (config.settle_steps == 0) {
    recalibrate_batch_norm(result.model, datasets, config.bn_recalibration_batches,
                           config.batch_size, config.seed + 2);
  }
  for (const auto& d : datasets)
    result.train_accuracy[d.attribute] =
        head_accuracy(result.model, d.attribute, d.train, config.eval_limit);
  result.trunk = export_trunk(result.model, config.export_depth);
  json digests = json::object();
  for (const auto& d : datasets) digests[d.attribute] = fingerprint_hex(dataset_digest(d));
  result.trunk.provenance = {{"kind", "pretrain"},
                             {"version", kWeightVersion},
                             {"seed", config.seed},
                             {"config", config},
                             {"datasets", digests}};
  return result;
}

/// Per-attribute exponential moving average of the logged loss.
inline std::map<std::string, std::vector<double>> smoothed_losses(
    const std::vector<PretrainLogEntry>& log, double alpha = 0.1) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& e : log) {
    auto& s = out[e.attribute];
    s.push_back(s.empty() ? e.loss : (1.0 - alpha) * s.back() + alpha * e.loss);
  }
  return out;
}

}  // namespace graftnet

#pragma once

// Fine-tunes one attribute branch on top of a frozen trunk prefix.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "graftnet/backbone.hpp"
#include "graftnet/dataset.hpp"
#include "graftnet/optim.hpp"
#include "graftnet/pretrain.hpp"
#include "graftnet/tape.hpp"

namespace graftnet {

enum class BranchInit { kTrunk, kRandom };

inline std::string to_string(BranchInit i) { return i == BranchInit::kTrunk ? "trunk" : "random"; }

inline BranchInit parse_branch_init(const std::string& s) {
  if (s == "trunk") return BranchInit::kTrunk;
  if (s == "random") return BranchInit::kRandom;
  throw Error(ErrorCode::kInvalidArgument, "unknown init '" + s + "' (trunk|random)");
}

struct BranchSpec {
  std::string attribute;
  std::size_t graft_point = 8;
  std::size_t end_block = 11;
  Pooling pooling = Pooling::kGap;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  float learning_rate = 0.02f;
  LrSchedule schedule = LrSchedule::kCosine;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  BranchInit init = BranchInit::kTrunk;
};

inline void to_json(json& j, const BranchSpec& s) {
  j = json{{"attribute", s.attribute},     {"graft_point", s.graft_point},
           {"end_block", s.end_block},     {"pooling", to_string(s.pooling)},
           {"epochs", s.epochs},           {"batch_size", s.batch_size},
           {"learning_rate", s.learning_rate}, {"schedule", to_string(s.schedule)},
           {"momentum", s.momentum},       {"seed", s.seed},
           {"init", to_string(s.init)}};
}

struct BranchLogEntry {
  std::size_t epoch = 0;
  float loss = 0.0f;      // mean over the epoch's batches
  float accuracy = 0.0f;  // train-mode batch accuracy over the epoch

  json to_json() const { return json{{"epoch", epoch}, {"loss", loss}, {"acc", accuracy}}; }
};

struct BranchResult {
  Branch branch;
  std::vector<BranchLogEntry> log;
};

/// Inference-mode activations of `samples` after `blocks`, one tensor per sample.
inline std::vector<Sample> prefix_activations(const std::vector<Block>& blocks,
                                              const std::vector<Sample>& samples,
                                              std::size_t chunk = 64) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) idx.push_back(i);
    Tensor a = stack_images(samples, idx);
    for (const auto& b : blocks) a = b.infer(a);
    Shape s(a.shape().begin() + 1, a.shape().end());
    const std::size_t stride = shape_numel(s);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<float> v(a.raw() + r * stride, a.raw() + (r + 1) * stride);
      out.push_back({samples[idx[r]].ref, Tensor(s, std::move(v)), samples[idx[r]].label});
    }
  }
  return out;
}

/// Blocks [0, g) come from the trunk and stay frozen; blocks [g, e) start from
/// the trunk (or fresh random weights) and train with the head.
inline BranchResult train_branch(const TrunkWeights& trunk, const SubDataset& dataset,
                                 const BranchSpec& spec) {
  trunk.validate();
  const auto& cfg = trunk.config;
  if (spec.graft_point > trunk.depth) {
    throw Error(ErrorCode::kOutOfRange, "graft point " + std::to_string(spec.graft_point) +
                                            " exceeds trunk depth " +
                                            std::to_string(trunk.depth));
  }
  if (spec.graft_point > spec.end_block || spec.end_block > cfg.block_count) {
    throw Error(ErrorCode::kOutOfRange, "invalid branch block range");
  }
  if (dataset.train.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "dataset '" + dataset.attribute + "' is empty");
  }
  if (spec.batch_size == 0 || spec.epochs == 0) {
    throw Error(ErrorCode::kInvalidArgument, "epochs and batch size must be positive");
  }
  const std::string attribute = spec.attribute.empty() ? dataset.attribute : spec.attribute;

  BackboneModel model = model_from_trunk(trunk, spec.seed);
  std::mt19937_64 rng(spec.seed ^ 0xb7a9c4u);
  if (spec.init == BranchInit::kRandom) {
    for (std::size_t i = spec.graft_point; i < spec.end_block; ++i)
      model.blocks[i] = make_block(cfg, i, rng);
  }
  model.add_head(attribute, dataset.classes, spec.pooling, spec.end_block, rng);
  set_trainable(model, spec.graft_point);

  const std::vector<Block> prefix(model.blocks.begin(), model.blocks.begin() + spec.graft_point);
  const auto cached = prefix_activations(prefix, dataset.train);

  std::vector<Parameter*> params;
  for (std::size_t i = spec.graft_point; i < spec.end_block; ++i) model.blocks[i].collect(params);
  for (auto* p : model.head_parameters(0)) params.push_back(p);

  SgdMomentum<float> opt;
  std::vector<std::size_t> order(cached.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per_epoch = (cached.size() + spec.batch_size - 1) / spec.batch_size;
  const std::size_t total = per_epoch * spec.epochs;
  BranchResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size, ++step) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + std::min(order.size(), start + spec.batch_size));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(cached[i].label);
      zero_grads<float>(params);
      Tape<float> tape;
      Tensor probs;
      const Var loss = model.forward_loss(tape, stack_images(cached, idx), spec.graft_point, 0,
                                          labels, Mode::kTrain, &probs);
      const float value = tape.value(loss)[0];
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::kNonFinite, "non-finite loss in branch '" + attribute +
                                               "' at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      opt.step(params, scheduled_lr(spec.schedule, spec.learning_rate, step, total),
               spec.momentum);
      loss_sum += value * static_cast<double>(idx.size());
      const std::size_t k = probs.dim(1);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < k; ++c)
          if (probs[r * k + c] > probs[r * k + arg]) arg = c;
        correct += static_cast<int>(arg) == labels[r];
      }
    }
    result.log.push_back({epoch, static_cast<float>(loss_sum / cached.size()),
                          static_cast<float>(correct) / static_cast<float>(cached.size())});
  }
  result.branch = detach_branch(model, spec.graft_point, spec.end_block, attribute,
                                trunk.fingerprint());
  return result;
}

/// Class probabilities [N x K] of one branch grafted onto `trunk`.
inline Tensor score_samples(const TrunkWeights& trunk, const Branch& branch,
                            const Tensor& images) {
  const GraftedModel m(trunk, {branch});
  return m.infer(images).at(branch.attribute);
}

/// Scores samples in chunks; returns [N x K] probabilities.
inline Tensor score_dataset(const GraftedModel& model, const std::string& attribute,
                            const std::vector<Sample>& samples, std::size_t chunk = 64) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidArgument, "no samples to score");
  Tensor out;
  std::vector<float> data;
  std::size_t k = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor p = model.infer(stack_images(samples, idx), {attribute}).at(attribute);
    k = p.dim(1);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor({samples.size(), k}, std::move(data));
}

}  // namespace graftnet

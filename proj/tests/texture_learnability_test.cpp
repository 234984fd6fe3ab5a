#include <gtest/gtest.h>

#include "graftnet/graftnet.hpp"

// Slow: pretrains the default trunk, then trains a fully open branch on the
// fine-texture attribute.

namespace graftnet {
namespace {

TEST(FineTexture, LearnableByTrainedBranch) {
  const auto sc = default_synth_config(2000, 500, 7);
  std::vector<SubDataset> suite;
  for (std::size_t i = 0; i < 3; ++i) suite.push_back(synthesize_subdataset(sc, i));
  const auto trunk = pretrain(suite, PretrainConfig{}).trunk;

  const auto texture = synthesize_subdataset(default_synth_config(2000, 500, 101), 3);
  BranchSpec s;
  s.graft_point = 0;
  s.end_block = trunk.config.block_count;
  s.epochs = 12;
  s.learning_rate = 0.05f;
  const auto r = train_branch(trunk, texture, s);
  const GraftedModel m(trunk, {r.branch});
  const Tensor p = score_dataset(m, texture.attribute, texture.test);
  std::vector<int> labels;
  for (const auto& x : texture.test) labels.push_back(x.label);
  const double a = macro_auc(one_vs_rest_sets(texture.attribute, texture.classes, p.data(), labels));
  RecordProperty("auc", std::to_string(a));
  EXPECT_GT(a, 0.9);
}

}  // namespace
}  // namespace graftnet

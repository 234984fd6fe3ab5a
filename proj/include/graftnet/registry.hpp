#pragma once

// A trunk plus hot-registrable branches. Readers take an immutable snapshot;
// registration builds a new model and publishes it atomically.

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "graftnet/backbone.hpp"
#include "graftnet/weights_io.hpp"

namespace graftnet {

class Registry {
 public:
  explicit Registry(TrunkWeights trunk)
      : model_(std::make_shared<const GraftedModel>(std::move(trunk), std::vector<Branch>{})) {}

  /// Trunk file plus every *.grft branch file in `branch_dir` (name order).
  static std::unique_ptr<Registry> from_files(const std::filesystem::path& trunk_path,
                                              const std::filesystem::path& branch_dir = {},
                                              bool allow_override = false) {
    auto reg = std::make_unique<Registry>(TrunkWeights::from_file(load_weights(trunk_path)));
    if (!branch_dir.empty()) {
      if (!std::filesystem::is_directory(branch_dir)) {
        throw Error(ErrorCode::kMissingFile, "branch directory not found: " + branch_dir.string());
      }
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(branch_dir))
        if (e.is_regular_file() && e.path().extension() == ".grft") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) reg->register_branch(f, allow_override, false);
    }
    return reg;
  }

  std::shared_ptr<const GraftedModel> snapshot() const {
    std::lock_guard lock(read_mu_);
    return model_;
  }

  std::string register_branch(const Branch& branch, bool allow_override = false,
                              bool replace = false) {
    std::lock_guard writer(write_mu_);
    auto next = std::make_shared<GraftedModel>(*snapshot());
    next->add(branch, allow_override, replace);
    std::shared_ptr<const GraftedModel> published = std::move(next);
    {
      std::lock_guard lock(read_mu_);
      model_.swap(published);
    }
    return branch.attribute;
  }

  std::string register_branch(const std::filesystem::path& branch_file, bool allow_override = false,
                              bool replace = false) {
    return register_branch(Branch::from_file(load_weights(branch_file)), allow_override, replace);
  }

  ScoreMap infer(const Tensor& image, const std::vector<std::string>& filter = {},
                 std::size_t* trunk_block_evals = nullptr) const {
    return snapshot()->infer(image, filter, trunk_block_evals);
  }

  std::vector<std::string> attributes() const { return snapshot()->attributes(); }

 private:
  mutable std::mutex read_mu_;
  std::mutex write_mu_;
  std::shared_ptr<const GraftedModel> model_;
};

}  // namespace graftnet

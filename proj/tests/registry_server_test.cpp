#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <thread>

#include "graftnet/registry.hpp"
#include "graftnet/server.hpp"
#include "support/toy.hpp"

namespace graftnet {
namespace {

namespace fs = std::filesystem;
using testing::random_images;
using testing::trained_toy_model;

struct Fixture {
  BackboneModel model = trained_toy_model(21, 5);
  TrunkWeights trunk = export_trunk(model, 3);
  Branch a = detach_branch(model, 3, 6, "a", trunk.fingerprint());
  Branch b = detach_branch(model, 3, 4, "b", trunk.fingerprint());
};

Branch renamed(Branch br, const std::string& name) {
  auto w = br.tensors.extract("head/" + br.attribute + "/weight");
  auto bias = br.tensors.extract("head/" + br.attribute + "/bias");
  w.key() = "head/" + name + "/weight";
  bias.key() = "head/" + name + "/bias";
  br.tensors.insert(std::move(w));
  br.tensors.insert(std::move(bias));
  br.attribute = name;
  return br;
}

Branch perturbed(Branch br, float delta) {
  auto& bias = br.tensors.at("head/" + br.attribute + "/bias");
  bias[bias.numel() - 1] += delta;
  return br;
}

Tensor probe(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto c = testing::toy_config();
  return random_images(1, c, rng).reshaped({c.in_channels, c.in_height, c.in_width});
}

bool bit_equal(const Tensor& x, const Tensor& y) {
  return x.shape() == y.shape() && std::memcmp(x.raw(), y.raw(), x.numel() * sizeof(float)) == 0;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("graftnet_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// ---------------------------------------------------------------------------
// Registry

TEST(Registry, EmptyRegistryReturnsEmptyMap) {
  Fixture f;
  Registry reg(f.trunk);
  std::size_t evals = 0;
  EXPECT_TRUE(reg.infer(probe(1), {}, &evals).empty());
  EXPECT_EQ(evals, 0u);
}

TEST(Registry, RegisterThenInfer) {
  Fixture f;
  Registry reg(f.trunk);
  EXPECT_EQ(reg.register_branch(f.a), "a");
  auto s = reg.infer(probe(2));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.at("a").shape(), (Shape{1, 2}));
  reg.register_branch(f.b);
  s = reg.infer(probe(2));
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.at("b").shape(), (Shape{1, 3}));
  EXPECT_EQ(reg.attributes(), (std::vector<std::string>{"a", "b"}));
}

TEST(Registry, MatchesFullModel) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  reg.register_branch(f.b);
  std::mt19937_64 rng(3);
  const Tensor x = random_images(6, f.trunk.config, rng);
  const auto s = reg.infer(x);
  EXPECT_LT(testing::max_abs_diff(s.at("a"), f.model.infer(x, "a")), 1e-5);
  EXPECT_LT(testing::max_abs_diff(s.at("b"), f.model.infer(x, "b")), 1e-5);
}

TEST(Registry, StaleFingerprintRejected) {
  Fixture f;
  Registry reg(f.trunk);
  auto stale = f.a;
  stale.trunk_fingerprint ^= 1;
  try {
    reg.register_branch(stale);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFingerprintMismatch);
    EXPECT_NE(std::string(e.what()).find(fingerprint_hex(f.trunk.fingerprint())), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(fingerprint_hex(stale.trunk_fingerprint)), std::string::npos);
  }
  EXPECT_TRUE(reg.attributes().empty());
  EXPECT_NO_THROW(reg.register_branch(stale, true));
}

TEST(Registry, DuplicateNeedsReplace) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  const Tensor x = probe(4);
  const Tensor before = reg.infer(x).at("a");
  const auto changed = perturbed(f.a, 0.5f);
  try {
    reg.register_branch(changed);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicateAttribute);
  }
  EXPECT_TRUE(bit_equal(reg.infer(x).at("a"), before));
  reg.register_branch(changed, false, true);
  const Tensor after = reg.infer(x).at("a");
  GraftedModel standalone(f.trunk, {changed});
  EXPECT_TRUE(bit_equal(after, standalone.infer(x).at("a")));
  EXPECT_FALSE(bit_equal(after, before));
}

TEST(Registry, ReplaceChangesProbeScores) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.b);
  auto shifted = f.b;
  shifted.tensors.at("head/b/bias")[2] += 1.0f;
  const Tensor x = probe(5);
  const Tensor before = reg.infer(x).at("b");
  reg.register_branch(shifted, false, true);
  const Tensor after = reg.infer(x).at("b");
  // raising one logit by 1 multiplies its odds against every other class by e
  EXPECT_NEAR((after[2] / after[0]) / (before[2] / before[0]), std::exp(1.0), 1e-4);
  EXPECT_NEAR(after[1] / after[0], before[1] / before[0], 1e-4);
}

TEST(Registry, FilterAndUnknownAttribute) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  reg.register_branch(f.b);
  const auto s = reg.infer(probe(6), {"b"});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_TRUE(s.count("b"));
  try {
    reg.infer(probe(6), {"a", "zzz"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownAttribute);
    EXPECT_NE(std::string(e.what()).find("known: a, b"), std::string::npos);
  }
}

TEST(Registry, SharedTrunkEvaluatedOnce) {
  Fixture f;
  Registry reg(f.trunk);
  for (int i = 0; i < 5; ++i) reg.register_branch(renamed(f.a, "c" + std::to_string(i)));
  std::size_t evals = 0;
  reg.infer(probe(7), {}, &evals);
  EXPECT_EQ(evals, 3u);
}

TEST(Registry, SnapshotUnaffectedByLaterRegistration) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  const auto snap = reg.snapshot();
  reg.register_branch(f.b);
  EXPECT_EQ(snap->attributes(), (std::vector<std::string>{"a"}));
  EXPECT_EQ(reg.snapshot()->attributes().size(), 2u);
}

TEST(Registry, FromFiles) {
  Fixture f;
  TempDir dir("registry");
  save_weights(dir.path / "trunk.grft", f.trunk.to_file());
  fs::create_directories(dir.path / "branches");
  save_weights(dir.path / "branches" / "a.grft", f.a.to_file());
  save_weights(dir.path / "branches" / "b.grft", f.b.to_file());
  const auto reg = Registry::from_files(dir.path / "trunk.grft", dir.path / "branches");
  EXPECT_EQ(reg->attributes(), (std::vector<std::string>{"a", "b"}));
  const Tensor x = probe(8);
  EXPECT_TRUE(bit_equal(reg->infer(x).at("a"), GraftedModel(f.trunk, {f.a}).infer(x).at("a")));
  EXPECT_THROW(Registry::from_files(dir.path / "trunk.grft", dir.path / "missing"), Error);
}

// ---------------------------------------------------------------------------
// Wire protocol

json request_for(const Tensor& x, const json& id) {
  return json{{"id", id}, {"tensor", tensor_to_wire(x)}};
}

TEST(Wire, Base64RoundTrip) {
  std::mt19937_64 rng(9);
  for (std::size_t n = 0; n < 20; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(base64_decode(base64_encode(bytes.data(), n)), bytes);
  }
  EXPECT_EQ(base64_encode("Man", 3), "TWFu");
  EXPECT_EQ(base64_encode("Ma", 2), "TWE=");
  EXPECT_THROW(base64_decode("abc"), Error);
}

TEST(Wire, TensorRoundTripIsBitExact) {
  std::mt19937_64 rng(10);
  const Tensor x = random_images(2, testing::toy_config(), rng);
  EXPECT_TRUE(bit_equal(tensor_from_wire(tensor_to_wire(x)), x));
  json bad = tensor_to_wire(x);
  bad["shape"] = {2, 3, 12};
  EXPECT_THROW(tensor_from_wire(bad), Error);
}

TEST(Wire, HandleRequestMatchesOfflineInference) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  reg.register_branch(f.b);
  const Tensor x = probe(11);
  const auto resp = handle_request(reg, request_for(x, "q1").dump());
  EXPECT_EQ(resp["id"], "q1");
  const auto served = scores_from_wire(resp["scores"]);
  const auto offline = reg.infer(x);
  ASSERT_EQ(served.size(), offline.size());
  for (const auto& [attr, p] : offline) EXPECT_TRUE(bit_equal(served.at(attr), p)) << attr;
}

TEST(Wire, ErrorResponses) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  EXPECT_EQ(handle_request(reg, "{not json")["error"], "decode_error");
  EXPECT_EQ(handle_request(reg, "[1,2]")["error"], "decode_error");
  EXPECT_EQ(handle_request(reg, R"({"id":"x"})")["error"], "decode_error");
  auto req = request_for(probe(12), "u");
  req["attributes"] = {"nope"};
  const auto resp = handle_request(reg, req.dump());
  EXPECT_EQ(resp["id"], "u");
  EXPECT_EQ(resp["error"], "unknown_attribute");
  req = request_for(probe(12), "s");
  req["tensor"]["shape"] = {3, 8, 18};
  EXPECT_EQ(handle_request(reg, req.dump())["error"], "shape_mismatch");
  req["tensor"]["shape"] = {3, 8, 8};
  EXPECT_EQ(handle_request(reg, req.dump())["error"], "decode_error");
  EXPECT_EQ(handle_request(reg, R"({"op":"dance"})")["error"], "invalid_argument");
}

// ---------------------------------------------------------------------------
// Server

TEST(Server, EchoesIdAndKeepsConnectionAfterErrors) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  Server server(reg, {"127.0.0.1", 0});
  server.start();
  Client c("127.0.0.1", server.port());
  c.send_line("garbage");
  const auto err = json::parse(c.read_line());
  EXPECT_EQ(err["error"], "decode_error");
  const auto ok = c.request(request_for(probe(13), "after-error"));
  EXPECT_EQ(ok["id"], "after-error");
  EXPECT_TRUE(ok.contains("scores"));
  auto req = request_for(probe(13), 7);
  req["attributes"] = {"missing"};
  const auto unknown = c.request(req);
  EXPECT_EQ(unknown["id"], 7);
  EXPECT_EQ(unknown["error"], "unknown_attribute");
  server.stop();
}

TEST(Server, ConcurrentClientsGetIdenticalScores) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  reg.register_branch(f.b);
  Server server(reg, {"127.0.0.1", 0});
  server.start();
  const Tensor x = probe(14);
  const auto offline = reg.infer(x);
  std::vector<json> results(8);
  std::vector<std::thread> clients;
  for (int i = 0; i < 8; ++i)
    clients.emplace_back([&, i] {
      Client c("127.0.0.1", server.port());
      for (int r = 0; r < 10; ++r) results[i] = c.request(request_for(x, "c" + std::to_string(i)));
    });
  for (auto& t : clients) t.join();
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(results[i]["id"], "c" + std::to_string(i));
    EXPECT_EQ(results[i]["scores"], results[0]["scores"]);
    const auto served = scores_from_wire(results[i]["scores"]);
    for (const auto& [attr, p] : offline) EXPECT_TRUE(bit_equal(served.at(attr), p));
  }
  server.stop();
}

TEST(Server, BatchedRequest) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.b);
  Server server(reg, {"127.0.0.1", 0});
  server.start();
  std::mt19937_64 rng(15);
  const Tensor x = random_images(3, f.trunk.config, rng);
  Client c("127.0.0.1", server.port());
  const auto resp = c.request(request_for(x, "batch"));
  const auto rows = resp["scores"]["b"];
  ASSERT_EQ(rows.size(), 3u);
  const Tensor p = reg.infer(x).at("b");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(rows[i][k].get<float>(), p[i * 3 + k]);
  server.stop();
}

TEST(Server, RegisterOverTheWire) {
  Fixture f;
  TempDir dir("wire_register");
  save_weights(dir.path / "b.grft", f.b.to_file());
  Registry reg(f.trunk);
  Server server(reg, {"127.0.0.1", 0});
  server.start();
  Client c("127.0.0.1", server.port());
  const auto r = c.request({{"id", 1}, {"op", "register_branch"}, {"path", (dir.path / "b.grft").string()}});
  EXPECT_EQ(r["registered"], "b");
  const auto s = c.request(request_for(probe(16), "x"));
  EXPECT_TRUE(s["scores"].contains("b"));
  const auto again = c.request({{"id", 2}, {"op", "register_branch"}, {"path", (dir.path / "b.grft").string()}});
  EXPECT_EQ(again["error"], "duplicate_attribute");
  server.stop();
}

TEST(Server, HotRegistrationUnderLoad) {
  Fixture f;
  Registry reg(f.trunk);
  reg.register_branch(f.a);
  Server server(reg, {"127.0.0.1", 0});
  server.start();
  const Tensor x = probe(17);

  // Expected scores for every branch version that can ever be live.
  constexpr int kExtra = 12;
  std::vector<Branch> extra;
  std::map<std::string, Tensor> expected{{"a", GraftedModel(f.trunk, {f.a}).infer(x).at("a")}};
  for (int i = 0; i < kExtra; ++i) {
    extra.push_back(perturbed(renamed(i % 2 ? f.b : f.a, "n" + std::to_string(i)), 0.1f * i));
    expected[extra.back().attribute] = GraftedModel(f.trunk, {extra.back()}).infer(x).at(extra.back().attribute);
  }

  std::atomic<bool> done{false};
  std::atomic<int> responses{0}, bad{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 4; ++t)
    readers.emplace_back([&, t] {
      Client c("127.0.0.1", server.port());
      std::size_t last = 0;
      while (!done) {
        const auto resp = c.request(request_for(x, "r" + std::to_string(t)));
        if (!resp.contains("scores")) {
          ++bad;
          continue;
        }
        const auto s = scores_from_wire(resp["scores"]);
        // branches only ever get added, so the map never shrinks
        if (s.size() < last || !s.count("a")) ++bad;
        last = s.size();
        for (const auto& [attr, p] : s)
          if (!expected.count(attr) || !bit_equal(p, expected.at(attr))) ++bad;
        ++responses;
      }
    });
  for (const auto& br : extra) {
    reg.register_branch(br);
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  done = true;
  for (auto& t : readers) t.join();
  server.stop();
  EXPECT_EQ(bad.load(), 0);
  EXPECT_GT(responses.load(), kExtra);
  EXPECT_EQ(reg.attributes().size(), kExtra + 1u);
}

TEST(Server, StopWithIdleClientConnected) {
  Fixture f;
  Registry reg(f.trunk);
  auto server = std::make_unique<Server>(reg, ServerConfig{"127.0.0.1", 0});
  server->start();
  Client idle("127.0.0.1", server->port());
  server->stop();
  server.reset();
  SUCCEED();
}

}  // namespace
}  // namespace graftnet

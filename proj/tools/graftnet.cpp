#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "graftnet/graftnet.hpp"
#include "graftnet/server.hpp"

using namespace graftnet;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kDecode, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + p.string());
  out << text;
}

std::vector<fs::path> find_manifests(const fs::path& dir) {
  if (fs::is_regular_file(dir)) return {dir};
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kMissingFile, "no such directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "manifest.json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error(ErrorCode::kMissingFile, "no manifest.json under " + dir.string());
  return out;
}

std::string split_digest(const std::string& attribute, const std::vector<Sample>& samples) {
  std::vector<std::uint8_t> bytes(attribute.begin(), attribute.end());
  for (const auto& s : samples) {
    bytes.push_back(static_cast<std::uint8_t>(s.label));
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.image.raw());
    bytes.insert(bytes.end(), p, p + s.image.numel() * sizeof(float));
  }
  return fingerprint_hex(fnv1a64(bytes));
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
  SynthConfig c = a.config.empty() ? default_synth_config() : read_json(a.config).get<SynthConfig>();
  if (a.seed) c.seed = *a.seed;
  const auto manifests = generate_synthetic(c, a.out);
  for (const auto& m : manifests)
    std::cout << m.attribute << ": " << m.train.size() << " train, " << m.test.size() << " test -> "
              << (fs::path(a.out) / m.attribute / "manifest.json").string() << "\n";
  return 0;
}

struct PretrainArgs {
  std::string manifests, config, out, log;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int run_pretrain(const PretrainArgs& a) {
  PretrainConfig c;
  if (!a.config.empty()) c = read_json(a.config).get<PretrainConfig>();
  if (a.steps) {
    c.steps = *a.steps;
    c.settle_steps = std::min(c.settle_steps, c.steps / 4);
  }
  if (a.seed) c.seed = *a.seed;
  std::vector<SubDataset> data;
  for (const auto& p : find_manifests(a.manifests)) {
    data.push_back(load_subdataset(load_manifest(p)));
    std::cerr << "loaded " << data.back().attribute << " (" << data.back().train.size() << " train)\n";
  }
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log);
    if (!log) throw Error(ErrorCode::kIo, "cannot write " + a.log);
  }
  const auto r = pretrain(data, c, [&](const PretrainLogEntry& e) {
    if (log) log << e.to_json().dump() << "\n";
    if (e.step % 100 == 0) std::cerr << "step " << e.step << " " << e.attribute << " loss " << e.loss << "\n";
  });
  save_weights(a.out, r.trunk.to_file());
  for (const auto& [attr, acc] : r.train_accuracy) std::cout << attr << " train accuracy " << acc << "\n";
  std::cout << "trunk " << fingerprint_hex(r.trunk.fingerprint()) << " -> " << a.out << "\n";
  return 0;
}

struct BranchArgs {
  std::string trunk, manifest, out, log, pooling = "gap", init = "trunk";
  BranchSpec spec;
};

int run_branch(BranchArgs a) {
  const auto trunk = TrunkWeights::from_file(load_weights(a.trunk));
  const auto data = load_subdataset(load_manifest(a.manifest));
  a.spec.pooling = parse_pooling(a.pooling);
  a.spec.init = parse_branch_init(a.init);
  const auto r = train_branch(trunk, data, a.spec);
  for (const auto& e : r.log) std::cerr << "epoch " << e.epoch << " loss " << e.loss << " acc " << e.accuracy << "\n";
  if (!a.log.empty()) {
    std::string text;
    for (const auto& e : r.log) text += e.to_json().dump() + "\n";
    write_text(a.log, text);
  }
  const std::string out = a.out.empty() ? "branch_" + r.branch.attribute + ".grft" : a.out;
  save_weights(out, r.branch.to_file());
  std::cout << r.branch.attribute << " [" << a.spec.graft_point << ", " << a.spec.end_block << ") "
            << a.pooling << " -> " << out << "\n";
  return 0;
}

struct GraftArgs {
  std::string trunk, out;
  std::vector<std::string> branches;
  bool allow_override = false;
};

int run_graft(const GraftArgs& a) {
  std::vector<Branch> branches;
  for (const auto& b : a.branches) branches.push_back(Branch::from_file(load_weights(b)));
  const GraftedModel m(TrunkWeights::from_file(load_weights(a.trunk)), branches, a.allow_override);
  save_weights(a.out, m.to_file());
  std::cout << m.attributes().size() << " branches on trunk " << fingerprint_hex(m.trunk_fingerprint()) << " -> "
            << a.out << "\n";
  return 0;
}

struct MineArgs {
  std::string trunk, manifest, out, report;
  MiningParams params;
};

int run_mine(const MineArgs& a) {
  const auto trunk = TrunkWeights::from_file(load_weights(a.trunk));
  const auto m = load_manifest(a.manifest);
  if (m.classes.size() != 2) throw Error(ErrorCode::kInvalidArgument, "mining needs a 2-class manifest");
  std::vector<ManifestEntry> pos, neg;
  for (const auto& e : m.train) (e.class_index == 1 ? pos : neg).push_back(e);
  const auto r = mine(extract_features(trunk, m, pos), extract_features(trunk, m, neg), a.params);
  DatasetManifest pruned = m;
  pruned.train = pos;
  for (auto i : r.kept) pruned.train.push_back(neg[i]);
  pruned.provenance["mined"] = {{"from", fs::absolute(a.manifest).string()},
                                {"negatives_before", neg.size()},
                                {"negatives_kept", r.kept.size()}};
  // relative paths keep pointing at the original images
  pruned.base_dir = m.base_dir;
  DatasetManifest written = pruned;
  const fs::path out_dir = fs::absolute(a.out).parent_path();
  fs::create_directories(out_dir);
  auto rebase = [&](std::vector<ManifestEntry>& v) {
    for (auto& e : v) e.path = fs::relative(m.resolve(e.path), out_dir).generic_string();
  };
  rebase(written.train);
  rebase(written.test);
  write_manifest(written, a.out);
  if (!a.report.empty()) write_text(a.report, r.report().dump(2) + "\n");
  std::cout << "kept " << r.kept.size() << " of " << neg.size() << " negatives (" << pos.size()
            << " positives) -> " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, out, table, roc, criterion = "youden";
  std::vector<std::string> manifests;
  std::optional<std::size_t> top_k;
};

int run_eval(const EvalArgs& a) {
  const auto model = GraftedModel::from_file(load_weights(a.model));
  EvaluationReport report;
  report.criterion = parse_criterion(a.criterion);
  report.metadata["trunk_fingerprint"] = fingerprint_hex(model.trunk_fingerprint());
  report.metadata["branches"] = json::object();
  report.metadata["datasets"] = json::object();
  std::vector<TopKRow> top;
  std::string roc_text;
  for (const auto& path : a.manifests) {
    const auto m = load_manifest(path);
    const auto& branch = model.branches().at(m.attribute).branch;
    const auto test = load_split(m, m.test);
    report.metadata["branches"][m.attribute] = fingerprint_hex(branch.fingerprint());
    report.metadata["datasets"][m.attribute] = split_digest(m.attribute, test);
    const Tensor p = score_dataset(model, m.attribute, test);
    std::vector<int> labels;
    for (const auto& s : test) labels.push_back(s.label);
    for (const auto& set : one_vs_rest_sets(m.attribute, m.classes, p.data(), labels)) {
      report.attributes.push_back(evaluate_set(set, report.criterion));
      if (!a.roc.empty()) {
        const auto csv = render_roc_csv(report.attributes.back().roc);
        roc_text += a.manifests.size() == 1 && m.classes.size() == 2 ? csv : "# " + set.attribute + "\n" + csv;
      }
      if (a.top_k) {
        const std::size_t k = *a.top_k ? *a.top_k : set.positives();
        const auto t = top_k_false_positives(set, std::min(k, set.scores.size()));
        top.push_back({set.attribute, t.selected, t.false_positives});
      }
    }
  }
  const std::string table = render_table(report);
  std::cout << table;
  if (!top.empty()) std::cout << "\n" << render_top_k_table(top);
  if (!a.table.empty()) write_text(a.table, table + (top.empty() ? "" : "\n" + render_top_k_table(top)));
  if (!a.out.empty()) write_text(a.out, report_to_json(report).dump(2) + "\n");
  if (!a.roc.empty()) write_text(a.roc, roc_text);
  return 0;
}

struct ServeArgs {
  std::string trunk, branches, host = "127.0.0.1";
  std::uint16_t port = 7077;
  bool allow_override = false;
};

int run_serve(const ServeArgs& a) {
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  auto registry = Registry::from_files(a.trunk, a.branches, a.allow_override);
  Server server(*registry, {a.host, a.port});
  server.start();
  std::cout << "serving " << registry->attributes().size() << " branches on " << a.host << ":" << server.port()
            << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  std::cout << "stopping" << std::endl;
  server.stop();
  return 0;
}

struct RegisterArgs {
  std::string host = "127.0.0.1", branch;
  std::uint16_t port = 7077;
  bool replace = false;
};

int run_register(const RegisterArgs& a) {
  Client c(a.host, a.port);
  const auto r = c.request({{"id", "register"},
                            {"op", "register_branch"},
                            {"path", fs::absolute(a.branch).string()},
                            {"replace", a.replace}});
  if (r.contains("error")) {
    std::cerr << "error: " << r["error"].get<std::string>() << ": " << r.value("message", "") << "\n";
    return 1;
  }
  std::cout << "registered " << r["registered"].get<std::string>() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftnet: shared-trunk multi-attribute models"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate the synthetic attribute suite");
  s->add_option("--config", synth.config, "SynthConfig JSON (default suite when omitted)");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Override the config seed");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Pretrain the trunk over single-attribute sub-datasets");
  p->add_option("--manifests", pre.manifests, "Directory searched for manifest.json files")->required();
  p->add_option("--config", pre.config, "PretrainConfig JSON");
  p->add_option("--out", pre.out, "Trunk weight file")->required();
  p->add_option("--log", pre.log, "Per-step JSON lines log");
  p->add_option("--steps", pre.steps, "Override the step count");
  p->add_option("--seed", pre.seed, "Override the seed");

  BranchArgs br;
  auto* b = app.add_subcommand("branch", "Fine-tune one attribute branch on a trunk");
  b->add_option("--trunk", br.trunk)->required();
  b->add_option("--manifest", br.manifest)->required();
  b->add_option("--graft-point", br.spec.graft_point, "First open block")->capture_default_str();
  b->add_option("--end-block", br.spec.end_block, "Block the head reads")->capture_default_str();
  b->add_option("--pooling", br.pooling, "gap | bilinear")->capture_default_str();
  b->add_option("--init", br.init, "trunk | random")->capture_default_str();
  b->add_option("--epochs", br.spec.epochs)->capture_default_str();
  b->add_option("--batch-size", br.spec.batch_size)->capture_default_str();
  b->add_option("--lr", br.spec.learning_rate)->capture_default_str();
  b->add_option("--seed", br.spec.seed)->capture_default_str();
  b->add_option("--out", br.out, "Branch file (default branch_<attr>.grft)");
  b->add_option("--log", br.log, "Per-epoch JSON lines log");

  GraftArgs gr;
  auto* g = app.add_subcommand("graft", "Combine a trunk and branch files into one composite model");
  g->add_option("--trunk", gr.trunk)->required();
  g->add_option("--branch", gr.branches, "Branch file (repeatable)")->required();
  g->add_option("--out", gr.out)->required();
  g->add_flag("--allow-fingerprint-override", gr.allow_override);

  MineArgs mi;
  auto* m = app.add_subcommand("mine", "Prune easy negatives from a 2-class manifest");
  m->add_option("--trunk", mi.trunk)->required();
  m->add_option("--manifest", mi.manifest)->required();
  m->add_option("--k", mi.params.k)->capture_default_str();
  m->add_option("--signature-size", mi.params.signature_size)->capture_default_str();
  m->add_option("--keep", mi.params.keep_fraction, "Fraction of clusters kept whole")->capture_default_str();
  m->add_option("--retain", mi.params.far_retain_rate, "Sampling rate for the other clusters")
      ->capture_default_str();
  m->add_option("--seed", mi.params.seed)->capture_default_str();
  m->add_option("--out", mi.out, "Pruned manifest")->required();
  m->add_option("--report", mi.report, "Per-cluster JSON report");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "ROC/AUC and threshold metrics on test splits");
  e->add_option("--model", ev.model, "Composite model file")->required();
  e->add_option("--manifest", ev.manifests, "Manifest (repeatable)")->required();
  e->add_option("--criterion", ev.criterion, "youden | accuracy | f1")->capture_default_str();
  e->add_option("--out", ev.out, "JSON report");
  e->add_option("--table", ev.table, "Text table");
  e->add_option("--roc", ev.roc, "ROC points as CSV");
  e->add_option("--top-k", ev.top_k, "Count false positives among the top K scores (0 = positive count)");

  ServeArgs sv;
  auto* v = app.add_subcommand("serve", "Serve a trunk and its branches over TCP");
  v->add_option("--trunk", sv.trunk)->required();
  v->add_option("--branches", sv.branches, "Directory of branch files");
  v->add_option("--host", sv.host)->capture_default_str();
  v->add_option("--port", sv.port)->capture_default_str();
  v->add_flag("--allow-fingerprint-override", sv.allow_override);

  RegisterArgs rg;
  auto* r = app.add_subcommand("register", "Hot-register a branch file with a running server");
  r->add_option("--branch", rg.branch)->required();
  r->add_option("--host", rg.host)->capture_default_str();
  r->add_option("--port", rg.port)->capture_default_str();
  r->add_flag("--replace", rg.replace, "Swap an existing branch of the same attribute");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*s) return run_synth(synth);
    if (*p) return run_pretrain(pre);
    if (*b) return run_branch(br);
    if (*g) return run_graft(gr);
    if (*m) return run_mine(mi);
    if (*e) return run_eval(ev);
    if (*v) return run_serve(sv);
    if (*r) return run_register(rg);
  } catch (const Error& err) {
    std::cerr << "error (" << to_string(err.code()) << "): " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}

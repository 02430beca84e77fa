// prefcodec: command-line driver for the preference-optimization lab.
//
// Configuration precedence: built-in defaults < --config file < flags.
// Every subcommand writes <out>/<command>.resolved.ini next to its outputs.

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "prefcodec/align_methods.hpp"
#include "prefcodec/binio.hpp"
#include "prefcodec/checkpoint.hpp"
#include "prefcodec/config.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/eval.hpp"
#include "prefcodec/metrics_log.hpp"
#include "prefcodec/preference_data.hpp"
#include "prefcodec/self_improve.hpp"

namespace fs = std::filesystem;
using namespace prefcodec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Exclusive ownership of the output directory for the life of the process.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError(dir.string() + " is in use by another prefcodec process");
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string config_path;
  std::string out;
};

struct Paths {
  std::string world, policy, nar, data, reward, baseline, iterate_dir;
};

fs::path pick(const std::string& flag, const fs::path& fallback) { return flag.empty() ? fallback : fs::path(flag); }

void require_file(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw IoError(path.string() + " does not exist (" + hint + ")");
}

class Runner {
 public:
  Runner(const Globals& g, const std::string& command) : command_(command) {
    if (!g.config_path.empty()) config_ = load_config(g.config_path);
    if (g.seed) config_.seed = *g.seed;
    if (g.workers) config_.workers = *g.workers;
    if (!g.out.empty()) config_.out = g.out;
  }

  ExperimentConfig& config() { return config_; }
  const fs::path& out() const { return config_.out; }

  // Resolves and validates the config, takes the lock, writes the snapshot.
  void start() {
    config_.resolve();
    config_.validate();
    lock_.emplace(config_.out);
    write_text(config_.out / (command_ + ".resolved.ini"), config_to_ini(config_));
  }

  World world(const Paths& p) const {
    const fs::path path = pick(p.world, out() / "world.bin");
    require_file(path, "run `prefcodec world gen` first");
    World w = World::load(path);
    if (!(w.config() == config_.world))
      std::cerr << "note: using the world stored in " << path << " (differs from the configured world)\n";
    return w;
  }
  ArModel policy(const Paths& p) const {
    const fs::path path = pick(p.policy, out() / "sft.ckpt");
    require_file(path, "run `prefcodec sft` first");
    return load_ar_model(path);
  }
  NarModel nar(const Paths& p) const {
    const fs::path path = pick(p.nar, out() / "nar.ckpt");
    require_file(path, "run `prefcodec nar train` first");
    return load_nar_model(path);
  }

 private:
  std::string command_;
  ExperimentConfig config_;
  std::optional<DirLock> lock_;
};

// ---- subcommands ---------------------------------------------------------------------

void cmd_world_gen(Runner& r) {
  r.start();
  World w(r.config().world);
  w.save(r.out() / "world.bin");
  std::cout << "world " << w.hash() << " -> " << (r.out() / "world.bin").string() << "\n";
}

void cmd_sft(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  const World w = r.world(p);
  const auto corpus = sample_corpus(w, c.sft_n, c.data_seed);
  ArConfig ac = c.ar;
  ArModel model(ac);
  MetricsLog log(r.out() / "sft_log.jsonl");
  TrainOptions o = sft_options(c);
  o.log = &log;
  const auto examples = sft_examples(corpus);
  const TrainReport rep = sft_train(model, examples, o);
  save_model(r.out() / "sft.ckpt", model);
  std::cout << "sft: " << rep.steps << " steps, final epoch loss "
            << (rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back()) << " -> " << (r.out() / "sft.ckpt").string()
            << "\n";
}

void cmd_nar_train(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  const World w = r.world(p);
  const auto corpus = sample_corpus(w, c.sft_n, c.data_seed);
  NarModel model(c.nar);
  MetricsLog log(r.out() / "nar_log.jsonl");
  NarTrainOptions o = nar_options(c);
  o.log = &log;
  const auto items = nar_items_from_utterances(c.nar, corpus);
  const NarTrainReport rep = nar_train(model, items, o);
  save_model(r.out() / "nar.ckpt", model);
  std::cout << "nar: " << rep.steps << " steps, final epoch loss "
            << (rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back()) << " -> " << (r.out() / "nar.ckpt").string()
            << "\n";
}

void cmd_prefs_build(Runner& r, const Paths& p, int iteration, std::uint64_t first_index, bool verify) {
  r.start();
  const auto& c = r.config();
  const World w = r.world(p);
  const ArModel policy = r.policy(p);
  PrefBuildOptions o;
  o.temperature = c.build_temperature;
  o.workers = c.workers;
  o.first_index = first_index;
  const PreferenceDataset d = build_pref_dataset(w, policy, c.pref_n, iteration, c.data_seed, o);
  const fs::path path = pick(p.data, r.out() / "prefs.jsonl");
  save_dataset(path, d);
  std::cout << "prefs: " << d.size() << " triples (" << d.header.degenerate << " degenerate) -> " << path.string()
            << "\n";
  if (verify) {
    const NarModel nar = r.nar(p);
    const int m = std::min<int>(c.verify_m, static_cast<int>(d.size()));
    const VerifyResult v = oracle_verify(w, nar, d, m, c.eval.seed, c.workers);
    nlohmann::json j = {{"judged", v.judged}, {"golden_win", v.golden_win}, {"tie", v.tie}, {"golden_lose", v.golden_lose}};
    write_text(r.out() / "verify.json", j.dump(2) + "\n");
    std::cout << "verify: golden win " << v.golden_win << "% tie " << v.tie << "% lose " << v.golden_lose << "%\n";
  }
}

void cmd_rm_train(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  const ArModel policy = r.policy(p);
  const fs::path data_path = pick(p.data, r.out() / "prefs.jsonl");
  require_file(data_path, "run `prefcodec prefs build` first");
  const PreferenceDataset d = load_dataset(data_path);
  MetricsLog log(r.out() / "rm_log.jsonl");
  AlignConfig a = c.align;
  a.log = &log;
  RmReport rep;
  const ArModel rm = rm_train(policy, d, a, &rep);
  const fs::path path = pick(p.reward, r.out() / "reward.ckpt");
  save_model(path, rm);
  std::cout << "rm: " << rep.steps << " steps, held-out pairwise accuracy " << rep.heldout_accuracy << " on "
            << rep.heldout << " pairs -> " << path.string() << "\n";
}

void cmd_align(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  ArModel policy = r.policy(p);
  const fs::path data_path = pick(p.data, r.out() / "prefs.jsonl");
  require_file(data_path, "run `prefcodec prefs build` first");
  const PreferenceDataset d = load_dataset(data_path);
  const std::string name = align_method_name(c.align.method);
  const fs::path dir = r.out() / ("align_" + name);
  fs::create_directories(dir);
  MetricsLog log(dir / "log.jsonl");
  AlignConfig a = c.align;
  a.log = &log;
  switch (a.method) {
    case AlignMethod::kDpo: dpo_train(policy, d, a); break;
    case AlignMethod::kCoh: coh_train(policy, d, a); break;
    case AlignMethod::kContinueSft: continue_sft(policy, d, a); break;
    case AlignMethod::kPpo:
    case AlignMethod::kBon: {
      ArModel rm = p.reward.empty() ? rm_train(policy, d, a) : load_ar_model(p.reward);
      save_model(dir / "reward.ckpt", rm);
      if (a.method == AlignMethod::kPpo) {
        std::vector<PpoPrompt> prompts;
        for (const auto& t : d.triples) prompts.push_back({t.text});
        ppo_train(policy, rm, prompts, a);
      }
      break;
    }
  }
  save_model(dir / "policy.ckpt", policy);
  std::cout << "align " << name << " -> " << (dir / "policy.ckpt").string() << "\n";
}

void cmd_iterate(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  IterationPlan plan;
  plan.iterations = c.iterations;
  plan.n = c.pref_n;
  plan.align = c.align;
  plan.world_path = pick(p.world, r.out() / "world.bin");
  plan.policy_path = pick(p.policy, r.out() / "sft.ckpt");
  plan.nar_path = pick(p.nar, r.out() / "nar.ckpt");
  require_file(plan.world_path, "run `prefcodec world gen` first");
  require_file(plan.policy_path, "run `prefcodec sft` first");
  require_file(plan.nar_path, "run `prefcodec nar train` first");
  plan.out_dir = pick(p.iterate_dir, r.out() / ("iterate_" + align_method_name(c.align.method)));
  plan.base_seed = c.data_seed;
  plan.build.temperature = c.build_temperature;
  plan.eval_n = c.eval_n;
  plan.prompt_len = c.nar.prompt_len;
  plan.snapshot = c.eval;
  const auto records = run_iterations(plan);
  for (const auto& rec : records) {
    std::cout << "iter " << rec.iteration << " " << rec.status << " data " << rec.dataset_size;
    if (rec.summary.contains("ter_mean"))
      std::cout << " TER " << rec.summary["ter_mean"].get<double>() << " SIM " << rec.summary["sim_mean"].get<double>();
    std::cout << "\n";
  }
}

void cmd_eval(Runner& r, const Paths& p, const std::string& name) {
  r.start();
  const auto& c = r.config();
  const World w = r.world(p);
  const NarModel nar = r.nar(p);
  const ArModel policy = r.policy(p);
  const auto items = build_eval_set(w, c.eval_n, c.nar.prompt_len);

  RunReport report;
  SnapshotSummary snap;
  std::optional<ArModel> rm;
  if (!p.reward.empty()) rm = load_ar_model(p.reward);
  if (rm) {
    const int n = c.align.bon_n;
    const double temp = c.eval.temperature;
    Generator gen = [&](const EvalItem& item, std::uint64_t seed) {
      return bon_select(policy, *rm, item.text, n, seed, temp).y;
    };
    snap = snapshot_eval(w, nar, items, gen, policy, Control::kNone, c.eval);
  } else {
    snap = snapshot_eval(w, nar, items, policy, c.eval);
  }
  report.models.push_back(model_summary(name, snap));
  report.scatter.push_back({name, snap.scatter});

  std::vector<TokenSeq> synthetic;
  score_generation(w, nar, items, policy_generator(policy, Control::kNone, c.eval.temperature),
                   mix64(c.eval.seed, 0), c.workers, &synthetic);
  report.reconstruction = reconstruction_experiment(w, nar, items, synthetic, c.eval.seed, c.workers);

  if (!p.baseline.empty()) {
    const ArModel base = load_ar_model(p.baseline);
    const SnapshotSummary bs = snapshot_eval(w, nar, items, base, c.eval);
    report.models.push_back(model_summary("baseline", bs));
    report.winrates.push_back({name, "baseline", snapshot_win_rate(snap, bs)});
  }
  report.extra = {{"policy_hash", content_hash(serialize_model(policy))}, {"world_hash", w.hash()},
                  {"eval_n", c.eval_n}, {"runs", c.eval.runs}};
  const fs::path dir = r.out() / "eval";
  emit_report(report, dir);
  std::cout << name << ": TER " << snap.ter_mean << " (sd " << snap.ter_sd << ") SIM " << snap.sim_mean << " KL-gap "
            << snap.kl_gap << " rep-gap " << snap.rep_gap << " -> " << dir.string() << "\n";
}

void cmd_report(Runner& r, const Paths& p) {
  r.start();
  const auto& c = r.config();
  const fs::path dir = pick(p.iterate_dir, r.out() / ("iterate_" + align_method_name(c.align.method)));
  require_file(dir / "ledger.jsonl", "run `prefcodec iterate` first");
  const fs::path base_path = dir / "baseline.json";
  require_file(base_path, "the iteration run did not evaluate");
  const SnapshotSummary base = snapshot_from_json(nlohmann::json::parse(read_text(base_path)));

  RunReport report;
  report.models.push_back(model_summary("SFT", base));
  report.scatter.push_back({"SFT", base.scatter});
  nlohmann::json ledger = nlohmann::json::array();
  int t = 0;
  for (const auto& rec : read_ledger(dir / "ledger.jsonl")) {
    if (rec.status != "ok" || rec.iteration != t) continue;
    const auto metrics = nlohmann::json::parse(read_text(dir / ("iter_" + std::to_string(t)) / "metrics.json"));
    if (!metrics.contains("snapshot")) throw IoError("iteration " + std::to_string(t) + " has no evaluation");
    const SnapshotSummary s = snapshot_from_json(metrics.at("snapshot"));
    const std::string name = "Iter" + std::to_string(t + 1);
    report.models.push_back(model_summary(name, s));
    report.scatter.push_back({name, s.scatter});
    report.winrates.push_back({name, "SFT", snapshot_win_rate(s, base)});
    ledger.push_back(to_json(rec));
    ++t;
  }
  report.extra = {{"method", align_method_name(c.align.method)}, {"ledger", ledger}};
  const fs::path out = r.out() / "report";
  emit_report(report, out);
  std::cout << "report: " << report.models.size() << " rows -> " << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefcodec: preference-optimization lab for codec language models"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Globals g;
  app.add_option("--seed", g.seed, "Master seed; unset seeds derive from it (default 1)");
  app.add_option("--config", g.config_path, "INI config file (flags override it)")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory (default: run)");
  app.add_option("--workers", g.workers, "Worker threads; results do not depend on it (default 1)")
      ->check(CLI::PositiveNumber);

  Paths paths;
  auto add_paths = [&](CLI::App* sub, bool world, bool policy, bool nar, bool data, bool reward) {
    if (world) sub->add_option("--world", paths.world, "World file (default <out>/world.bin)");
    if (policy) sub->add_option("--policy", paths.policy, "Policy checkpoint (default <out>/sft.ckpt)");
    if (nar) sub->add_option("--nar", paths.nar, "NAR checkpoint (default <out>/nar.ckpt)");
    if (data) sub->add_option("--data", paths.data, "Preference dataset (default <out>/prefs.jsonl)");
    if (reward) sub->add_option("--reward", paths.reward, "Reward model checkpoint");
  };

  auto* world = app.add_subcommand("world", "World operations");
  world->require_subcommand(1);
  auto* world_gen = world->add_subcommand("gen", "Generate the oracle world -> <out>/world.bin");

  auto* sft = app.add_subcommand("sft", "Supervised training of the AR policy -> <out>/sft.ckpt");
  add_paths(sft, true, false, false, false, false);

  auto* nar = app.add_subcommand("nar", "NAR model operations");
  nar->require_subcommand(1);
  auto* nar_train_cmd = nar->add_subcommand("train", "Train the NAR model -> <out>/nar.ckpt");
  add_paths(nar_train_cmd, true, false, false, false, false);

  int iteration = 0;
  std::uint64_t first_index = 0;
  bool verify = false;
  std::optional<int> pref_n;
  auto* prefs = app.add_subcommand("prefs", "Preference data operations");
  prefs->require_subcommand(1);
  auto* prefs_build = prefs->add_subcommand("build", "Build golden-vs-synthetic triples -> <out>/prefs.jsonl");
  add_paths(prefs_build, true, true, true, true, false);
  prefs_build->add_option("--iteration", iteration, "Iteration tag")->capture_default_str();
  prefs_build->add_option("--first-index", first_index, "First pool index")->capture_default_str();
  prefs_build->add_option("-N,--n", pref_n, "Triples to build (default data.pref_n)");
  prefs_build->add_flag("--verify", verify, "Also judge a sample with the oracle (-> <out>/verify.json)");

  std::string method;
  auto* align = app.add_subcommand("align", "Align a policy -> <out>/align_<method>/");
  add_paths(align, false, true, false, true, true);
  align->add_option("--method", method, "coh, dpo, ppo, bon or continue-sft (default align.method)")
      ->check(CLI::IsMember({"coh", "dpo", "ppo", "bon", "continue-sft"}));

  auto* rm = app.add_subcommand("rm", "Reward model operations");
  rm->require_subcommand(1);
  auto* rm_train_cmd = rm->add_subcommand("train", "Train a reward model -> <out>/reward.ckpt");
  add_paths(rm_train_cmd, false, true, false, true, true);

  std::optional<int> iterations;
  auto* iterate = app.add_subcommand("iterate", "Iterated self-improvement -> <out>/iterate_<method>/");
  add_paths(iterate, true, true, true, false, false);
  iterate->add_option("--method", method, "Align method (default align.method)")
      ->check(CLI::IsMember({"coh", "dpo", "ppo", "bon", "continue-sft"}));
  iterate->add_option("-T,--iterations", iterations, "Iterations (default iterate.iterations)");
  iterate->add_option("-N,--n", pref_n, "Fresh triples per iteration (default data.pref_n)");
  iterate->add_option("--dir", paths.iterate_dir, "Iteration directory");

  std::string eval_name = "policy";
  auto* eval = app.add_subcommand("eval", "Evaluate a policy -> <out>/eval/");
  add_paths(eval, true, true, true, false, true);
  eval->add_option("--name", eval_name, "Model name in the report")->capture_default_str();
  eval->add_option("--baseline", paths.baseline, "Baseline policy for win rates");

  auto* report = app.add_subcommand("report", "Tabulate an iteration run -> <out>/report/");
  report->add_option("--method", method, "Align method of the run (default align.method)")
      ->check(CLI::IsMember({"coh", "dpo", "ppo", "bon", "continue-sft"}));
  report->add_option("--dir", paths.iterate_dir, "Iteration directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\n";
    app.exit(e);
    return kExitUsage;
  }

  try {
    auto apply = [&](Runner& r) {
      if (!method.empty()) r.config().align.method = parse_align_method(method);
      if (pref_n) r.config().pref_n = *pref_n;
      if (iterations) r.config().iterations = *iterations;
    };
    if (world_gen->parsed()) {
      Runner r(g, "world_gen");
      apply(r);
      cmd_world_gen(r);
    } else if (sft->parsed()) {
      Runner r(g, "sft");
      apply(r);
      cmd_sft(r, paths);
    } else if (nar_train_cmd->parsed()) {
      Runner r(g, "nar_train");
      apply(r);
      cmd_nar_train(r, paths);
    } else if (prefs_build->parsed()) {
      Runner r(g, "prefs_build");
      apply(r);
      cmd_prefs_build(r, paths, iteration, first_index, verify);
    } else if (align->parsed()) {
      Runner r(g, "align");
      apply(r);
      cmd_align(r, paths);
    } else if (rm_train_cmd->parsed()) {
      Runner r(g, "rm_train");
      apply(r);
      cmd_rm_train(r, paths);
    } else if (iterate->parsed()) {
      Runner r(g, "iterate");
      apply(r);
      cmd_iterate(r, paths);
    } else if (eval->parsed()) {
      Runner r(g, "eval");
      apply(r);
      cmd_eval(r, paths, eval_name);
    } else if (report->parsed()) {
      Runner r(g, "report");
      apply(r);
      cmd_report(r, paths);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

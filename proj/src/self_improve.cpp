#include "prefcodec/self_improve.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "prefcodec/binio.hpp"
#include "prefcodec/checkpoint.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

using nlohmann::json;

// ---- snapshot evaluation -------------------------------------------------------

namespace {

void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  sd = 0.0;
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

}  // namespace

SnapshotSummary snapshot_eval(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                              const Generator& generate, const ArModel& scorer, Control control,
                              const SnapshotOptions& options) {
  if (options.runs < 1) throw ConfigError("snapshot runs must be >= 1");
  if (items.size() < 3) throw StatisticsError("snapshot evaluation needs at least 3 items");
  SnapshotSummary s;
  s.runs = options.runs;
  std::vector<double> ter(options.runs), sim(options.runs), rep(options.runs), rep_se(options.runs);
  for (int r = 0; r < options.runs; ++r) {
    const std::uint64_t run_seed = mix64(options.seed, static_cast<std::uint64_t>(r));
    std::vector<TokenSeq> outputs;
    auto scores = score_generation(world, nar, items, generate, run_seed, options.workers, &outputs);
    ter[r] = sim[r] = 0.0;
    for (const Score& sc : scores) {
      ter[r] += sc.ter;
      sim[r] += sc.sim;
    }
    ter[r] /= static_cast<double>(scores.size());
    sim[r] /= static_cast<double>(scores.size());
    GapReport gap = rep_gap(scorer, items, outputs, run_seed, options.workers);
    rep[r] = gap.centroid_distance;
    rep_se[r] = gap.se;
    if (r == 0) s.scatter = std::move(gap);
    s.item_scores.push_back(std::move(scores));
  }
  mean_sd(ter, s.ter_mean, s.ter_sd);
  mean_sd(sim, s.sim_mean, s.sim_sd);
  double unused = 0.0;
  mean_sd(rep, s.rep_gap, unused);
  mean_sd(rep_se, s.rep_se, unused);
  const KlGap kl = kl_gap(world, scorer, items, control, options.seed, options.workers);
  s.kl_gap = kl.mean;
  s.kl_se = kl.se;
  return s;
}

SnapshotSummary snapshot_eval(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                              const ArModel& policy, const SnapshotOptions& options) {
  return snapshot_eval(world, nar, items, policy_generator(policy, Control::kNone, options.temperature), policy,
                       Control::kNone, options);
}

WinRate snapshot_win_rate(const SnapshotSummary& a, const SnapshotSummary& b) {
  if (a.item_scores.size() != b.item_scores.size()) throw ShapeError("snapshots differ in run count");
  std::vector<Score> xa, xb;
  for (std::size_t r = 0; r < a.item_scores.size(); ++r) {
    if (a.item_scores[r].size() != b.item_scores[r].size()) throw ShapeError("snapshots differ in item count");
    xa.insert(xa.end(), a.item_scores[r].begin(), a.item_scores[r].end());
    xb.insert(xb.end(), b.item_scores[r].begin(), b.item_scores[r].end());
  }
  return win_rate(xa, xb);
}

ModelSummary model_summary(const std::string& name, const SnapshotSummary& s) {
  return {name, s.ter_mean, s.ter_sd, s.sim_mean, s.sim_sd, s.kl_gap, s.kl_se, s.rep_gap, s.rep_se, s.runs};
}

json to_json(const SnapshotSummary& s) {
  json scores = json::array();
  for (const auto& run : s.item_scores) {
    json ter = json::array(), sim = json::array();
    for (const Score& sc : run) {
      ter.push_back(sc.ter);
      sim.push_back(sc.sim);
    }
    scores.push_back({{"ter", std::move(ter)}, {"sim", std::move(sim)}});
  }
  json pts = json::array();
  for (std::size_t i = 0; i < s.scatter.coords.size(); ++i)
    pts.push_back({s.scatter.labels[i], s.scatter.coords[i][0], s.scatter.coords[i][1]});
  return {{"ter_mean", s.ter_mean},
          {"ter_sd", s.ter_sd},
          {"sim_mean", s.sim_mean},
          {"sim_sd", s.sim_sd},
          {"kl_gap", s.kl_gap},
          {"kl_se", s.kl_se},
          {"rep_gap", s.rep_gap},
          {"rep_se", s.rep_se},
          {"runs", s.runs},
          {"item_scores", std::move(scores)},
          {"scatter",
           {{"centroid_distance", s.scatter.centroid_distance},
            {"se", s.scatter.se},
            {"skipped", s.scatter.skipped},
            {"points", std::move(pts)}}}};
}

SnapshotSummary snapshot_from_json(const json& j) {
  SnapshotSummary s;
  s.ter_mean = j.at("ter_mean").get<double>();
  s.ter_sd = j.at("ter_sd").get<double>();
  s.sim_mean = j.at("sim_mean").get<double>();
  s.sim_sd = j.at("sim_sd").get<double>();
  s.kl_gap = j.at("kl_gap").get<double>();
  s.kl_se = j.at("kl_se").get<double>();
  s.rep_gap = j.at("rep_gap").get<double>();
  s.rep_se = j.at("rep_se").get<double>();
  s.runs = j.at("runs").get<int>();
  for (const auto& run : j.at("item_scores")) {
    const auto ter = run.at("ter").get<std::vector<double>>();
    const auto sim = run.at("sim").get<std::vector<double>>();
    if (ter.size() != sim.size()) throw ShapeError("snapshot item score arrays differ in length");
    std::vector<Score> v(ter.size());
    for (std::size_t i = 0; i < ter.size(); ++i) v[i] = {ter[i], sim[i]};
    s.item_scores.push_back(std::move(v));
  }
  const auto& sc = j.at("scatter");
  s.scatter.centroid_distance = sc.at("centroid_distance").get<double>();
  s.scatter.se = sc.at("se").get<double>();
  s.scatter.skipped = sc.at("skipped").get<int>();
  for (const auto& p : sc.at("points")) {
    s.scatter.labels.push_back(p.at(0).get<int>());
    s.scatter.coords.push_back({p.at(1).get<double>(), p.at(2).get<double>()});
  }
  return s;
}

bool SnapshotSummary::operator==(const SnapshotSummary& o) const { return to_json(*this) == to_json(o); }

// ---- ledger ----------------------------------------------------------------------

json to_json(const IterationRecord& r) {
  return {{"iteration", r.iteration}, {"status", r.status},       {"method", r.method},
          {"dataset_hash", r.dataset_hash}, {"pre_hash", r.pre_hash}, {"post_hash", r.post_hash},
          {"reward_hash", r.reward_hash}, {"dataset_size", r.dataset_size}, {"summary", r.summary},
          {"error", r.error}};
}

IterationRecord iteration_record_from_json(const json& j) {
  IterationRecord r;
  r.iteration = j.at("iteration").get<int>();
  r.status = j.at("status").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.dataset_hash = j.at("dataset_hash").get<std::string>();
  r.pre_hash = j.at("pre_hash").get<std::string>();
  r.post_hash = j.at("post_hash").get<std::string>();
  r.reward_hash = j.at("reward_hash").get<std::string>();
  r.dataset_size = j.at("dataset_size").get<int>();
  r.summary = j.at("summary");
  r.error = j.at("error").get<std::string>();
  return r;
}

std::vector<IterationRecord> read_ledger(const std::filesystem::path& path) {
  std::vector<IterationRecord> out;
  if (!std::filesystem::exists(path)) return out;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(iteration_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      // A torn final line from an interrupted append is dropped.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::uint64_t iteration_seed(std::uint64_t align_seed, int t) { return mix64(align_seed, static_cast<std::uint64_t>(t)); }

void IterationPlan::validate() const {
  if (iterations < 1) throw ConfigError("iterations (T) must be >= 1");
  if (n < 1) throw ConfigError("pref_n (N) must be >= 1");
  if (eval_n < 3 && evaluate) throw ConfigError("eval_n must be >= 3");
  align.validate();
  if (out_dir.empty()) throw ConfigError("output directory is required");
}

// ---- driver -----------------------------------------------------------------------

namespace {

void write_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Model>
void save_atomic(const std::filesystem::path& path, const Model& model) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  save_model(tmp, model);
  std::filesystem::rename(tmp, path);
}

void append_record(const std::filesystem::path& ledger, const IterationRecord& r) {
  std::ofstream out(ledger, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to " + ledger.string());
  out << to_json(r).dump() << "\n";
  out.flush();
  if (!out) throw IoError("append failed: " + ledger.string());
}

// Cuts a torn final line left by an interrupted append, so the next record
// starts on a fresh line.
void trim_torn_tail(const std::filesystem::path& ledger) {
  if (!std::filesystem::exists(ledger)) return;
  const std::string text = read_text(ledger);
  if (text.empty() || text.back() == '\n') return;
  const auto cut = text.rfind('\n');
  std::filesystem::resize_file(ledger, cut == std::string::npos ? 0 : cut + 1);
}

json plan_json(const IterationPlan& p, const std::string& world_hash, const std::string& policy_hash) {
  const AlignConfig& a = p.align;
  // The iteration count is left out so a finished run can be extended.
  return {{"n", p.n},
          {"method", align_method_name(a.method)},
          {"align",
           {{"lr", a.lr}, {"batch", a.batch}, {"epochs", a.epochs}, {"steps", a.steps}, {"grad_clip", a.grad_clip},
            {"seed", a.seed}, {"dpo_beta", a.dpo_beta}, {"rm_lr", a.rm_lr}, {"rm_epochs", a.rm_epochs},
            {"rm_batch", a.rm_batch}, {"rm_holdout", a.rm_holdout}, {"ppo_kl_beta", a.ppo_kl_beta},
            {"ppo_clip", a.ppo_clip}, {"ppo_lr", a.ppo_lr}, {"ppo_steps", a.ppo_steps}, {"ppo_batch", a.ppo_batch},
            {"ppo_epochs", a.ppo_epochs}, {"ppo_baseline_decay", a.ppo_baseline_decay}, {"kl_abort", a.kl_abort},
            {"temperature", a.temperature}, {"bon_n", a.bon_n}}},
          {"world_hash", world_hash},
          {"policy_hash", policy_hash},
          {"base_seed", p.base_seed},
          {"build_temperature", p.build.temperature},
          {"first_index", p.build.first_index},
          {"evaluate", p.evaluate},
          {"eval_n", p.eval_n},
          {"prompt_len", p.prompt_len},
          {"snapshot", {{"runs", p.snapshot.runs}, {"temperature", p.snapshot.temperature}, {"seed", p.snapshot.seed}}}};
}

std::filesystem::path iter_dir(const IterationPlan& plan, int t) { return plan.out_dir / ("iter_" + std::to_string(t)); }

}  // namespace

SnapshotSummary baseline_snapshot(const IterationPlan& plan) {
  const auto path = plan.out_dir / "baseline.json";
  if (std::filesystem::exists(path)) return snapshot_from_json(json::parse(read_text(path)));
  const World world = World::load(plan.world_path);
  const ArModel policy = load_ar_model(plan.policy_path);
  const NarModel nar = load_nar_model(plan.nar_path);
  const auto items = build_eval_set(world, plan.eval_n, plan.prompt_len);
  SnapshotSummary s = snapshot_eval(world, nar, items, policy, plan.snapshot);
  std::filesystem::create_directories(plan.out_dir);
  write_atomic(path, to_json(s).dump() + "\n");
  return s;
}

std::vector<IterationRecord> run_iterations(const IterationPlan& plan) {
  plan.validate();
  std::filesystem::create_directories(plan.out_dir);
  const World world = World::load(plan.world_path);
  const std::string world_hash = world.hash();
  const std::string initial_hash = file_hash(plan.policy_path);

  const json pj = plan_json(plan, world_hash, initial_hash);
  const auto plan_path = plan.out_dir / "plan.json";
  if (std::filesystem::exists(plan_path)) {
    if (json::parse(read_text(plan_path)) != pj)
      throw ProvenanceError(plan.out_dir.string() + " holds a run with a different plan");
  } else {
    write_atomic(plan_path, pj.dump(2) + "\n");
  }

  const auto ledger_path = plan.out_dir / "ledger.jsonl";
  std::vector<IterationRecord> done;  // last ok record per iteration, in order
  for (const auto& r : read_ledger(ledger_path)) {
    if (r.status != "ok") continue;
    if (r.iteration != static_cast<int>(done.size()))
      throw ProvenanceError("ledger records out of order at iteration " + std::to_string(r.iteration));
    done.push_back(r);
  }
  trim_torn_tail(ledger_path);

  // Verify completed iterations still match their files.
  std::string current_hash = initial_hash;
  for (const auto& r : done) {
    const auto dir = iter_dir(plan, r.iteration);
    if (r.pre_hash != current_hash)
      throw ProvenanceError("iteration " + std::to_string(r.iteration) + " started from a different policy");
    if (file_hash(dir / "policy.ckpt") != r.post_hash || file_hash(dir / "dataset.jsonl") != r.dataset_hash)
      throw ProvenanceError("files of iteration " + std::to_string(r.iteration) + " no longer match the ledger");
    current_hash = r.post_hash;
  }
  if (static_cast<int>(done.size()) >= plan.iterations) {
    done.resize(plan.iterations);
    return done;
  }

  ArModel policy = done.empty() ? load_ar_model(plan.policy_path)
                                : load_ar_model(iter_dir(plan, done.back().iteration) / "policy.ckpt");
  std::optional<PreferenceDataset> previous;
  if (!done.empty()) previous = load_dataset(iter_dir(plan, done.back().iteration) / "dataset.jsonl");

  std::optional<NarModel> nar;
  std::vector<EvalItem> items;
  std::optional<SnapshotSummary> baseline;
  if (plan.evaluate) {
    nar = load_nar_model(plan.nar_path);
    items = build_eval_set(world, plan.eval_n, plan.prompt_len);
    baseline = baseline_snapshot(plan);
  }

  for (int t = static_cast<int>(done.size()); t < plan.iterations; ++t) {
    IterationRecord rec;
    rec.iteration = t;
    rec.method = align_method_name(plan.align.method);
    rec.pre_hash = current_hash;
    const auto dir = iter_dir(plan, t);
    try {
      std::filesystem::create_directories(dir);
      PrefBuildOptions build = plan.build;
      build.first_index = plan.build.first_index + static_cast<std::uint64_t>(t) * static_cast<std::uint64_t>(plan.n);
      build.workers = plan.align.workers;
      if (plan.align.method == AlignMethod::kCoh) build.control = Control::kGood;
      const PreferenceDataset fresh = build_pref_dataset(world, policy, plan.n, t, plan.base_seed, build);
      PreferenceDataset merged = merge_iterations(previous, fresh);
      save_dataset(dir / "dataset.jsonl.tmp", merged);
      std::filesystem::rename(dir / "dataset.jsonl.tmp", dir / "dataset.jsonl");
      rec.dataset_hash = file_hash(dir / "dataset.jsonl");
      rec.dataset_size = static_cast<int>(merged.size());

      AlignConfig cfg = plan.align;
      cfg.seed = iteration_seed(plan.align.seed, t);
      json train = json::object();
      std::optional<ArModel> reward;
      switch (cfg.method) {
        case AlignMethod::kDpo: {
          const DpoReport r = dpo_train(policy, merged, cfg);
          train = {{"steps", r.steps}, {"final_loss", r.step_loss.empty() ? 0.0 : r.step_loss.back()}};
          break;
        }
        case AlignMethod::kCoh: {
          const TrainReport r = coh_train(policy, merged, cfg);
          train = {{"steps", r.steps}, {"final_loss", r.step_loss.empty() ? 0.0 : r.step_loss.back()}};
          break;
        }
        case AlignMethod::kContinueSft: {
          const TrainReport r = continue_sft(policy, merged, cfg);
          train = {{"steps", r.steps}, {"final_loss", r.step_loss.empty() ? 0.0 : r.step_loss.back()}};
          break;
        }
        case AlignMethod::kPpo:
        case AlignMethod::kBon: {
          RmReport rr;
          reward = rm_train(policy, merged, cfg, &rr);
          train = {{"rm_steps", rr.steps}, {"rm_heldout_accuracy", rr.heldout_accuracy}};
          if (cfg.method == AlignMethod::kPpo) {
            std::vector<PpoPrompt> prompts;
            for (const auto& tr : merged.triples) prompts.push_back({tr.text});
            const PpoReport r = ppo_train(policy, *reward, prompts, cfg);
            train["steps"] = r.steps;
            train["final_reward"] = r.mean_reward.empty() ? 0.0 : r.mean_reward.back();
            train["final_kl"] = r.mean_kl.empty() ? 0.0 : r.mean_kl.back();
          }
          save_atomic(dir / "reward.ckpt", *reward);
          rec.reward_hash = file_hash(dir / "reward.ckpt");
          break;
        }
      }
      save_atomic(dir / "policy.ckpt", policy);
      rec.post_hash = file_hash(dir / "policy.ckpt");

      json metrics = {{"iteration", t}, {"method", rec.method}, {"dataset_size", rec.dataset_size},
                      {"degenerate", fresh.header.degenerate}, {"train", train}};
      json summary = {{"train", train}};
      if (plan.evaluate) {
        SnapshotSummary snap;
        if (cfg.method == AlignMethod::kBon) {
          const ArModel& rm = *reward;
          const int n = cfg.bon_n;
          const double temp = plan.snapshot.temperature;
          Generator gen = [&policy, &rm, n, temp](const EvalItem& item, std::uint64_t seed) {
            return bon_select(policy, rm, item.text, n, seed, temp).y;
          };
          snap = snapshot_eval(world, *nar, items, gen, policy, Control::kNone, plan.snapshot);
        } else if (cfg.method == AlignMethod::kCoh) {
          // Chain-of-hindsight policies are sampled with GOOD prepended.
          snap = snapshot_eval(world, *nar, items, policy_generator(policy, Control::kGood, plan.snapshot.temperature),
                               policy, Control::kGood, plan.snapshot);
        } else {
          snap = snapshot_eval(world, *nar, items, policy, plan.snapshot);
        }
        const WinRate wr = snapshot_win_rate(snap, *baseline);
        const json wj = {{"win", wr.win}, {"tie", wr.tie}, {"lose", wr.lose}};
        metrics["snapshot"] = to_json(snap);
        metrics["winrate_vs_baseline"] = wj;
        summary = {{"ter_mean", snap.ter_mean}, {"ter_sd", snap.ter_sd},   {"sim_mean", snap.sim_mean},
                   {"sim_sd", snap.sim_sd},     {"kl_gap", snap.kl_gap},   {"kl_se", snap.kl_se},
                   {"rep_gap", snap.rep_gap},   {"rep_se", snap.rep_se},   {"winrate_vs_baseline", wj},
                   {"train", train}};
      }
      write_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
      rec.summary = std::move(summary);
      rec.status = "ok";
      append_record(ledger_path, rec);
      current_hash = rec.post_hash;
      previous = std::move(merged);
      done.push_back(rec);
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      append_record(ledger_path, rec);
      throw;
    }
  }
  return done;
}

}  // namespace prefcodec

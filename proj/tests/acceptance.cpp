// Acceptance suite: one PASS/FAIL line per criterion.
//
// Environment:
//   PREFCODEC_ACCEPT_SCALE    desk (default) or smoke (tiny world; plumbing only)
//   PREFCODEC_ACCEPT_DIR      work directory (default ./acceptance_work)
//   PREFCODEC_ACCEPT_REUSE    1 keeps artifacts from an earlier run with the same settings
//   PREFCODEC_ACCEPT_ONLY     comma-separated criterion numbers to run
//   PREFCODEC_ACCEPT_WORKERS  worker threads (default 1)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "grad_check.hpp"
#include "prefcodec/align_methods.hpp"
#include "prefcodec/binio.hpp"
#include "prefcodec/checkpoint.hpp"
#include "prefcodec/config.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/eval.hpp"
#include "prefcodec/rng.hpp"
#include "prefcodec/self_improve.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace prefcodec;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

// ---- micro-model oracles (criteria 1-3) -------------------------------------------

ArConfig micro_ar(double init_std) {
  ArConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.max_context = 16;
  c.v_text = 2;
  c.k_ar = 4;
  c.l_text = 2;
  c.l_ar = 2;
  c.init_std = init_std;
  c.param_seed = 17;
  return c;
}

std::vector<PreferenceTriple> micro_triples() {
  return {{0, 0, 1, {0, 1}, {1, 3}, {2, 2}}, {0, 1, 2, {1, 1}, {0}, {3, 1}}, {0, 0, 3, {1, 0}, {2, 0}, {1}}};
}

Outcome gradient_oracle() {
  std::string detail;
  bool ok = true;
  auto check = [&](const char* name, std::span<double> params, std::span<const double> grad,
                   const std::function<double()>& loss) {
    const auto r = testing::grad_check(params, grad, loss);
    ok = ok && r.max_rel_err < 1e-4;
    detail += std::string(detail.empty() ? "" : ", ") + name + " " + sci(r.max_rel_err);
  };
  const auto triples = micro_triples();
  {
    ArModel m(micro_ar(0.3));
    const std::vector<SftExample> batch{{{0, 1}, {1, 3}, Control::kNone}, {{1, 1}, {2}, Control::kGood}};
    const auto probes = sft_probes(m.config(), batch);
    const auto lg = loss_and_grad(m, probes, nll_objective());
    check("sft", m.params(), lg.grad, [&] { return loss_and_grad(m, probes, nll_objective()).loss; });
  }
  {
    ArModel m(micro_ar(0.3));
    const auto probes = coh_probes(m.config(), triples);
    const auto lg = loss_and_grad(m, probes, coh_objective());
    check("coh", m.params(), lg.grad, [&] { return loss_and_grad(m, probes, coh_objective()).loss; });
  }
  {
    ArConfig rc = micro_ar(0.3);
    rc.param_seed = 18;
    const ArModel reference(rc);
    ArModel m(micro_ar(0.3));
    const auto ref = reference_scores(reference, triples);
    const auto probes = pair_probes(m.config(), triples, false);
    const auto obj = dpo_objective(ref, 1.0);
    const auto lg = loss_and_grad(m, probes, obj);
    check("dpo", m.params(), lg.grad, [&] { return loss_and_grad(m, probes, obj).loss; });
  }
  {
    ArModel rm = ArModel(micro_ar(0.3)).with_reward_head();
    Rng rng(5);
    for (double& w : rm.tensor("reward.w")) w = 0.5 * rng.normal();
    const auto probes = pair_probes(rm.config(), triples, true);
    const auto lg = loss_and_grad(rm, probes, rm_objective());
    check("rm", rm.params(), lg.grad, [&] { return loss_and_grad(rm, probes, rm_objective()).loss; });
  }
  {
    NarConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ffn = 32;
    c.prompt_len = 2;
    c.num_layers = 3;
    c.k_ar = 4;
    c.k_nar = 5;
    c.max_length = 6;
    c.init_std = 0.3;
    c.param_seed = 4;
    NarModel m(c);
    NarItem item;
    item.prompt.layers = {{1, 2}, {0, 4}, {3, 3}};
    item.target.layers = {{0, 1, 2, 3, 1, 0}, {4, 0, 1, 2, 0, 4}, {1, 1, 2, 3, 1, 1}};
    std::vector<NarExample> batch;
    for (std::uint64_t s = 0; s < 3; ++s) batch.push_back(nar_mask_item(c, item, s));
    const auto lg = nar_loss_and_grad(m, batch);
    check("nar", m.params(), lg.grad, [&] { return nar_loss_and_grad(m, batch).loss; });
  }
  return {ok, "max rel err " + detail};
}

Outcome loss_identities() {
  const auto triples = micro_triples();
  const ArModel policy(micro_ar(0.3));
  const double dpo = dpo_loss(policy, policy, triples, 1.0);
  const ArModel rm = policy.with_reward_head();  // zero head: equal scores
  const double rml = rm_loss(rm, triples);
  const double ln2 = std::log(2.0);
  const bool ok = std::abs(dpo - ln2) < 1e-9 && std::abs(rml - ln2) < 1e-9;
  return {ok, "|dpo-ln2| " + sci(std::abs(dpo - ln2)) + ", |rm-ln2| " + sci(std::abs(rml - ln2))};
}

Outcome normalization() {
  // seq_logprob: every full-vocabulary continuation of length l_ar + 1.
  const ArModel m(micro_ar(0.3));
  const auto& c = m.config();
  const int v = c.vocab_size();
  FramedSequence seq = frame_sequence(c, std::vector<int>{1, 0}, std::vector<int>{2, 3}, Control::kNone);
  double policy_total = 0.0;
  for (int a = 0; a < v; ++a)
    for (int b = 0; b < v; ++b)
      for (int e = 0; e < v; ++e) {
        seq.tokens[seq.first_target + 1] = a;
        seq.tokens[seq.first_target + 2] = b;
        seq.tokens[seq.first_target + 3] = e;
        const auto lp = target_logprobs(m, seq);
        policy_total += std::exp(std::accumulate(lp.begin(), lp.end(), 0.0));
      }
  // golden_logprob: K=4, one text symbol expanded to length 2.
  WorldConfig wc;
  wc.v_text = 2;
  wc.l_text = 1;
  wc.k_ar = 4;
  wc.k_nar = 4;
  wc.num_layers = 2;
  wc.expansion = 2;
  wc.speakers = 2;
  wc.d_emb = 4;
  wc.nar_palette = 2;
  wc.world_seed = 3;
  const World w(wc);
  double worst = 0.0;
  for (int s = 0; s < 2; ++s)
    for (int x = 0; x < 2; ++x) {
      double total = 0.0;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) total += std::exp(w.golden_logprob(s, std::vector<int>{x}, std::vector<int>{a, b}));
      worst = std::max(worst, std::abs(total - 1.0));
    }
  const bool ok = std::abs(policy_total - 1.0) < 1e-8 && worst < 1e-8;
  return {ok, "policy |sum-1| " + sci(std::abs(policy_total - 1.0)) + ", oracle max |sum-1| " + sci(worst)};
}

// ---- desk pipeline ------------------------------------------------------------

struct Settings {
  std::string scale;
  ExperimentConfig config;
  int bon_runs = 2;     // snapshot runs for the best-of-N comparison
  int small_d_model = 32;
};

Settings make_settings(const std::string& scale, int workers) {
  Settings s;
  s.scale = scale;
  ExperimentConfig& c = s.config;
  c.seed = 1;
  c.workers = workers;
  if (scale == "smoke") {
    c.world.v_text = 4;
    c.world.l_text = 3;
    c.world.k_ar = 8;
    c.world.k_nar = 8;
    c.world.speakers = 2;
    c.ar.d_model = 16;
    c.ar.d_ffn = 32;
    c.nar.d_model = 16;
    c.nar.d_ffn = 32;
    c.nar.prompt_len = 2;
    c.sft_n = 200;
    c.pref_n = 20;
    c.eval_n = 30;
    c.sft_epochs = 2;
    c.nar_epochs = 1;
    c.eval.runs = 2;
    c.verify_m = 20;
    c.align.ppo_steps = 4;
    c.align.ppo_batch = 8;
    s.bon_runs = 1;
    s.small_d_model = 8;
  } else if (scale != "desk") {
    throw ConfigError("PREFCODEC_ACCEPT_SCALE must be desk or smoke");
  }
  c.resolve();
  c.validate();
  return s;
}

class Lab {
 public:
  Lab(Settings settings, fs::path dir, bool reuse) : s_(std::move(settings)), dir_(std::move(dir)) {
    const std::string ini = config_to_ini(s_.config);
    const auto stamp = dir_ / "settings.ini";
    if (!reuse || !fs::exists(stamp) || read_text(stamp) != ini) {
      fs::remove_all(dir_);
      fs::create_directories(dir_);
      write_text(stamp, ini);
    }
  }

  const ExperimentConfig& config() const { return s_.config; }
  const Settings& settings() const { return s_; }
  const fs::path& dir() const { return dir_; }

  const World& world() {
    if (!world_) {
      world_.emplace(s_.config.world);
      if (!fs::exists(dir_ / "world.bin")) world_->save(dir_ / "world.bin");
    }
    return *world_;
  }

  const std::vector<Utterance>& corpus() {
    if (!corpus_) corpus_ = sample_corpus(world(), s_.config.sft_n, s_.config.data_seed);
    return *corpus_;
  }

  // SFT policy for an AR config; cached on disk by file name.
  ArModel sft_policy(const ArConfig& ac, const std::string& file) {
    const auto path = dir_ / file;
    if (fs::exists(path)) return load_ar_model(path);
    const auto t0 = std::chrono::steady_clock::now();
    ArModel m(ac);
    const auto examples = sft_examples(corpus());
    sft_train(m, examples, sft_options(s_.config));
    save_model(path, m);
    note("trained " + file + " in " + fmt(seconds_since(t0), 1) + " s");
    return m;
  }

  const ArModel& sft() {
    if (!sft_) sft_ = sft_policy(s_.config.ar, "sft.ckpt");
    return *sft_;
  }

  const NarModel& nar() {
    if (!nar_) {
      const auto path = dir_ / "nar.ckpt";
      if (fs::exists(path)) {
        nar_ = load_nar_model(path);
      } else {
        const auto t0 = std::chrono::steady_clock::now();
        NarModel m(s_.config.nar);
        const auto items = nar_items_from_utterances(s_.config.nar, corpus());
        nar_train(m, items, nar_options(s_.config));
        save_model(path, m);
        note("trained nar.ckpt in " + fmt(seconds_since(t0), 1) + " s");
        nar_ = std::move(m);
      }
    }
    return *nar_;
  }

  const std::vector<EvalItem>& items() {
    if (!items_) items_ = build_eval_set(world(), s_.config.eval_n, s_.config.nar.prompt_len);
    return *items_;
  }

  IterationPlan plan(const std::string& name, const fs::path& policy, int iterations, int n) {
    world();
    nar();
    IterationPlan p;
    p.iterations = iterations;
    p.n = n;
    p.align = s_.config.align;
    p.align.method = AlignMethod::kDpo;
    p.align.workers = s_.config.workers;
    p.world_path = dir_ / "world.bin";
    p.policy_path = policy;
    p.nar_path = dir_ / "nar.ckpt";
    p.out_dir = dir_ / name;
    p.base_seed = s_.config.data_seed;
    p.build.temperature = s_.config.build_temperature;
    p.eval_n = s_.config.eval_n;
    p.prompt_len = s_.config.nar.prompt_len;
    p.snapshot = s_.config.eval;
    return p;
  }

  // DPO iterations from the SFT policy at the desk configuration.
  const std::vector<IterationRecord>& dpo_run() {
    if (!dpo_) {
      sft();
      const auto t0 = std::chrono::steady_clock::now();
      dpo_plan_ = plan("iterate_dpo", dir_ / "sft.ckpt", s_.config.iterations, s_.config.pref_n);
      dpo_ = run_iterations(*dpo_plan_);
      note("dpo iterations ready in " + fmt(seconds_since(t0), 1) + " s");
    }
    return *dpo_;
  }

  SnapshotSummary baseline() {
    dpo_run();
    return baseline_snapshot(*dpo_plan_);
  }

  SnapshotSummary iteration_snapshot(int t) {
    dpo_run();
    const json m = json::parse(read_text(dpo_plan_->out_dir / ("iter_" + std::to_string(t)) / "metrics.json"));
    return snapshot_from_json(m.at("snapshot"));
  }

  PreferenceDataset first_dataset() {
    dpo_run();
    return load_dataset(dpo_plan_->out_dir / "iter_0" / "dataset.jsonl");
  }

  AlignConfig first_align_config() {
    AlignConfig c = s_.config.align;
    c.method = AlignMethod::kDpo;
    c.workers = s_.config.workers;
    c.seed = iteration_seed(s_.config.align.seed, 0);
    return c;
  }

  // Snapshot cached as JSON under the work directory.
  SnapshotSummary cached_snapshot(const std::string& name, const std::function<SnapshotSummary()>& make) {
    const auto path = dir_ / ("snapshot_" + name + ".json");
    if (fs::exists(path)) return snapshot_from_json(json::parse(read_text(path)));
    const auto t0 = std::chrono::steady_clock::now();
    SnapshotSummary s = make();
    write_text(path, to_json(s).dump() + "\n");
    note("evaluated " + name + " in " + fmt(seconds_since(t0), 1) + " s");
    return s;
  }

  ArModel cached_policy(const std::string& file, const std::function<ArModel()>& make) {
    const auto path = dir_ / file;
    if (fs::exists(path)) return load_ar_model(path);
    ArModel m = make();
    save_model(path, m);
    return m;
  }

  SnapshotSummary snapshot_of(const ArModel& policy) {
    return snapshot_eval(world(), nar(), items(), policy, s_.config.eval);
  }

  ArModel reward_model() {
    return cached_policy("reward.ckpt", [&] { return rm_train(sft(), first_dataset(), first_align_config()); });
  }

  // Records a named summary for the report written at the end.
  void record(const std::string& name, const SnapshotSummary& s) { summaries_[name] = s; }

  void write_report() {
    if (summaries_.empty()) return;
    RunReport r;
    const std::vector<std::string> order{"SFT", "Iter1", "Iter2", "Iter3", "continue-SFT", "DPO-N2500", "SFT-small",
                                         "Iter1-small"};
    std::set<std::string> placed;
    for (const auto& name : order)
      if (summaries_.count(name)) {
        r.models.push_back(model_summary(name, summaries_.at(name)));
        placed.insert(name);
      }
    for (const auto& [name, s] : summaries_)
      if (!placed.count(name)) r.models.push_back(model_summary(name, s));
    if (summaries_.count("SFT")) {
      for (const auto& [name, s] : summaries_)
        if (name != "SFT" && s.runs == summaries_.at("SFT").runs)
          r.winrates.push_back({name, "SFT", snapshot_win_rate(s, summaries_.at("SFT"))});
      r.scatter.push_back({"SFT", summaries_.at("SFT").scatter});
    }
    if (summaries_.count("Iter1")) r.scatter.push_back({"Iter1", summaries_.at("Iter1").scatter});
    r.reconstruction = reconstruction_;
    r.extra = extra_;
    emit_report(r, dir_ / "report");
  }

  std::vector<ReconRow> reconstruction_;
  json extra_ = json::object();

 private:
  Settings s_;
  fs::path dir_;
  std::optional<World> world_;
  std::optional<std::vector<Utterance>> corpus_;
  std::optional<ArModel> sft_;
  std::optional<NarModel> nar_;
  std::optional<std::vector<EvalItem>> items_;
  std::optional<IterationPlan> dpo_plan_;
  std::optional<std::vector<IterationRecord>> dpo_;
  std::map<std::string, SnapshotSummary> summaries_;
};

std::string ter_sim(const SnapshotSummary& s) { return "TER " + fmt(s.ter_mean) + " SIM " + fmt(s.sim_mean); }

std::string rates(const WinRate& w) { return fmt(w.win, 1) + "/" + fmt(w.tie, 1) + "/" + fmt(w.lose, 1); }

// First `runs` runs of a snapshot: runs share seeds by index, so this is the
// snapshot that evaluation with fewer runs would have produced for TER/SIM.
SnapshotSummary first_runs(SnapshotSummary s, int runs) {
  s.item_scores.resize(static_cast<std::size_t>(std::min<int>(runs, static_cast<int>(s.item_scores.size()))));
  s.runs = static_cast<int>(s.item_scores.size());
  return s;
}

Outcome gap_exists(Lab& lab) {
  const auto sft = lab.baseline();
  lab.record("SFT", sft);
  std::vector<TokenSeq> synthetic;
  score_generation(lab.world(), lab.nar(), lab.items(), policy_generator(lab.sft(), Control::kNone, 1.0),
                   lab.config().eval.seed, lab.config().workers, &synthetic);
  const auto rows = reconstruction_experiment(lab.world(), lab.nar(), lab.items(), synthetic, lab.config().eval.seed,
                                              lab.config().workers);
  lab.reconstruction_ = rows;
  const bool a = sft.kl_gap > 5 * sft.kl_se;
  const bool b = sft.rep_gap > 5 * sft.rep_se;
  const bool c = rows[1].ter < rows[2].ter && rows[1].sim > rows[2].sim;
  return {a && b && c, "kl " + fmt(sft.kl_gap) + " (se " + fmt(sft.kl_se) + "), rep " + fmt(sft.rep_gap) + " (se " +
                           fmt(sft.rep_se) + "), golden-input " + fmt(rows[1].ter) + "/" + fmt(rows[1].sim) +
                           " vs synthetic-input " + fmt(rows[2].ter) + "/" + fmt(rows[2].sim)};
}

Outcome preference_validity(Lab& lab) {
  const auto data = lab.first_dataset();
  const int m = std::min<int>(lab.config().verify_m, static_cast<int>(data.size()));
  const auto v = oracle_verify(lab.world(), lab.nar(), data, m, lab.config().eval.seed, lab.config().workers);
  lab.extra_["oracle_verify"] = {{"golden_win", v.golden_win}, {"tie", v.tie}, {"golden_lose", v.golden_lose}, {"m", m}};
  return {v.golden_win > v.golden_lose, "golden win/tie/lose " + fmt(v.golden_win, 1) + "/" + fmt(v.tie, 1) + "/" +
                                            fmt(v.golden_lose, 1) + " over " + std::to_string(m)};
}

Outcome improves(const SnapshotSummary& sft, const SnapshotSummary& iter1, const std::string& prefix) {
  const WinRate w = snapshot_win_rate(iter1, sft);
  const bool ok = iter1.ter_mean <= sft.ter_mean && iter1.sim_mean >= sft.sim_mean && w.win > w.lose;
  return {ok, prefix + "SFT " + ter_sim(sft) + " -> Iter1 " + ter_sim(iter1) + ", win/tie/lose " + rates(w)};
}

Outcome alignment_improves(Lab& lab) {
  const auto sft = lab.baseline();
  const auto it1 = lab.iteration_snapshot(0);
  lab.record("SFT", sft);
  lab.record("Iter1", it1);
  return improves(sft, it1, "");
}

Outcome iterative(Lab& lab) {
  const int t_max = lab.config().iterations;
  std::vector<double> ter;
  for (int t = 0; t < t_max; ++t) {
    const auto s = lab.iteration_snapshot(t);
    lab.record("Iter" + std::to_string(t + 1), s);
    ter.push_back(s.ter_mean);
  }
  bool ok = ter.size() >= 2 && ter.back() < ter.front();
  std::string detail = "TER";
  for (std::size_t t = 0; t < ter.size(); ++t) {
    if (t > 0) ok = ok && ter[t] <= ter[t - 1] * 1.02;
    detail += " " + fmt(ter[t]);
  }
  return {ok, detail};
}

Outcome gap_bridging(Lab& lab) {
  const auto sft = lab.baseline();
  std::vector<SnapshotSummary> it;
  for (int t = 0; t < lab.config().iterations; ++t) it.push_back(lab.iteration_snapshot(t));
  bool ok = it.front().rep_gap < sft.rep_gap && it.front().kl_gap < sft.kl_gap;
  std::string rep = "rep " + fmt(sft.rep_gap), kl = "kl " + fmt(sft.kl_gap);
  for (const auto& s : it) {
    ok = ok && s.rep_gap <= it.front().rep_gap * 1.05 && s.kl_gap <= it.front().kl_gap * 1.05;
    rep += " " + fmt(s.rep_gap);
    kl += " " + fmt(s.kl_gap);
  }
  return {ok, rep + "; " + kl + " (SFT, Iter1..)"};
}

Outcome continue_sft_control(Lab& lab) {
  const auto it1 = lab.iteration_snapshot(0);
  const ArModel control = lab.cached_policy("continue_sft.ckpt", [&] {
    ArModel m = lab.sft();
    continue_sft(m, lab.first_dataset(), lab.first_align_config());
    return m;
  });
  const auto cs = lab.cached_snapshot("continue_sft", [&] { return lab.snapshot_of(control); });
  lab.record("continue-SFT", cs);
  return {it1.ter_mean < cs.ter_mean, "DPO-Iter1 TER " + fmt(it1.ter_mean) + " vs continue-SFT TER " + fmt(cs.ter_mean)};
}

Outcome bon(Lab& lab) {
  const ArModel rm = lab.reward_model();
  const ArModel& policy = lab.sft();
  const auto& items = lab.items();
  // Selection: the chosen candidate carries the pool maximum.
  bool selection_ok = true;
  const std::size_t probe = std::min<std::size_t>(items.size(), 200);
  for (std::size_t j = 0; j < probe; ++j) {
    const auto r = bon_select(policy, rm, items[j].text, 8, mix64(77, j));
    const double best = *std::max_element(r.rewards.begin(), r.rewards.end());
    selection_ok = selection_ok && r.rewards[r.index] == best &&
                   std::find(r.rewards.begin(), r.rewards.end(), best) - r.rewards.begin() == r.index &&
                   (r.y.empty() || reward_score(rm, items[j].text, r.y) == best);
  }
  SnapshotOptions o = lab.config().eval;
  o.runs = lab.settings().bon_runs;
  auto snap = [&](int n) {
    return lab.cached_snapshot("bon" + std::to_string(n), [&] {
      const double temp = o.temperature;
      Generator gen = [&policy, &rm, n, temp](const EvalItem& item, std::uint64_t seed) {
        return bon_select(policy, rm, item.text, n, seed, temp).y;
      };
      return snapshot_eval(lab.world(), lab.nar(), items, gen, policy, Control::kNone, o);
    });
  };
  const auto b1 = snap(1), b8 = snap(8);
  const auto sft = first_runs(lab.baseline(), o.runs);
  const WinRate w1 = snapshot_win_rate(b1, sft), w8 = snapshot_win_rate(b8, sft);
  lab.extra_["bon"] = {{"n1", {{"ter", b1.ter_mean}, {"sim", b1.sim_mean}, {"win", w1.win}, {"lose", w1.lose}}},
                       {"n8", {{"ter", b8.ter_mean}, {"sim", b8.sim_mean}, {"win", w8.win}, {"lose", w8.lose}}}};
  return {selection_ok && w8.win >= w1.win,
          std::string("selection ") + (selection_ok ? "exact" : "WRONG") + " on " + std::to_string(probe) +
              " items; win/tie/lose vs SFT N=1 " + rates(w1) + ", N=8 " + rates(w8)};
}

Outcome ppo(Lab& lab) {
  const ArModel rm = lab.reward_model();
  const auto data = lab.first_dataset();
  std::vector<PpoPrompt> prompts;
  for (const auto& t : data.triples) prompts.push_back({t.text});
  ArModel policy = lab.sft();
  const auto t0 = std::chrono::steady_clock::now();
  const PpoReport r = ppo_train(policy, rm, prompts, lab.first_align_config());
  note("ppo " + std::to_string(r.steps) + " steps in " + fmt(seconds_since(t0), 1) + " s");
  const std::size_t n = r.mean_reward.size();
  if (n < 2) return {false, "fewer than 2 PPO steps"};
  const std::size_t window = std::max<std::size_t>(1, n / 5);
  const double first = std::accumulate(r.mean_reward.begin(), r.mean_reward.begin() + window, 0.0) / window;
  const double last = std::accumulate(r.mean_reward.end() - window, r.mean_reward.end(), 0.0) / window;
  const double max_kl = *std::max_element(r.mean_kl.begin(), r.mean_kl.end());
  lab.extra_["ppo"] = {{"mean_reward", r.mean_reward}, {"mean_kl", r.mean_kl}};
  return {last > first && max_kl < 10.0, "reward first " + std::to_string(window) + " steps " + fmt(first) +
                                             " -> last " + fmt(last) + ", max KL " + fmt(max_kl) + " nats"};
}

Outcome data_size(Lab& lab) {
  const auto sft = lab.baseline();
  const auto it1 = lab.iteration_snapshot(0);
  const int big = 5 * lab.config().pref_n;
  const ArModel m = lab.cached_policy("dpo_n" + std::to_string(big) + ".ckpt", [&] {
    ArModel p = lab.sft();
    const auto data = merge_iterations(
        std::nullopt, build_pref_dataset(lab.world(), p, big, 0, lab.config().data_seed, PrefBuildOptions{}));
    dpo_train(p, data, lab.first_align_config());
    return p;
  });
  const auto s = lab.cached_snapshot("dpo_n" + std::to_string(big), [&] { return lab.snapshot_of(m); });
  lab.record("DPO-N" + std::to_string(big), s);
  const bool ok = it1.ter_mean < sft.ter_mean && s.ter_mean <= it1.ter_mean * 1.05;
  return {ok, "TER N=0 " + fmt(sft.ter_mean) + ", N=" + std::to_string(lab.config().pref_n) + " " +
                  fmt(it1.ter_mean) + ", N=" + std::to_string(big) + " " + fmt(s.ter_mean)};
}

Outcome small_model(Lab& lab) {
  ArConfig ac = lab.config().ar;
  ac.d_model = lab.settings().small_d_model;
  ac.d_ffn = 4 * ac.d_model;
  const ArModel sft = lab.sft_policy(ac, "sft_small.ckpt");
  const auto plan = lab.plan("iterate_dpo_small", lab.dir() / "sft_small.ckpt", 1, lab.config().pref_n);
  run_iterations(plan);
  const auto base = baseline_snapshot(plan);
  const auto it1 = snapshot_from_json(json::parse(read_text(plan.out_dir / "iter_0" / "metrics.json")).at("snapshot"));
  lab.record("SFT-small", base);
  lab.record("Iter1-small", it1);
  return improves(base, it1, "d_model " + std::to_string(ac.d_model) + ": ");
}

// Two independent runs of a small pipeline must agree bit for bit, and a
// killed-and-resumed iteration run must reproduce the uninterrupted ledger.
Outcome determinism(Lab& lab) {
  WorldConfig wc;
  wc.v_text = 4;
  wc.l_text = 3;
  wc.k_ar = 8;
  wc.k_nar = 8;
  wc.speakers = 2;
  wc.world_seed = 77;
  auto pipeline = [&](const fs::path& root, int iterations, bool crash) {
    fs::remove_all(root);
    fs::create_directories(root);
    const World w(wc);
    w.save(root / "world.bin");
    const auto corpus = sample_corpus(w, 120, 5);
    ArConfig ac = ArConfig::for_world(wc);
    ac.d_model = 16;
    ac.d_ffn = 32;
    ac.param_seed = 6;
    ArModel policy(ac);
    TrainOptions to;
    to.epochs = 2;
    to.seed = 7;
    sft_train(policy, sft_examples(corpus), to);
    save_model(root / "sft.ckpt", policy);
    NarConfig nc = NarConfig::for_world(wc);
    nc.d_model = 16;
    nc.d_ffn = 32;
    nc.prompt_len = 2;
    nc.param_seed = 8;
    NarModel nar(nc);
    NarTrainOptions no;
    no.epochs = 1;
    no.seed = 9;
    nar_train(nar, nar_items_from_utterances(nc, corpus), no);
    save_model(root / "nar.ckpt", nar);
    IterationPlan p;
    p.iterations = crash ? 1 : iterations;
    p.n = 12;
    p.align.seed = 10;
    p.align.batch = 4;
    p.world_path = root / "world.bin";
    p.policy_path = root / "sft.ckpt";
    p.nar_path = root / "nar.ckpt";
    p.out_dir = root / "iterate";
    p.base_seed = 5;
    p.eval_n = 8;
    p.prompt_len = 2;
    p.snapshot.runs = 2;
    run_iterations(p);
    if (crash) {
      std::ofstream(p.out_dir / "ledger.jsonl", std::ios::app) << "{\"iteration\": 1, \"stat";
      p.iterations = iterations;
      run_iterations(p);
    }
    RunReport r;
    r.models.push_back(model_summary("SFT", baseline_snapshot(p)));
    for (int t = 0; t < iterations; ++t) {
      const json m = json::parse(read_text(p.out_dir / ("iter_" + std::to_string(t)) / "metrics.json"));
      r.models.push_back(model_summary("Iter" + std::to_string(t + 1), snapshot_from_json(m.at("snapshot"))));
    }
    emit_report(r, root / "report");
  };
  const fs::path root = lab.dir() / "determinism";
  pipeline(root / "a", 2, false);
  pipeline(root / "b", 2, false);
  pipeline(root / "c", 2, true);
  std::vector<fs::path> files{"sft.ckpt", "nar.ckpt", "iterate/ledger.jsonl", "iterate/baseline.json"};
  for (int t = 0; t < 2; ++t)
    for (const char* f : {"policy.ckpt", "dataset.jsonl", "metrics.json"})
      files.push_back(fs::path("iterate") / ("iter_" + std::to_string(t)) / f);
  for (const char* f : {"metrics.json", "tables.csv", "scatter.csv", "winrate.csv"})
    files.push_back(fs::path("report") / f);
  int identical = 0;
  for (const auto& f : files) identical += file_hash(root / "a" / f) == file_hash(root / "b" / f);
  const bool resume = read_text(root / "a" / "iterate" / "ledger.jsonl") == read_text(root / "c" / "iterate" / "ledger.jsonl");
  return {identical == static_cast<int>(files.size()) && resume,
          std::to_string(identical) + "/" + std::to_string(files.size()) +
              " files bit-identical across runs; resumed ledger " + (resume ? "identical" : "DIFFERS")};
}

std::set<int> parse_only(const char* text) {
  std::set<int> out;
  if (!text) return out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.insert(std::stoi(part));
  return out;
}

}  // namespace

int main() {
  const char* scale_env = std::getenv("PREFCODEC_ACCEPT_SCALE");
  const char* dir_env = std::getenv("PREFCODEC_ACCEPT_DIR");
  const char* reuse_env = std::getenv("PREFCODEC_ACCEPT_REUSE");
  const char* workers_env = std::getenv("PREFCODEC_ACCEPT_WORKERS");
  const std::set<int> only = parse_only(std::getenv("PREFCODEC_ACCEPT_ONLY"));
  try {
    const Settings settings = make_settings(scale_env ? scale_env : "desk", workers_env ? std::atoi(workers_env) : 1);
    Lab lab(settings, dir_env ? fs::path(dir_env) : fs::path("acceptance_work"), reuse_env && std::string(reuse_env) == "1");
    std::printf("acceptance scale=%s dir=%s\n", settings.scale.c_str(), lab.dir().string().c_str());
    std::fflush(stdout);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient oracle", gradient_oracle},
        {"loss identities", loss_identities},
        {"normalization", normalization},
        {"gap exists after SFT", [&] { return gap_exists(lab); }},
        {"preference data validity", [&] { return preference_validity(lab); }},
        {"alignment improves generation", [&] { return alignment_improves(lab); }},
        {"iterative self-improvement", [&] { return iterative(lab); }},
        {"gap bridging", [&] { return gap_bridging(lab); }},
        {"continue-SFT control", [&] { return continue_sft_control(lab); }},
        {"best-of-N dominance and scaling", [&] { return bon(lab); }},
        {"PPO reward rises under the KL bound", [&] { return ppo(lab); }},
        {"data-size ablation", [&] { return data_size(lab); }},
        {"small-model sweep", [&] { return small_model(lab); }},
        {"determinism and resume", [&] { return determinism(lab); }},
    };
    int passed = 0, run = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
      const int number = static_cast<int>(i) + 1;
      if (!only.empty() && !only.count(number)) continue;
      ++run;
      const auto t0 = std::chrono::steady_clock::now();
      Outcome v;
      try {
        v = criteria[i].second();
      } catch (const std::exception& e) {
        v = {false, std::string("error: ") + e.what()};
      }
      passed += v.pass;
      std::printf("[%s] %2d %s: %s (%.0f s)\n", v.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                  v.detail.c_str(), seconds_since(t0));
      std::fflush(stdout);
    }
    lab.write_report();
    std::printf("acceptance: %d/%d criteria passed\n", passed, run);
    return passed == run ? 0 : 1;
  } catch (const std::exception& e) {
    std::printf("acceptance setup failed: %s\n", e.what());
    return 2;
  }
}

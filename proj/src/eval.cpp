#include "prefcodec/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "prefcodec/error.hpp"
#include "prefcodec/parallel.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

std::vector<EvalItem> build_eval_set(const World& world, int n, int prompt_len) {
  if (n < 0) throw ConfigError("eval_n must be non-negative");
  if (prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
  const auto& wc = world.config();
  const std::uint64_t base = Rng::named(wc.world_seed, "eval").key();
  std::vector<EvalItem> items(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    EvalItem& item = items[j];
    item.speaker = j % wc.speakers;
    item.seed = mix64(base, 2 * static_cast<std::uint64_t>(j));
    Utterance u = world.sample_utterance(item.speaker, item.seed);
    Utterance p = world.sample_utterance(item.speaker, mix64(base, 2 * static_cast<std::uint64_t>(j) + 1));
    item.text = std::move(u.text);
    item.golden = std::move(u.golden);
    item.prompt = prompt_segment(p, prompt_len);
  }
  return items;
}

double bootstrap_se(std::span<const double> values, std::uint64_t seed, int resamples) {
  const std::size_t n = values.size();
  if (n < 2) throw StatisticsError("bootstrap needs at least 2 values");
  Rng rng = Rng::named(seed, "bootstrap");
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    means[b] = s / static_cast<double>(n);
  }
  double mu = 0.0;
  for (double m : means) mu += m;
  mu /= resamples;
  double var = 0.0;
  for (double m : means) var += (m - mu) * (m - mu);
  return std::sqrt(var / (resamples - 1));
}

// ---- KL gap ----------------------------------------------------------------

namespace {

double item_kl(const World& world, const EvalItem& item, const std::function<std::vector<double>(int)>& logq) {
  const auto& y = item.golden.layers.at(0);
  const int r = world.config().expansion;
  const int k = world.config().k_ar;
  if (y.empty()) return 0.0;
  double total = 0.0;
  for (int i = 0; i < static_cast<int>(y.size()); ++i) {
    const int prev = i == 0 ? world.start_symbol() : y[i - 1];
    auto p = world.probs(item.speaker, item.text[i / r], prev);
    auto lp = world.log_probs(item.speaker, item.text[i / r], prev);
    const std::vector<double> q = logq(i);
    if (static_cast<int>(q.size()) != k) throw ShapeError("conditional row must have k_ar entries");
    double kl = 0.0;
    for (int t = 0; t < k; ++t) {
      if (p[t] > 0.0) kl += p[t] * (lp[t] - q[t]);
    }
    total += std::max(kl, 0.0);
  }
  return total / static_cast<double>(y.size());
}

KlGap finish_kl(std::vector<double> per_item, std::uint64_t seed) {
  KlGap out;
  out.per_item = std::move(per_item);
  if (out.per_item.empty()) throw StatisticsError("kl_gap needs at least one item");
  for (double v : out.per_item) out.mean += v;
  out.mean /= static_cast<double>(out.per_item.size());
  out.se = out.per_item.size() >= 2 ? bootstrap_se(out.per_item, mix64(seed, fnv1a64("kl"))) : 0.0;
  return out;
}

}  // namespace

KlGap kl_gap(const World& world, std::span<const EvalItem> items, const ConditionalFn& model, std::uint64_t seed) {
  std::vector<double> per_item(items.size());
  for (std::size_t j = 0; j < items.size(); ++j)
    per_item[j] = item_kl(world, items[j], [&](int i) { return model(j, i); });
  return finish_kl(std::move(per_item), seed);
}

KlGap kl_gap(const World& world, const ArModel& policy, std::span<const EvalItem> items, Control control,
             std::uint64_t seed, int workers) {
  const ArConfig& ac = policy.config();
  const int k = ac.k_ar;
  const int vocab = ac.vocab_size();
  std::vector<double> per_item(items.size());
  parallel_for(items.size(), workers, [&](std::size_t j) {
    const EvalItem& item = items[j];
    const FramedSequence seq = frame_sequence(ac, item.text, item.golden.layers.at(0), control);
    const std::vector<double> logits = forward_logits(policy, seq.tokens);
    per_item[j] = item_kl(world, item, [&](int i) {
      const double* row = logits.data() + static_cast<std::size_t>(seq.first_target + i) * vocab + ac.ar_token(0);
      double mx = row[0];
      for (int t = 1; t < k; ++t) mx = std::max(mx, row[t]);
      double z = 0.0;
      for (int t = 0; t < k; ++t) z += std::exp(row[t] - mx);
      const double lz = mx + std::log(z);
      std::vector<double> q(k);
      for (int t = 0; t < k; ++t) q[t] = row[t] - lz;
      return q;
    });
  });
  return finish_kl(std::move(per_item), seed);
}

// ---- representation gap ------------------------------------------------------

std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& points) {
  const Eigen::Index n = static_cast<Eigen::Index>(points.size());
  if (n == 0) return {};
  const Eigen::Index d = static_cast<Eigen::Index>(points.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(points[i].size()) != d) throw ShapeError("pca rows differ in width");
    for (Eigen::Index c = 0; c < d; ++c) x(i, c) = points[i][c];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  // Eigenvalues ascend; take the last two columns. Sign: largest-magnitude
  // component positive, so the projection is reproducible.
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n), {0.0, 0.0});
  for (int comp = 0; comp < 2 && comp < d; ++comp) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - comp);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = x * v;
    for (Eigen::Index i = 0; i < n; ++i) out[i][comp] = proj(i);
  }
  return out;
}

namespace {

double centroid_distance(const std::vector<std::vector<double>>& g, const std::vector<std::vector<double>>& s,
                         std::span<const std::size_t> pick) {
  const std::size_t d = g.front().size();
  std::vector<double> diff(d, 0.0);
  for (std::size_t i : pick)
    for (std::size_t c = 0; c < d; ++c) diff[c] += g[i][c] - s[i][c];
  double sq = 0.0;
  for (double v : diff) sq += v * v;
  return std::sqrt(sq) / static_cast<double>(pick.size());
}

}  // namespace

GapReport rep_gap(const ArModel& scorer, std::span<const EvalItem> items, std::span<const TokenSeq> synthetic,
                  std::uint64_t seed, int workers) {
  if (synthetic.size() != items.size()) throw ShapeError("rep_gap needs one synthetic response per item");
  std::vector<std::vector<double>> g(items.size()), s(items.size());
  parallel_for(items.size(), workers, [&](std::size_t j) {
    if (synthetic[j].empty() || items[j].golden.layers.at(0).empty()) return;
    g[j] = pooled_rep(scorer, items[j].text, items[j].golden.layers.at(0));
    s[j] = pooled_rep(scorer, items[j].text, synthetic[j]);
  });
  GapReport out;
  std::vector<std::vector<double>> gk, sk;
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (g[j].empty()) {
      ++out.skipped;
      continue;
    }
    gk.push_back(std::move(g[j]));
    sk.push_back(std::move(s[j]));
  }
  const std::size_t n = gk.size();
  if (n < 3) throw StatisticsError("rep_gap needs at least 3 items with non-empty responses");

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  out.centroid_distance = centroid_distance(gk, sk, all);

  Rng rng = Rng::named(seed, "rep_bootstrap");
  constexpr int kResamples = 200;
  std::vector<double> stats(kResamples);
  std::vector<std::size_t> pick(n);
  for (int b = 0; b < kResamples; ++b) {
    for (auto& p : pick) p = rng.below(n);
    stats[b] = centroid_distance(gk, sk, pick);
  }
  double mu = 0.0;
  for (double v : stats) mu += v;
  mu /= kResamples;
  double var = 0.0;
  for (double v : stats) var += (v - mu) * (v - mu);
  out.se = std::sqrt(var / (kResamples - 1));

  std::vector<std::vector<double>> pts;
  pts.reserve(2 * n);
  for (auto& v : gk) pts.push_back(std::move(v));
  for (auto& v : sk) pts.push_back(std::move(v));
  out.coords = pca_2d(pts);
  out.labels.assign(2 * n, 0);
  std::fill(out.labels.begin() + static_cast<std::ptrdiff_t>(n), out.labels.end(), 1);
  return out;
}

// ---- generation ----------------------------------------------------------------

Generator policy_generator(const ArModel& policy, Control control, double temperature) {
  return [&policy, control, temperature](const EvalItem& item, std::uint64_t seed) {
    return sample(policy, item.text, control, temperature, seed);
  };
}

std::vector<Score> score_generation(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                                    const Generator& generate, std::uint64_t seed, int workers,
                                    std::vector<TokenSeq>* outputs) {
  std::vector<Score> scores(items.size());
  if (outputs) outputs->assign(items.size(), {});
  parallel_for(items.size(), workers, [&](std::size_t j) {
    const EvalItem& item = items[j];
    const std::uint64_t s = mix64(seed, j);
    TokenSeq y = generate(item, s);
    const Reconstruction r = reconstruct(world, nar, item.prompt, y, item.text, item.speaker, mix64(s, 1));
    scores[j] = {r.ter, r.sim};
    if (outputs) (*outputs)[j] = std::move(y);
  });
  return scores;
}

WinRate win_rate(std::span<const Score> a, std::span<const Score> b) {
  if (a.size() != b.size()) throw ShapeError("win_rate needs paired scores");
  if (a.empty()) throw StatisticsError("win_rate needs at least one pair");
  std::size_t w = 0, t = 0, l = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    switch (oracle_judge(a[i], b[i])) {
      case Verdict::kWin: ++w; break;
      case Verdict::kTie: ++t; break;
      case Verdict::kLose: ++l; break;
    }
  }
  const double n = static_cast<double>(a.size());
  return {100.0 * w / n, 100.0 * t / n, 100.0 * l / n};
}

// ---- reconstruction -------------------------------------------------------------

std::vector<ReconRow> reconstruction_experiment(const World& world, const NarModel& nar, std::span<const EvalItem> items,
                                                std::span<const TokenSeq> synthetic, std::uint64_t seed,
                                                int workers) {
  if (synthetic.size() != items.size()) throw ShapeError("reconstruction needs one synthetic response per item");
  if (items.empty()) throw StatisticsError("reconstruction needs at least one item");
  std::vector<Score> truth(items.size()), gold(items.size()), synth(items.size());
  parallel_for(items.size(), workers, [&](std::size_t j) {
    const EvalItem& item = items[j];
    const auto& layer1 = item.golden.layers.at(0);
    truth[j] = {token_error_rate(world, item.speaker, item.text, layer1),
                speaker_similarity(world, item.speaker, item.golden)};
    const std::uint64_t s = mix64(seed, j);
    const Reconstruction g = reconstruct(world, nar, item.prompt, layer1, item.text, item.speaker, s);
    const Reconstruction y = reconstruct(world, nar, item.prompt, synthetic[j], item.text, item.speaker, s);
    gold[j] = {g.ter, g.sim};
    synth[j] = {y.ter, y.sim};
  });
  auto row = [&](const char* name, const std::vector<Score>& v) {
    ReconRow r{name, 0.0, 0.0};
    for (const Score& s : v) {
      r.ter += s.ter;
      r.sim += s.sim;
    }
    r.ter /= static_cast<double>(v.size());
    r.sim /= static_cast<double>(v.size());
    return r;
  };
  return {row("groundtruth", truth), row("golden-input", gold), row("synthetic-input", synth)};
}

// ---- reports -------------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

nlohmann::json to_json(const RunReport& report) {
  using nlohmann::json;
  json j = json::object();
  json models = json::array();
  for (const auto& m : report.models) {
    models.push_back({{"name", m.name}, {"ter_mean", m.ter_mean}, {"ter_sd", m.ter_sd}, {"sim_mean", m.sim_mean},
                      {"sim_sd", m.sim_sd}, {"kl_gap", m.kl_gap}, {"kl_se", m.kl_se}, {"rep_gap", m.rep_gap},
                      {"rep_se", m.rep_se}, {"runs", m.runs}});
  }
  j["models"] = std::move(models);
  json recon = json::array();
  for (const auto& r : report.reconstruction) recon.push_back({{"condition", r.condition}, {"ter", r.ter}, {"sim", r.sim}});
  j["reconstruction"] = std::move(recon);
  json wr = json::array();
  for (const auto& w : report.winrates)
    wr.push_back({{"model", w.model}, {"baseline", w.baseline}, {"win", w.rate.win}, {"tie", w.rate.tie},
                  {"lose", w.rate.lose}});
  j["winrates"] = std::move(wr);
  json sc = json::array();
  for (const auto& s : report.scatter) {
    json pts = json::array();
    for (std::size_t i = 0; i < s.gap.coords.size(); ++i)
      pts.push_back({s.gap.labels[i], s.gap.coords[i][0], s.gap.coords[i][1]});
    sc.push_back({{"model", s.model}, {"centroid_distance", s.gap.centroid_distance}, {"se", s.gap.se},
                  {"skipped", s.gap.skipped}, {"points", std::move(pts)}});
  }
  j["scatter"] = std::move(sc);
  j["extra"] = report.extra;
  return j;
}

RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  for (const auto& m : j.at("models")) {
    ModelSummary s;
    s.name = m.at("name").get<std::string>();
    s.ter_mean = m.at("ter_mean").get<double>();
    s.ter_sd = m.at("ter_sd").get<double>();
    s.sim_mean = m.at("sim_mean").get<double>();
    s.sim_sd = m.at("sim_sd").get<double>();
    s.kl_gap = m.at("kl_gap").get<double>();
    s.kl_se = m.at("kl_se").get<double>();
    s.rep_gap = m.at("rep_gap").get<double>();
    s.rep_se = m.at("rep_se").get<double>();
    s.runs = m.at("runs").get<int>();
    r.models.push_back(std::move(s));
  }
  for (const auto& x : j.at("reconstruction"))
    r.reconstruction.push_back({x.at("condition").get<std::string>(), x.at("ter").get<double>(), x.at("sim").get<double>()});
  for (const auto& x : j.at("winrates"))
    r.winrates.push_back({x.at("model").get<std::string>(), x.at("baseline").get<std::string>(),
                          {x.at("win").get<double>(), x.at("tie").get<double>(), x.at("lose").get<double>()}});
  for (const auto& x : j.at("scatter")) {
    ScatterSet s;
    s.model = x.at("model").get<std::string>();
    s.gap.centroid_distance = x.at("centroid_distance").get<double>();
    s.gap.se = x.at("se").get<double>();
    s.gap.skipped = x.at("skipped").get<int>();
    for (const auto& p : x.at("points")) {
      s.gap.labels.push_back(p.at(0).get<int>());
      s.gap.coords.push_back({p.at(1).get<double>(), p.at(2).get<double>()});
    }
    r.scatter.push_back(std::move(s));
  }
  if (j.contains("extra")) r.extra = j.at("extra");
  return r;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void emit_report(const RunReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  // nlohmann prints doubles with round-trip precision.
  write_text(out_dir / "metrics.json", to_json(report).dump(2) + "\n");

  const auto f = format_double;
  std::string tables = "table,name,ter_mean,ter_sd,sim_mean,sim_sd,kl_gap,kl_se,rep_gap,rep_se,runs\n";
  for (const auto& m : report.models) {
    tables += "model," + m.name + "," + f(m.ter_mean) + "," + f(m.ter_sd) + "," + f(m.sim_mean) + "," + f(m.sim_sd) +
              "," + f(m.kl_gap) + "," + f(m.kl_se) + "," + f(m.rep_gap) + "," + f(m.rep_se) + "," +
              std::to_string(m.runs) + "\n";
  }
  for (const auto& r : report.reconstruction)
    tables += "reconstruction," + r.condition + "," + f(r.ter) + ",," + f(r.sim) + ",,,,,,\n";
  write_text(out_dir / "tables.csv", tables);

  std::string scatter = "model,label,x,y\n";
  for (const auto& s : report.scatter) {
    for (std::size_t i = 0; i < s.gap.coords.size(); ++i) {
      scatter += s.model + "," + (s.gap.labels[i] == 0 ? "golden" : "synthetic") + "," + f(s.gap.coords[i][0]) + "," +
                 f(s.gap.coords[i][1]) + "\n";
    }
  }
  write_text(out_dir / "scatter.csv", scatter);

  std::string wr = "model,baseline,win,tie,lose\n";
  for (const auto& w : report.winrates)
    wr += w.model + "," + w.baseline + "," + f(w.rate.win) + "," + f(w.rate.tie) + "," + f(w.rate.lose) + "\n";
  write_text(out_dir / "winrate.csv", wr);
}

}  // namespace prefcodec

#include "prefcodec/preference_data.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"
#include "prefcodec/binio.hpp"
#include "prefcodec/checkpoint.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/parallel.hpp"
#include "prefcodec/rng.hpp"
#include "prefcodec/scoring.hpp"

namespace prefcodec {

using nlohmann::json;

PreferenceDataset build_pref_dataset(const World& world, const ArModel& policy, int n, int iteration,
                                     std::uint64_t base_seed, const PrefBuildOptions& options) {
  if (n < 1) throw ConfigError("preference data: N must be >= 1");
  if (iteration < 0) throw ConfigError("preference data: iteration must be >= 0");
  const int S = world.config().speakers;
  std::vector<std::optional<PreferenceTriple>> slots(n);
  parallel_for(static_cast<std::size_t>(n), options.workers, [&](std::size_t i) {
    PreferenceTriple t;
    t.iter = iteration;
    const std::uint64_t g = options.first_index + i;
    t.speaker = static_cast<int>(g % static_cast<std::uint64_t>(S));
    t.seed = mix64(base_seed, g);
    const auto u = world.sample_utterance(t.speaker, t.seed);
    t.text = u.text;
    t.y_g = u.golden.layers[0];
    const std::uint64_t sub = mix64(mix64(t.seed, fnv1a64("synthetic")), static_cast<std::uint64_t>(iteration));
    t.y_s = sample(policy, t.text, options.control, options.temperature, sub);
    if (t.y_s.empty()) t.y_s = sample(policy, t.text, options.control, options.temperature, mix64(sub, 1));
    if (!t.y_s.empty()) slots[i] = std::move(t);
  });
  PreferenceDataset d;
  d.header.world_hash = world.hash();
  d.header.policy_hash = content_hash(serialize_model(policy));
  d.header.base_seed = base_seed;
  d.header.first_index = options.first_index;
  d.header.iteration = iteration;
  d.header.requested = n;
  d.header.iterations = {iteration};
  for (auto& slot : slots) {
    if (slot) {
      d.triples.push_back(std::move(*slot));
    } else {
      ++d.header.degenerate;
    }
  }
  return d;
}

PreferenceDataset merge_iterations(const std::optional<PreferenceDataset>& previous, const PreferenceDataset& fresh) {
  if (!previous) return fresh;
  if (previous->header.world_hash != fresh.header.world_hash) {
    throw ProvenanceError("cannot merge preference data built from different worlds (" +
                          previous->header.world_hash + " vs " + fresh.header.world_hash + ")");
  }
  const int last = previous->header.iteration;
  if (last >= fresh.header.iteration) throw ProvenanceError("merged iterations must increase");
  PreferenceDataset out;
  out.header = fresh.header;
  out.header.iterations = {last, fresh.header.iteration};
  for (const auto& t : previous->triples) {
    if (t.iter == last) out.triples.push_back(t);
  }
  out.triples.insert(out.triples.end(), fresh.triples.begin(), fresh.triples.end());
  return out;
}

namespace {

json header_json(const PreferenceHeader& h) {
  return {{"world_hash", h.world_hash},   {"policy_hash", h.policy_hash}, {"base_seed", h.base_seed},
          {"first_index", h.first_index}, {"iteration", h.iteration},     {"requested", h.requested},
          {"degenerate", h.degenerate},   {"iterations", h.iterations}};
}

}  // namespace

std::string dataset_to_jsonl(const PreferenceDataset& dataset) {
  std::string out = json{{"header", header_json(dataset.header)}, {"size", dataset.size()}}.dump();
  out += '\n';
  for (const auto& t : dataset.triples) {
    out += json{{"iter", t.iter}, {"speaker", t.speaker}, {"seed", t.seed},
                {"text", t.text}, {"y_g", t.y_g},         {"y_s", t.y_s}}
               .dump();
    out += '\n';
  }
  return out;
}

PreferenceDataset dataset_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  PreferenceDataset d;
  if (!std::getline(in, line)) throw IoError("preference dataset: missing header line");
  try {
    const auto head = json::parse(line);
    const auto& h = head.at("header");
    d.header.world_hash = h.at("world_hash").get<std::string>();
    d.header.policy_hash = h.at("policy_hash").get<std::string>();
    d.header.base_seed = h.at("base_seed").get<std::uint64_t>();
    d.header.first_index = h.at("first_index").get<std::uint64_t>();
    d.header.iteration = h.at("iteration").get<int>();
    d.header.requested = h.at("requested").get<int>();
    d.header.degenerate = h.at("degenerate").get<int>();
    d.header.iterations = h.at("iterations").get<std::vector<int>>();
    const auto size = head.at("size").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      PreferenceTriple t;
      t.iter = j.at("iter").get<int>();
      t.speaker = j.at("speaker").get<int>();
      t.seed = j.at("seed").get<std::uint64_t>();
      t.text = j.at("text").get<TokenSeq>();
      t.y_g = j.at("y_g").get<TokenSeq>();
      t.y_s = j.at("y_s").get<TokenSeq>();
      d.triples.push_back(std::move(t));
    }
    if (d.triples.size() != size) throw IoError("preference dataset: header declares a different size");
  } catch (const json::exception& e) {
    throw IoError(std::string("preference dataset: malformed JSON line: ") + e.what());
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const PreferenceDataset& dataset) {
  write_text(path, dataset_to_jsonl(dataset));
}

PreferenceDataset load_dataset(const std::filesystem::path& path) { return dataset_from_jsonl(read_text(path)); }

void check_replay(const World& world, const PreferenceDataset& dataset) {
  if (dataset.header.world_hash != world.hash()) throw ProvenanceError("preference dataset was built from another world");
  for (const auto& t : dataset.triples) {
    const auto u = world.sample_utterance(t.speaker, t.seed);
    if (u.text != t.text || u.golden.layers[0] != t.y_g) {
      throw ProvenanceError("triple with seed " + std::to_string(t.seed) + " does not replay from the world");
    }
  }
}

LayeredTokens triple_prompt(const World& world, const PreferenceTriple& triple, int prompt_len) {
  const auto source = world.sample_utterance(triple.speaker, mix64(triple.seed, fnv1a64("prompt")));
  return prompt_segment(source, prompt_len);
}

VerifyResult oracle_verify(const World& world, const NarModel& nar, const PreferenceDataset& dataset, int m,
                           std::uint64_t seed, int workers) {
  if (m < 1 || static_cast<std::size_t>(m) > dataset.size()) throw ConfigError("oracle_verify: need 1 <= M <= dataset size");
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::named(seed, "oracle_verify");
  for (int i = 0; i < m; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  std::vector<Verdict> verdicts(m);
  parallel_for(static_cast<std::size_t>(m), workers, [&](std::size_t k) {
    const auto& t = dataset.triples[order[k]];
    const auto prompt = triple_prompt(world, t, nar.config().prompt_len);
    const std::uint64_t decode_seed = mix64(seed, t.seed);
    const auto g = reconstruct(world, nar, prompt, t.y_g, t.text, t.speaker, decode_seed);
    const auto s = reconstruct(world, nar, prompt, t.y_s, t.text, t.speaker, decode_seed);
    verdicts[k] = oracle_judge({g.ter, g.sim}, {s.ter, s.sim});
  });
  VerifyResult r;
  r.judged = m;
  for (Verdict v : verdicts) {
    if (v == Verdict::kWin) r.golden_win += 1;
    if (v == Verdict::kTie) r.tie += 1;
    if (v == Verdict::kLose) r.golden_lose += 1;
  }
  r.golden_win *= 100.0 / m;
  r.tie *= 100.0 / m;
  r.golden_lose *= 100.0 / m;
  return r;
}

}  // namespace prefcodec

#include "prefcodec/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "prefcodec/error.hpp"
#include "prefcodec/eval.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {

namespace pt = boost::property_tree;

ExperimentConfig::ExperimentConfig() {
  world.world_seed = 0;
  ar.param_seed = 0;
  nar.param_seed = 0;
  align.seed = 0;
  eval.seed = 0;
}

namespace {

using FieldRef = std::variant<int*, double*, std::uint64_t*, bool*, std::filesystem::path*, AlignMethod*>;

struct Field {
  std::string section, key;
  FieldRef ref;
};

// Single table driving parsing, emission and unknown-key rejection.
std::vector<Field> fields(ExperimentConfig& c) {
  WorldConfig& w = c.world;
  ArConfig& a = c.ar;
  NarConfig& n = c.nar;
  AlignConfig& al = c.align;
  return {
      {"run", "seed", &c.seed},
      {"run", "workers", &c.workers},
      {"run", "out", &c.out},
      {"world", "v_text", &w.v_text},
      {"world", "l_text", &w.l_text},
      {"world", "k_ar", &w.k_ar},
      {"world", "k_nar", &w.k_nar},
      {"world", "num_layers", &w.num_layers},
      {"world", "expansion", &w.expansion},
      {"world", "speakers", &w.speakers},
      {"world", "tau_oracle", &w.tau_oracle},
      {"world", "eps_nar", &w.eps_nar},
      {"world", "d_emb", &w.d_emb},
      {"world", "speaker_mix", &w.speaker_mix},
      {"world", "logit_std", &w.logit_std},
      {"world", "nar_palette", &w.nar_palette},
      {"world", "world_seed", &w.world_seed},
      {"ar", "d_model", &a.d_model},
      {"ar", "n_layers", &a.n_layers},
      {"ar", "n_heads", &a.n_heads},
      {"ar", "d_ffn", &a.d_ffn},
      {"ar", "max_context", &a.max_context},
      {"ar", "init_std", &a.init_std},
      {"ar", "param_seed", &a.param_seed},
      {"nar", "d_model", &n.d_model},
      {"nar", "n_layers", &n.n_layers},
      {"nar", "n_heads", &n.n_heads},
      {"nar", "d_ffn", &n.d_ffn},
      {"nar", "prompt_len", &n.prompt_len},
      {"nar", "decode_steps", &n.decode_steps},
      {"nar", "init_std", &n.init_std},
      {"nar", "param_seed", &n.param_seed},
      {"data", "sft_n", &c.sft_n},
      {"data", "pref_n", &c.pref_n},
      {"data", "eval_n", &c.eval_n},
      {"data", "data_seed", &c.data_seed},
      {"data", "build_temperature", &c.build_temperature},
      {"data", "verify_m", &c.verify_m},
      {"sft", "epochs", &c.sft_epochs},
      {"sft", "lr", &c.sft_lr},
      {"sft", "batch", &c.sft_batch},
      {"sft", "seed", &c.sft_seed},
      {"nar_train", "epochs", &c.nar_epochs},
      {"nar_train", "lr", &c.nar_lr},
      {"nar_train", "batch", &c.nar_batch},
      {"nar_train", "seed", &c.nar_seed},
      {"align", "method", &al.method},
      {"align", "lr", &al.lr},
      {"align", "batch", &al.batch},
      {"align", "epochs", &al.epochs},
      {"align", "steps", &al.steps},
      {"align", "grad_clip", &al.grad_clip},
      {"align", "seed", &al.seed},
      {"align", "dpo_beta", &al.dpo_beta},
      {"align", "rm_lr", &al.rm_lr},
      {"align", "rm_epochs", &al.rm_epochs},
      {"align", "rm_batch", &al.rm_batch},
      {"align", "rm_holdout", &al.rm_holdout},
      {"align", "ppo_kl_beta", &al.ppo_kl_beta},
      {"align", "ppo_clip", &al.ppo_clip},
      {"align", "ppo_lr", &al.ppo_lr},
      {"align", "ppo_steps", &al.ppo_steps},
      {"align", "ppo_batch", &al.ppo_batch},
      {"align", "ppo_epochs", &al.ppo_epochs},
      {"align", "ppo_baseline_decay", &al.ppo_baseline_decay},
      {"align", "kl_abort", &al.kl_abort},
      {"align", "temperature", &al.temperature},
      {"align", "bon_n", &al.bon_n},
      {"iterate", "iterations", &c.iterations},
      {"eval", "runs", &c.eval.runs},
      {"eval", "temperature", &c.eval.temperature},
      {"eval", "seed", &c.eval.seed},
  };
}

template <typename T>
T parse_number(const std::string& text, const std::string& name) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(name + ": cannot parse '" + text + "'");
  return v;
}

void assign(const FieldRef& ref, const std::string& raw, const std::string& name) {
  std::string text = raw;
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t')) text.pop_back();
  std::size_t start = text.find_first_not_of(" \t");
  text = start == std::string::npos ? "" : text.substr(start);
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1") {
            *p = true;
          } else if (text == "false" || text == "0") {
            *p = false;
          } else {
            throw ConfigError(name + ": expected true or false, got '" + text + "'");
          }
        } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
          *p = text;
        } else if constexpr (std::is_same_v<T, AlignMethod>) {
          try {
            *p = parse_align_method(text);
          } catch (const std::exception& e) {
            throw ConfigError(name + ": " + e.what());
          }
        } else {
          *p = parse_number<T>(text, name);
        }
      },
      ref);
}

std::string render(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
          return p->string();
        } else if constexpr (std::is_same_v<T, AlignMethod>) {
          return align_method_name(*p);
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(*p);
        } else {
          return std::to_string(*p);
        }
      },
      ref);
}

std::uint64_t derive(std::uint64_t master, const char* name) {
  const std::uint64_t s = mix64(master, fnv1a64(name));
  return s == 0 ? 1 : s;
}

}  // namespace

void ExperimentConfig::resolve() {
  if (world.world_seed == 0) world.world_seed = derive(seed, "world");
  if (ar.param_seed == 0) ar.param_seed = derive(seed, "ar_params");
  if (nar.param_seed == 0) nar.param_seed = derive(seed, "nar_params");
  if (data_seed == 0) data_seed = derive(seed, "data");
  if (sft_seed == 0) sft_seed = derive(seed, "sft");
  if (nar_seed == 0) nar_seed = derive(seed, "nar_train");
  if (align.seed == 0) align.seed = derive(seed, "align");
  if (eval.seed == 0) eval.seed = derive(seed, "eval");
  ar.v_text = world.v_text;
  ar.k_ar = world.k_ar;
  ar.l_text = world.l_text;
  ar.l_ar = world.ar_length();
  nar.num_layers = world.num_layers;
  nar.k_ar = world.k_ar;
  nar.k_nar = world.k_nar;
  nar.max_length = world.ar_length();
  align.workers = workers;
  eval.workers = workers;
}

void ExperimentConfig::validate() const {
  if (workers < 1) throw ConfigError("run.workers must be >= 1");
  world.validate();
  ar.validate();
  nar.validate();
  align.validate();
  auto require = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string(field) + " " + rule);
  };
  require(nar.prompt_len <= world.ar_length(), "nar.prompt_len", "must not exceed the first-layer length");
  require(sft_n >= 2 * world.speakers, "data.sft_n", "must cover every speaker twice (NAR prompts)");
  require(pref_n >= 1, "data.pref_n", "must be >= 1");
  require(eval_n >= 3, "data.eval_n", "must be >= 3");
  require(build_temperature >= 0.0, "data.build_temperature", "must be >= 0");
  require(verify_m >= 1, "data.verify_m", "must be >= 1");
  require(sft_epochs >= 1, "sft.epochs", "must be >= 1");
  require(sft_lr > 0.0, "sft.lr", "must be positive");
  require(sft_batch >= 1, "sft.batch", "must be >= 1");
  require(nar_epochs >= 1, "nar_train.epochs", "must be >= 1");
  require(nar_lr > 0.0, "nar_train.lr", "must be positive");
  require(nar_batch >= 1, "nar_train.batch", "must be >= 1");
  require(iterations >= 1, "iterate.iterations", "must be >= 1");
  require(eval.runs >= 1, "eval.runs", "must be >= 1");
  require(eval.temperature >= 0.0, "eval.temperature", "must be >= 0");
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  ExperimentConfig c;
  std::map<std::pair<std::string, std::string>, FieldRef> table;
  for (auto& f : fields(c)) table.emplace(std::make_pair(f.section, f.key), f.ref);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key '" + section + "' must sit inside a section");
    for (const auto& [key, value] : body) {
      const auto it = table.find({section, key});
      if (it == table.end()) throw ConfigError("unknown config key " + section + "." + key);
      assign(it->second, value.data(), section + "." + key);
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_ini(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  std::string out;
  std::string section;
  for (const auto& f : fields(copy)) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + render(f.ref) + "\n";
  }
  return out;
}

TrainOptions sft_options(const ExperimentConfig& config) {
  TrainOptions o;
  o.epochs = config.sft_epochs;
  o.lr = config.sft_lr;
  o.batch = config.sft_batch;
  o.seed = config.sft_seed;
  o.workers = config.workers;
  return o;
}

NarTrainOptions nar_options(const ExperimentConfig& config) {
  NarTrainOptions o;
  o.epochs = config.nar_epochs;
  o.lr = config.nar_lr;
  o.batch = config.nar_batch;
  o.seed = config.nar_seed;
  o.workers = config.workers;
  return o;
}

}  // namespace prefcodec

#include "prefcodec/checkpoint.hpp"

#include <map>
#include <variant>

#include "prefcodec/binio.hpp"
#include "prefcodec/error.hpp"
#include "prefcodec/rng.hpp"

namespace prefcodec {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

using Field = std::variant<std::int64_t, double>;
using FieldList = std::vector<std::pair<std::string, Field>>;

FieldList ar_fields(const ArConfig& c) {
  return {{"d_model", std::int64_t{c.d_model}},
          {"n_layers", std::int64_t{c.n_layers}},
          {"n_heads", std::int64_t{c.n_heads}},
          {"d_ffn", std::int64_t{c.d_ffn}},
          {"max_context", std::int64_t{c.max_context}},
          {"init_std", c.init_std},
          {"param_seed", static_cast<std::int64_t>(c.param_seed)},
          {"v_text", std::int64_t{c.v_text}},
          {"k_ar", std::int64_t{c.k_ar}},
          {"l_text", std::int64_t{c.l_text}},
          {"l_ar", std::int64_t{c.l_ar}},
          {"reward_head", std::int64_t{c.reward_head ? 1 : 0}}};
}

FieldList nar_fields(const NarConfig& c) {
  return {{"d_model", std::int64_t{c.d_model}},
          {"n_layers", std::int64_t{c.n_layers}},
          {"n_heads", std::int64_t{c.n_heads}},
          {"d_ffn", std::int64_t{c.d_ffn}},
          {"prompt_len", std::int64_t{c.prompt_len}},
          {"decode_steps", std::int64_t{c.decode_steps}},
          {"init_std", c.init_std},
          {"param_seed", static_cast<std::int64_t>(c.param_seed)},
          {"num_layers", std::int64_t{c.num_layers}},
          {"k_ar", std::int64_t{c.k_ar}},
          {"k_nar", std::int64_t{c.k_nar}},
          {"max_length", std::int64_t{c.max_length}}};
}

std::vector<std::uint8_t> serialize(const std::string& kind, const FieldList& fields, const ParamLayout& layout,
                                    std::span<const double> params) {
  ByteWriter w;
  w.magic("SALM");
  w.u32(kCheckpointVersion);
  w.u32(kRngVersion);
  w.str(kind);
  w.u32(static_cast<std::uint32_t>(fields.size()));
  for (const auto& [name, value] : fields) {
    w.str(name);
    if (const auto* i = std::get_if<std::int64_t>(&value)) {
      w.u32(0);
      w.i64(*i);
    } else {
      w.u32(1);
      w.f64(std::get<double>(value));
    }
  }
  w.u32(static_cast<std::uint32_t>(layout.tensors().size()));
  for (const auto& t : layout.tensors()) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int dim : t.shape) w.i64(dim);
    w.u64(t.offset);
    w.u64(t.size);
  }
  w.u64(params.size());
  w.f64s(params);
  return w.data();
}

struct Parsed {
  std::string kind;
  std::map<std::string, Field> fields;
  std::vector<TensorInfo> tensors;
  std::vector<double> payload;
};

Parsed parse_header(ByteReader& r, const std::filesystem::path& path) {
  r.expect_magic("SALM");
  if (r.u32() != kCheckpointVersion) throw IoError("unsupported checkpoint version in " + path.string());
  if (r.u32() != kRngVersion) throw IoError("checkpoint written with a different rng version: " + path.string());
  Parsed p;
  p.kind = r.str();
  const auto n_fields = r.u32();
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    auto name = r.str();
    const auto type = r.u32();
    if (type == 0) {
      p.fields[name] = r.i64();
    } else if (type == 1) {
      p.fields[name] = r.f64();
    } else {
      throw IoError("bad config field type in " + path.string());
    }
  }
  return p;
}

Parsed parse(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  Parsed p = parse_header(r, path);
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorInfo t;
    t.name = r.str();
    t.shape.resize(r.u32());
    for (int& dim : t.shape) dim = static_cast<int>(r.i64());
    t.offset = r.u64();
    t.size = r.u64();
    p.tensors.push_back(std::move(t));
  }
  p.payload.resize(r.u64());
  r.f64s(p.payload);
  if (!r.done()) throw IoError("trailing bytes in checkpoint " + path.string());
  return p;
}

std::int64_t int_field(const Parsed& p, const std::string& name, const std::filesystem::path& path) {
  const auto it = p.fields.find(name);
  if (it == p.fields.end() || !std::holds_alternative<std::int64_t>(it->second)) {
    throw IoError("checkpoint " + path.string() + " lacks integer field " + name);
  }
  return std::get<std::int64_t>(it->second);
}

double real_field(const Parsed& p, const std::string& name, const std::filesystem::path& path) {
  const auto it = p.fields.find(name);
  if (it == p.fields.end() || !std::holds_alternative<double>(it->second)) {
    throw IoError("checkpoint " + path.string() + " lacks real field " + name);
  }
  return std::get<double>(it->second);
}

void restore(const Parsed& p, const ParamLayout& layout, std::span<double> params, const std::filesystem::path& path) {
  if (p.tensors.size() != layout.tensors().size() || p.payload.size() != params.size()) {
    throw IoError("checkpoint " + path.string() + " does not match its declared configuration");
  }
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& a = p.tensors[i];
    const auto& b = layout.tensors()[i];
    if (a.name != b.name || a.shape != b.shape || a.offset != b.offset || a.size != b.size) {
      throw IoError("checkpoint " + path.string() + " tensor directory mismatch at " + a.name);
    }
  }
  std::copy(p.payload.begin(), p.payload.end(), params.begin());
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const ArModel& model) {
  return serialize(model.config().reward_head ? kKindReward : kKindPolicy, ar_fields(model.config()), model.layout(),
                   model.params());
}

std::vector<std::uint8_t> serialize_model(const NarModel& model) {
  return serialize(kKindNar, nar_fields(model.config()), model.layout(), model.params());
}

void save_model(const std::filesystem::path& path, const ArModel& model) { write_file(path, serialize_model(model)); }
void save_model(const std::filesystem::path& path, const NarModel& model) { write_file(path, serialize_model(model)); }

ArModel load_ar_model(const std::filesystem::path& path) {
  const Parsed p = parse(path);
  if (p.kind != kKindPolicy && p.kind != kKindReward) {
    throw IoError("checkpoint " + path.string() + " holds a '" + p.kind + "' model, not an AR model");
  }
  ArConfig c;
  c.d_model = static_cast<int>(int_field(p, "d_model", path));
  c.n_layers = static_cast<int>(int_field(p, "n_layers", path));
  c.n_heads = static_cast<int>(int_field(p, "n_heads", path));
  c.d_ffn = static_cast<int>(int_field(p, "d_ffn", path));
  c.max_context = static_cast<int>(int_field(p, "max_context", path));
  c.init_std = real_field(p, "init_std", path);
  c.param_seed = static_cast<std::uint64_t>(int_field(p, "param_seed", path));
  c.v_text = static_cast<int>(int_field(p, "v_text", path));
  c.k_ar = static_cast<int>(int_field(p, "k_ar", path));
  c.l_text = static_cast<int>(int_field(p, "l_text", path));
  c.l_ar = static_cast<int>(int_field(p, "l_ar", path));
  c.reward_head = int_field(p, "reward_head", path) != 0;
  if (c.reward_head != (p.kind == kKindReward)) throw IoError("checkpoint " + path.string() + " kind/head mismatch");
  ArModel m(c);
  restore(p, m.layout(), m.params(), path);
  return m;
}

NarModel load_nar_model(const std::filesystem::path& path) {
  const Parsed p = parse(path);
  if (p.kind != kKindNar) throw IoError("checkpoint " + path.string() + " holds a '" + p.kind + "' model, not a NAR model");
  NarConfig c;
  c.d_model = static_cast<int>(int_field(p, "d_model", path));
  c.n_layers = static_cast<int>(int_field(p, "n_layers", path));
  c.n_heads = static_cast<int>(int_field(p, "n_heads", path));
  c.d_ffn = static_cast<int>(int_field(p, "d_ffn", path));
  c.prompt_len = static_cast<int>(int_field(p, "prompt_len", path));
  c.decode_steps = static_cast<int>(int_field(p, "decode_steps", path));
  c.init_std = real_field(p, "init_std", path);
  c.param_seed = static_cast<std::uint64_t>(int_field(p, "param_seed", path));
  c.num_layers = static_cast<int>(int_field(p, "num_layers", path));
  c.k_ar = static_cast<int>(int_field(p, "k_ar", path));
  c.k_nar = static_cast<int>(int_field(p, "k_nar", path));
  c.max_length = static_cast<int>(int_field(p, "max_length", path));
  NarModel m(c);
  restore(p, m.layout(), m.params(), path);
  return m;
}

std::string checkpoint_kind(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  return parse_header(r, path).kind;
}

}  // namespace prefcodec

#include "detox/data/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "detox/core/error.hpp"

namespace detox::data {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native order; a big-endian port must swap");

namespace {

constexpr char kMagic[8] = {'D', 'T', 'X', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t offset) {
  U value;
  std::memcpy(&value, in.data() + offset, sizeof(U));
  return value;
}

nlohmann::json adam_config_json(const core::AdamConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"weight_decay", c.weight_decay}};
}

core::AdamConfig adam_config_from(const nlohmann::json& j) {
  core::AdamConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  return c;
}

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw CheckpointError("checkpoint has no array '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<const NamedArray*> all;
  for (const auto& a : ckpt.arrays) all.push_back(&a);
  std::vector<NamedArray> moments;
  nlohmann::json optimizer = nullptr;
  if (ckpt.optimizer) {
    const auto& st = *ckpt.optimizer;
    if (st.first_moment.size() > ckpt.arrays.size() ||
        st.second_moment.size() != st.first_moment.size()) {
      throw CheckpointError("optimizer state does not match the parameter arrays");
    }
    for (std::size_t i = 0; i < st.first_moment.size(); ++i) {
      const auto& p = ckpt.arrays[i];
      moments.push_back({"adam.m." + p.name, p.shape, st.first_moment[i]});
      moments.push_back({"adam.v." + p.name, p.shape, st.second_moment[i]});
    }
    optimizer = {{"config", adam_config_json(st.config)},
                 {"step", st.step},
                 {"moments", st.first_moment.size()}};
  }
  for (const auto& m : moments) all.push_back(&m);

  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedArray* a : all) {
    if (core::numel(a->shape) != a->values.size()) {
      throw CheckpointError("array '" + a->name + "' has " + std::to_string(a->values.size()) +
                            " values for shape " + core::shape_string(a->shape));
    }
    const std::uint64_t bytes = a->values.size() * sizeof(float);
    table.push_back({{"name", a->name},
                     {"shape", a->shape},
                     {"dtype", "float32"},
                     {"offset", offset},
                     {"bytes", bytes}});
    offset += bytes;
  }
  nlohmann::json header = {{"kind", ckpt.kind},
                           {"config", ckpt.config},
                           {"extra", ckpt.extra},
                           {"arrays", table},
                           {"parameters", ckpt.arrays.size()},
                           {"optimizer", optimizer},
                           {"rng", ckpt.rng ? nlohmann::json(*ckpt.rng) : nlohmann::json(nullptr)}};
  const std::string head = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, head.size());
  out += head;
  for (const NamedArray* a : all) {
    out.append(reinterpret_cast<const char*>(a->values.data()), a->values.size() * sizeof(float));
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::size_t prefix = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (in.size() < prefix || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, sizeof kMagic);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": format version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto head_len = get<std::uint64_t>(in, sizeof kMagic + sizeof(std::uint32_t));
  if (head_len > in.size() - prefix) throw CheckpointError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(prefix, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  const std::size_t payload = prefix + head_len;

  Checkpoint ckpt;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.extra = header.at("extra");
    const std::size_t n_params = header.at("parameters").get<std::size_t>();
    std::map<std::string, NamedArray> moments;
    std::size_t index = 0;
    for (const auto& entry : header.at("arrays")) {
      NamedArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<core::Shape>();
      if (entry.at("dtype").get<std::string>() != "float32") {
        throw CheckpointError(path.string() + ": unsupported dtype for '" + a.name + "'");
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto bytes = entry.at("bytes").get<std::uint64_t>();
      if (bytes != core::numel(a.shape) * sizeof(float)) {
        throw CheckpointError(path.string() + ": size of '" + a.name + "' does not match its shape");
      }
      if (offset > in.size() - payload || bytes > in.size() - payload - offset) {
        throw CheckpointError(path.string() + ": truncated payload at '" + a.name + "'");
      }
      a.values.resize(core::numel(a.shape));
      std::memcpy(a.values.data(), in.data() + payload + offset, bytes);
      if (index++ < n_params) {
        ckpt.arrays.push_back(std::move(a));
      } else {
        moments.emplace(a.name, std::move(a));
      }
    }
    const auto& opt = header.at("optimizer");
    if (!opt.is_null()) {
      core::OptimizerState<float> st;
      st.config = adam_config_from(opt.at("config"));
      st.step = opt.at("step").get<std::uint64_t>();
      const std::size_t count = opt.at("moments").get<std::size_t>();
      for (std::size_t i = 0; i < count; ++i) {
        const std::string& name = ckpt.arrays.at(i).name;
        auto m = moments.find("adam.m." + name);
        auto v = moments.find("adam.v." + name);
        if (m == moments.end() || v == moments.end()) {
          throw CheckpointError(path.string() + ": missing optimizer moments for '" + name + "'");
        }
        st.first_moment.push_back(std::move(m->second.values));
        st.second_moment.push_back(std::move(v->second.values));
      }
      ckpt.optimizer = std::move(st);
    }
    if (!header.at("rng").is_null()) ckpt.rng = header.at("rng").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  } catch (const std::out_of_range& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  return ckpt;
}

std::vector<NamedArray> capture(const core::ParameterSet<float>& params) {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : params) {
    out.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  return out;
}

void restore(core::ParameterSet<float>& params, const std::vector<NamedArray>& arrays) {
  if (arrays.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(arrays.size()) +
                          " parameter arrays, model expects " + std::to_string(params.size()));
  }
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    const NamedArray& a = arrays[i++];
    if (a.name != name) {
      throw CheckpointError("checkpoint array '" + a.name + "' where model expects '" + name + "'");
    }
    if (a.shape != t.shape()) {
      throw CheckpointError("shape mismatch for '" + name + "': checkpoint " +
                            core::shape_string(a.shape) + ", model " + core::shape_string(t.shape()));
    }
    std::copy(a.values.begin(), a.values.end(), t.data().begin());
  }
}

nlohmann::json to_json(const lm::LmConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"max_sequence_length", c.max_sequence_length},
          {"tie_embeddings", c.tie_embeddings}};
}

lm::LmConfig lm_config_from_json(const nlohmann::json& j) {
  try {
    lm::LmConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.max_sequence_length = j.at("max_sequence_length").get<std::size_t>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("policy config: ") + e.what());
  }
}

nlohmann::json to_json(const reward::MtlConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"max_sequence_length", c.max_sequence_length}};
}

reward::MtlConfig mtl_config_from_json(const nlohmann::json& j) {
  try {
    reward::MtlConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.max_sequence_length = j.at("max_sequence_length").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("reward config: ") + e.what());
  }
}

Checkpoint policy_checkpoint(const lm::PolicyLm<float>& model, std::uint64_t vocab_fingerprint) {
  Checkpoint c;
  c.kind = "policy";
  c.config = to_json(model.config());
  c.extra["vocab_fingerprint"] = vocab_fingerprint;
  c.arrays = capture(model.parameters());
  return c;
}

lm::PolicyLm<float> load_policy(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "policy") {
    throw CheckpointError("expected a policy checkpoint, found '" + checkpoint.kind + "'");
  }
  core::Rng unused(0);
  lm::PolicyLm<float> model(lm_config_from_json(checkpoint.config), core::Init::kZeros, unused);
  restore(model.parameters(), checkpoint.arrays);
  return model;
}

Checkpoint reward_checkpoint(const reward::MtlModel<float>& model, std::uint64_t vocab_fingerprint) {
  Checkpoint c;
  c.kind = "reward";
  c.config = to_json(model.config());
  c.config["tasks"] = model.task_ids();
  c.extra["vocab_fingerprint"] = vocab_fingerprint;
  c.arrays = capture(model.parameters());
  return c;
}

reward::MtlModel<float> load_reward(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "reward") {
    throw CheckpointError("expected a reward checkpoint, found '" + checkpoint.kind + "'");
  }
  std::vector<int> tasks;
  try {
    tasks = checkpoint.config.at("tasks").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("reward config: ") + e.what());
  }
  core::Rng unused(0);
  reward::MtlModel<float> model(mtl_config_from_json(checkpoint.config), tasks, core::Init::kZeros,
                                core::Init::kZeros, unused);
  restore(model.parameters(), checkpoint.arrays);
  return model;
}

std::uint64_t vocab_fingerprint_of(const Checkpoint& checkpoint) {
  try {
    return checkpoint.extra.at("vocab_fingerprint").get<std::uint64_t>();
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint does not record a vocabulary fingerprint");
  }
}

}  // namespace detox::data

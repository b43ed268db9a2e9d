/*
 * Copyright 2026 The DPGE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dpge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "dpge/error.hpp"

namespace dpge::model {
namespace {

constexpr char kMagic[8] = {'D', 'P', 'G', 'E', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                        {"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},
                        {"num_heads", c.num_heads},     {"ff_dim", c.ff_dim},
                        {"dropout_rate", c.dropout_rate}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.validate();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ckpt.config.validate();
  if (ckpt.params.values.size() != ckpt.params.registry.param_count()) {
    throw ValidationError("checkpoint: parameter vector length does not match the registry");
  }

  nlohmann::json registry = nlohmann::json::array();
  for (const auto& s : ckpt.params.registry.slices()) {
    registry.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});
  }
  const nlohmann::json meta = {
      {"format", "DPGE0001"},
      {"model", config_to_json(ckpt.config)},
      {"registry", registry},
      {"step", ckpt.step},
      {"seeds",
       {{"init", ckpt.seeds.init},
        {"data", ckpt.seeds.data},
        {"noise", ckpt.seeds.noise},
        {"dropout", ckpt.seeds.dropout}}},
      {"epsilon_spent", ckpt.epsilon_spent},
  };
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  out.write(reinterpret_cast<const char*>(ckpt.params.values.data()),
            static_cast<std::streamsize>(ckpt.params.values.size() * sizeof(float)));
  if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint: '" + path + "' lacks the DPGE0001 magic");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError("checkpoint: truncated metadata length in '" + path + "'");
  std::string meta_str(len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: truncated metadata block in '" + path + "'");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("checkpoint: malformed metadata JSON in '" + path + "': " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(meta.at("model"));
    ckpt.step = meta.at("step").get<std::uint64_t>();
    const auto& seeds = meta.at("seeds");
    ckpt.seeds.init = seeds.at("init").get<std::uint64_t>();
    ckpt.seeds.data = seeds.at("data").get<std::uint64_t>();
    ckpt.seeds.noise = seeds.at("noise").get<std::uint64_t>();
    ckpt.seeds.dropout = seeds.at("dropout").get<std::uint64_t>();
    ckpt.epsilon_spent = meta.at("epsilon_spent").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: missing metadata field in '" + path + "': " + e.what());
  }

  ckpt.params.registry = Registry::build(ckpt.config);
  // The serialized registry must agree with the one the config rebuilds.
  const auto& slices = ckpt.params.registry.slices();
  const auto& reg = meta.at("registry");
  if (reg.size() != slices.size()) {
    throw ValidationError("checkpoint: registry size mismatch in '" + path + "'");
  }
  for (std::size_t i = 0; i < slices.size(); ++i) {
    if (reg[i].at("name").get<std::string>() != slices[i].name ||
        reg[i].at("offset").get<std::size_t>() != slices[i].offset ||
        reg[i].at("shape").get<std::vector<std::size_t>>() != slices[i].shape) {
      throw ValidationError("checkpoint: registry entry mismatch for '" + slices[i].name + "'");
    }
  }

  const std::size_t count = ckpt.params.registry.param_count();
  ckpt.params.values.resize(count);
  in.read(reinterpret_cast<char*>(ckpt.params.values.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(count * sizeof(float))) {
    throw IoError("checkpoint: truncated parameter payload in '" + path + "'");
  }
  char extra;
  if (in.read(&extra, 1)) {
    throw IoError("checkpoint: trailing bytes after parameter payload in '" + path + "'");
  }
  return ckpt;
}

}  // namespace dpge::model

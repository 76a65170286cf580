#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "poisonprompt/model.hpp"

namespace poisonprompt {

// Checkpoint layout (all integers little-endian):
//
//   bytes 0..7    magic "PPMLMCKP"
//   bytes 8..11   uint32 format version (currently 1)
//   bytes 12..19  uint64 length L of the JSON header
//   next L bytes  UTF-8 JSON header:
//                   { "format_version": 1, "dtype": "float32" | "float64",
//                     "config": {...}, "vocabulary": [token, ...],
//                     "arrays": [{"name", "rows", "cols", "offset"}, ...] }
//   remainder     raw row-major array data; "offset" is relative to the
//                 first byte after the header.

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'P', 'M', 'L', 'M', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
          {"num_heads", c.num_heads},       {"num_layers", c.num_layers},
          {"ffn_dim", c.ffn_dim},           {"max_length", c.max_length},
          {"tie_head", c.tie_head},         {"init_std", c.init_std},
          {"embedding_init_std", c.embedding_init_std}, {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<Index>();
  c.d_model = j.at("d_model").get<Index>();
  c.num_heads = j.at("num_heads").get<Index>();
  c.num_layers = j.at("num_layers").get<Index>();
  c.ffn_dim = j.at("ffn_dim").get<Index>();
  c.max_length = j.at("max_length").get<Index>();
  c.tie_head = j.at("tie_head").get<bool>();
  c.init_std = j.at("init_std").get<double>();
  c.embedding_init_std = j.at("embedding_init_std").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

template <class S>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? "float32" : "float64";
}

template <class S>
void save_checkpoint(const MaskedLM<S>& model, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<S>();
  header["config"] = to_json(model.config());
  header["vocabulary"] = model.vocabulary().tokens();
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  model.parameters().visit([&](const std::string& name, const Matrix<S>& m) {
    header["arrays"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(S);
  });
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::uint64_t length = text.size();
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  model.parameters().visit([&](const std::string&, const Matrix<S>& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(S)));
  });
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

template <class S = float>
MaskedLM<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || magic != kCheckpointMagic) throw Error(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint format version " + std::to_string(version));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw Error("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);
  if (header.at("dtype").get<std::string>() != dtype_name<S>())
    throw Error("checkpoint dtype " + header.at("dtype").get<std::string>() + " does not match requested " +
                dtype_name<S>());

  const ModelConfig config = model_config_from_json(header.at("config"));
  Vocabulary vocab(header.at("vocabulary").get<std::vector<std::string>>());
  // Build a model of the right shape, then overwrite every array in order.
  auto model = MaskedLM<S>::initialize(config, std::move(vocab), 0);
  const auto& arrays = header.at("arrays");
  const auto data_start = in.tellg();
  std::size_t i = 0;
  model.mutable_parameters().visit([&](const std::string& name, Matrix<S>& m) {
    if (i >= arrays.size() || arrays[i].at("name").get<std::string>() != name)
      throw Error("checkpoint array " + std::to_string(i) + " is not '" + name + "'");
    const auto& a = arrays[i++];
    if (a.at("rows").get<Index>() != m.rows() || a.at("cols").get<Index>() != m.cols())
      throw Error("checkpoint array '" + name + "' has the wrong shape");
    in.seekg(data_start + static_cast<std::streamoff>(a.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(S)));
    if (!in) throw Error("truncated checkpoint data for '" + name + "'");
  });
  if (i != arrays.size()) throw Error("checkpoint has unexpected extra arrays");
  return model;
}

}  // namespace poisonprompt

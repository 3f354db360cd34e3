#include "mate/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mate {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

nlohmann::json to_json(const EncoderConfig& cfg) {
  return {
      {"row_heads", cfg.row_heads},     {"col_heads", cfg.col_heads},
      {"hidden", cfg.hidden},           {"head_dim", cfg.head_dim},
      {"layers", cfg.layers},           {"ffn_dim", cfg.ffn_dim},
      {"global_size", cfg.global_size}, {"radius", cfg.radius},
      {"max_len", cfg.max_len},         {"positional_reset", cfg.positional_reset},
      {"token_vocab", cfg.token_vocab}, {"position_vocab", cfg.position_vocab},
      {"row_vocab", cfg.row_vocab},     {"col_vocab", cfg.col_vocab},
      {"rank_vocab", cfg.rank_vocab},
  };
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  cfg.row_heads = j.value("row_heads", cfg.row_heads);
  cfg.col_heads = j.value("col_heads", cfg.col_heads);
  cfg.hidden = j.value("hidden", cfg.hidden);
  cfg.head_dim = j.value("head_dim", cfg.head_dim);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.ffn_dim = j.value("ffn_dim", cfg.ffn_dim);
  cfg.global_size = j.value("global_size", cfg.global_size);
  cfg.radius = j.value("radius", cfg.radius);
  cfg.max_len = j.value("max_len", cfg.max_len);
  cfg.positional_reset = j.value("positional_reset", cfg.positional_reset);
  cfg.token_vocab = j.value("token_vocab", cfg.token_vocab);
  cfg.position_vocab = j.value("position_vocab", cfg.position_vocab);
  cfg.row_vocab = j.value("row_vocab", cfg.row_vocab);
  cfg.col_vocab = j.value("col_vocab", cfg.col_vocab);
  cfg.rank_vocab = j.value("rank_vocab", cfg.rank_vocab);
  cfg.validate();
  return cfg;
}

void save_checkpoint(const std::filesystem::path& manifest,
                     const std::vector<TensorView>& tensors,
                     const EncoderConfig& cfg, DType dtype) {
  auto data_path = manifest;
  data_path.replace_extension(".bin");
  std::ofstream bin(data_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + data_path.string());

  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t bytes = 0;
    if (dtype == DType::f64) {
      bytes = static_cast<std::size_t>(t.size()) * sizeof(double);
      bin.write(reinterpret_cast<const char*>(t.data),
                static_cast<std::streamsize>(bytes));
    } else {
      std::vector<float> narrow(t.data, t.data + t.size());
      bytes = narrow.size() * sizeof(float);
      bin.write(reinterpret_cast<const char*>(narrow.data()),
                static_cast<std::streamsize>(bytes));
    }
    entries.push_back({{"name", t.name},
                       {"shape", {t.rows, t.cols}},
                       {"dtype", dtype == DType::f64 ? "f64" : "f32"},
                       {"offset", offset}});
    offset += bytes;
  }
  if (!bin) throw std::runtime_error("failed writing " + data_path.string());

  nlohmann::json j = {{"format", "mate-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"data", data_path.filename().string()},
                      {"config", to_json(cfg)},
                      {"tensors", std::move(entries)}};
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  out << j.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open " + manifest.string());
  const auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "mate-checkpoint") {
    throw std::runtime_error("not a checkpoint manifest: " + manifest.string());
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  const auto data_path = manifest.parent_path() / j.at("data").get<std::string>();
  std::ifstream bin(data_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + data_path.string());

  Checkpoint ckpt;
  ckpt.config = encoder_config_from_json(j.at("config"));
  for (const auto& entry : j.at("tensors")) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto dtype = entry.at("dtype").get<std::string>();
    Matrix m(rows, cols);
    bin.seekg(entry.at("offset").get<std::streamoff>());
    if (dtype == "f64") {
      bin.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
    } else if (dtype == "f32") {
      std::vector<float> narrow(static_cast<std::size_t>(m.size()));
      bin.read(reinterpret_cast<char*>(narrow.data()),
               static_cast<std::streamsize>(narrow.size() * sizeof(float)));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = narrow[i];
    } else {
      throw std::runtime_error("unknown dtype " + dtype);
    }
    if (!bin) throw std::runtime_error("truncated checkpoint data");
    ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void Checkpoint::assign_to(const std::vector<TensorView>& views) const {
  for (const auto& view : views) {
    auto it = tensors.find(view.name);
    if (it == tensors.end()) {
      throw std::runtime_error("checkpoint lacks tensor " + view.name);
    }
    if (it->second.rows() != view.rows || it->second.cols() != view.cols) {
      throw std::runtime_error("shape mismatch for " + view.name);
    }
    std::memcpy(view.data, it->second.data(),
                static_cast<std::size_t>(view.size()) * sizeof(double));
  }
}

Params Checkpoint::params() const {
  Params p = Params::zeros(config);
  assign_to(mate::tensors(p));
  return p;
}

}  // namespace mate

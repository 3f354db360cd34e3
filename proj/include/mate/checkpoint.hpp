#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mate/encoder.hpp"

namespace mate {

// On-disk layout: `<stem>.json` manifest next to a flat little-endian
// `<stem>.bin`. The manifest carries
//   {"format": "mate-checkpoint", "version": 1, "data": "<stem>.bin",
//    "config": {...EncoderConfig...},
//    "tensors": [{"name", "shape": [rows, cols], "dtype": "f32"|"f64",
//                 "offset": <byte offset>}, ...]}
// Matrices are stored column-major.

inline constexpr int kCheckpointVersion = 1;

enum class DType { f32, f64 };

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& manifest,
                     const std::vector<TensorView>& tensors,
                     const EncoderConfig& cfg, DType dtype = DType::f64);

struct Checkpoint {
  EncoderConfig config;
  std::map<std::string, Matrix> tensors;

  /// Copies every named tensor into `views`; throws std::runtime_error on
  /// a missing name or a shape mismatch.
  void assign_to(const std::vector<TensorView>& views) const;
  Params params() const;
};

Checkpoint load_checkpoint(const std::filesystem::path& manifest);

}  // namespace mate

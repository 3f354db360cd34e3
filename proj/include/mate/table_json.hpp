#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "mate/table.hpp"

namespace mate {

/// A query paired with its table, as stored in the JSON table format:
///
///   {"query":  [ids...],
///    "rows":   [[[ids of cell 0,0], [ids of cell 0,1], ...], ...],
///    "header": true|false,                        (optional)
///    "numeric": [[value or null, ...], ...],      (optional)
///    "links":  {"r,c": [[sentence ids...], ...]}} (optional, 0-based r,c)
struct TableExample {
  TokenSeq query;
  Table table{1, 1};
};

TableExample table_example_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TableExample& ex);

TableExample load_table_example(const std::filesystem::path& path);

}  // namespace mate

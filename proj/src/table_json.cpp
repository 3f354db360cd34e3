#include "mate/table_json.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

namespace mate {

namespace {

TokenSeq tokens_from(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("expected a token id array");
  TokenSeq out;
  out.reserve(j.size());
  for (const auto& t : j) out.push_back(t.get<TokenId>());
  return out;
}

CellCoord parse_coord_key(const std::string& key) {
  const auto comma = key.find(',');
  if (comma == std::string::npos) {
    throw std::invalid_argument("link key must look like \"r,c\": " + key);
  }
  return {std::stoi(key.substr(0, comma)), std::stoi(key.substr(comma + 1))};
}

}  // namespace

TableExample table_example_from_json(const nlohmann::json& j) {
  const auto& rows = j.at("rows");
  if (!rows.is_array() || rows.empty()) {
    throw std::invalid_argument("\"rows\" must be a non-empty array");
  }
  std::vector<std::vector<Cell>> grid;
  for (const auto& row : rows) {
    std::vector<Cell> cells;
    for (const auto& cell : row) cells.push_back(Cell{tokens_from(cell), {}, {}});
    grid.push_back(std::move(cells));
  }
  TableExample ex;
  ex.table = Table(std::move(grid), j.value("header", false));
  if (j.contains("query")) ex.query = tokens_from(j["query"]);

  if (j.contains("numeric")) {
    const auto& numeric = j["numeric"];
    for (std::size_t r = 0; r < numeric.size(); ++r) {
      for (std::size_t c = 0; c < numeric[r].size(); ++c) {
        if (!numeric[r][c].is_null()) {
          ex.table.at(static_cast<int>(r), static_cast<int>(c)).numeric_value =
              numeric[r][c].get<double>();
        }
      }
    }
  }
  if (j.contains("links")) {
    for (const auto& [key, sentences] : j["links"].items()) {
      Cell& cell = ex.table.at(parse_coord_key(key));
      for (const auto& s : sentences) cell.linked_sentences.push_back(tokens_from(s));
    }
  }
  return ex;
}

nlohmann::json to_json(const TableExample& ex) {
  nlohmann::json j;
  j["query"] = ex.query;
  j["header"] = ex.table.has_header();
  auto rows = nlohmann::json::array();
  auto numeric = nlohmann::json::array();
  bool any_numeric = false;
  auto links = nlohmann::json::object();
  for (int r = 0; r < ex.table.rows(); ++r) {
    auto row = nlohmann::json::array();
    auto values = nlohmann::json::array();
    for (int c = 0; c < ex.table.cols(); ++c) {
      const Cell& cell = ex.table.at(r, c);
      row.push_back(cell.tokens);
      if (cell.numeric_value) {
        values.push_back(*cell.numeric_value);
        any_numeric = true;
      } else {
        values.push_back(nullptr);
      }
      if (!cell.linked_sentences.empty()) {
        links[std::to_string(r) + "," + std::to_string(c)] = cell.linked_sentences;
      }
    }
    rows.push_back(std::move(row));
    numeric.push_back(std::move(values));
  }
  j["rows"] = std::move(rows);
  if (any_numeric) j["numeric"] = std::move(numeric);
  if (!links.empty()) j["links"] = std::move(links);
  return j;
}

TableExample load_table_example(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return table_example_from_json(nlohmann::json::parse(in));
}

}  // namespace mate

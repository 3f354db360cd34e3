#include "mate/pattern.hpp"

#include <sstream>
#include <stdexcept>

namespace mate {

const char* to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::row: return "row";
    case PatternKind::column: return "column";
    case PatternKind::sat: return "sat";
    case PatternKind::full: return "full";
  }
  return "?";
}

const char* to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::mate: return "mate";
    case AttentionMode::full: return "full";
    case AttentionMode::sat: return "sat";
  }
  return "?";
}

AttentionPattern::AttentionPattern(const TokenizedExample& ex, PatternKind kind)
    : kind_(kind),
      row_(ex.row_index),
      col_(ex.col_index),
      query_(ex.is_query),
      pad_(ex.is_padding) {}

std::vector<int> AttentionPattern::allowed_set(int k) const {
  std::vector<int> out;
  for (int j = 0; j < size(); ++j) {
    if (allowed(k, j)) out.push_back(j);
  }
  return out;
}

PatternKind head_kind(int head, const EncoderConfig& cfg) {
  if (head < 0 || head >= cfg.heads()) {
    throw std::out_of_range("head " + std::to_string(head) + " not in [0, " +
                            std::to_string(cfg.heads()) + ")");
  }
  return head < cfg.row_heads ? PatternKind::row : PatternKind::column;
}

AttentionPattern head_pattern(const TokenizedExample& ex, int head,
                              const EncoderConfig& cfg) {
  return AttentionPattern(ex, head_kind(head, cfg));
}

AttentionPattern head_pattern(const TokenizedExample& ex, int head,
                              const EncoderConfig& cfg, AttentionMode mode) {
  switch (mode) {
    case AttentionMode::mate:
      return head_pattern(ex, head, cfg);
    case AttentionMode::full:
      head_kind(head, cfg);
      return full_pattern(ex);
    case AttentionMode::sat:
      head_kind(head, cfg);
      return sat_pattern(ex);
  }
  throw std::invalid_argument("unknown attention mode");
}

AttentionPattern sat_pattern(const TokenizedExample& ex) {
  return AttentionPattern(ex, PatternKind::sat);
}

AttentionPattern full_pattern(const TokenizedExample& ex) {
  return AttentionPattern(ex, PatternKind::full);
}

Mask to_mask(const AttentionPattern& p) {
  Mask mask(p.size());
  for (int k = 0; k < p.size(); ++k) {
    for (int j = 0; j < p.size(); ++j) {
      if (p.allowed(k, j)) mask.set(k, j, true);
    }
  }
  return mask;
}

std::string to_pbm(const Mask& mask) {
  std::ostringstream out;
  out << "P1\n" << mask.size() << ' ' << mask.size() << '\n';
  for (int k = 0; k < mask.size(); ++k) {
    for (int j = 0; j < mask.size(); ++j) {
      if (j) out << ' ';
      out << (mask(k, j) ? '1' : '0');
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace mate

// SPDX-License-Identifier: Apache-2.0
//
// Intent/slot structures and their flattened dictionary-literal string form:
//
//   {'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time', 'filler': 'five am'}]}
//
// flatten() emits exactly this layout. parse_semantics() accepts any text and
// never throws: a string it cannot read becomes the empty record, and missing
// or ill-typed fields become "none".

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace sicsf {

inline constexpr std::string_view kNoneValue = "none";

struct Entity {
  std::string type;
  std::string filler;

  bool operator==(const Entity&) const = default;
};

struct SemanticsRecord {
  std::string scenario{kNoneValue};
  std::string action{kNoneValue};
  std::vector<Entity> entities;

  // Normalises scenario, action and entity types.
  static SemanticsRecord make(std::string_view scenario, std::string_view action,
                              std::vector<Entity> entities = {});

  std::string intent() const { return scenario + "_" + action; }
  bool empty() const;

  bool operator==(const SemanticsRecord&) const = default;
};

// Lowercases and maps anything outside [a-z0-9_] to '_'; empty becomes "none".
std::string normalize_identifier(std::string_view text);

std::string flatten(const SemanticsRecord& record);
SemanticsRecord parse_semantics(std::string_view text);
// flatten(parse_semantics(text))
std::string canonicalize(std::string_view text);

}  // namespace sicsf

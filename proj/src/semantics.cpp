// SPDX-License-Identifier: Apache-2.0

#include "sicsf/semantics.hpp"

#include <cctype>
#include <stdexcept>
#include <utility>

namespace sicsf {

std::string normalize_identifier(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    const char lower = static_cast<char>(std::tolower(c));
    const bool ok = (lower >= 'a' && lower <= 'z') || (lower >= '0' && lower <= '9') || lower == '_';
    out.push_back(ok ? lower : '_');
  }
  return out.empty() ? std::string(kNoneValue) : out;
}

SemanticsRecord SemanticsRecord::make(std::string_view scenario, std::string_view action,
                                      std::vector<Entity> entities) {
  SemanticsRecord r;
  r.scenario = normalize_identifier(scenario);
  r.action = normalize_identifier(action);
  for (auto& e : entities) e.type = normalize_identifier(e.type);
  r.entities = std::move(entities);
  return r;
}

bool SemanticsRecord::empty() const {
  return scenario == kNoneValue && action == kNoneValue && entities.empty();
}

namespace {

void append_quoted(std::string& out, std::string_view text) {
  out.push_back('\'');
  for (char c : text) {
    if (c == '\'' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('\'');
}

}  // namespace

std::string flatten(const SemanticsRecord& record) {
  std::string out = "{'scenario': ";
  append_quoted(out, record.scenario);
  out += ", 'action': ";
  append_quoted(out, record.action);
  out += ", 'entities': [";
  for (std::size_t i = 0; i < record.entities.size(); ++i) {
    if (i > 0) out += ", ";
    out += "{'type': ";
    append_quoted(out, record.entities[i].type);
    out += ", 'filler': ";
    append_quoted(out, record.entities[i].filler);
    out += '}';
  }
  out += "]}";
  return out;
}

namespace {

struct SyntaxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Value {
  enum class Kind { kString, kAtom, kList, kDict };
  Kind kind = Kind::kAtom;
  std::string text;
  std::vector<Value> items;
  std::vector<std::pair<std::string, Value>> fields;

  const Value* field(std::string_view key) const {
    // Later duplicates win, as in a Python dict literal.
    const Value* found = nullptr;
    for (const auto& [k, v] : fields) {
      if (k == key) found = &v;
    }
    return found;
  }
};

// Recursive-descent reader for Python-style literals: quoted strings, bare
// atoms (None, numbers), lists and dicts, with free whitespace and optional
// trailing commas.
class LiteralReader {
  struct DepthGuard {
    explicit DepthGuard(int& depth) : depth_(depth) { ++depth_; }
    ~DepthGuard() { --depth_; }
    int& depth_;
  };

 public:
  explicit LiteralReader(std::string_view text) : text_(text) {}

  Value read_document() {
    Value v = read_value();
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const char* what) const {
    throw SyntaxError(std::string(what) + " at offset " + std::to_string(pos_));
  }

  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return at_end() ? '\0' : text_[pos_]; }

  void skip_ws() {
    while (!at_end() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) fail("unexpected character");
    ++pos_;
  }

  Value read_value() {
    skip_ws();
    if (at_end()) fail("unexpected end of input");
    if (depth_ >= kMaxDepth) fail("nesting too deep");
    switch (peek()) {
      case '{': {
        DepthGuard guard(depth_);
        return read_dict();
      }
      case '[': {
        DepthGuard guard(depth_);
        return read_list();
      }
      case '\'':
      case '"':
        return Value{Value::Kind::kString, read_string(), {}, {}};
      default:
        return Value{Value::Kind::kAtom, read_atom(), {}, {}};
    }
  }

  std::string read_string() {
    const char quote = text_[pos_++];
    std::string out;
    while (true) {
      if (at_end()) fail("unterminated string");
      char c = text_[pos_++];
      if (c == quote) return out;
      if (c == '\\') {
        if (at_end()) fail("unterminated escape");
        c = text_[pos_++];
        if (c == 'n') c = '\n';
        else if (c == 't') c = '\t';
      }
      out.push_back(c);
    }
  }

  std::string read_atom() {
    const std::size_t start = pos_;
    while (!at_end()) {
      const char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c)) || c == ',' || c == ':' || c == '{' ||
          c == '}' || c == '[' || c == ']' || c == '\'' || c == '"') {
        break;
      }
      ++pos_;
    }
    if (pos_ == start) fail("expected a value");
    return std::string(text_.substr(start, pos_ - start));
  }

  Value read_dict() {
    Value v;
    v.kind = Value::Kind::kDict;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') {
        ++pos_;
        return v;
      }
      std::string key = (peek() == '\'' || peek() == '"') ? read_string() : read_atom();
      expect(':');
      Value item = read_value();
      v.fields.emplace_back(std::move(key), std::move(item));
      skip_ws();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != '}') {
        fail("expected ',' or '}'");
      }
    }
  }

  Value read_list() {
    Value v;
    v.kind = Value::Kind::kList;
    expect('[');
    while (true) {
      skip_ws();
      if (peek() == ']') {
        ++pos_;
        return v;
      }
      const std::size_t start = pos_;
      try {
        v.items.push_back(read_value());
      } catch (const SyntaxError&) {
        // Drop a malformed dict element if we can find where it ends.
        if (text_[start] != '{' || !skip_past_broken_element(start)) throw;
      }
      skip_ws();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']'");
      }
    }
  }

  // Moves to just past the first '}' after `start` that is followed by ',' or
  // ']' (after whitespace).
  bool skip_past_broken_element(std::size_t start) {
    for (std::size_t p = start + 1; p < text_.size(); ++p) {
      if (text_[p] != '}') continue;
      std::size_t q = p + 1;
      while (q < text_.size() && std::isspace(static_cast<unsigned char>(text_[q]))) ++q;
      if (q < text_.size() && (text_[q] == ',' || text_[q] == ']')) {
        pos_ = p + 1;
        return true;
      }
    }
    return false;
  }

  static constexpr int kMaxDepth = 64;

  std::string_view text_;
  std::size_t pos_ = 0;
  int depth_ = 0;
};

std::string identifier_or_none(const Value* v) {
  if (v == nullptr || v->kind != Value::Kind::kString) return std::string(kNoneValue);
  return normalize_identifier(v->text);
}

}  // namespace

SemanticsRecord parse_semantics(std::string_view text) {
  Value doc;
  try {
    doc = LiteralReader(text).read_document();
  } catch (const SyntaxError&) {
    return {};
  }
  if (doc.kind != Value::Kind::kDict) return {};

  SemanticsRecord r;
  r.scenario = identifier_or_none(doc.field("scenario"));
  r.action = identifier_or_none(doc.field("action"));
  const Value* entities = doc.field("entities");
  if (entities != nullptr && entities->kind == Value::Kind::kList) {
    for (const auto& item : entities->items) {
      if (item.kind != Value::Kind::kDict) continue;
      const Value* type = item.field("type");
      const Value* filler = item.field("filler");
      if (type == nullptr || filler == nullptr || type->kind != Value::Kind::kString ||
          filler->kind != Value::Kind::kString) {
        continue;
      }
      r.entities.push_back({normalize_identifier(type->text), filler->text});
    }
  }
  return r;
}

std::string canonicalize(std::string_view text) { return flatten(parse_semantics(text)); }

}  // namespace sicsf

// SPDX-License-Identifier: Apache-2.0
#include "dprob/cli/schema.hpp"

#include <cmath>

namespace dprob {

using nlohmann::json;

namespace {

std::string escape_token(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~')
      out += "~0";
    else if (c == '/')
      out += "~1";
    else
      out += c;
  }
  return out;
}

bool has_type(const json& v, const std::string& t) {
  if (t == "null") return v.is_null();
  if (t == "boolean") return v.is_boolean();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (t == "number") return v.is_number();
  if (t == "string") return v.is_string();
  if (t == "array") return v.is_array();
  if (t == "object") return v.is_object();
  return false;
}

class Validator {
 public:
  explicit Validator(const json& root) : root_(root) {}

  void check(const json& v, const json& s, const std::string& ptr) {
    if (s.contains("$ref")) {
      const std::string ref = s.at("$ref").get<std::string>();
      const std::string prefix = "#/";
      if (ref.rfind(prefix, 0) != 0) {
        issue(ptr, "unsupported schema reference " + ref);
        return;
      }
      check(v, root_.at(json::json_pointer(ref.substr(1))), ptr);
      return;
    }
    if (s.contains("type")) {
      const json& t = s.at("type");
      bool ok = false;
      std::string names;
      for (const auto& name : t.is_array() ? t : json::array({t})) {
        ok = ok || has_type(v, name.get<std::string>());
        names += (names.empty() ? "" : " or ") + name.get<std::string>();
      }
      if (!ok) {
        issue(ptr, "expected " + names + ", got " + std::string(v.type_name()));
        return;
      }
    }
    if (s.contains("enum")) {
      bool ok = false;
      for (const auto& e : s.at("enum")) ok = ok || e == v;
      if (!ok) issue(ptr, "must be one of " + s.at("enum").dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s.at("minimum").get<double>()) issue(ptr, "must be >= " + s.at("minimum").dump());
      if (s.contains("maximum") && x > s.at("maximum").get<double>()) issue(ptr, "must be <= " + s.at("maximum").dump());
      if (s.contains("exclusiveMinimum") && x <= s.at("exclusiveMinimum").get<double>())
        issue(ptr, "must be > " + s.at("exclusiveMinimum").dump());
      if (s.contains("exclusiveMaximum") && x >= s.at("exclusiveMaximum").get<double>())
        issue(ptr, "must be < " + s.at("exclusiveMaximum").dump());
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s.at("minLength").get<std::size_t>())
      issue(ptr, "must have at least " + s.at("minLength").dump() + " characters");
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s.at("minItems").get<std::size_t>())
        issue(ptr, "must have at least " + s.at("minItems").dump() + " items");
      if (s.contains("maxItems") && v.size() > s.at("maxItems").get<std::size_t>())
        issue(ptr, "must have at most " + s.at("maxItems").dump() + " items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s.at("items"), ptr + "/" + std::to_string(i));
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& r : s.at("required"))
          if (!v.contains(r.get<std::string>())) issue(ptr + "/" + escape_token(r.get<std::string>()), "is required");
      const json empty = json::object();
      const json& props = s.contains("properties") ? s.at("properties") : empty;
      const bool closed = s.contains("additionalProperties") && s.at("additionalProperties") == false;
      for (const auto& [key, value] : v.items()) {
        const std::string child = ptr + "/" + escape_token(key);
        if (props.contains(key))
          check(value, props.at(key), child);
        else if (closed)
          issue(child, "unknown key");
      }
    }
  }

  std::vector<SchemaIssue> issues;

 private:
  void issue(const std::string& ptr, const std::string& msg) { issues.push_back({ptr, msg}); }
  const json& root_;
};

}  // namespace

std::vector<SchemaIssue> validate_schema(const json& instance, const json& schema) {
  Validator v(schema);
  v.check(instance, schema, "");
  return v.issues;
}

}  // namespace dprob

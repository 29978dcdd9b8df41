// SPDX-License-Identifier: Apache-2.0
//
// Validator for the JSON-schema subset the experiment schema uses: type,
// properties, additionalProperties (boolean), required, items, min/maxItems,
// minLength, enum, numeric bounds and local "#/$defs/..." references.
#pragma once

#include "json.hpp"

#include <string>
#include <vector>

namespace dprob {

struct SchemaIssue {
  std::string pointer;  ///< JSON pointer of the offending value ("" is the root)
  std::string message;
};

std::vector<SchemaIssue> validate_schema(const nlohmann::json& instance, const nlohmann::json& schema);

}  // namespace dprob

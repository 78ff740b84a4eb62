#ifndef STYLEEQ_CONFIG_HPP
#define STYLEEQ_CONFIG_HPP

// Strict readers for JSON config objects: every key must be known and every
// value must have the expected type.

#include "styleeq/inference.hpp"
#include "styleeq/synthglyph.hpp"

#include "json.hpp"

#include <functional>
#include <map>
#include <string>

namespace styleeq::config {

using Setter = std::function<void(const nlohmann::json&, const std::string&)>;

/// Applies `setters` to the members of object `j`; `where` prefixes messages.
void read_object(const nlohmann::json& j, const std::string& where, const std::map<std::string, Setter>& setters);

Setter int_field(int& out);
Setter int_field(long& out);
Setter seed_field(std::uint64_t& out);
Setter real_field(double& out);
Setter bool_field(bool& out);
Setter string_field(std::string& out);
/// A two-element [lo, hi] array.
Setter range_field(glyph::Range& out);

nlohmann::json to_json(const glyph::DatasetSpec& spec);
glyph::DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const GenerationConfig& g);
GenerationConfig generation_config_from_json(const nlohmann::json& j);

}  // namespace styleeq::config

#endif  // STYLEEQ_CONFIG_HPP

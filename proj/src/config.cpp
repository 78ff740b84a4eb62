#include "styleeq/config.hpp"

namespace styleeq::config {

using json = nlohmann::json;

void read_object(const json& j, const std::string& where, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw InvalidInput(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw InvalidInput(where + ": unknown key '" + key + "'");
    it->second(value, where + "." + key);
  }
}

namespace {

template <typename T>
Setter integer_setter(T& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_number_integer()) throw InvalidInput(path + ": expected an integer");
    out = v.get<T>();
  };
}

}  // namespace

Setter int_field(int& out) { return integer_setter(out); }
Setter int_field(long& out) { return integer_setter(out); }

Setter seed_field(std::uint64_t& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw InvalidInput(path + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  };
}

Setter real_field(double& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_number()) throw InvalidInput(path + ": expected a number");
    out = v.get<double>();
  };
}

Setter bool_field(bool& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_boolean()) throw InvalidInput(path + ": expected true or false");
    out = v.get<bool>();
  };
}

Setter string_field(std::string& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_string()) throw InvalidInput(path + ": expected a string");
    out = v.get<std::string>();
  };
}

Setter range_field(glyph::Range& out) {
  return [&out](const json& v, const std::string& path) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
      throw InvalidInput(path + ": expected [lo, hi]");
    out = {v[0].get<double>(), v[1].get<double>()};
  };
}

json to_json(const glyph::DatasetSpec& spec) {
  const auto& s = spec.style_sampler;
  auto range = [](glyph::Range r) { return json::array({r.lo, r.hi}); };
  json cells = json::array();
  for (const auto& c : s.holdout_cells) cells.push_back({c[0], c[1]});
  return {{"num_samples", spec.num_samples},
          {"alphabet_size", spec.alphabet_size},
          {"min_len", spec.min_len},
          {"max_len", spec.max_len},
          {"seed", spec.seed},
          {"style",
           {{"slant", range(s.slant)},
            {"scale", range(s.scale)},
            {"speed", range(s.speed)},
            {"jitter", range(s.jitter)},
            {"drift", range(s.drift)},
            {"slant_cells", s.slant_cells},
            {"scale_cells", s.scale_cells},
            {"holdout_cells", cells},
            {"holdout_mode", s.holdout_mode}}}};
}

glyph::DatasetSpec dataset_spec_from_json(const json& j) {
  glyph::DatasetSpec spec;
  auto& s = spec.style_sampler;
  const std::map<std::string, Setter> style{
      {"slant", range_field(s.slant)},
      {"scale", range_field(s.scale)},
      {"speed", range_field(s.speed)},
      {"jitter", range_field(s.jitter)},
      {"drift", range_field(s.drift)},
      {"slant_cells", int_field(s.slant_cells)},
      {"scale_cells", int_field(s.scale_cells)},
      {"holdout_cells",
       [&s](const json& v, const std::string& path) {
         if (!v.is_array()) throw InvalidInput(path + ": expected a list of [slant_cell, scale_cell]");
         s.holdout_cells.clear();
         for (const auto& c : v) {
           if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() || !c[1].is_number_integer())
             throw InvalidInput(path + ": expected a list of [slant_cell, scale_cell]");
           s.holdout_cells.push_back({c[0].get<int>(), c[1].get<int>()});
         }
       }},
      {"holdout_mode", string_field(s.holdout_mode)},
  };
  const std::map<std::string, Setter> top{
      {"num_samples", int_field(spec.num_samples)},
      {"alphabet_size", int_field(spec.alphabet_size)},
      {"min_len", int_field(spec.min_len)},
      {"max_len", int_field(spec.max_len)},
      {"seed", seed_field(spec.seed)},
      {"style", [&style](const json& v, const std::string& path) { read_object(v, path, style); }},
  };
  read_object(j, "dataset", top);
  spec.validate();
  return spec;
}

json to_json(const GenerationConfig& g) {
  return {{"std_scale", g.std_scale}, {"max_frames", g.max_frames}, {"temperature", g.temperature}, {"seed", g.seed}};
}

GenerationConfig generation_config_from_json(const json& j) {
  GenerationConfig g;
  read_object(j, "generation",
              {{"std_scale", real_field(g.std_scale)},
               {"max_frames", int_field(g.max_frames)},
               {"temperature", real_field(g.temperature)},
               {"seed", seed_field(g.seed)}});
  g.validate();
  return g;
}

}  // namespace styleeq::config

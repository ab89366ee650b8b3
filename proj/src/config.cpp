#include "hookrt/config.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace hookrt {

using nlohmann::json;

std::string to_string(HookqMode mode) {
  return mode == HookqMode::last_token ? "last_token" : "all_tokens";
}

HookqMode hookq_mode_from_string(const std::string& s) {
  if (s == "last_token") return HookqMode::last_token;
  if (s == "all_tokens") return HookqMode::all_tokens;
  throw std::invalid_argument("unknown hookq_mode: \"" + s +
                              "\" (expected last_token or all_tokens)");
}

HookConfig parse_config(const std::string& json_text, std::vector<std::string>* warnings) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("malformed config JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config root must be a JSON object");

  HookConfig cfg;
  if (doc.contains("model_info")) {
    const auto& mi = doc.at("model_info");
    if (!mi.is_object()) throw std::invalid_argument("model_info must be an object");
    cfg.model_name = mi.value("name", "");
    cfg.model_id = mi.value("model_id", "");
  }
  if (doc.contains("params") && doc.at("params").contains("important_heads")) {
    const auto& heads = doc.at("params").at("important_heads");
    if (!heads.is_array())
      throw std::invalid_argument("params.important_heads must be an array");
    std::set<HeadRef> seen;
    for (const auto& entry : heads) {
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer() ||
          !entry[1].is_number_integer())
        throw std::invalid_argument(
            "important_heads entries must be 2-element integer lists, got " + entry.dump());
      HeadRef ref{entry[0].get<int>(), entry[1].get<int>()};
      if (ref.layer < 0 || ref.head < 0)
        throw std::invalid_argument("important_heads indices must be non-negative, got " +
                                    entry.dump());
      if (!seen.insert(ref).second) {
        std::string note = "duplicate head [" + std::to_string(ref.layer) + ", " +
                           std::to_string(ref.head) + "] dropped";
        if (warnings)
          warnings->push_back(note);
        else
          std::cerr << "config: " << note << "\n";
        continue;
      }
      cfg.important_heads.push_back(ref);
    }
  }
  if (doc.contains("hookq")) {
    const auto& hq = doc.at("hookq");
    if (!hq.is_object()) throw std::invalid_argument("hookq must be an object");
    if (hq.contains("hookq_mode")) {
      if (!hq.at("hookq_mode").is_string())
        throw std::invalid_argument("hookq.hookq_mode must be a string");
      cfg.hookq_mode = hookq_mode_from_string(hq.at("hookq_mode").get<std::string>());
    }
  }
  return cfg;
}

namespace {

int parse_index(const std::string& tok, const std::string& context) {
  if (tok.empty()) throw std::invalid_argument("empty index in " + context);
  std::size_t pos = 0;
  int value = 0;
  try {
    value = std::stoi(tok, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("non-integer token \"" + tok + "\" in " + context);
  }
  if (pos != tok.size())
    throw std::invalid_argument("non-integer token \"" + tok + "\" in " + context);
  if (value < 0) throw std::invalid_argument("negative index in " + context);
  return value;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace

LayerHeads parse_layer_heads(const std::string& s) {
  LayerHeads out;
  if (s.empty()) return out;
  for (const std::string& group : split(s, ';')) {
    const auto colon = group.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("layer-heads group \"" + group + "\" is missing ':'");
    const int layer = parse_index(group.substr(0, colon), "layer-heads string");
    auto& heads = out[layer];
    for (const std::string& tok : split(group.substr(colon + 1), ',')) {
      const int head = parse_index(tok, "layer-heads string");
      if (std::find(heads.begin(), heads.end(), head) == heads.end()) heads.push_back(head);
    }
    if (heads.empty())
      throw std::invalid_argument("layer-heads group \"" + group + "\" lists no heads");
  }
  return out;
}

std::string serialize_layer_heads(const LayerHeads& m) {
  std::string out;
  for (const auto& [layer, heads] : m) {
    if (!out.empty()) out += ';';
    out += std::to_string(layer);
    out += ':';
    for (std::size_t i = 0; i < heads.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(heads[i]);
    }
  }
  return out;
}

LayerHeads heads_to_layer_map(const std::vector<HeadRef>& heads) {
  LayerHeads out;
  for (const HeadRef& h : heads) {
    auto& v = out[h.layer];
    if (std::find(v.begin(), v.end(), h.head) == v.end()) v.push_back(h.head);
  }
  for (auto& [layer, v] : out) std::sort(v.begin(), v.end());
  return out;
}

std::vector<HeadRef> layer_map_to_heads(const LayerHeads& m) {
  std::vector<HeadRef> out;
  for (const auto& [layer, heads] : m)
    for (int h : heads) out.push_back(HeadRef{layer, h});
  return out;
}

std::vector<std::string> validate(const HookConfig& config, const ModelSpec& spec) {
  std::vector<std::string> violations;
  for (const HeadRef& h : config.important_heads) {
    if (h.layer < 0 || h.layer >= spec.n_layers)
      violations.push_back("layer " + std::to_string(h.layer) + " out of range [0, " +
                           std::to_string(spec.n_layers) + ")");
    if (h.head < 0 || h.head >= spec.n_heads)
      violations.push_back("head " + std::to_string(h.head) + " out of range [0, " +
                           std::to_string(spec.n_heads) + ")");
  }
  return violations;
}

EnvSettings resolve_env(const HookConfig& config,
                        const std::map<std::string, std::string>& vars) {
  auto get = [&vars](const char* name) -> const std::string* {
    auto it = vars.find(name);
    return it == vars.end() ? nullptr : &it->second;
  };
  EnvSettings env;
  if (const auto* v = get(kEnvHookFlag)) env.hook_flag_path = *v;
  if (const auto* v = get(kEnvHookDir)) env.hook_dir = *v;
  if (const auto* v = get(kEnvRunId)) env.run_id_file = *v;
  env.hookq_mode = config.hookq_mode;
  if (const auto* v = get(kEnvHookqMode)) env.hookq_mode = hookq_mode_from_string(*v);
  env.layer_heads = heads_to_layer_map(config.important_heads);
  if (const auto* v = get(kEnvLayerHeads)) env.layer_heads = parse_layer_heads(*v);
  return env;
}

EnvSettings resolve_env(const HookConfig& config) {
  std::map<std::string, std::string> vars;
  for (const char* name : {kEnvHookFlag, kEnvHookDir, kEnvRunId, kEnvHookqMode, kEnvLayerHeads})
    if (const char* v = std::getenv(name)) vars[name] = v;
  return resolve_env(config, vars);
}

}  // namespace hookrt

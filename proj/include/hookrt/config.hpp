#pragma once

#include "hookrt/model.hpp"

#include <map>
#include <string>
#include <vector>

namespace hookrt {

/// (layer, head) index of one attention head.
struct HeadRef {
  int layer = 0;
  int head = 0;

  bool operator==(const HeadRef&) const = default;
  auto operator<=>(const HeadRef&) const = default;
};

enum class HookqMode { last_token, all_tokens };

std::string to_string(HookqMode mode);
HookqMode hookq_mode_from_string(const std::string& s);

/// Parsed hook config file: model identity, the important-heads profile and
/// the query-capture policy.
struct HookConfig {
  std::string model_name;
  std::string model_id;
  std::vector<HeadRef> important_heads;
  HookqMode hookq_mode = HookqMode::all_tokens;  // default when the hookq block is absent
};

/// Parses the JSON config document. Duplicate heads are dropped with a note
/// appended to `warnings` (stderr when null); unknown keys are ignored.
HookConfig parse_config(const std::string& json_text,
                        std::vector<std::string>* warnings = nullptr);

using LayerHeads = std::map<int, std::vector<int>>;

/// "0:0,3,6;15:2" -> {0:[0,3,6], 15:[2]}. Empty string -> empty map. Heads
/// are deduplicated with order preserved.
LayerHeads parse_layer_heads(const std::string& s);

/// Canonical form: layers ascending, heads as stored.
std::string serialize_layer_heads(const LayerHeads& m);

/// Groups a head profile by layer (layers ascending, heads ascending).
LayerHeads heads_to_layer_map(const std::vector<HeadRef>& heads);

std::vector<HeadRef> layer_map_to_heads(const LayerHeads& m);

/// Every head checked against the spec bounds; all violations reported.
std::vector<std::string> validate(const HookConfig& config, const ModelSpec& spec);

// Environment-variable names of the worker protocol.
inline constexpr const char* kEnvHookFlag = "VLLM_HOOK_FLAG";
inline constexpr const char* kEnvHookDir = "VLLM_HOOK_DIR";
inline constexpr const char* kEnvRunId = "VLLM_RUN_ID";
inline constexpr const char* kEnvHookqMode = "VLLM_HOOKQ_MODE";
inline constexpr const char* kEnvLayerHeads = "VLLM_HOOK_LAYER_HEADS";

/// Where to hook and where the files live. hookq_mode and layer_heads come
/// from the environment when set, otherwise from the config file.
struct EnvSettings {
  std::string hook_flag_path;
  std::string hook_dir;
  std::string run_id_file;
  HookqMode hookq_mode = HookqMode::all_tokens;
  LayerHeads layer_heads;
  /// Extends q capture past the prefill into decode steps; off by default.
  bool capture_decode_steps = false;
};

/// Reads the VLLM_HOOK_* process environment on top of config-file values.
/// The environment wins wherever both specify a setting.
EnvSettings resolve_env(const HookConfig& config);

/// Same, but with an explicit variable lookup (tests avoid touching the
/// process environment).
EnvSettings resolve_env(const HookConfig& config,
                        const std::map<std::string, std::string>& vars);

}  // namespace hookrt

#pragma once

#include "hookrt/analyzer.hpp"
#include "hookrt/config.hpp"
#include "hookrt/model.hpp"
#include "hookrt/runtime.hpp"
#include "hookrt/worker.hpp"

#include "json.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hookrt {

enum class Mode { passive, active };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode mode);

/// One analyze call as seen by a registered analyzer. Analyzers read the
/// persisted capture themselves, so an out-of-process implementation stays
/// drop-in compatible.
struct AnalyzeRequest {
  RunId run_id;
  std::string hook_dir;
  AnalyzerSpec spec;
  nlohmann::json params;
};

/// Named constructors for worker behaviors (what gets installed on the
/// model) and analyzers (what interprets a persisted run). Lookup of an
/// unknown name throws and lists what is available.
class Registry {
 public:
  using WorkerFn =
      std::function<ProbeHandle(Model&, const EnvSettings&, const SteeringPlan*)>;
  using AnalyzerFn = std::function<nlohmann::json(const AnalyzeRequest&)>;

  /// Workers "probe_qk" and "actsteer"; analyzers "attntracker" and "corer".
  static Registry with_builtins();

  void register_worker(const std::string& name, WorkerFn fn);
  void register_analyzer(const std::string& name, AnalyzerFn fn);

  const WorkerFn& worker(const std::string& name) const;
  const AnalyzerFn& analyzer(const std::string& name) const;

  std::vector<std::string> worker_names() const;
  std::vector<std::string> analyzer_names() const;

 private:
  std::map<std::string, WorkerFn> workers_;
  std::map<std::string, AnalyzerFn> analyzers_;
};

struct GenerateOutput {
  std::vector<GenerationResult> results;
  RunId run_id;
  /// Path of the flushed .qkc file; empty when nothing was captured.
  std::string cache_path;
};

/// Owns a model with the mode's worker installed, runs generation and
/// dispatches analysis over the most recent run. Mode is fixed for the
/// lifetime of the instance; use separate instances (and hook dirs) for
/// concurrent sessions.
class HookLLM {
 public:
  GenerateOutput generate(const std::vector<std::string>& prompts, int max_new_tokens);
  GenerateOutput generate_tokens(const std::vector<TokenSequence>& prompts,
                                 int max_new_tokens);

  /// Dispatches to the named analyzer over the run id of the most recent
  /// generate. An empty spec.head_profile is filled from the config's
  /// important heads.
  nlohmann::json analyze(const std::string& analyzer_name, const AnalyzerSpec& spec,
                         const nlohmann::json& params = nlohmann::json::object());

  const Model& model() const { return *model_; }
  const HookConfig& config() const { return config_; }
  const EnvSettings& env() const { return env_; }
  Mode mode() const { return mode_; }
  const std::string& worker_name() const { return worker_name_; }
  const std::optional<RunId>& last_run_id() const { return last_run_id_; }
  Registry& registry() { return registry_; }

 private:
  friend HookLLM new_hookllm(Model model, const HookConfig& config,
                             const EnvSettings& env, Mode mode,
                             std::optional<SteeringPlan> plan, Registry registry);
  HookLLM(std::unique_ptr<Model> model, HookConfig config, EnvSettings env, Mode mode,
          std::optional<SteeringPlan> plan, Registry registry);

  // Heap-held so the installed handle's model pointer survives moves.
  std::unique_ptr<Model> model_;
  HookConfig config_;
  EnvSettings env_;
  Mode mode_;
  std::optional<SteeringPlan> plan_;
  Registry registry_;
  std::string worker_name_;
  ProbeHandle handle_;
  std::optional<RunId> last_run_id_;
};

/// Validates the config against the model and the mode/plan combination
/// (active requires a plan, passive forbids one), then installs the mode's
/// worker. Passive mode with no configured layers installs nothing.
HookLLM new_hookllm(Model model, const HookConfig& config, const EnvSettings& env,
                    Mode mode, std::optional<SteeringPlan> plan = std::nullopt,
                    Registry registry = Registry::with_builtins());

}  // namespace hookrt

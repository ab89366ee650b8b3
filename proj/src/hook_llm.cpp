#include "hookrt/hook_llm.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace hookrt {

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::ostringstream os;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) os << ", ";
    os << parts[i];
  }
  return os.str();
}

template <typename Map>
std::vector<std::string> sorted_keys(const Map& m) {
  std::vector<std::string> names;
  names.reserve(m.size());
  for (const auto& [name, fn] : m) names.push_back(name);
  return names;
}

nlohmann::json run_attntracker(const AnalyzeRequest& req) {
  const double tau = req.params.value("tau", 0.5);
  const FocusResult result = analyze_injection(req.run_id, req.hook_dir, req.spec, tau);
  nlohmann::json per_head = nlohmann::json::array();
  for (const auto& [key, value] : result.per_head_scores) {
    per_head.push_back({{"layer", key.first}, {"head", key.second}, {"score", value}});
  }
  return {{"score", result.score},
          {"verdict",
           result.verdict == FocusResult::Verdict::suspicious ? "suspicious" : "benign"},
          {"tau", tau},
          {"per_head", per_head}};
}

nlohmann::json run_corer(const AnalyzeRequest& req) {
  if (!req.params.contains("doc_spans") || !req.params["doc_spans"].is_array()) {
    throw std::invalid_argument("corer: params must carry a doc_spans list");
  }
  std::vector<Span> spans;
  for (const auto& entry : req.params["doc_spans"]) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer() ||
        !entry[1].is_number_integer()) {
      throw std::invalid_argument("corer: each doc span must be a [begin, end) pair");
    }
    spans.push_back({entry[0].get<int>(), entry[1].get<int>()});
  }
  const RunCapture run = load_qk_cache(req.run_id, req.hook_dir);
  const RelevanceResult result = rerank(run.items, spans, req.spec.head_profile);
  return {{"scores", result.scores}, {"ranking", result.ranking}};
}

}  // namespace

Mode mode_from_string(const std::string& s) {
  if (s == "passive") return Mode::passive;
  if (s == "active") return Mode::active;
  throw std::invalid_argument("unknown mode: " + s + " (expected passive or active)");
}

std::string to_string(Mode mode) {
  return mode == Mode::passive ? "passive" : "active";
}

Registry Registry::with_builtins() {
  Registry r;
  r.register_worker("probe_qk",
                    [](Model& model, const EnvSettings& env, const SteeringPlan*) {
                      return install_probes(model, env);
                    });
  r.register_worker("actsteer",
                    [](Model& model, const EnvSettings&, const SteeringPlan* plan) {
                      if (plan == nullptr) {
                        throw std::invalid_argument("actsteer requires a steering plan");
                      }
                      return install_steering(model, *plan);
                    });
  r.register_analyzer("attntracker", run_attntracker);
  r.register_analyzer("corer", run_corer);
  return r;
}

void Registry::register_worker(const std::string& name, WorkerFn fn) {
  if (!workers_.emplace(name, std::move(fn)).second) {
    throw std::invalid_argument("worker already registered: " + name);
  }
}

void Registry::register_analyzer(const std::string& name, AnalyzerFn fn) {
  if (!analyzers_.emplace(name, std::move(fn)).second) {
    throw std::invalid_argument("analyzer already registered: " + name);
  }
}

const Registry::WorkerFn& Registry::worker(const std::string& name) const {
  const auto it = workers_.find(name);
  if (it == workers_.end()) {
    throw std::invalid_argument("unknown worker: " + name +
                                " (available: " + join(worker_names()) + ")");
  }
  return it->second;
}

const Registry::AnalyzerFn& Registry::analyzer(const std::string& name) const {
  const auto it = analyzers_.find(name);
  if (it == analyzers_.end()) {
    throw std::invalid_argument("unknown analyzer: " + name +
                                " (available: " + join(analyzer_names()) + ")");
  }
  return it->second;
}

std::vector<std::string> Registry::worker_names() const { return sorted_keys(workers_); }

std::vector<std::string> Registry::analyzer_names() const { return sorted_keys(analyzers_); }

HookLLM::HookLLM(std::unique_ptr<Model> model, HookConfig config, EnvSettings env,
                 Mode mode, std::optional<SteeringPlan> plan, Registry registry)
    : model_(std::move(model)),
      config_(std::move(config)),
      env_(std::move(env)),
      mode_(mode),
      plan_(std::move(plan)),
      registry_(std::move(registry)) {}

HookLLM new_hookllm(Model model, const HookConfig& config, const EnvSettings& env,
                    Mode mode, std::optional<SteeringPlan> plan, Registry registry) {
  if (mode == Mode::active && !plan.has_value()) {
    throw std::invalid_argument("active mode requires a steering plan");
  }
  if (mode == Mode::passive && plan.has_value()) {
    throw std::invalid_argument("passive mode does not take a steering plan");
  }
  const std::vector<std::string> problems = validate(config, model.spec());
  if (!problems.empty()) {
    throw std::invalid_argument("config does not fit the model: " + join(problems));
  }

  HookLLM llm(std::make_unique<Model>(std::move(model)), config, env, mode,
              std::move(plan), std::move(registry));
  llm.worker_name_ = mode == Mode::passive ? "probe_qk" : "actsteer";
  const bool nothing_to_probe = mode == Mode::passive && env.layer_heads.empty();
  if (!nothing_to_probe) {
    llm.handle_ = llm.registry_.worker(llm.worker_name_)(
        *llm.model_, llm.env_, llm.plan_ ? &*llm.plan_ : nullptr);
  }
  return llm;
}

GenerateOutput HookLLM::generate(const std::vector<std::string>& prompts,
                                 int max_new_tokens) {
  std::vector<TokenSequence> token_prompts;
  token_prompts.reserve(prompts.size());
  for (const std::string& text : prompts) token_prompts.push_back(tokenize(text));
  return generate_tokens(token_prompts, max_new_tokens);
}

GenerateOutput HookLLM::generate_tokens(const std::vector<TokenSequence>& prompts,
                                        int max_new_tokens) {
  if (prompts.empty()) {
    throw std::invalid_argument("generate: no prompts given");
  }

  GenerateOutput out;
  const bool run_file_configured = !env_.run_id_file.empty() && !env_.hook_dir.empty();
  out.run_id = run_file_configured ? begin_run(env_) : fresh_run_id();

  const std::shared_ptr<CaptureState>& capture = handle_.capture();
  if (capture) capture->begin_run();

  out.results.reserve(prompts.size());
  for (const TokenSequence& prompt : prompts) {
    if (capture) capture->begin_item();
    out.results.push_back(generate_greedy(*model_, prompt, max_new_tokens));
  }

  if (capture && capture->flag_was_active() && !capture->items().empty()) {
    out.cache_path = flush_capture(capture->items(), out.run_id, env_);
  }
  last_run_id_ = out.run_id;
  return out;
}

nlohmann::json HookLLM::analyze(const std::string& analyzer_name, const AnalyzerSpec& spec,
                                const nlohmann::json& params) {
  const Registry::AnalyzerFn& fn = registry_.analyzer(analyzer_name);
  if (!last_run_id_.has_value()) {
    throw std::runtime_error(
        "analyze: no generate has run on this instance, so no qk_<run_id>.qkc cache "
        "exists yet");
  }
  AnalyzeRequest req;
  req.run_id = *last_run_id_;
  req.hook_dir = env_.hook_dir;
  req.spec = spec;
  if (req.spec.head_profile.empty()) req.spec.head_profile = config_.important_heads;
  req.params = params;
  return fn(req);
}

}  // namespace hookrt

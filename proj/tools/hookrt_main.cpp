// Command-line front end: model initialization, probed/steered generation,
// capture analysis, document reranking and steering-vector construction.
//
// Exit codes: 0 success or benign verdict, 1 operational error, 2 usage
// error, 3 suspicious verdict.

#include "hookrt/analyzer.hpp"
#include "hookrt/hook_llm.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> read_nonempty_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Generated byte strings need not be valid UTF-8; render them lossily (the
// exact bytes are always available as token ids).
void emit(const json& doc) {
  std::cout << doc.dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
}

hookrt::ModelSpec parse_model_spec(const std::string& arg) {
  std::string text = arg;
  if (!arg.empty() && arg[0] != '{') text = read_file(arg);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("malformed model spec JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("model spec must be a JSON object");

  hookrt::ModelSpec spec;
  auto require_int = [&doc](const char* key) {
    if (!doc.contains(key) || !doc.at(key).is_number_integer())
      throw std::invalid_argument(std::string("model spec needs integer field ") + key);
    return doc.at(key).get<int>();
  };
  spec.n_layers = require_int("n_layers");
  spec.n_heads = require_int("n_heads");
  spec.d_model = require_int("d_model");
  spec.vocab_size = require_int("vocab_size");
  spec.max_seq_len = require_int("max_seq_len");
  spec.d_head = doc.contains("d_head") ? require_int("d_head")
                                       : (spec.n_heads > 0 ? spec.d_model / spec.n_heads : 0);
  if (doc.contains("rope_theta")) spec.rope_theta = doc.at("rope_theta").get<float>();
  spec.validate();
  return spec;
}

hookrt::SpanPair parse_input_range(const std::string& s) {
  // "is,ie:qs,qe", half-open token ranges
  const auto parse_span = [&s](const std::string& part) {
    const auto comma = part.find(',');
    if (comma == std::string::npos)
      throw std::invalid_argument("bad input range \"" + s + "\" (expected is,ie:qs,qe)");
    try {
      hookrt::Span span{std::stoi(part.substr(0, comma)), std::stoi(part.substr(comma + 1))};
      return span;
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("bad input range \"" + s + "\" (expected is,ie:qs,qe)");
    }
  };
  const auto colon = s.find(':');
  if (colon == std::string::npos)
    throw std::invalid_argument("bad input range \"" + s + "\" (expected is,ie:qs,qe)");
  return {parse_span(s.substr(0, colon)), parse_span(s.substr(colon + 1))};
}

struct EnvFlags {
  std::string hook_flag;
  std::string hook_dir;
  std::string run_id_file;
  std::string hookq_mode;
  std::string layer_heads;

  void attach(CLI::App* cmd) {
    cmd->add_option("--hook-flag", hook_flag,
                    "Flag file path; capture runs only while it exists");
    cmd->add_option("--hook-dir", hook_dir, "Directory for capture files");
    cmd->add_option("--run-id-file", run_id_file, "File the run id is written to");
    cmd->add_option("--hookq-mode", hookq_mode, "last_token or all_tokens");
    cmd->add_option("--layer-heads", layer_heads, "Hooked heads, e.g. \"0:0,3;1:2\"");
  }

  // Flags fill in what the config leaves open; VLLM_HOOK_* env vars win
  // over both.
  hookrt::EnvSettings resolve(const hookrt::HookConfig& config) const {
    std::map<std::string, std::string> vars;
    if (!hook_flag.empty()) vars[hookrt::kEnvHookFlag] = hook_flag;
    if (!hook_dir.empty()) vars[hookrt::kEnvHookDir] = hook_dir;
    if (!run_id_file.empty()) vars[hookrt::kEnvRunId] = run_id_file;
    if (!hookq_mode.empty()) vars[hookrt::kEnvHookqMode] = hookq_mode;
    if (!layer_heads.empty()) vars[hookrt::kEnvLayerHeads] = layer_heads;
    for (const char* name : {hookrt::kEnvHookFlag, hookrt::kEnvHookDir, hookrt::kEnvRunId,
                             hookrt::kEnvHookqMode, hookrt::kEnvLayerHeads})
      if (const char* v = std::getenv(name)) vars[name] = v;
    return hookrt::resolve_env(config, vars);
  }
};

hookrt::HookConfig load_config(const std::string& path) {
  return hookrt::parse_config(read_file(path));
}

struct InitModelOpts {
  std::string spec;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_init_model(const InitModelOpts& o) {
  const hookrt::ModelSpec spec = parse_model_spec(o.spec);
  const hookrt::Model model = hookrt::Model::seeded(spec, o.seed);
  model.save(o.out);
  emit({{"path", o.out},
        {"param_count", model.param_count()},
        {"checksum", hex64(model.param_checksum())}});
  return 0;
}

struct GenerateOpts {
  std::string config;
  std::string model;
  std::string prompt;
  std::string mode = "passive";
  int max_new = 16;
  std::string steer_vector;
  double alpha = 1.0;
  int layer = -1;  // -1: take the layer stored in the vector file
  std::string positions = "all";
  EnvFlags env;
};

int cmd_generate(const GenerateOpts& o) {
  const hookrt::HookConfig config = load_config(o.config);
  const hookrt::Mode mode = hookrt::mode_from_string(o.mode);

  std::optional<hookrt::SteeringPlan> plan;
  if (mode == hookrt::Mode::active) {
    if (o.steer_vector.empty())
      throw std::invalid_argument("--mode active requires --steer-vector");
    auto [layer, vec] = hookrt::read_steering_vector(o.steer_vector);
    hookrt::SteeringPlan p;
    p.layer = o.layer >= 0 ? o.layer : layer;
    p.vector = std::move(vec);
    p.alpha = static_cast<float>(o.alpha);
    if (o.positions == "all")
      p.positions = hookrt::SteeringPlan::Positions::all;
    else if (o.positions == "last")
      p.positions = hookrt::SteeringPlan::Positions::last;
    else
      throw std::invalid_argument("unknown --positions value: " + o.positions +
                                  " (expected all or last)");
    plan = std::move(p);
  } else if (!o.steer_vector.empty()) {
    throw std::invalid_argument("--steer-vector needs --mode active");
  }

  hookrt::Model model = hookrt::Model::from_file(o.model);
  const int vocab = model.spec().vocab_size;
  hookrt::HookLLM llm = hookrt::new_hookllm(std::move(model), config,
                                            o.env.resolve(config), mode, std::move(plan));
  const hookrt::GenerateOutput out = llm.generate({o.prompt}, o.max_new);

  emit({{"text", hookrt::detokenize(out.results[0].generated_tokens, vocab)},
        {"run_id", out.run_id},
        {"generated_tokens", out.results[0].generated_tokens},
        {"cache_path", out.cache_path}});
  return 0;
}

struct AnalyzeOpts {
  std::string config;
  std::string run_id;
  std::string analyzer = "attntracker";
  std::vector<std::string> input_ranges;
  std::string attn_func = "sum_normalize";
  double threshold = 0.5;
  std::string heads;
  std::vector<std::string> doc_spans;
  EnvFlags env;
};

int cmd_analyze(const AnalyzeOpts& o) {
  const hookrt::HookConfig config = load_config(o.config);
  const hookrt::Registry registry = hookrt::Registry::with_builtins();
  const hookrt::Registry::AnalyzerFn& fn = registry.analyzer(o.analyzer);

  hookrt::AnalyzeRequest req;
  req.run_id = o.run_id;
  req.hook_dir = o.env.resolve(config).hook_dir;
  req.spec.attn_func = hookrt::attn_func_from_string(o.attn_func);
  for (const std::string& r : o.input_ranges)
    req.spec.input_range.push_back(parse_input_range(r));
  req.spec.head_profile = o.heads.empty()
                              ? config.important_heads
                              : hookrt::layer_map_to_heads(hookrt::parse_layer_heads(o.heads));
  req.params["tau"] = o.threshold;
  if (!o.doc_spans.empty()) {
    json spans = json::array();
    for (const std::string& s : o.doc_spans) {
      const auto comma = s.find(',');
      if (comma == std::string::npos)
        throw std::invalid_argument("bad doc span \"" + s + "\" (expected begin,end)");
      spans.push_back({std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))});
    }
    req.params["doc_spans"] = spans;
  }

  const json result = fn(req);
  emit(result);
  return result.value("verdict", "") == "suspicious" ? 3 : 0;
}

struct RerankOpts {
  std::string config;
  std::string model;
  std::string query;
  std::string docs;
  std::string heads;
  EnvFlags env;
};

int cmd_rerank(const RerankOpts& o) {
  const hookrt::HookConfig config = load_config(o.config);
  const std::vector<std::string> docs = read_nonempty_lines(o.docs);
  if (docs.empty()) throw std::invalid_argument("docs file has no documents: " + o.docs);

  const std::vector<hookrt::HeadRef> profile =
      o.heads.empty() ? config.important_heads
                      : hookrt::layer_map_to_heads(hookrt::parse_layer_heads(o.heads));
  if (profile.empty())
    throw std::invalid_argument("no heads to score: configure important_heads or pass --heads");

  hookrt::EnvSettings env = o.env.resolve(config);
  env.layer_heads = hookrt::heads_to_layer_map(profile);

  // Reranking needs a capture; provision a scratch hook dir and flag when
  // the caller did not set up the protocol.
  fs::path scratch;
  if (env.hook_dir.empty()) {
    std::random_device rd;
    scratch = fs::temp_directory_path() /
              ("hookrt-rerank-" + std::to_string(rd()) + "-" + std::to_string(::getpid()));
    fs::create_directories(scratch);
    env.hook_dir = scratch.string();
    env.hook_flag_path = (scratch / "flag").string();
    env.run_id_file = (scratch / "run_id").string();
  }
  if (env.hook_flag_path.empty()) env.hook_flag_path = (fs::path(env.hook_dir) / "flag").string();
  if (env.run_id_file.empty()) env.run_id_file = (fs::path(env.hook_dir) / "run_id").string();
  if (!fs::exists(env.hook_flag_path)) std::ofstream(env.hook_flag_path).flush();

  int rc = 1;
  try {
    hookrt::Model model = hookrt::Model::from_file(o.model);
    std::vector<std::string> prompts;
    std::vector<hookrt::Span> spans;
    for (const std::string& doc : docs) {
      prompts.push_back(doc + "\n" + o.query);
      spans.push_back({0, static_cast<int>(doc.size())});
    }

    hookrt::HookLLM llm =
        hookrt::new_hookllm(std::move(model), config, env, hookrt::Mode::passive);
    const hookrt::GenerateOutput out = llm.generate(prompts, 1);
    if (out.cache_path.empty())
      throw std::runtime_error("rerank: no capture was written under " + env.hook_dir);

    const hookrt::RunCapture run = hookrt::load_qk_cache(out.run_id, env.hook_dir);
    const hookrt::RelevanceResult result = hookrt::rerank(run.items, spans, profile);
    emit({{"run_id", out.run_id}, {"scores", result.scores}, {"ranking", result.ranking}});
    rc = 0;
  } catch (...) {
    if (!scratch.empty()) fs::remove_all(scratch);
    throw;
  }
  if (!scratch.empty()) fs::remove_all(scratch);
  return rc;
}

struct BuildSteerOpts {
  std::string model;
  std::string pos;
  std::string neg;
  int layer = 0;
  std::string out;
  bool mean_over_positions = false;
};

int cmd_build_steer_vector(const BuildSteerOpts& o) {
  const std::vector<std::string> pos_lines = read_nonempty_lines(o.pos);
  const std::vector<std::string> neg_lines = read_nonempty_lines(o.neg);
  if (pos_lines.empty()) throw std::invalid_argument("positive prompts file is empty: " + o.pos);
  if (neg_lines.empty()) throw std::invalid_argument("negative prompts file is empty: " + o.neg);

  auto to_tokens = [](const std::vector<std::string>& lines) {
    std::vector<hookrt::TokenSequence> out;
    for (const std::string& line : lines) out.push_back(hookrt::tokenize(line));
    return out;
  };

  const hookrt::Model model = hookrt::Model::from_file(o.model);
  hookrt::SteeringBuildOptions opts;
  opts.mean_over_positions = o.mean_over_positions;
  const hookrt::SteeringVector vec = hookrt::build_steering_vector(
      model, to_tokens(pos_lines), to_tokens(neg_lines), o.layer, opts);
  hookrt::write_steering_vector(o.out, vec.layer, vec.vector);

  emit({{"path", o.out},
        {"layer", vec.layer},
        {"d_model", static_cast<int>(vec.vector.size())},
        {"norm", static_cast<double>(vec.vector.norm())}});
  return 0;
}

struct InspectOpts {
  std::string run_id;
  std::string hook_dir;
};

int cmd_inspect_cache(const InspectOpts& o) {
  const hookrt::RunCapture run = hookrt::load_qk_cache(o.run_id, o.hook_dir);
  json modules = json::array();
  bool all_single_row = true;
  for (std::size_t item = 0; item < run.items.size(); ++item) {
    for (const hookrt::ModuleCapture& m : run.items[item].modules) {
      if (m.q.rows() != 1) all_single_row = false;
      modules.push_back({{"item", item},
                         {"name", m.name},
                         {"layer", m.layer_num},
                         {"q_rows", m.q.rows()},
                         {"k_rows", m.k_all.rows()},
                         {"n_heads", m.n_heads},
                         {"d_head", m.d_head}});
    }
  }
  emit({{"run_id", run.run_id},
        {"path", hookrt::qkc_path(o.hook_dir, o.run_id)},
        {"n_items", run.items.size()},
        {"hookq_mode", all_single_row ? "last_token" : "all_tokens"},
        {"modules", modules}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instrumented decoder runtime: probe attention states, steer activations"};
  app.require_subcommand(1);

  InitModelOpts init_o;
  auto* init = app.add_subcommand("init-model", "Write deterministically seeded weights");
  init->add_option("--spec", init_o.spec, "Model spec JSON (inline or a file path)")->required();
  init->add_option("--seed", init_o.seed, "Initialization seed");
  init->add_option("--out", init_o.out, "Output weight file")->required();

  GenerateOpts gen_o;
  auto* gen = app.add_subcommand("generate", "Greedy generation, optionally probed or steered");
  gen->add_option("--config", gen_o.config, "Hook config JSON file")->required();
  gen->add_option("--model", gen_o.model, "Weight file")->required();
  gen->add_option("--prompt", gen_o.prompt, "Prompt text")->required();
  gen->add_option("--mode", gen_o.mode, "passive or active");
  gen->add_option("--max-new", gen_o.max_new, "Decode step budget");
  gen->add_option("--steer-vector", gen_o.steer_vector, "Steering vector file (active mode)");
  gen->add_option("--alpha", gen_o.alpha, "Steering scale");
  gen->add_option("--layer", gen_o.layer, "Injection layer (defaults to the file's)");
  gen->add_option("--positions", gen_o.positions, "Inject at: all or last");
  gen_o.env.attach(gen);

  GenerateOpts steer_o;
  steer_o.mode = "active";
  auto* steer = app.add_subcommand("steer", "Active generation with a steering vector");
  steer->add_option("--config", steer_o.config, "Hook config JSON file")->required();
  steer->add_option("--model", steer_o.model, "Weight file")->required();
  steer->add_option("--prompt", steer_o.prompt, "Prompt text")->required();
  steer->add_option("--max-new", steer_o.max_new, "Decode step budget");
  steer->add_option("--steer-vector", steer_o.steer_vector, "Steering vector file")->required();
  steer->add_option("--alpha", steer_o.alpha, "Steering scale");
  steer->add_option("--layer", steer_o.layer, "Injection layer (defaults to the file's)");
  steer->add_option("--positions", steer_o.positions, "Inject at: all or last");
  steer_o.env.attach(steer);

  AnalyzeOpts an_o;
  auto* an = app.add_subcommand("analyze", "Score a persisted Q/K capture");
  an->add_option("--config", an_o.config, "Hook config JSON file")->required();
  an->add_option("--run-id", an_o.run_id, "Run id of the capture")->required();
  an->add_option("--analyzer", an_o.analyzer, "Registered analyzer name");
  an->add_option("--input-range", an_o.input_ranges,
                 "Instruction/query spans \"is,ie:qs,qe\" (repeat per prompt)");
  an->add_option("--attn-func", an_o.attn_func, "Score reduction (sum_normalize)");
  an->add_option("--threshold", an_o.threshold, "Suspicion threshold tau");
  an->add_option("--heads", an_o.heads, "Head profile override, e.g. \"0:0,3;1:2\"");
  an->add_option("--doc-span", an_o.doc_spans, "Document span \"begin,end\" (corer, repeatable)");
  an_o.env.attach(an);

  RerankOpts rr_o;
  auto* rr = app.add_subcommand("rerank", "Rank documents by probed attention to each");
  rr->add_option("--config", rr_o.config, "Hook config JSON file")->required();
  rr->add_option("--model", rr_o.model, "Weight file")->required();
  rr->add_option("--query", rr_o.query, "Query text")->required();
  rr->add_option("--docs", rr_o.docs, "File with one document per line")->required();
  rr->add_option("--heads", rr_o.heads, "Head profile override");
  rr_o.env.attach(rr);

  BuildSteerOpts bs_o;
  auto* bs = app.add_subcommand("build-steer-vector",
                                "Mean activation difference between prompt sets");
  bs->add_option("--model", bs_o.model, "Weight file")->required();
  bs->add_option("--pos", bs_o.pos, "Positive prompts, one per line")->required();
  bs->add_option("--neg", bs_o.neg, "Negative prompts, one per line")->required();
  bs->add_option("--layer", bs_o.layer, "Residual layer to read")->required();
  bs->add_option("--out", bs_o.out, "Output vector file")->required();
  bs->add_flag("--mean-over-positions", bs_o.mean_over_positions,
               "Average over all prompt positions instead of the last");

  InspectOpts in_o;
  auto* in = app.add_subcommand("inspect-cache", "Summarize a capture file");
  in->add_option("--run-id", in_o.run_id, "Run id of the capture")->required();
  in->add_option("--hook-dir", in_o.hook_dir, "Directory holding the capture")->required();

  int rc = 0;
  init->callback([&] { rc = cmd_init_model(init_o); });
  gen->callback([&] { rc = cmd_generate(gen_o); });
  steer->callback([&] { rc = cmd_generate(steer_o); });
  an->callback([&] { rc = cmd_analyze(an_o); });
  rr->callback([&] { rc = cmd_rerank(rr_o); });
  bs->callback([&] { rc = cmd_build_steer_vector(bs_o); });
  in->callback([&] { rc = cmd_inspect_cache(in_o); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}

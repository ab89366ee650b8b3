#include "hookrt/analyzer.hpp"

#include "hookrt/runtime.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>

namespace hookrt {

namespace {

void check_span(const Span& s, int t, const char* what) {
  if (s.begin < 0 || s.end > t || s.begin >= s.end) {
    throw std::invalid_argument(std::string(what) + " span [" + std::to_string(s.begin) +
                                ", " + std::to_string(s.end) +
                                ") is invalid for a sequence of length " + std::to_string(t));
  }
}

void check_spans(const SpanPair& spans, int t) {
  check_span(spans.instruction, t, "instruction");
  check_span(spans.query, t, "query");
  if (spans.instruction.begin < spans.query.end && spans.query.begin < spans.instruction.end) {
    throw std::invalid_argument("instruction and query spans overlap");
  }
}

double span_mass(const RowVecF& row, const Span& s) {
  double mass = 0.0;
  for (int j = s.begin; j < s.end; ++j) mass += static_cast<double>(row(j));
  return mass;
}

}  // namespace

AttnFunc attn_func_from_string(const std::string& s) {
  if (s == "sum_normalize") return AttnFunc::sum_normalize;
  throw std::invalid_argument("unknown attn_func: " + s + " (expected sum_normalize)");
}

RunCapture load_qk_cache(const RunId& run_id, const std::string& hook_dir) {
  const std::string path = qkc_path(hook_dir, run_id);
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("Q/K cache file not found: " + path);
  }
  return read_qkc(path);
}

SelectiveAttention compute_attention_from_qk(const QKCapture& capture,
                                             const std::vector<HeadRef>& heads) {
  if (heads.empty()) {
    throw std::invalid_argument("compute_attention_from_qk: head profile is empty");
  }
  SelectiveAttention out;
  out.heads.reserve(heads.size());
  for (const HeadRef& ref : heads) {
    const ModuleCapture* mod = capture.find_layer(ref.layer);
    if (mod == nullptr) {
      throw std::invalid_argument("layer " + std::to_string(ref.layer) +
                                  " is not present in the capture");
    }
    if (ref.head < 0 || ref.head >= mod->n_heads) {
      throw std::invalid_argument("head " + std::to_string(ref.head) +
                                  " out of range [0, " + std::to_string(mod->n_heads) +
                                  ") for layer " + std::to_string(ref.layer));
    }
    const int n_q = static_cast<int>(mod->q.rows());
    const int t = static_cast<int>(mod->k_all.rows());
    const int c0 = ref.head * mod->d_head;

    HeadAttention head;
    head.ref = ref;
    head.rows = MatF::Zero(n_q, t);
    for (int i = 0; i < n_q; ++i) {
      const int pos = t - n_q + i;
      const RowVecF row = attention_reference(mod->q.row(i).segment(c0, mod->d_head),
                                              mod->k_all.middleCols(c0, mod->d_head).topRows(pos + 1));
      head.rows.row(i).head(pos + 1) = row;
    }
    out.heads.push_back(std::move(head));
  }
  return out;
}

std::map<std::pair<int, int>, double> attn2score_per_head(const SelectiveAttention& attn,
                                                          const SpanPair& spans,
                                                          AttnFunc func) {
  if (func != AttnFunc::sum_normalize) {
    throw std::invalid_argument("unsupported attn_func");
  }
  if (attn.heads.empty()) {
    throw std::invalid_argument("attn2score: no attention heads to score");
  }
  std::map<std::pair<int, int>, double> scores;
  for (const HeadAttention& head : attn.heads) {
    if (head.rows.rows() == 0) {
      throw std::invalid_argument("attn2score: head has no query rows");
    }
    const int t = static_cast<int>(head.rows.cols());
    check_spans(spans, t);
    const RowVecF last = head.rows.row(head.rows.rows() - 1);
    const double s_inst = span_mass(last, spans.instruction);
    const double s_query = span_mass(last, spans.query);
    const double denom = s_inst + s_query;
    const double score = denom == 0.0 ? 0.0 : s_inst / denom;
    scores[{head.ref.layer, head.ref.head}] = score;
  }
  return scores;
}

double attn2score(const SelectiveAttention& attn, const SpanPair& spans, AttnFunc func) {
  const auto scores = attn2score_per_head(attn, spans, func);
  double sum = 0.0;
  for (const auto& [key, value] : scores) sum += value;
  return sum / static_cast<double>(scores.size());
}

FocusResult analyze_injection(const RunId& run_id, const std::string& hook_dir,
                              const AnalyzerSpec& spec, double tau) {
  if (spec.head_profile.empty()) {
    throw std::invalid_argument("analyze_injection: head profile is empty");
  }
  const RunCapture run = load_qk_cache(run_id, hook_dir);
  if (run.items.empty()) {
    throw std::runtime_error("analyze_injection: capture holds no items");
  }
  const size_t n_items = run.items.size();
  if (spec.input_range.size() != n_items && spec.input_range.size() != 1) {
    throw std::invalid_argument("analyze_injection: got " + std::to_string(spec.input_range.size()) +
                                " span pairs for " + std::to_string(n_items) + " captured prompts");
  }

  FocusResult result;
  double total = 0.0;
  for (size_t i = 0; i < n_items; ++i) {
    const SpanPair& spans =
        spec.input_range.size() == 1 ? spec.input_range[0] : spec.input_range[i];
    const SelectiveAttention attn = compute_attention_from_qk(run.items[i], spec.head_profile);
    const auto per_head = attn2score_per_head(attn, spans, spec.attn_func);
    double item_sum = 0.0;
    for (const auto& [key, value] : per_head) {
      result.per_head_scores[key] += value;
      item_sum += value;
    }
    total += item_sum / static_cast<double>(per_head.size());
  }
  for (auto& [key, value] : result.per_head_scores) value /= static_cast<double>(n_items);
  result.score = total / static_cast<double>(n_items);
  result.verdict =
      result.score < tau ? FocusResult::Verdict::suspicious : FocusResult::Verdict::benign;
  return result;
}

RelevanceResult rerank(const std::vector<QKCapture>& captures,
                       const std::vector<Span>& doc_spans,
                       const std::vector<HeadRef>& heads) {
  if (captures.empty()) {
    throw std::invalid_argument("rerank: no captures given");
  }
  if (captures.size() != doc_spans.size()) {
    throw std::invalid_argument("rerank: got " + std::to_string(doc_spans.size()) +
                                " document spans for " + std::to_string(captures.size()) +
                                " captures");
  }
  RelevanceResult result;
  result.scores.reserve(captures.size());
  for (size_t d = 0; d < captures.size(); ++d) {
    const SelectiveAttention attn = compute_attention_from_qk(captures[d], heads);
    double sum = 0.0;
    for (const HeadAttention& head : attn.heads) {
      const int t = static_cast<int>(head.rows.cols());
      check_span(doc_spans[d], t, "document");
      if (head.rows.rows() == 0) {
        throw std::invalid_argument("rerank: head has no query rows");
      }
      sum += span_mass(head.rows.row(head.rows.rows() - 1), doc_spans[d]);
    }
    result.scores.push_back(sum / static_cast<double>(attn.heads.size()));
  }
  result.ranking.resize(captures.size());
  std::iota(result.ranking.begin(), result.ranking.end(), 0);
  std::stable_sort(result.ranking.begin(), result.ranking.end(),
                   [&](int a, int b) { return result.scores[a] > result.scores[b]; });
  return result;
}

SteeringVector build_steering_vector(const Model& model,
                                     const std::vector<TokenSequence>& positive_prompts,
                                     const std::vector<TokenSequence>& negative_prompts,
                                     int layer, const SteeringBuildOptions& opts) {
  const ModelSpec& spec = model.spec();
  if (layer < 0 || layer >= spec.n_layers) {
    throw std::invalid_argument("build_steering_vector: layer " + std::to_string(layer) +
                                " out of range [0, " + std::to_string(spec.n_layers) + ")");
  }
  if (positive_prompts.empty() || negative_prompts.empty()) {
    throw std::invalid_argument("build_steering_vector: both prompt sets must be non-empty");
  }

  // Record the residual stream at the requested layer through an injector
  // that hands every hidden state back unchanged.
  auto collect = [&](const TokenSequence& prompt) {
    Eigen::VectorXd sample = Eigen::VectorXd::Zero(spec.d_model);
    bool seen = false;
    HookTap tap;
    tap.residual_injector = [&](const ResidualSite& site, const MatF& hidden) -> MatF {
      if (site.layer == layer) {
        if (opts.mean_over_positions) {
          sample = hidden.cast<double>().colwise().mean().transpose();
        } else {
          sample = hidden.row(hidden.rows() - 1).cast<double>().transpose();
        }
        seen = true;
      }
      return hidden;
    };
    KVCacheState cache = KVCacheState::empty(spec);
    forward(model, prompt, cache, &tap);
    if (!seen) {
      throw std::logic_error("build_steering_vector: layer " + std::to_string(layer) +
                             " was never reached");
    }
    return sample;
  };

  Eigen::VectorXd mean_pos = Eigen::VectorXd::Zero(spec.d_model);
  Eigen::VectorXd mean_neg = Eigen::VectorXd::Zero(spec.d_model);
  for (const TokenSequence& prompt : positive_prompts) mean_pos += collect(prompt);
  for (const TokenSequence& prompt : negative_prompts) mean_neg += collect(prompt);
  mean_pos /= static_cast<double>(positive_prompts.size());
  mean_neg /= static_cast<double>(negative_prompts.size());

  SteeringVector out;
  out.layer = layer;
  out.vector = (mean_pos - mean_neg).cast<float>();
  out.n_positive = static_cast<int>(positive_prompts.size());
  out.n_negative = static_cast<int>(negative_prompts.size());
  return out;
}

}  // namespace hookrt

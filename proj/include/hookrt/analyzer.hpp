#pragma once

#include "hookrt/config.hpp"
#include "hookrt/model.hpp"
#include "hookrt/qkc.hpp"
#include "hookrt/tokenizer.hpp"
#include "hookrt/worker.hpp"

#include <map>
#include <string>
#include <vector>

namespace hookrt {

/// Half-open token index range.
struct Span {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

/// Instruction and user-query token ranges of one prompt. Must be
/// non-empty, in bounds and non-overlapping.
struct SpanPair {
  Span instruction;
  Span query;
};

enum class AttnFunc { sum_normalize };

AttnFunc attn_func_from_string(const std::string& s);

struct AnalyzerSpec {
  std::vector<SpanPair> input_range;  // one per batch item
  AttnFunc attn_func = AttnFunc::sum_normalize;
  std::vector<HeadRef> head_profile;
};

/// Recomputed attention rows of one head: [n_q, t], row i scored at
/// absolute position t - n_q + i, entries past that position exactly zero.
struct HeadAttention {
  HeadRef ref;
  MatF rows;
};

struct SelectiveAttention {
  std::vector<HeadAttention> heads;
};

struct FocusResult {
  double score = 0.0;
  std::map<std::pair<int, int>, double> per_head_scores;  // (layer, head) -> score
  enum class Verdict { benign, suspicious } verdict = Verdict::benign;
};

struct RelevanceResult {
  std::vector<double> scores;
  std::vector<int> ranking;  // document indices by descending score, stable
};

struct SteeringVector {
  int layer = 0;
  VecF vector;
  int n_positive = 0;
  int n_negative = 0;
};

/// Reads <hook_dir>/qk_<run_id>.qkc; errors name the expected path when the
/// file is missing.
RunCapture load_qk_cache(const RunId& run_id, const std::string& hook_dir);

/// Slices the requested heads out of the stored per-layer tensors and
/// recomputes each query row with the runtime's attention_reference.
SelectiveAttention compute_attention_from_qk(const QKCapture& capture,
                                             const std::vector<HeadRef>& heads);

/// sum_normalize: per head, the last query row's instruction-span mass
/// normalized by instruction-plus-query mass (0 when both are 0); the
/// overall score is the unweighted mean over heads.
double attn2score(const SelectiveAttention& attn, const SpanPair& spans, AttnFunc func);
std::map<std::pair<int, int>, double> attn2score_per_head(const SelectiveAttention& attn,
                                                          const SpanPair& spans,
                                                          AttnFunc func);

/// Focus scoring over a persisted run: load, recompute, score. With a
/// multi-item capture, scores are averaged over the batch items. Verdict is
/// suspicious iff score < tau.
FocusResult analyze_injection(const RunId& run_id, const std::string& hook_dir,
                              const AnalyzerSpec& spec, double tau);

/// Document relevance from one capture per (query, document) prompt: the
/// last prompt token's attention mass over the document span, averaged over
/// heads. Ranking is by descending score with stable ties.
RelevanceResult rerank(const std::vector<QKCapture>& captures,
                       const std::vector<Span>& doc_spans,
                       const std::vector<HeadRef>& heads);

struct SteeringBuildOptions {
  bool mean_over_positions = false;  // default: last prompt position only
};

/// Mean residual-stream activation difference between the positive and
/// negative prompt sets at `layer`, collected with passive probes; the
/// model's outputs are untouched.
SteeringVector build_steering_vector(const Model& model,
                                     const std::vector<TokenSequence>& positive_prompts,
                                     const std::vector<TokenSequence>& negative_prompts,
                                     int layer, const SteeringBuildOptions& opts = {});

}  // namespace hookrt

#pragma once

#include "hookrt/hook_tap.hpp"
#include "hookrt/model.hpp"
#include "hookrt/tokenizer.hpp"

#include <cstdint>
#include <vector>

namespace hookrt {

/// Per-layer key/value rows, one row per processed position, post-RoPE keys.
/// Layout matches the hook tensors: [t, n_heads*d_head].
struct KVCacheState {
  std::vector<MatF> k;
  std::vector<MatF> v;
  int t = 0;

  static KVCacheState empty(const ModelSpec& spec);
};

struct GenerationResult {
  TokenSequence prompt_tokens;
  TokenSequence generated_tokens;
  /// FNV-1a of the final-position logits row at each decode decision.
  std::vector<std::uint64_t> per_step_logits_digest;

  bool operator==(const GenerationResult&) const = default;
};

/// Runs the new tokens through the model, extending `cache`, and returns the
/// logits for each new position. The tap (explicit, or the model's installed
/// one when `tap` is null) sees one QkObservation per attention module and
/// may rewrite each layer's residual-stream output.
MatF forward(const Model& model, const TokenSequence& new_tokens, KVCacheState& cache,
             const HookTap* tap = nullptr);

/// Greedy decoding: argmax at each step, ties to the lowest token id, stops
/// at EOS or max_new_tokens. Prefill once, then one token per step.
GenerationResult generate_greedy(const Model& model, const TokenSequence& prompt,
                                 int max_new_tokens, const HookTap* tap = nullptr);

/// The scaled-dot-product row shared by the forward pass and the analyzers:
/// softmax(q k^T / sqrt(d_head)) over the rows of k.
RowVecF attention_reference(const RowVecRef<float>& q, const MatRef<float>& k);

}  // namespace hookrt

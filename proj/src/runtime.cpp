#include "hookrt/runtime.hpp"

#include "hookrt/ops.hpp"

#include <stdexcept>
#include <string>

namespace hookrt {

KVCacheState KVCacheState::empty(const ModelSpec& spec) {
  KVCacheState c;
  c.k.assign(static_cast<std::size_t>(spec.n_layers), MatF(0, spec.d_model));
  c.v.assign(static_cast<std::size_t>(spec.n_layers), MatF(0, spec.d_model));
  return c;
}

namespace {

void append_rows(MatF& dst, const MatF& rows) {
  const Eigen::Index old = dst.rows();
  dst.conservativeResize(old + rows.rows(), Eigen::NoChange);
  dst.bottomRows(rows.rows()) = rows;
}

}  // namespace

MatF forward(const Model& model, const TokenSequence& new_tokens, KVCacheState& cache,
             const HookTap* tap) {
  const ModelSpec& spec = model.spec();
  const Weights& w = model.weights();
  const int n_new = static_cast<int>(new_tokens.size());
  if (n_new == 0) throw std::invalid_argument("forward: no tokens");
  if (static_cast<int>(cache.k.size()) != spec.n_layers)
    throw std::invalid_argument("forward: cache layer count mismatch");
  if (cache.t + n_new > spec.max_seq_len)
    throw std::runtime_error("forward: sequence overflow (" + std::to_string(cache.t + n_new) +
                             " > max_seq_len " + std::to_string(spec.max_seq_len) + ")");
  if (!tap) tap = model.installed_tap();

  const int pos0 = cache.t;

  // token embeddings
  MatF h(n_new, spec.d_model);
  for (int i = 0; i < n_new; ++i) {
    const int tok = new_tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= spec.vocab_size)
      throw std::out_of_range("forward: token id out of vocab: " + std::to_string(tok));
    h.row(i) = w.embedding.row(tok);
  }

  for (int layer = 0; layer < spec.n_layers; ++layer) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer)];

    const MatF x = rms_norm_rows<float>(h, lw.attn_norm);
    MatF q = linear_rows<float>(x, lw.wq);
    MatF k = linear_rows<float>(x, lw.wk);
    const MatF v = linear_rows<float>(x, lw.wv);
    rope_rows_inplace<float>(q, spec.n_heads, spec.d_head, pos0, spec.rope_theta);
    rope_rows_inplace<float>(k, spec.n_heads, spec.d_head, pos0, spec.rope_theta);

    append_rows(cache.k[static_cast<std::size_t>(layer)], k);
    append_rows(cache.v[static_cast<std::size_t>(layer)], v);
    const MatF& k_all = cache.k[static_cast<std::size_t>(layer)];
    const MatF& v_all = cache.v[static_cast<std::size_t>(layer)];

    if (tap && tap->qk_observer) {
      tap->qk_observer(QkObservation{model.attn_module_name(layer), layer, spec.n_heads,
                                     spec.d_head, q, k_all});
    }

    // causal attention, one (position, head) at a time
    MatF attn_out(n_new, spec.d_model);
    for (int i = 0; i < n_new; ++i) {
      const int p = pos0 + i;
      for (int head = 0; head < spec.n_heads; ++head) {
        const int c0 = head * spec.d_head;
        const RowVecF row = attention_reference(q.row(i).segment(c0, spec.d_head),
                                                k_all.middleCols(c0, spec.d_head).topRows(p + 1));
        attn_out.row(i).segment(c0, spec.d_head) =
            row * v_all.middleCols(c0, spec.d_head).topRows(p + 1);
      }
    }

    h += linear_rows<float>(attn_out, lw.wo);

    const MatF y = rms_norm_rows<float>(h, lw.mlp_norm);
    const MatF gated = silu_gate<float>(linear_rows<float>(y, lw.w_gate),
                                        linear_rows<float>(y, lw.w_up));
    h += linear_rows<float>(gated, lw.w_down);

    if (tap && tap->residual_injector) {
      MatF replaced = tap->residual_injector(ResidualSite{layer, pos0}, h);
      if (replaced.rows() != h.rows() || replaced.cols() != h.cols())
        throw std::runtime_error("residual_injector returned a wrong-shaped tensor at layer " +
                                 std::to_string(layer));
      h = std::move(replaced);
    }
  }

  cache.t += n_new;

  const MatF final_h = rms_norm_rows<float>(h, w.final_norm);
  return linear_rows<float>(final_h, w.embedding);
}

GenerationResult generate_greedy(const Model& model, const TokenSequence& prompt,
                                 int max_new_tokens, const HookTap* tap) {
  if (prompt.empty()) throw std::invalid_argument("generate_greedy: empty prompt");
  if (max_new_tokens < 0) throw std::invalid_argument("generate_greedy: negative max_new_tokens");
  const ModelSpec& spec = model.spec();
  if (static_cast<int>(prompt.size()) + max_new_tokens > spec.max_seq_len)
    throw std::runtime_error("generate_greedy: prompt plus max_new_tokens exceeds max_seq_len");

  GenerationResult result;
  result.prompt_tokens = prompt;
  if (max_new_tokens == 0) return result;

  KVCacheState cache = KVCacheState::empty(spec);
  MatF logits = forward(model, prompt, cache, tap);
  while (true) {
    const RowVecF last = logits.row(logits.rows() - 1);
    const int token = argmax_lowest(last);
    result.generated_tokens.push_back(token);
    result.per_step_logits_digest.push_back(digest_row(last));
    if (token == kEosToken ||
        static_cast<int>(result.generated_tokens.size()) >= max_new_tokens)
      break;
    logits = forward(model, TokenSequence{token}, cache, tap);
  }
  return result;
}

RowVecF attention_reference(const RowVecRef<float>& q, const MatRef<float>& k) {
  return attention_row<float>(q, k);
}

}  // namespace hookrt

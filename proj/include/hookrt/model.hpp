#pragma once

#include "hookrt/hook_tap.hpp"
#include "hookrt/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace hookrt {

// Pre-norm decoder: RMSNorm, rotary positions over adjacent pairs, SwiGLU
// MLP with hidden width 4*d_model, tied input/output embeddings. All
// runtime arithmetic is float32.
struct ModelSpec {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  float rope_theta = 10000.0f;

  int d_ff() const { return 4 * d_model; }

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerWeights {
  VecF attn_norm;
  MatF wq, wk, wv, wo;  // [d_model, d_model], y = W x
  VecF mlp_norm;
  MatF w_gate, w_up;  // [d_ff, d_model]
  MatF w_down;        // [d_model, d_ff]
};

struct Weights {
  MatF embedding;  // [vocab_size, d_model]; also the output head (tied)
  std::vector<LayerWeights> layers;
  VecF final_norm;
};

enum class TapKind { probe, steering };

/// Immutable parameter container plus the named hook points. The single
/// tap slot is the one mutable part; install/detach must happen on the
/// session thread while no forward pass is running.
class Model {
 public:
  /// Deterministic initialization: same spec and seed give bit-identical
  /// parameters.
  static Model seeded(const ModelSpec& spec, std::uint64_t seed);

  /// Read an HKRT weight file, taking the spec from its header.
  static Model from_file(const std::string& path);

  /// Read an HKRT weight file and require its header to match `expected`.
  static Model from_file(const std::string& path, const ModelSpec& expected);

  /// Wrap externally assembled weights (test fixtures); shapes are checked.
  static Model from_weights(const ModelSpec& spec, Weights w);

  void save(const std::string& path) const;

  const ModelSpec& spec() const { return spec_; }
  const Weights& weights() const { return weights_; }

  /// Hook-point paths: "model.layers.<i>" (residual stream) and
  /// "model.layers.<i>.self_attn.attn" for every layer.
  const std::vector<std::string>& module_names() const { return module_names_; }
  const std::string& attn_module_name(int layer) const;

  std::uint64_t param_checksum() const;
  std::size_t param_count() const;

  /// At most one installed tap at a time; returns false when occupied.
  bool attach_tap(HookTap tap, TapKind kind);
  void detach_tap();
  const HookTap* installed_tap() const { return tap_ ? &tap_->tap : nullptr; }
  bool tap_installed() const { return tap_ != nullptr; }

 private:
  explicit Model(const ModelSpec& spec);
  void check_shapes() const;

  ModelSpec spec_;
  Weights weights_;
  std::vector<std::string> module_names_;

  struct Installed {
    HookTap tap;
    TapKind kind;
  };
  std::unique_ptr<Installed> tap_;
};

/// Layer index for names of the form "model.layers.<i>.self_attn.attn";
/// -1 for anything else.
int layer_from_attn_module(const std::string& name);

}  // namespace hookrt

#pragma once

#include "hookrt/tensor.hpp"

#include <functional>
#include <string>

namespace hookrt {

// One observation per attention module per forward call. q covers the new
// positions of the call, k_all every position processed so far; both are
// post-RoPE, laid out [rows, n_heads*d_head] with head h in columns
// [h*d_head, (h+1)*d_head). The first new position is k_all.rows() - q.rows().
struct QkObservation {
  const std::string& module_name;
  int layer = 0;
  int n_heads = 0;
  int d_head = 0;
  const MatF& q;
  const MatF& k_all;
};

// Receives a layer's residual-stream output rows for the new positions and
// returns the replacement. pos0 is the absolute position of row 0.
struct ResidualSite {
  int layer = 0;
  int pos0 = 0;
};

using QkObserver = std::function<void(const QkObservation&)>;
using ResidualInjector = std::function<MatF(const ResidualSite&, const MatF& hidden)>;

struct HookTap {
  QkObserver qk_observer;
  ResidualInjector residual_injector;

  bool empty() const { return !qk_observer && !residual_injector; }
};

}  // namespace hookrt

#pragma once

#include "hookrt/config.hpp"
#include "hookrt/model.hpp"
#include "hookrt/qkc.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hookrt {

using RunId = std::string;

/// Accumulates Q/K observations for the current run. The flag file is
/// checked once, at the first hooked forward of a run, and the result is
/// held until the next begin_run().
class CaptureState {
 public:
  CaptureState(EnvSettings env, std::vector<std::string> hooked_modules);

  /// Clears accumulated items and re-arms the flag check.
  void begin_run();
  /// Starts the next batch item (one per prompt).
  void begin_item();
  /// Called by the probe tap; captures when the flag was active.
  void observe(const QkObservation& obs);

  bool flag_was_active() const { return flag_active_.value_or(false); }
  const std::vector<QKCapture>& items() const { return items_; }
  std::vector<QKCapture> take_items();
  const EnvSettings& env() const { return env_; }
  const std::vector<std::string>& hooked_modules() const { return hooked_modules_; }

 private:
  QKCapture& current_item();

  EnvSettings env_;
  std::vector<std::string> hooked_modules_;
  std::optional<bool> flag_active_;  // unset until the first hooked forward
  std::vector<QKCapture> items_;
  bool item_open_ = false;
};

/// Target layer, direction and scale for residual-stream injection.
struct SteeringPlan {
  enum class Positions { all, last };

  int layer = 0;
  VecF vector;
  float alpha = 1.0f;
  /// all: every forward position. last: only the final prompt position
  /// (the last row of the prefill pass).
  Positions positions = Positions::all;
};

/// Owns one installed tap on a model; detaches on destruction. A second
/// detach is a no-op with a warning.
class ProbeHandle {
 public:
  ProbeHandle() = default;
  ProbeHandle(ProbeHandle&&) noexcept;
  ProbeHandle& operator=(ProbeHandle&&) noexcept;
  ProbeHandle(const ProbeHandle&) = delete;
  ProbeHandle& operator=(const ProbeHandle&) = delete;
  ~ProbeHandle();

  void detach();
  bool attached() const { return model_ != nullptr; }

  /// Present for probe installs, null for steering installs.
  const std::shared_ptr<CaptureState>& capture() const { return capture_; }
  std::vector<std::string> hooked_modules() const;

 private:
  friend ProbeHandle install_probes(Model&, const EnvSettings&);
  friend ProbeHandle install_steering(Model&, const SteeringPlan&);
  ProbeHandle(Model* model, std::shared_ptr<CaptureState> capture);

  Model* model_ = nullptr;
  std::shared_ptr<CaptureState> capture_;
  bool detached_once_ = false;
};

/// Attaches a Q/K probe tap covering the layers in env.layer_heads (whole
/// per-layer tensors are stored; head selection happens at analysis time).
/// Errors when a requested layer does not exist or a tap is already
/// installed.
ProbeHandle install_probes(Model& model, const EnvSettings& env);

/// Attaches a residual-stream injector computing h + alpha * vector at
/// plan.layer.
ProbeHandle install_steering(Model& model, const SteeringPlan& plan);

/// Builds the plan's injector without installing it, for callers composing
/// their own taps.
ResidualInjector make_steering_injector(const SteeringPlan& plan, const ModelSpec& spec);

/// Generates a fresh run id and overwrites env.run_id_file with it plus a
/// trailing newline.
RunId begin_run(const EnvSettings& env);

/// Fresh id without touching any file.
RunId fresh_run_id();

/// Writes qk_<run_id>.qkc under env.hook_dir (atomic) and returns the path.
/// Errors on an empty capture.
std::string flush_capture(const std::vector<QKCapture>& items, const RunId& run_id,
                          const EnvSettings& env);
std::string flush_capture(const QKCapture& capture, const RunId& run_id,
                          const EnvSettings& env);

// Steering-vector container (STV1): magic, u32 layer, u32 d_model, raw f32.
void write_steering_vector(const std::string& path, int layer, const VecF& vector);
std::pair<int, VecF> read_steering_vector(const std::string& path);

}  // namespace hookrt

#include "hookrt/worker.hpp"

#include "hookrt/wire.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <stdexcept>

namespace hookrt {

namespace fs = std::filesystem;

CaptureState::CaptureState(EnvSettings env, std::vector<std::string> hooked_modules)
    : env_(std::move(env)), hooked_modules_(std::move(hooked_modules)) {}

void CaptureState::begin_run() {
  items_.clear();
  flag_active_.reset();
  item_open_ = false;
}

void CaptureState::begin_item() { item_open_ = false; }

QKCapture& CaptureState::current_item() {
  if (!item_open_) {
    items_.emplace_back();
    item_open_ = true;
  }
  return items_.back();
}

std::vector<QKCapture> CaptureState::take_items() {
  item_open_ = false;
  return std::move(items_);
}

void CaptureState::observe(const QkObservation& obs) {
  if (!flag_active_.has_value())
    flag_active_ = !env_.hook_flag_path.empty() && fs::exists(env_.hook_flag_path);
  if (!*flag_active_) return;

  const int pos0 = static_cast<int>(obs.k_all.rows() - obs.q.rows());
  const bool prefill = pos0 == 0;
  if (!prefill && !env_.capture_decode_steps) return;

  QKCapture& item = current_item();
  ModuleCapture* mod = nullptr;
  for (auto& m : item.modules)
    if (m.name == obs.module_name) mod = &m;
  if (!mod) {
    item.modules.push_back(ModuleCapture{obs.module_name, obs.layer, obs.n_heads, obs.d_head,
                                         MatF(0, obs.q.cols()), MatF(0, obs.k_all.cols())});
    mod = &item.modules.back();
  }

  // q rows: the whole prefill under all_tokens, just the final row under
  // last_token; decode steps (when enabled) contribute their single row.
  MatF q_rows;
  if (env_.hookq_mode == HookqMode::all_tokens || !prefill)
    q_rows = obs.q;
  else
    q_rows = obs.q.bottomRows(1);
  MatF merged(mod->q.rows() + q_rows.rows(), obs.q.cols());
  if (mod->q.rows() > 0) merged.topRows(mod->q.rows()) = mod->q;
  merged.bottomRows(q_rows.rows()) = q_rows;
  mod->q = std::move(merged);
  mod->k_all = obs.k_all;  // always the longest view so far
}

ProbeHandle::ProbeHandle(Model* model, std::shared_ptr<CaptureState> capture)
    : model_(model), capture_(std::move(capture)) {}

ProbeHandle::ProbeHandle(ProbeHandle&& other) noexcept
    : model_(other.model_), capture_(std::move(other.capture_)),
      detached_once_(other.detached_once_) {
  other.model_ = nullptr;
  other.detached_once_ = true;
}

ProbeHandle& ProbeHandle::operator=(ProbeHandle&& other) noexcept {
  if (this != &other) {
    if (model_) detach();
    model_ = other.model_;
    capture_ = std::move(other.capture_);
    detached_once_ = other.detached_once_;
    other.model_ = nullptr;
    other.detached_once_ = true;
  }
  return *this;
}

ProbeHandle::~ProbeHandle() {
  if (model_) {
    model_->detach_tap();
    model_ = nullptr;
  }
}

void ProbeHandle::detach() {
  if (!model_) {
    if (detached_once_) std::cerr << "ProbeHandle: detach called twice, ignoring\n";
    detached_once_ = true;
    return;
  }
  model_->detach_tap();
  model_ = nullptr;
  detached_once_ = true;
}

std::vector<std::string> ProbeHandle::hooked_modules() const {
  return capture_ ? capture_->hooked_modules() : std::vector<std::string>{};
}

ProbeHandle install_probes(Model& model, const EnvSettings& env) {
  if (env.layer_heads.empty())
    throw std::invalid_argument("install_probes: layer_heads is empty, nothing to hook");
  for (const auto& [layer, heads] : env.layer_heads) {
    if (layer >= model.spec().n_layers)
      throw std::invalid_argument("install_probes: unknown layer " + std::to_string(layer) +
                                  " (model has " + std::to_string(model.spec().n_layers) + ")");
    (void)heads;
  }

  // mirror the runtime's module filter: match on the attention path suffix
  std::vector<std::string> hooked;
  for (const std::string& name : model.module_names()) {
    const int layer = layer_from_attn_module(name);
    if (layer >= 0 && env.layer_heads.count(layer)) hooked.push_back(name);
  }

  auto capture = std::make_shared<CaptureState>(env, std::move(hooked));
  HookTap tap;
  tap.qk_observer = [capture, layer_heads = env.layer_heads](const QkObservation& obs) {
    if (layer_heads.count(obs.layer)) capture->observe(obs);
  };
  if (!model.attach_tap(std::move(tap), TapKind::probe))
    throw std::runtime_error("install_probes: probes already installed on this model");
  return ProbeHandle(&model, std::move(capture));
}

ResidualInjector make_steering_injector(const SteeringPlan& plan, const ModelSpec& spec) {
  if (plan.layer < 0 || plan.layer >= spec.n_layers)
    throw std::invalid_argument("steering layer " + std::to_string(plan.layer) +
                                " out of range [0, " + std::to_string(spec.n_layers) + ")");
  if (plan.vector.size() != spec.d_model)
    throw std::invalid_argument("steering vector dimension " +
                                std::to_string(plan.vector.size()) + " != d_model " +
                                std::to_string(spec.d_model));
  if (!plan.vector.allFinite())
    throw std::invalid_argument("steering vector has non-finite entries");

  const bool inert = plan.alpha == 0.0f || plan.vector.isZero(0.0f);
  return [plan, inert](const ResidualSite& site, const MatF& hidden) -> MatF {
    if (site.layer != plan.layer || inert) return hidden;
    MatF out = hidden;
    if (plan.positions == SteeringPlan::Positions::all) {
      for (Eigen::Index r = 0; r < out.rows(); ++r)
        out.row(r) = hidden.row(r) + plan.alpha * plan.vector.transpose();
    } else if (site.pos0 == 0) {
      const Eigen::Index r = out.rows() - 1;
      out.row(r) = hidden.row(r) + plan.alpha * plan.vector.transpose();
    }
    return out;
  };
}

ProbeHandle install_steering(Model& model, const SteeringPlan& plan) {
  HookTap tap;
  tap.residual_injector = make_steering_injector(plan, model.spec());
  if (!model.attach_tap(std::move(tap), TapKind::steering))
    throw std::runtime_error("install_steering: a tap is already installed on this model");
  return ProbeHandle(&model, nullptr);
}

RunId fresh_run_id() {
  static std::atomic<std::uint64_t> counter{0};
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  std::mt19937_64 rng(static_cast<std::uint64_t>(
      std::chrono::steady_clock::now().time_since_epoch().count()) ^
      (counter.fetch_add(1) << 32) ^ 0x9e3779b97f4a7c15ull);
  char suffix[9];
  std::snprintf(suffix, sizeof suffix, "%08llx",
                static_cast<unsigned long long>(rng() & 0xffffffffull));
  return std::to_string(ms) + "-" + suffix;
}

RunId begin_run(const EnvSettings& env) {
  if (env.hook_dir.empty())
    throw std::invalid_argument("begin_run: hook_dir is not set");
  if (!fs::is_directory(env.hook_dir))
    throw std::runtime_error("begin_run: hook_dir does not exist: " + env.hook_dir);
  if (env.run_id_file.empty())
    throw std::invalid_argument("begin_run: run_id_file is not set");

  const RunId id = fresh_run_id();
  std::ofstream os(env.run_id_file, std::ios::trunc);
  if (!os) throw std::runtime_error("begin_run: cannot write run id file: " + env.run_id_file);
  os << id << "\n";
  if (!os.flush()) throw std::runtime_error("begin_run: write failed: " + env.run_id_file);
  return id;
}

std::string flush_capture(const std::vector<QKCapture>& items, const RunId& run_id,
                          const EnvSettings& env) {
  RunCapture rc;
  rc.run_id = run_id;
  rc.items = items;
  if (rc.empty()) throw std::invalid_argument("flush_capture: nothing captured");
  if (env.hook_dir.empty() || !fs::is_directory(env.hook_dir))
    throw std::runtime_error("flush_capture: hook_dir does not exist: " + env.hook_dir);
  const std::string path = qkc_path(env.hook_dir, run_id);
  write_qkc(rc, path);
  return path;
}

std::string flush_capture(const QKCapture& capture, const RunId& run_id,
                          const EnvSettings& env) {
  return flush_capture(std::vector<QKCapture>{capture}, run_id, env);
}

void write_steering_vector(const std::string& path, int layer, const VecF& vector) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write("STV1", 4);
  wire::put_u32(os, static_cast<std::uint32_t>(layer));
  wire::put_u32(os, static_cast<std::uint32_t>(vector.size()));
  wire::put_f32_block(os, vector.data(), static_cast<std::size_t>(vector.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::pair<int, VecF> read_steering_vector(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open steering vector file: " + path);
  char magic[5] = "STV1";
  wire::expect_magic(is, magic, path);
  const int layer = static_cast<int>(wire::get_u32(is, "layer"));
  const auto dim = wire::get_u32(is, "d_model");
  if (dim == 0 || dim > (1u << 24)) throw wire::FormatError("implausible dimension in " + path);
  VecF v(static_cast<Eigen::Index>(dim));
  wire::get_f32_block(is, v.data(), dim, "steering vector");
  return {layer, std::move(v)};
}

}  // namespace hookrt

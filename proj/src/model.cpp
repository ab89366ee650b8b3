#include "hookrt/model.hpp"

#include "hookrt/tokenizer.hpp"
#include "hookrt/wire.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace hookrt {

namespace {

constexpr char kMagic[5] = "HKRT";
constexpr std::uint32_t kVersion = 1;

// Uniform in [-scale, scale) from the top 24 bits of each draw; keeps the
// init independent of libm and of distribution implementations.
class UniformInit {
 public:
  explicit UniformInit(std::uint64_t seed) : rng_(seed) {}

  float next(float scale) {
    const std::uint64_t bits = rng_() >> 40;  // 24 bits
    const float u = static_cast<float>(bits) * (1.0f / 16777216.0f);  // [0,1)
    return (2.0f * u - 1.0f) * scale;
  }

  void fill(MatF& m, float scale) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = next(scale);
  }

 private:
  std::mt19937_64 rng_;
};

float fan_in_scale(int d_in) { return std::sqrt(3.0f / static_cast<float>(d_in)); }

template <typename Fn>
void for_each_block(const Weights& w, Fn&& fn) {
  fn(w.embedding.data(), static_cast<std::size_t>(w.embedding.size()));
  for (const auto& l : w.layers) {
    fn(l.attn_norm.data(), static_cast<std::size_t>(l.attn_norm.size()));
    fn(l.wq.data(), static_cast<std::size_t>(l.wq.size()));
    fn(l.wk.data(), static_cast<std::size_t>(l.wk.size()));
    fn(l.wv.data(), static_cast<std::size_t>(l.wv.size()));
    fn(l.wo.data(), static_cast<std::size_t>(l.wo.size()));
    fn(l.mlp_norm.data(), static_cast<std::size_t>(l.mlp_norm.size()));
    fn(l.w_gate.data(), static_cast<std::size_t>(l.w_gate.size()));
    fn(l.w_up.data(), static_cast<std::size_t>(l.w_up.size()));
    fn(l.w_down.data(), static_cast<std::size_t>(l.w_down.size()));
  }
  fn(w.final_norm.data(), static_cast<std::size_t>(w.final_norm.size()));
}

template <typename Fn>
void for_each_block(Weights& w, Fn&& fn) {
  for_each_block(static_cast<const Weights&>(w), [&fn](const float* p, std::size_t n) {
    fn(const_cast<float*>(p), n);
  });
}

}  // namespace

void ModelSpec::validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(std::string("ModelSpec: ") + msg);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(d_head >= 1, "d_head must be >= 1");
  require(n_heads * d_head == d_model, "n_heads * d_head must equal d_model");
  require(d_head % 2 == 0, "d_head must be even for rotary pairs");
  require(vocab_size >= kMinVocab, "vocab_size must cover bytes plus BOS/EOS (>= 258)");
  require(max_seq_len >= 2, "max_seq_len must be >= 2");
  require(rope_theta > 0.0f, "rope_theta must be positive");
}

Model::Model(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  module_names_.reserve(static_cast<std::size_t>(spec_.n_layers) * 2);
  for (int i = 0; i < spec_.n_layers; ++i) {
    module_names_.push_back("model.layers." + std::to_string(i));
    module_names_.push_back("model.layers." + std::to_string(i) + ".self_attn.attn");
  }
}

const std::string& Model::attn_module_name(int layer) const {
  return module_names_.at(static_cast<std::size_t>(layer) * 2 + 1);
}

Model Model::seeded(const ModelSpec& spec, std::uint64_t seed) {
  Model m(spec);
  UniformInit init(seed);

  auto& w = m.weights_;
  w.embedding.resize(spec.vocab_size, spec.d_model);
  init.fill(w.embedding, 0.1f);

  const float proj_scale = fan_in_scale(spec.d_model);
  const float down_scale = fan_in_scale(spec.d_ff());
  w.layers.resize(static_cast<std::size_t>(spec.n_layers));
  for (auto& l : w.layers) {
    l.attn_norm = VecF::Ones(spec.d_model);
    l.wq.resize(spec.d_model, spec.d_model);
    l.wk.resize(spec.d_model, spec.d_model);
    l.wv.resize(spec.d_model, spec.d_model);
    l.wo.resize(spec.d_model, spec.d_model);
    init.fill(l.wq, proj_scale);
    init.fill(l.wk, proj_scale);
    init.fill(l.wv, proj_scale);
    init.fill(l.wo, proj_scale);
    l.mlp_norm = VecF::Ones(spec.d_model);
    l.w_gate.resize(spec.d_ff(), spec.d_model);
    l.w_up.resize(spec.d_ff(), spec.d_model);
    l.w_down.resize(spec.d_model, spec.d_ff());
    init.fill(l.w_gate, proj_scale);
    init.fill(l.w_up, proj_scale);
    init.fill(l.w_down, down_scale);
  }
  w.final_norm = VecF::Ones(spec.d_model);
  m.check_shapes();
  return m;
}

Model Model::from_weights(const ModelSpec& spec, Weights w) {
  Model m(spec);
  m.weights_ = std::move(w);
  m.check_shapes();
  return m;
}

void Model::check_shapes() const {
  auto bad = [](const std::string& what) {
    throw std::invalid_argument("weight shape mismatch: " + what);
  };
  const auto& w = weights_;
  if (w.embedding.rows() != spec_.vocab_size || w.embedding.cols() != spec_.d_model)
    bad("embedding");
  if (static_cast<int>(w.layers.size()) != spec_.n_layers) bad("layer count");
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const std::string p = "layer " + std::to_string(i) + " ";
    if (l.attn_norm.size() != spec_.d_model) bad(p + "attn_norm");
    for (const MatF* mm : {&l.wq, &l.wk, &l.wv, &l.wo})
      if (mm->rows() != spec_.d_model || mm->cols() != spec_.d_model) bad(p + "attention projection");
    if (l.mlp_norm.size() != spec_.d_model) bad(p + "mlp_norm");
    if (l.w_gate.rows() != spec_.d_ff() || l.w_gate.cols() != spec_.d_model) bad(p + "w_gate");
    if (l.w_up.rows() != spec_.d_ff() || l.w_up.cols() != spec_.d_model) bad(p + "w_up");
    if (l.w_down.rows() != spec_.d_model || l.w_down.cols() != spec_.d_ff()) bad(p + "w_down");
  }
  if (w.final_norm.size() != spec_.d_model) bad("final_norm");
}

void Model::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  wire::put_u32(os, kVersion);
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.n_layers));
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.n_heads));
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.d_model));
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.d_head));
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.vocab_size));
  wire::put_u32(os, static_cast<std::uint32_t>(spec_.max_seq_len));
  wire::put_f32(os, spec_.rope_theta);
  for_each_block(weights_, [&os](const float* p, std::size_t n) {
    wire::put_f32_block(os, p, n);
  });
  if (!os) throw std::runtime_error("write failed: " + path);
}

Model Model::from_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weight file: " + path);
  wire::expect_magic(is, kMagic, path);
  const std::uint32_t version = wire::get_u32(is, "version");
  if (version != kVersion)
    throw wire::FormatError("unsupported weight file version " + std::to_string(version));
  ModelSpec spec;
  spec.n_layers = static_cast<int>(wire::get_u32(is, "n_layers"));
  spec.n_heads = static_cast<int>(wire::get_u32(is, "n_heads"));
  spec.d_model = static_cast<int>(wire::get_u32(is, "d_model"));
  spec.d_head = static_cast<int>(wire::get_u32(is, "d_head"));
  spec.vocab_size = static_cast<int>(wire::get_u32(is, "vocab_size"));
  spec.max_seq_len = static_cast<int>(wire::get_u32(is, "max_seq_len"));
  spec.rope_theta = wire::get_f32(is, "rope_theta");

  Model m(spec);
  auto& w = m.weights_;
  w.embedding.resize(spec.vocab_size, spec.d_model);
  w.layers.resize(static_cast<std::size_t>(spec.n_layers));
  for (auto& l : w.layers) {
    l.attn_norm.resize(spec.d_model);
    l.wq.resize(spec.d_model, spec.d_model);
    l.wk.resize(spec.d_model, spec.d_model);
    l.wv.resize(spec.d_model, spec.d_model);
    l.wo.resize(spec.d_model, spec.d_model);
    l.mlp_norm.resize(spec.d_model);
    l.w_gate.resize(spec.d_ff(), spec.d_model);
    l.w_up.resize(spec.d_ff(), spec.d_model);
    l.w_down.resize(spec.d_model, spec.d_ff());
  }
  w.final_norm.resize(spec.d_model);
  for_each_block(w, [&is](float* p, std::size_t n) {
    wire::get_f32_block(is, p, n, "parameter block");
  });
  // trailing bytes mean the file disagrees with its own header
  is.peek();
  if (!is.eof()) throw wire::FormatError("weight file has trailing bytes: " + path);
  return m;
}

Model Model::from_file(const std::string& path, const ModelSpec& expected) {
  Model m = from_file(path);
  if (!(m.spec_ == expected))
    throw wire::FormatError("weight file header does not match the requested spec: " + path);
  return m;
}

std::uint64_t Model::param_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for_each_block(weights_, [&h](const float* p, std::size_t n) {
    h = fnv1a64(p, n * sizeof(float), h);
  });
  return h;
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for_each_block(weights_, [&n](const float*, std::size_t k) { n += k; });
  return n;
}

bool Model::attach_tap(HookTap tap, TapKind kind) {
  if (tap_) return false;
  tap_ = std::make_unique<Installed>(Installed{std::move(tap), kind});
  return true;
}

void Model::detach_tap() { tap_.reset(); }

int layer_from_attn_module(const std::string& name) {
  constexpr const char* kPrefix = "model.layers.";
  constexpr const char* kSuffix = ".self_attn.attn";
  if (!name.starts_with(kPrefix) || !name.ends_with(kSuffix)) return -1;
  const std::size_t start = std::string(kPrefix).size();
  const std::size_t end = name.size() - std::string(kSuffix).size();
  if (end <= start) return -1;
  int layer = 0;
  for (std::size_t i = start; i < end; ++i) {
    if (name[i] < '0' || name[i] > '9') return -1;
    layer = layer * 10 + (name[i] - '0');
  }
  return layer;
}

}  // namespace hookrt

#include "hookrt/qkc.hpp"

#include "hookrt/wire.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace hookrt {

namespace {
constexpr char kMagic[5] = "QKC1";

void put_tensor(std::ostream& os, const MatF& m, int n_heads, int d_head) {
  wire::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  wire::put_u32(os, static_cast<std::uint32_t>(n_heads));
  wire::put_u32(os, static_cast<std::uint32_t>(d_head));
  wire::put_f32_block(os, m.data(), static_cast<std::size_t>(m.size()));
}

MatF get_tensor(std::istream& is, int& n_heads, int& d_head, const char* what) {
  const auto rows = wire::get_u32(is, what);
  n_heads = static_cast<int>(wire::get_u32(is, what));
  d_head = static_cast<int>(wire::get_u32(is, what));
  if (rows > (1u << 24) || n_heads <= 0 || d_head <= 0)
    throw wire::FormatError(std::string("implausible tensor shape in ") + what);
  MatF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n_heads) * d_head);
  wire::get_f32_block(is, m.data(), static_cast<std::size_t>(m.size()), what);
  return m;
}
}  // namespace

const ModuleCapture* QKCapture::find_layer(int layer) const {
  for (const auto& m : modules)
    if (m.layer_num == layer) return &m;
  return nullptr;
}

std::vector<int> QKCapture::captured_layers() const {
  std::vector<int> out;
  out.reserve(modules.size());
  for (const auto& m : modules) out.push_back(m.layer_num);
  return out;
}

bool RunCapture::empty() const {
  for (const auto& item : items)
    if (!item.modules.empty()) return false;
  return true;
}

std::string qkc_path(const std::string& hook_dir, const std::string& run_id) {
  return (std::filesystem::path(hook_dir) / ("qk_" + run_id + ".qkc")).string();
}

void write_qkc(const RunCapture& capture, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + tmp);
    os.write(kMagic, 4);
    wire::put_str(os, capture.run_id);
    std::size_t records = 0;
    for (const auto& item : capture.items) records += item.modules.size();
    wire::put_u32(os, static_cast<std::uint32_t>(records));
    for (const auto& item : capture.items) {
      for (const auto& m : item.modules) {
        wire::put_str(os, m.name);
        wire::put_u32(os, static_cast<std::uint32_t>(m.layer_num));
        put_tensor(os, m.q, m.n_heads, m.d_head);
        put_tensor(os, m.k_all, m.n_heads, m.d_head);
      }
    }
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

RunCapture read_qkc(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open cache file: " + path);
  wire::expect_magic(is, kMagic, path);
  RunCapture out;
  out.run_id = wire::get_str(is, "run_id");
  const std::uint32_t records = wire::get_u32(is, "module count");
  for (std::uint32_t r = 0; r < records; ++r) {
    ModuleCapture m;
    m.name = wire::get_str(is, "module name");
    m.layer_num = static_cast<int>(wire::get_u32(is, "layer_num"));
    int qh = 0, qd = 0, kh = 0, kd = 0;
    m.q = get_tensor(is, qh, qd, "q tensor");
    m.k_all = get_tensor(is, kh, kd, "k_all tensor");
    if (qh != kh || qd != kd)
      throw wire::FormatError("q and k_all head shapes disagree for module " + m.name);
    m.n_heads = qh;
    m.d_head = qd;
    // a repeated first-module name starts the next batch item
    if (out.items.empty() ||
        (!out.items.back().modules.empty() && m.name == out.items.back().modules.front().name))
      out.items.emplace_back();
    out.items.back().modules.push_back(std::move(m));
  }
  is.peek();
  if (!is.eof()) throw wire::FormatError("cache file has trailing bytes: " + path);
  return out;
}

}  // namespace hookrt

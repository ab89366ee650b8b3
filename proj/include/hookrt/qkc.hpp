#pragma once

#include "hookrt/tensor.hpp"

#include <string>
#include <vector>

namespace hookrt {

/// One hooked attention module's tensors. q holds the captured query rows
/// ([n_q, n_heads*d_head]); q row i belongs to absolute position
/// k_all.rows() - n_q + i. k_all covers every position seen at capture time.
struct ModuleCapture {
  std::string name;
  int layer_num = 0;
  int n_heads = 0;
  int d_head = 0;
  MatF q;
  MatF k_all;
};

/// One prompt's capture: the hooked modules in layer order.
struct QKCapture {
  std::vector<ModuleCapture> modules;

  const ModuleCapture* find_layer(int layer) const;
  std::vector<int> captured_layers() const;
};

/// Contents of one qk_<run_id>.qkc file. A multi-prompt run appends each
/// prompt's modules in order; the reader splits items where the first
/// module name recurs.
struct RunCapture {
  std::string run_id;
  std::vector<QKCapture> items;

  bool empty() const;
};

/// File name for a run inside a hook dir: qk_<run_id>.qkc.
std::string qkc_path(const std::string& hook_dir, const std::string& run_id);

/// Atomic write (temp file + rename). Layout: magic "QKC1"; run_id
/// (u32 length + UTF-8); u32 module record count; per record: name, u32
/// layer_num, q shape (u32 rows, n_heads, d_head) + raw little-endian f32,
/// k_all shape + raw f32.
void write_qkc(const RunCapture& capture, const std::string& path);

RunCapture read_qkc(const std::string& path);

}  // namespace hookrt

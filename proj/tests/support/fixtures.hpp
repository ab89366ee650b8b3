#pragma once

#include "hookrt/config.hpp"
#include "hookrt/model.hpp"
#include "hookrt/tokenizer.hpp"

#include "temp_dir.hpp"

#include <fstream>
#include <random>
#include <string>

namespace testutil {

inline hookrt::ModelSpec toy_spec(int max_seq_len = 128) {
  hookrt::ModelSpec s;
  s.n_layers = 2;
  s.n_heads = 4;
  s.d_model = 32;
  s.d_head = 8;
  s.vocab_size = 260;
  s.max_seq_len = max_seq_len;
  return s;
}

inline hookrt::TokenSequence random_prompt(std::mt19937_64& rng, int len) {
  hookrt::TokenSequence t(static_cast<std::size_t>(len));
  for (auto& tok : t) tok = static_cast<int>(rng() % 256);
  return t;
}

/// Hook protocol settings rooted in a scratch dir; creates the flag file
/// when asked so capture is live from the first forward.
inline hookrt::EnvSettings probe_env(const TempDir& dir, const hookrt::LayerHeads& layer_heads,
                                     hookrt::HookqMode mode, bool flag_on) {
  hookrt::EnvSettings env;
  env.hook_dir = dir.path().string();
  env.hook_flag_path = dir.file("flag");
  env.run_id_file = dir.file("run_id");
  env.hookq_mode = mode;
  env.layer_heads = layer_heads;
  if (flag_on) std::ofstream(env.hook_flag_path).flush();
  return env;
}

/// Production-scale config fixture: 41 important heads across 13 distinct
/// layers, last-token query capture.
inline const char* granite_config_json() {
  return R"({
    "model_info": {
        "name": "granite3-8b-attn",
        "model_id": "ibm-granite/granite-3.1-8b-instruct"
    },
    "params": {
        "important_heads": [[6, 9], [7, 20], [8, 1], [8, 13], [8, 14], [8, 15],
        [10, 2], [10, 3], [10, 6], [10, 21], [11, 4], [11, 30], [11, 31], [12, 2],
        [12, 28], [13, 8], [13, 9], [13, 12], [14, 15], [14, 16], [14, 19], [14, 27],
        [15, 6], [15, 7], [15, 20], [15, 23], [16, 12], [16, 14], [16, 16], [17, 7],
        [17, 11], [17, 15], [17, 19], [17, 21], [17, 25], [17, 26], [18, 9],
        [18, 17], [18, 20], [18, 28], [19, 1]]
    },
    "hookq":{
        "hookq_mode": "last_token"
    }
})";
}

}  // namespace testutil

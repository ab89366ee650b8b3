#include "hookrt/analyzer.hpp"

#include "hookrt/qkc.hpp"
#include "hookrt/runtime.hpp"
#include "hookrt/worker.hpp"

#include "doctest.h"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"
#include "support/temp_dir.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

using namespace hookrt;
using testutil::TempDir;

namespace {

// Attention rows handed to the scorer directly, bypassing the Q/K
// reconstruction, so the arithmetic under test is isolated.
SelectiveAttention attn_fixture(const std::vector<std::vector<float>>& last_rows) {
  SelectiveAttention attn;
  int head = 0;
  for (const auto& row : last_rows) {
    HeadAttention h;
    h.ref = {0, head++};
    h.rows = MatF(1, static_cast<Eigen::Index>(row.size()));
    for (std::size_t j = 0; j < row.size(); ++j) h.rows(0, j) = row[j];
    attn.heads.push_back(std::move(h));
  }
  return attn;
}

// Single-head, single-item capture whose last-row attention is controlled
// through the sign of the query/key alignment. Keys in [0, t_split) point
// along +e0, the rest along -e0; q_scale sets the query's e0 component.
QKCapture aligned_capture(int t, int t_split, float q_scale, int d_head = 4) {
  ModuleCapture mod;
  mod.name = "model.layers.0.self_attn.attn";
  mod.layer_num = 0;
  mod.n_heads = 1;
  mod.d_head = d_head;
  mod.q = MatF::Zero(1, d_head);
  mod.q(0, 0) = q_scale;
  mod.k_all = MatF::Zero(t, d_head);
  for (int i = 0; i < t; ++i) mod.k_all(i, 0) = i < t_split ? 1.0f : -1.0f;
  QKCapture cap;
  cap.modules.push_back(std::move(mod));
  return cap;
}

std::string write_run(const TempDir& dir, const std::string& run_id,
                      std::vector<QKCapture> items) {
  RunCapture rc;
  rc.run_id = run_id;
  rc.items = std::move(items);
  const std::string path = qkc_path(dir.path().string(), run_id);
  write_qkc(rc, path);
  return path;
}

}  // namespace

TEST_CASE("attn_func names") {
  CHECK(attn_func_from_string("sum_normalize") == AttnFunc::sum_normalize);
  CHECK_THROWS_WITH_AS(attn_func_from_string("softmax_mass"),
                       doctest::Contains("unknown attn_func"), std::invalid_argument);
}

TEST_CASE("focus score arithmetic on crafted attention rows") {
  const SpanPair spans{{0, 1}, {1, 2}};  // instruction [0,1), query [1,2)

  SUBCASE("two heads average exactly") {
    const SelectiveAttention attn = attn_fixture({{0.75f, 0.25f}, {0.25f, 0.75f}});
    CHECK(attn2score(attn, spans, AttnFunc::sum_normalize) == 0.5);
    const auto per_head = attn2score_per_head(attn, spans, AttnFunc::sum_normalize);
    REQUIRE(per_head.size() == 2);
    CHECK(per_head.at({0, 0}) == 0.75);
    CHECK(per_head.at({0, 1}) == 0.25);
  }
  SUBCASE("all mass on the instruction gives 1, on the query gives 0") {
    CHECK(attn2score(attn_fixture({{1.0f, 0.0f}}), spans, AttnFunc::sum_normalize) == 1.0);
    CHECK(attn2score(attn_fixture({{0.0f, 1.0f}}), spans, AttnFunc::sum_normalize) == 0.0);
  }
  SUBCASE("zero mass in both spans scores 0, not NaN") {
    const SpanPair inner{{1, 2}, {2, 3}};
    const double s =
        attn2score(attn_fixture({{0.5f, 0.0f, 0.0f, 0.5f}}), inner, AttnFunc::sum_normalize);
    CHECK(s == 0.0);
  }
  SUBCASE("only the last query row is scored") {
    SelectiveAttention attn = attn_fixture({{0.25f, 0.75f}});
    MatF two_rows(2, 2);
    two_rows << 1.0f, 0.0f,  // earlier row, must not contribute
        0.25f, 0.75f;
    attn.heads[0].rows = two_rows;
    CHECK(attn2score(attn, spans, AttnFunc::sum_normalize) == doctest::Approx(0.25));
  }
  SUBCASE("span validation") {
    const SelectiveAttention attn = attn_fixture({{0.5f, 0.5f}});
    CHECK_THROWS_WITH_AS(attn2score(attn, SpanPair{{-1, 1}, {1, 2}}, AttnFunc::sum_normalize),
                         doctest::Contains("invalid"), std::invalid_argument);
    CHECK_THROWS_AS(attn2score(attn, SpanPair{{0, 3}, {1, 2}}, AttnFunc::sum_normalize),
                    std::invalid_argument);  // end past the sequence
    CHECK_THROWS_AS(attn2score(attn, SpanPair{{1, 1}, {0, 1}}, AttnFunc::sum_normalize),
                    std::invalid_argument);  // empty instruction span
    CHECK_THROWS_WITH_AS(attn2score(attn, SpanPair{{0, 2}, {1, 2}}, AttnFunc::sum_normalize),
                         doctest::Contains("overlap"), std::invalid_argument);
  }
  SUBCASE("no heads is an error") {
    CHECK_THROWS_AS(attn2score(SelectiveAttention{}, spans, AttnFunc::sum_normalize),
                    std::invalid_argument);
  }
}

TEST_CASE("attention reconstruction from captured Q/K") {
  const ModelSpec spec = testutil::toy_spec();
  Model model = Model::seeded(spec, 9);
  std::mt19937_64 rng(31);
  const TokenSequence prompt = testutil::random_prompt(rng, 5);

  // last_token prefill capture: one stored query row against 5 keys
  TempDir dir;
  EnvSettings env = testutil::probe_env(dir, {{0, {0}}, {1, {0}}}, HookqMode::last_token, true);
  ProbeHandle handle = install_probes(model, env);
  handle.capture()->begin_run();
  handle.capture()->begin_item();
  generate_greedy(model, prompt, 1);
  REQUIRE(handle.capture()->items().size() == 1);
  const QKCapture& cap = handle.capture()->items()[0];

  SUBCASE("rows are causal probability distributions") {
    const std::vector<HeadRef> heads{{0, 0}, {0, 3}, {1, 1}};
    const SelectiveAttention attn = compute_attention_from_qk(cap, heads);
    REQUIRE(attn.heads.size() == 3);
    for (const HeadAttention& head : attn.heads) {
      CHECK(head.rows.rows() == 1);  // last_token capture
      CHECK(head.rows.cols() == 5);
      double sum = 0.0;
      for (int j = 0; j < 5; ++j) {
        CHECK(head.rows(0, j) >= 0.0f);
        sum += head.rows(0, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("recomputed rows match the from-scratch oracle") {
    const SelectiveAttention attn = compute_attention_from_qk(cap, {{1, 2}});
    const std::vector<double> want = oracle::attention_at(model, prompt, 1, 2, 4);
    REQUIRE(want.size() == 5);
    for (int j = 0; j < 5; ++j)
      CHECK(attn.heads[0].rows(0, j) == doctest::Approx(want[j]).epsilon(1e-6));
  }
  SUBCASE("missing layer and bad head are named in the error") {
    CHECK_THROWS_WITH_AS(compute_attention_from_qk(cap, {{7, 0}}),
                         doctest::Contains("layer 7 is not present"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(compute_attention_from_qk(cap, {{0, 99}}),
                         doctest::Contains("head 99 out of range"), std::invalid_argument);
    CHECK_THROWS_AS(compute_attention_from_qk(cap, {}), std::invalid_argument);
  }
}

TEST_CASE("causality holds for multi-row captures") {
  // all_tokens: 4 query rows against 4 keys; entries past the diagonal
  // must be exactly zero, not merely small
  ModuleCapture mod;
  mod.name = "model.layers.0.self_attn.attn";
  mod.layer_num = 0;
  mod.n_heads = 2;
  mod.d_head = 4;
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  mod.q = MatF::Zero(4, 8);
  mod.k_all = MatF::Zero(4, 8);
  for (Eigen::Index r = 0; r < 4; ++r)
    for (Eigen::Index c = 0; c < 8; ++c) {
      mod.q(r, c) = u(rng);
      mod.k_all(r, c) = u(rng);
    }
  QKCapture cap;
  cap.modules.push_back(mod);

  const SelectiveAttention attn = compute_attention_from_qk(cap, {{0, 0}, {0, 1}});
  for (const HeadAttention& head : attn.heads) {
    REQUIRE(head.rows.rows() == 4);
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int j = 0; j <= i; ++j) sum += head.rows(i, j);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      for (int j = i + 1; j < 4; ++j) CHECK(head.rows(i, j) == 0.0f);
    }
  }
}

TEST_CASE("missing cache files name the expected path") {
  TempDir dir;
  const std::string expected = qkc_path(dir.path().string(), "no-such-run");
  CHECK_THROWS_WITH_AS(load_qk_cache("no-such-run", dir.path().string()),
                       doctest::Contains(("Q/K cache file not found: " + expected).c_str()),
                       std::runtime_error);
}

TEST_CASE("injection analysis separates aligned and misaligned prompts") {
  TempDir dir;
  AnalyzerSpec spec;
  spec.head_profile = {{0, 0}};
  spec.input_range = {SpanPair{{0, 3}, {3, 6}}};

  // instruction keys +e0, query keys -e0; a query vector pointing at +e0
  // concentrates the last row's mass on the instruction span
  write_run(dir, "benign", {aligned_capture(6, 3, 10.0f)});
  write_run(dir, "attack", {aligned_capture(6, 3, -10.0f)});

  const FocusResult benign = analyze_injection("benign", dir.path().string(), spec, 0.5);
  const FocusResult attack = analyze_injection("attack", dir.path().string(), spec, 0.5);

  CHECK(benign.score > 0.99);
  CHECK(benign.score <= 1.0);
  CHECK(benign.verdict == FocusResult::Verdict::benign);
  CHECK(attack.score < 0.01);
  CHECK(attack.score >= 0.0);
  CHECK(attack.verdict == FocusResult::Verdict::suspicious);
  CHECK(benign.score > attack.score);
  CHECK(benign.per_head_scores.size() == 1);
  CHECK(benign.per_head_scores.at({0, 0}) == benign.score);

  SUBCASE("verdict is suspicious strictly below tau") {
    write_run(dir, "uniform", {aligned_capture(6, 3, 0.0f)});  // score exactly 0.5
    const FocusResult at_tau = analyze_injection("uniform", dir.path().string(), spec, 0.5);
    CHECK(at_tau.score == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(at_tau.verdict == FocusResult::Verdict::benign);  // not strictly below
    const FocusResult above = analyze_injection("uniform", dir.path().string(), spec, 0.75);
    CHECK(above.verdict == FocusResult::Verdict::suspicious);
  }
}

TEST_CASE("injection analysis over a batch") {
  TempDir dir;
  AnalyzerSpec spec;
  spec.head_profile = {{0, 0}};
  spec.input_range = {SpanPair{{0, 3}, {3, 6}}};

  write_run(dir, "a", {aligned_capture(6, 3, 10.0f)});
  write_run(dir, "b", {aligned_capture(6, 3, -10.0f)});
  write_run(dir, "ab", {aligned_capture(6, 3, 10.0f), aligned_capture(6, 3, -10.0f)});

  const double sa = analyze_injection("a", dir.path().string(), spec, 0.5).score;
  const double sb = analyze_injection("b", dir.path().string(), spec, 0.5).score;

  SUBCASE("one span pair broadcasts over every item, score is the mean") {
    const FocusResult both = analyze_injection("ab", dir.path().string(), spec, 0.5);
    CHECK(both.score == doctest::Approx((sa + sb) / 2.0).epsilon(1e-12));
    CHECK(both.per_head_scores.at({0, 0}) == doctest::Approx((sa + sb) / 2.0).epsilon(1e-12));
  }
  SUBCASE("per-item span pairs are accepted at matching arity") {
    spec.input_range = {SpanPair{{0, 3}, {3, 6}}, SpanPair{{0, 3}, {3, 6}}};
    CHECK(analyze_injection("ab", dir.path().string(), spec, 0.5).score ==
          doctest::Approx((sa + sb) / 2.0).epsilon(1e-12));
  }
  SUBCASE("wrong arity is an error") {
    spec.input_range = {SpanPair{{0, 3}, {3, 6}}, SpanPair{{0, 3}, {3, 6}},
                        SpanPair{{0, 3}, {3, 6}}};
    CHECK_THROWS_WITH_AS(analyze_injection("ab", dir.path().string(), spec, 0.5),
                         doctest::Contains("3 span pairs for 2 captured prompts"),
                         std::invalid_argument);
  }
  SUBCASE("empty head profile is rejected before touching the cache") {
    spec.head_profile.clear();
    CHECK_THROWS_AS(analyze_injection("missing-run", dir.path().string(), spec, 0.5),
                    std::invalid_argument);
  }
}

TEST_CASE("document reranking orders by attention mass on the document span") {
  const std::vector<HeadRef> heads{{0, 0}};
  const std::vector<Span> spans{{0, 2}, {0, 2}, {0, 2}};

  // doc span holds keys +e0, the tail -e0; q_scale sweeps alignment
  std::vector<QKCapture> captures;
  captures.push_back(aligned_capture(4, 2, 0.0f));    // uniform: mass 0.5
  captures.push_back(aligned_capture(4, 2, 8.0f));    // aligned: mass near 1
  captures.push_back(aligned_capture(4, 2, -8.0f));   // opposed: mass near 0

  const RelevanceResult res = rerank(captures, spans, heads);
  REQUIRE(res.scores.size() == 3);
  CHECK(res.scores[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(res.scores[1] > 0.9);
  CHECK(res.scores[2] < 0.1);
  CHECK(res.ranking == std::vector<int>{1, 0, 2});

  SUBCASE("scores agree with a long-double recomputation") {
    for (std::size_t d = 0; d < captures.size(); ++d) {
      const ModuleCapture& mod = captures[d].modules[0];
      std::vector<double> q(4);
      for (int j = 0; j < 4; ++j) q[j] = mod.q(0, j);
      oracle::Grid k(4, std::vector<double>(4));
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) k[i][j] = mod.k_all(i, j);
      const std::vector<double> row = oracle::attention_row(q, k);
      const double want = row[0] + row[1];
      CHECK(res.scores[d] == doctest::Approx(want).epsilon(1e-5));
    }
  }
  SUBCASE("duplicated documents tie with stable order") {
    std::vector<QKCapture> dup{captures[1], captures[1], captures[0]};
    const RelevanceResult r = rerank(dup, spans, heads);
    CHECK(r.scores[0] == r.scores[1]);
    CHECK(r.ranking == std::vector<int>{0, 1, 2});
  }
  SUBCASE("permuting the documents permutes the scores") {
    std::vector<QKCapture> perm{captures[2], captures[0], captures[1]};
    const RelevanceResult r = rerank(perm, spans, heads);
    CHECK(r.scores[0] == doctest::Approx(res.scores[2]).epsilon(1e-12));
    CHECK(r.scores[1] == doctest::Approx(res.scores[0]).epsilon(1e-12));
    CHECK(r.scores[2] == doctest::Approx(res.scores[1]).epsilon(1e-12));
    CHECK(r.ranking == std::vector<int>{2, 1, 0});
  }
  SUBCASE("arity and emptiness errors") {
    CHECK_THROWS_AS(rerank({}, {}, heads), std::invalid_argument);
    CHECK_THROWS_WITH_AS(rerank(captures, {{0, 2}}, heads),
                         doctest::Contains("1 document spans for 3 captures"),
                         std::invalid_argument);
  }
  SUBCASE("document span bounds are checked") {
    CHECK_THROWS_AS(rerank({captures[0]}, {{0, 9}}, heads), std::invalid_argument);
  }
}

TEST_CASE("steering vectors from prompt set differences") {
  const ModelSpec spec = testutil::toy_spec();
  Model model = Model::seeded(spec, 33);
  std::mt19937_64 rng(34);
  const std::vector<TokenSequence> pos{testutil::random_prompt(rng, 6),
                                       testutil::random_prompt(rng, 7)};
  const std::vector<TokenSequence> neg{testutil::random_prompt(rng, 6),
                                       testutil::random_prompt(rng, 5)};

  SUBCASE("identical sets difference to exactly zero") {
    const SteeringVector v = build_steering_vector(model, pos, pos, 1);
    CHECK(v.layer == 1);
    CHECK(v.vector.size() == spec.d_model);
    CHECK(v.vector.isZero(0.0f));
    CHECK(v.n_positive == 2);
    CHECK(v.n_negative == 2);
  }
  SUBCASE("swapping the sets negates the vector exactly") {
    const SteeringVector a = build_steering_vector(model, pos, neg, 0);
    const SteeringVector b = build_steering_vector(model, neg, pos, 0);
    REQUIRE(a.vector.size() == b.vector.size());
    for (int i = 0; i < spec.d_model; ++i) CHECK(a.vector[i] == -b.vector[i]);
    CHECK_FALSE(a.vector.isZero(0.0f));  // distinct sets give a live direction
  }
  SUBCASE("collection leaves the model untouched") {
    const TokenSequence probe_prompt = testutil::random_prompt(rng, 6);
    const GenerationResult before = generate_greedy(model, probe_prompt, 4);
    build_steering_vector(model, pos, neg, 1);
    CHECK_FALSE(model.tap_installed());
    CHECK(generate_greedy(model, probe_prompt, 4) == before);
  }
  SUBCASE("mean_over_positions pools the whole prompt") {
    const SteeringVector last = build_steering_vector(model, pos, neg, 1);
    SteeringBuildOptions opts;
    opts.mean_over_positions = true;
    const SteeringVector pooled = build_steering_vector(model, pos, neg, 1, opts);
    bool any_difference = false;
    for (int i = 0; i < spec.d_model; ++i)
      if (last.vector[i] != pooled.vector[i]) any_difference = true;
    CHECK(any_difference);
  }
  SUBCASE("validation") {
    CHECK_THROWS_WITH_AS(build_steering_vector(model, pos, neg, 2),
                         doctest::Contains("out of range"), std::invalid_argument);
    CHECK_THROWS_AS(build_steering_vector(model, pos, neg, -1), std::invalid_argument);
    CHECK_THROWS_AS(build_steering_vector(model, {}, neg, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_steering_vector(model, pos, {}, 0), std::invalid_argument);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "scmil/grad_check.hpp"
#include "scmil/model.hpp"
#include "scmil/rng.hpp"

using namespace scmil;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_in = 5;
  c.d_h = 6;
  c.d_f = 6;
  c.d_a = 4;
  c.d_z = 3;
  c.k = 3;
  return c;
}

Tensor random_bag(size_t n, size_t d_in, Rng& rng) {
  Tensor t({n, d_in});
  for (double& v : t.values) v = rng.uniform(-2.0, 2.0);
  return t;
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> rows(t.rows(), std::vector<double>(t.cols()));
  for (size_t i = 0; i < t.rows(); ++i) {
    for (size_t j = 0; j < t.cols(); ++j) rows[i][j] = t.at(i, j);
  }
  return rows;
}

std::vector<std::vector<double>> weight_as_rows(const Tensor& w) { return to_rows(w); }

// Straight-line recompute of the whole bag forward pass.
struct OracleForward {
  std::vector<double> alpha;
  std::vector<double> embedding;
  std::vector<double> logits;
  std::vector<double> projection;
};

OracleForward oracle_forward(const Tensor& bag, const ModelParams& p) {
  auto feats = oracles::mlp_tanh_forward(
      to_rows(bag),
      {weight_as_rows(p.get("enc.w1")), weight_as_rows(p.get("enc.w2"))},
      {p.get("enc.b1").values, p.get("enc.b2").values}, {true, true});
  auto scores = oracles::mlp_tanh_forward(
      feats, {weight_as_rows(p.get("attn.w1")), weight_as_rows(p.get("attn.w2"))},
      {p.get("attn.b1").values, p.get("attn.b2").values}, {true, false});

  size_t n = bag.rows();
  OracleForward out;
  out.alpha.resize(n);
  double m = scores[0][0];
  for (size_t i = 0; i < n; ++i) m = std::max(m, scores[i][0]);
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out.alpha[i] = std::exp(scores[i][0] - m);
    s += out.alpha[i];
  }
  for (double& a : out.alpha) a /= s;

  size_t d_f = p.config.d_f;
  out.embedding.assign(d_f, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t d = 0; d < d_f; ++d) out.embedding[d] += out.alpha[i] * feats[i][d];
  }

  out.logits = oracles::mlp_tanh_forward({out.embedding},
                                         {weight_as_rows(p.get("clf.w"))},
                                         {p.get("clf.b").values}, {false})[0];
  auto raw_z = oracles::mlp_tanh_forward(
      {out.embedding},
      {weight_as_rows(p.get("proj.w1")), weight_as_rows(p.get("proj.w2"))},
      {p.get("proj.b1").values, p.get("proj.b2").values}, {true, false})[0];
  double zs = 0.0;
  for (double v : raw_z) zs += v * v;
  double denom = std::sqrt(zs) + 1e-12;
  out.projection = raw_z;
  for (double& v : out.projection) v /= denom;
  return out;
}

}  // namespace

TEST_CASE("zero encoder weights give all-zero features") {
  ModelParams p = init_params(small_config(), 1);
  for (const char* name : {"enc.w1", "enc.b1", "enc.w2", "enc.b2"}) {
    for (double& v : p.get(name).values) v = 0.0;
  }
  Rng rng(5);
  Tensor bag = random_bag(4, 5, rng);
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  const Tensor& f = tape.value(encode(tape, tape.input(bag), p, nodes));
  for (double v : f.values) CHECK(v == 0.0);
}

TEST_CASE("encode maps rows independently") {
  ModelParams p = init_params(small_config(), 2);
  Rng rng(6);
  Tensor bag = random_bag(3, 5, rng);
  // duplicate row 1 into row 2
  for (size_t d = 0; d < 5; ++d) bag.at(2, d) = bag.at(1, d);
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  const Tensor& f = tape.value(encode(tape, tape.input(bag), p, nodes));
  for (size_t d = 0; d < f.cols(); ++d) CHECK(f.at(1, d) == f.at(2, d));
}

TEST_CASE("encode rejects empty bags and wrong widths") {
  ModelParams p = init_params(small_config(), 3);
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  NodeId empty = tape.input(Tensor({0, 5}));
  CHECK_THROWS_AS(encode(tape, empty, p, nodes), ShapeError);
  NodeId narrow = tape.input(Tensor({2, 4}));
  CHECK_THROWS_AS(encode(tape, narrow, p, nodes), ShapeError);
}

TEST_CASE("encode matches the straight-line oracle") {
  ModelParams p = init_params(small_config(), 7);
  Rng rng(8);
  Tensor bag = random_bag(6, 5, rng);
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  const Tensor& f = tape.value(encode(tape, tape.input(bag), p, nodes));
  auto expected = oracles::mlp_tanh_forward(
      to_rows(bag), {weight_as_rows(p.get("enc.w1")), weight_as_rows(p.get("enc.w2"))},
      {p.get("enc.b1").values, p.get("enc.b2").values}, {true, true});
  for (size_t i = 0; i < f.rows(); ++i) {
    for (size_t j = 0; j < f.cols(); ++j) {
      CHECK(std::abs(f.at(i, j) - expected[i][j]) < 1e-12);
    }
  }
}

TEST_CASE("attention over identical rows is uniform") {
  ModelParams p = init_params(small_config(), 9);
  Rng rng(10);
  Tensor features({5, 6});
  std::vector<double> row(6);
  for (double& v : row) v = rng.uniform(-1.0, 1.0);
  for (size_t i = 0; i < 5; ++i) {
    for (size_t j = 0; j < 6; ++j) features.at(i, j) = row[j];
  }
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  const Tensor& alpha = tape.value(attend(tape, tape.input(features), p, nodes));
  for (double a : alpha.values) CHECK(a == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("attention over one instance is exactly one") {
  ModelParams p = init_params(small_config(), 11);
  Rng rng(12);
  Tensor features = random_bag(1, 6, rng);
  Tape tape;
  ParamNodes nodes = register_params(tape, p);
  const Tensor& alpha = tape.value(attend(tape, tape.input(features), p, nodes));
  CHECK(alpha.values[0] == 1.0);
}

TEST_CASE("attention sums to one and permutes with its input") {
  ModelParams p = init_params(small_config(), 13);
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor features = random_bag(7, 6, rng);
    Tape tape;
    ParamNodes nodes = register_params(tape, p);
    const Tensor alpha = tape.value(attend(tape, tape.input(features), p, nodes));
    double sum = 0.0;
    for (double a : alpha.values) {
      CHECK(a > 0.0);
      sum += a;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);

    std::vector<size_t> perm(7);
    for (size_t i = 0; i < 7; ++i) perm[i] = i;
    rng.shuffle(perm);
    Tensor permuted({7, 6});
    for (size_t i = 0; i < 7; ++i) {
      for (size_t j = 0; j < 6; ++j) permuted.at(i, j) = features.at(perm[i], j);
    }
    Tape tape2;
    ParamNodes nodes2 = register_params(tape2, p);
    const Tensor alpha_perm = tape2.value(attend(tape2, tape2.input(permuted), p, nodes2));
    for (size_t i = 0; i < 7; ++i) {
      CHECK(std::abs(alpha_perm.values[i] - alpha.values[perm[i]]) < 1e-12);
    }
  }
}

TEST_CASE("bag embedding of a single instance is its feature row") {
  ModelParams p = init_params(small_config(), 15);
  Rng rng(16);
  Tensor bag = random_bag(1, 5, rng);
  BagForward fwd = forward_bag(bag, p);
  for (size_t d = 0; d < 6; ++d) {
    CHECK(fwd.embedding.values[d] == doctest::Approx(fwd.features.at(0, d)).epsilon(1e-12));
  }
}

TEST_CASE("bag embedding is the explicit weighted sum") {
  ModelParams p = init_params(small_config(), 17);
  Rng rng(18);
  Tensor bag = random_bag(8, 5, rng);
  BagForward fwd = forward_bag(bag, p);
  for (size_t d = 0; d < 6; ++d) {
    double expected = 0.0;
    for (size_t i = 0; i < 8; ++i) expected += fwd.alpha.values[i] * fwd.features.at(i, d);
    CHECK(std::abs(fwd.embedding.values[d] - expected) < 1e-12);
  }
}

TEST_CASE("bag_embed rejects mismatched attention length") {
  Tape tape;
  NodeId features = tape.input(Tensor({3, 4}));
  NodeId alpha = tape.input(Tensor({2}));
  CHECK_THROWS_AS(bag_embed(tape, features, alpha), ShapeError);
}

TEST_CASE("zero classifier gives zero logits and class 0 by tie-break") {
  ModelParams p = init_params(small_config(), 19);
  for (double& v : p.get("clf.w").values) v = 0.0;
  for (double& v : p.get("clf.b").values) v = 0.0;
  Rng rng(20);
  BagForward fwd = forward_bag(random_bag(4, 5, rng), p);
  for (double v : fwd.logits.values) CHECK(v == 0.0);
  CHECK(fwd.predicted_class == 0);
}

TEST_CASE("identity-row classifier selects embedding coordinates") {
  ModelParams p = init_params(small_config(), 21);
  for (double& v : p.get("clf.w").values) v = 0.0;
  for (double& v : p.get("clf.b").values) v = 0.0;
  // column c of clf.w selects embedding coordinate c
  for (size_t c = 0; c < 3; ++c) p.get("clf.w").at(c, c) = 1.0;
  Rng rng(22);
  BagForward fwd = forward_bag(random_bag(4, 5, rng), p);
  for (size_t c = 0; c < 3; ++c) {
    CHECK(fwd.logits.values[c] == doctest::Approx(fwd.embedding.values[c]).epsilon(1e-12));
  }
}

TEST_CASE("projection is unit norm and matches a forced output") {
  ModelParams p = init_params(small_config(), 23);
  Rng rng(24);
  BagForward fwd = forward_bag(random_bag(5, 5, rng), p);
  double norm = 0.0;
  for (double v : fwd.projection.values) norm += v * v;
  CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);

  // Force g(b) = [3, 4, 0] through zero weights and a fixed bias.
  for (double& v : p.get("proj.w2").values) v = 0.0;
  p.get("proj.b2").values = {3.0, 4.0, 0.0};
  BagForward forced = forward_bag(random_bag(5, 5, rng), p);
  CHECK(forced.projection.values[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(forced.projection.values[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("scaling the projection output layer leaves z unchanged") {
  ModelParams p = init_params(small_config(), 25);
  Rng rng(26);
  Tensor bag = random_bag(5, 5, rng);
  BagForward base = forward_bag(bag, p);
  ModelParams scaled = p;
  for (double& v : scaled.get("proj.w2").values) v *= 4.5;
  for (double& v : scaled.get("proj.b2").values) v *= 4.5;
  BagForward after = forward_bag(bag, scaled);
  for (size_t d = 0; d < 3; ++d) {
    CHECK(std::abs(after.projection.values[d] - base.projection.values[d]) < 1e-9);
  }
}

TEST_CASE("forward_bag matches the composed oracle") {
  ModelParams p = init_params(small_config(), 27);
  Rng rng(28);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor bag = random_bag(6, 5, rng);
    BagForward fwd = forward_bag(bag, p);
    OracleForward expect = oracle_forward(bag, p);
    for (size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(fwd.alpha.values[i] - expect.alpha[i]) < 1e-9);
    }
    for (size_t d = 0; d < 6; ++d) {
      CHECK(std::abs(fwd.embedding.values[d] - expect.embedding[d]) < 1e-9);
    }
    for (size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(fwd.logits.values[c] - expect.logits[c]) < 1e-9);
    }
    for (size_t d = 0; d < 3; ++d) {
      CHECK(std::abs(fwd.projection.values[d] - expect.projection[d]) < 1e-9);
    }
  }
}

TEST_CASE("logits and projections are permutation invariant") {
  ModelParams p = init_params(small_config(), 29);
  Rng rng(30);
  for (int trial = 0; trial < 100; ++trial) {
    size_t n = 2 + rng.uniform_index(8);
    Tensor bag = random_bag(n, 5, rng);
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    Tensor permuted({n, 5});
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < 5; ++j) permuted.at(i, j) = bag.at(perm[i], j);
    }
    BagForward a = forward_bag(bag, p);
    BagForward b = forward_bag(permuted, p);
    for (size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(a.logits.values[c] - b.logits.values[c]) < 1e-9);
    }
    for (size_t d = 0; d < 3; ++d) {
      CHECK(std::abs(a.projection.values[d] - b.projection.values[d]) < 1e-9);
    }
  }
}

TEST_CASE("single bag gradients pass the finite-difference check") {
  ModelConfig config = small_config();
  ModelParams p = init_params(config, 31);
  Rng rng(32);
  Tensor bag = random_bag(4, 5, rng);

  auto f = [&](Tape& tape, const std::vector<NodeId>& ids) {
    ModelParams shadow = p;  // shapes/names only; values come from the tape
    ParamNodes nodes;
    nodes.ids = ids;
    for (size_t i = 0; i < ids.size(); ++i) shadow.tensors[i] = tape.value(ids[i]);
    NodeId x = tape.input(bag);
    NodeId b = embed_bag(tape, x, shadow, nodes);
    NodeId row = tape.reshape(b, {1, config.d_f});
    NodeId logits = classify(tape, row, shadow, nodes);
    NodeId z = project(tape, row, shadow, nodes);
    return tape.add(tape.reduce_sum(logits), tape.reduce_sum(z));
  };
  CHECK(finite_diff_check(f, p.tensors, 1e-5) < 1e-4);
}

TEST_CASE("argmax prediction ignores a constant logit shift") {
  ModelParams p = init_params(small_config(), 33);
  Rng rng(34);
  Tensor bag = random_bag(5, 5, rng);
  BagForward base = forward_bag(bag, p);
  ModelParams shifted = p;
  for (double& v : shifted.get("clf.b").values) v += 3.25;
  BagForward after = forward_bag(bag, shifted);
  CHECK(base.predicted_class == after.predicted_class);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  ModelParams p = init_params(small_config(), 35);
  // exercise non-trivial bit patterns
  p.get("enc.w1").values[0] = 1.0 / 3.0;
  p.get("enc.w1").values[1] = -0.0;
  p.get("clf.b").values[0] = 5e-324;  // subnormal

  std::string text = checkpoint_to_json(p, 35, "{\"note\":\"cfg\"}");
  uint64_t seed = 0;
  std::string echo;
  ModelParams back = checkpoint_from_json(text, &seed, &echo);
  CHECK(seed == 35);
  CHECK(echo == "{\"note\":\"cfg\"}");
  CHECK(back.config == p.config);
  REQUIRE(back.count() == p.count());
  for (size_t i = 0; i < p.count(); ++i) {
    REQUIRE(back.tensors[i].numel() == p.tensors[i].numel());
    CHECK(std::memcmp(back.tensors[i].values.data(), p.tensors[i].values.data(),
                      p.tensors[i].numel() * sizeof(double)) == 0);
  }

  namespace fs = std::filesystem;
  fs::path tmp = fs::temp_directory_path() / "scmil_ckpt_test.json";
  save_checkpoint(tmp.string(), p, 35, "");
  ModelParams loaded = load_checkpoint(tmp.string());
  CHECK(std::memcmp(loaded.tensors[0].values.data(), p.tensors[0].values.data(),
                    p.tensors[0].numel() * sizeof(double)) == 0);
  fs::remove(tmp);
}

TEST_CASE("checkpoint loading rejects corrupted documents") {
  ModelParams p = init_params(small_config(), 37);
  std::string text = checkpoint_to_json(p, 37, "");
  std::string bad_version = text;
  bad_version.replace(bad_version.find("\"version\": 1"), 12, "\"version\": 9");
  CHECK_THROWS(checkpoint_from_json(bad_version));
  std::string bad_name = text;
  bad_name.replace(bad_name.find("enc.w1"), 6, "enc.wX");
  CHECK_THROWS(checkpoint_from_json(bad_name));
}

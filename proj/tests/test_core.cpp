#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "questmf/autodiff.hpp"
#include "questmf/checkpoint.hpp"
#include "questmf/errors.hpp"
#include "questmf/grad_check.hpp"
#include "questmf/optimizer.hpp"
#include "questmf/random.hpp"
#include "questmf/tensor.hpp"

using namespace questmf;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, RandomSource& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

std::filesystem::path temp_dir(const char* tag) {
  const auto dir = std::filesystem::temp_directory_path() / (std::string("questmf_core_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("fnv1a64 matches the published test vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("random streams are reproducible and split is draw-independent") {
  RandomSource a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RandomSource parent(7);
  RandomSource child_before = parent.split("x");
  parent.next_u64();
  parent.next_u64();
  RandomSource child_after = parent.split("x");
  for (int i = 0; i < 10; ++i) CHECK(child_before.next_u64() == child_after.next_u64());

  CHECK(RandomSource(7).split("x").next_u64() != RandomSource(7).split("y").next_u64());
  CHECK(RandomSource(7).split("x").next_u64() != RandomSource(8).split("x").next_u64());
}

TEST_CASE("draw helpers respect their ranges and distributions") {
  RandomSource rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.next_double();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.next_below(7) < 7);
    const double v = rng.uniform(-2.0, 5.0);
    CHECK(v >= -2.0);
    CHECK(v < 5.0);
  }
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  const std::array<double, 4> probs{0.5, 0.25, 0.15, 0.1};
  std::array<int, 4> counts{};
  for (int i = 0; i < 20000; ++i) ++counts[rng.categorical(probs)];
  for (int c = 0; c < 4; ++c) {
    const double p = static_cast<double>(counts[c]) / 20000.0;
    CHECK(std::abs(p - probs[c]) < 0.02);
  }
}

TEST_CASE("shuffle_indices yields a permutation and is seed-deterministic") {
  std::vector<std::size_t> v(50);
  std::iota(v.begin(), v.end(), std::size_t{0});
  RandomSource r1(9), r2(9);
  auto w = v;
  shuffle_indices(v, r1);
  shuffle_indices(w, r2);
  CHECK(v == w);
  CHECK(std::set<std::size_t>(v.begin(), v.end()).size() == 50);
}

TEST_CASE("tensor layout is row-major with checked rank helpers") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6);
  CHECK(t.at(4) == 5);

  Tensor r3({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(r3.at3(1, 0, 1) == 5);
  CHECK(r3.at3(0, 1, 0) == 2);

  CHECK(shape_size({2, 3, 4}) == 24);
  CHECK(Tensor::scalar(5.0).rank() == 1);
  CHECK(Tensor::row({1, 2}).rows() == 1);
  CHECK(Tensor::full({3}, 2.5).at(2) == 2.5);

  Tensor a({2}, {1, 2}), b({2}, {1, 2}), c({2}, {1, 3});
  CHECK(bitwise_equal(a, b));
  CHECK(!bitwise_equal(a, c));
  CHECK(!bitwise_equal(a, Tensor({1, 2}, {1, 2})));

  Tensor bad({2}, {1.0, std::nan("")});
  CHECK(!bad.all_finite());
  CHECK(a.all_finite());
}

TEST_CASE("elementwise and matrix ops produce the hand values") {
  Tape tape;
  Tensor ta({2, 2}, {1, 2, 3, 4}), tb({2, 2}, {5, 6, 7, 8});
  Value a = tape.leaf(ta), b = tape.leaf(tb);

  CHECK(tape.add(a, b).tensor().at(3) == 12);
  CHECK(tape.sub(b, a).tensor().at(0) == 4);
  CHECK(tape.mul(a, b).tensor().at(1) == 12);
  CHECK(tape.div(b, a).tensor().at(2) == doctest::Approx(7.0 / 3.0));
  CHECK(tape.add_scalar(a, 10).tensor().at(0) == 11);
  CHECK(tape.scale(a, -2).tensor().at(3) == -8);

  const Tensor mm = tape.matmul(a, b).tensor();
  CHECK(mm.at(0, 0) == 19);
  CHECK(mm.at(0, 1) == 22);
  CHECK(mm.at(1, 0) == 43);
  CHECK(mm.at(1, 1) == 50);

  CHECK(tape.transpose(a).tensor().at(0, 1) == 3);
  CHECK(tape.sum(a).item() == 10);

  const Tensor trow({1, 2}, {10, 20});
  Value row = tape.leaf(trow);
  const Tensor ar = tape.add_row(a, row).tensor();
  CHECK(ar.at(0, 0) == 11);
  CHECK(ar.at(1, 1) == 24);

  const Tensor tflat({1, 3}, {1, 1, 1});
  const Tensor sm = tape.softmax_rows(tape.leaf(tflat)).tensor();
  for (int j = 0; j < 3; ++j) CHECK(sm.at(0, j) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("structure ops slice, pad, concat, and reshape correctly") {
  Tape tape;
  const Tensor ta({3, 2}, {1, 2, 3, 4, 5, 6});
  Value a = tape.leaf(ta);
  const Tensor sr = tape.slice_rows(a, 1, 2).tensor();
  CHECK(sr.rows() == 2);
  CHECK(sr.at(0, 0) == 3);
  const Tensor sc = tape.slice_cols(a, 1, 1).tensor();
  CHECK(sc.cols() == 1);
  CHECK(sc.at(2, 0) == 6);

  const Tensor pr = tape.pad_rows(a, 5).tensor();
  CHECK(pr.rows() == 5);
  CHECK(pr.at(4, 1) == 0.0);
  CHECK(pr.at(2, 1) == 6);

  std::array<Value, 2> parts{a, a};
  CHECK(tape.concat_cols(parts).tensor().cols() == 4);
  CHECK(tape.concat_rows(parts).tensor().rows() == 6);
  CHECK(tape.concat_cols(parts).tensor().at(1, 3) == 4);

  const Tensor rs = tape.reshape(a, {2, 3}).tensor();
  CHECK(rs.at(1, 0) == 4);
}

TEST_CASE("masked softmax zeroes masked keys and rejects all-masked rows") {
  Tape tape;
  const Tensor ta({2, 3}, {1, 2, 3, 0, 0, 0});
  Value a = tape.leaf(ta);
  const Tensor sm = tape.masked_softmax_rows(a, {1, 0, 1}).tensor();
  CHECK(sm.at(0, 1) == 0.0);
  CHECK(sm.at(0, 0) + sm.at(0, 2) == doctest::Approx(1.0));
  CHECK(sm.at(1, 0) == doctest::Approx(0.5));
  CHECK_THROWS(tape.masked_softmax_rows(a, {0, 0, 0}));
}

TEST_CASE("every tape op passes a finite-difference gradient check") {
  RandomSource rng(11);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng, 0.5, 2.0);  // positive: feeds div/log/sqrt
  Tensor c = random_tensor({3, 2}, rng);
  Tensor r = random_tensor({1, 3}, rng);

  const std::array<Tensor*, 4> params{&a, &b, &c, &r};
  const double err = grad_check(params, [&](Tape& t) {
    Value va = t.leaf(a, true), vb = t.leaf(b, true), vc = t.leaf(c, true),
          vr = t.leaf(r, true);
    Value x = t.add(t.mul(va, vb), t.sub(va, vb));
    x = t.div(x, vb);
    x = t.add_row(x, vr);
    x = t.add_scalar(t.scale(x, 0.7), 0.3);
    Value m = t.matmul(x, vc);                       // 2x2
    m = t.add(t.sigmoid(m), t.tanh(m));
    m = t.add(m, t.relu(t.add_scalar(m, 0.29)));     // offset keeps kinks away
    Value s = t.softmax_rows(m);
    Value lg = t.log(t.clamp_min(t.sqrt(vb), 0.1));  // inputs stay above the clamp
    std::array<Value, 2> cols{t.transpose(m), t.slice_rows(vc, 0, 2)};
    Value cat = t.concat_cols(cols);
    std::array<Value, 2> rows{cat, cat};
    Value big = t.concat_rows(rows);
    big = t.pad_rows(big, 6);
    big = t.reshape(big, {2, 12});
    Value msm = t.masked_softmax_rows(big, {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1});
    return t.add(t.sum(msm), t.add(t.sum(lg), t.sum(t.slice_cols(s, 0, 2))));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("needs_grad pruning leaves unreachable parameters at zero") {
  Tensor used({2}, {1.0, 2.0});
  Tensor unused({2}, {3.0, 4.0});
  Tape tape;
  Value vu = tape.leaf(used, true);
  Value vn = tape.leaf(unused, true);
  Value loss = tape.sum(tape.mul(vu, vu));
  GradientMap g = reverse_sweep(tape, loss);
  CHECK(g.at(vu).at(0) == doctest::Approx(2.0));
  CHECK(g.at(vn).at(0) == 0.0);
  CHECK(g.at_storage(&unused).at(1) == 0.0);
}

TEST_CASE("reverse_sweep rejects non-scalar and foreign losses") {
  Tape tape;
  const Tensor tv({2}, {1, 2});
  Value v = tape.leaf(tv, true);
  CHECK_THROWS(reverse_sweep(tape, v));
  Tape other;
  Value w = other.constant(Tensor::scalar(1.0));
  CHECK_THROWS(reverse_sweep(tape, w));
}

TEST_CASE("dropout is inverted-scale in train form and silent at rate zero") {
  Tensor x = Tensor::full({1, 4000}, 1.0);
  Tape tape;
  Value vx = tape.leaf(x);

  RandomSource probe(5);
  RandomSource untouched(5);
  Value same = tape.dropout(vx, 0.0, probe);
  CHECK(bitwise_equal(same.tensor(), x));
  CHECK(probe.next_u64() == untouched.next_u64());  // rate 0 draws nothing

  RandomSource rng(5);
  const Tensor dropped = tape.dropout(vx, 0.25, rng).tensor();
  double sum = 0.0;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < dropped.size(); ++i) {
    const double v = dropped.at(i);
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
    sum += v;
    zeros += v == 0.0;
  }
  CHECK(std::abs(sum / 4000.0 - 1.0) < 0.05);  // inverted scaling keeps the mean
  CHECK(std::abs(static_cast<double>(zeros) / 4000.0 - 0.25) < 0.03);
}

TEST_CASE("grad_check is near machine precision on a linear map") {
  Tensor w({3}, {0.5, -1.0, 2.0});
  const std::array<Tensor*, 1> params{&w};
  const double err = grad_check(params, [&](Tape& t) {
    Value v = t.leaf(w, true);
    return t.sum(t.scale(v, 3.0));
  });
  CHECK(err < 1e-9);
}

TEST_CASE("adamw follows the decay-then-update rule exactly") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  Tensor theta({1}, {1.0});
  AdamW opt(cfg, {&theta});
  Tensor g({1}, {0.5});

  // Hand-rolled reference for two identical steps.
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    m = cfg.beta1 * m + (1 - cfg.beta1) * 0.5;
    v = cfg.beta2 * v + (1 - cfg.beta2) * 0.25;
    const double mh = m / (1 - std::pow(cfg.beta1, t));
    const double vh = v / (1 - std::pow(cfg.beta2, t));
    x = x * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
  }
  opt.step({&g});
  opt.step({&g});
  CHECK(opt.steps_taken() == 2);
  CHECK(theta.at(0) == doctest::Approx(x).epsilon(1e-12));

  // Zero decay reduces to Adam: only the gradient term moves the weight.
  AdamWConfig plain = cfg;
  plain.weight_decay = 0.0;
  Tensor t2({1}, {1.0});
  AdamW opt2(plain, {&t2});
  opt2.step({&g});
  // Bias correction cancels on step 1: m_hat = g, v_hat = g^2.
  CHECK(t2.at(0) == doctest::Approx(1.0 - plain.lr * 0.5 / (0.5 + plain.eps)).epsilon(1e-12));
}

TEST_CASE("adamw validates gradient alignment") {
  Tensor theta({2}, {1.0, 2.0});
  AdamW opt({}, {&theta});
  Tensor bad({3}, {0, 0, 0});
  CHECK_THROWS(opt.step({&bad}));
  CHECK_THROWS(opt.step({}));
}

TEST_CASE("checkpoints round-trip bit-exactly with their metadata") {
  const auto dir = temp_dir("ckpt");
  RandomSource rng(21);
  ParamSet ps;
  ps.add("enc/text/w", random_tensor({3, 4}, rng));
  ps.add("enc/text/b", random_tensor({1, 4}, rng));
  ps.add("head/w", random_tensor({4, 2}, rng));

  CheckpointMeta meta;
  meta.stage = "stage1";
  meta.framework = "questmf";
  meta.loss = "imboll";
  meta.modalities = "text";
  meta.question = 3;
  meta.epoch = 17;
  meta.val_loss = 0.25;
  meta.val_ccc = 0.5;
  meta.seed = 42;
  meta.config_hash = "00ff";

  const auto path = dir / "net.qmc";
  save_checkpoint(path, meta, ps);
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.meta.stage == "stage1");
  CHECK(ck.meta.question == 3);
  CHECK(ck.meta.epoch == 17);
  CHECK(ck.meta.val_loss == 0.25);
  CHECK(ck.meta.config_hash == "00ff");
  REQUIRE(ck.tensors.size() == 3);
  CHECK(ck.tensors[0].first == "enc/text/w");
  CHECK(bitwise_equal(ck.tensors[0].second, ps.tensor(0)));
  CHECK(bitwise_equal(ck.tensors[2].second, ps.tensor(2)));

  // Restore into a same-shaped set.
  ParamSet fresh;
  fresh.add("enc/text/w", Tensor({3, 4}));
  fresh.add("enc/text/b", Tensor({1, 4}));
  fresh.add("head/w", Tensor({4, 2}));
  restore_params(fresh, ck);
  CHECK(bitwise_equal(fresh.tensor(1), ps.tensor(1)));

  // Overlay copies only the matching prefix.
  ParamSet part;
  part.add("enc/text/w", Tensor({3, 4}));
  part.add("enc/text/b", Tensor({1, 4}));
  part.add("head/w", Tensor({4, 2}));
  CHECK(overlay_params(part, ck, "enc/text/") == 2);
  CHECK(bitwise_equal(part.tensor(0), ps.tensor(0)));
  CHECK(!bitwise_equal(part.tensor(2), ps.tensor(2)));

  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loading rejects corrupt containers") {
  const auto dir = temp_dir("ckpt_bad");
  ParamSet ps;
  ps.add("w", Tensor({2}, {1, 2}));
  const auto path = dir / "net.qmc";
  save_checkpoint(path, CheckpointMeta{}, ps);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.qmc"), DataError);

  // Truncation.
  const auto bytes = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, bytes - 5);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  // Bad magic.
  {
    std::ofstream out(dir / "bad.qmc", std::ios::binary);
    out << "NOPE the rest does not matter";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.qmc"), DataError);

  // Restore with a mismatched name set.
  save_checkpoint(path, CheckpointMeta{}, ps);
  const Checkpoint ck = load_checkpoint(path);
  ParamSet other;
  other.add("w2", Tensor({2}));
  CHECK_THROWS_AS(restore_params(other, ck), DataError);
  ParamSet wrong_shape;
  wrong_shape.add("w", Tensor({3}));
  CHECK_THROWS_AS(restore_params(wrong_shape, ck), DataError);

  std::filesystem::remove_all(dir);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "support/gradcheck.hpp"
#include "ueforge/dataset.hpp"
#include "ueforge/errors.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/io.hpp"
#include "ueforge/model.hpp"
#include "ueforge/ops.hpp"
#include "ueforge/optim.hpp"

using namespace ueforge;
using ueforge::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

const Dataset& small_train() {
  static const Dataset d = [] {
    DataGenConfig cfg;
    cfg.seed = 23;
    cfg.n_train = 96;
    cfg.n_test = 8;
    return gen_data(cfg).train;
  }();
  return d;
}

GenConfig quick_gen() {
  GenConfig g;
  g.epochs = 2;
  g.batch_size = 32;
  g.inner_steps = 2;
  g.seed = 4;
  return g;
}

std::string temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ueforge-tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

bool same_values(const PerturbationSet& a, const PerturbationSet& b) {
  return a.values.size() == b.values.size() && std::equal(a.values.begin(), a.values.end(), b.values.begin());
}

bool same_params(const StagedNet& a, const StagedNet& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) return false;
  }
  return pa.size() == pb.size();
}

// Direct Frobenius distance between per-example Gram matrices.
double naive_rsem(const Tensor& a, const Tensor& r) {
  const std::size_t B = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        double ga = 0.0, gr = 0.0;
        for (std::size_t p = 0; p < HW; ++p) {
          ga += a.data()[(b * C + i) * HW + p] * a.data()[(b * C + j) * HW + p];
          gr += r.data()[(b * C + i) * HW + p] * r.data()[(b * C + j) * HW + p];
        }
        const double d = (ga - gr) / static_cast<double>(C * HW);
        total += d * d;
      }
  return total / static_cast<double>(B);
}

FeatureTaps taps_with(std::size_t stage, const Tensor& t) {
  FeatureTaps taps;
  taps[stage] = t;
  return taps;
}

}  // namespace

TEST_CASE("project_linf") {
  const Tensor p = project_linf(Tensor({2}, {0.2, -0.5}), 0.1);
  CHECK(p.data()[0] == 0.1);
  CHECK(p.data()[1] == -0.1);
  const Tensor z = project_linf(Tensor::zeros({3}), 0.1);
  for (double v : z.data()) CHECK(v == 0.0);
  const Tensor twice = project_linf(p, 0.1);
  CHECK(std::equal(p.data().begin(), p.data().end(), twice.data().begin()));
  CHECK(kDefaultEpsilon == doctest::Approx(0.031373).epsilon(1e-4));
}

TEST_CASE("gram examples") {
  const Tensor zero = ops::gram(Tensor::zeros({1, 2, 2, 2}));
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK(ops::gram(Tensor::ones({1, 1, 2, 2})).item() == 1.0);
  // Channel 0 lives on the left column, channel 1 on the right.
  const Tensor disjoint = ops::gram(Tensor({1, 2, 2, 2}, {1, 0, 2, 0, 0, 3, 0, 4}));
  CHECK(disjoint.at({0, 0, 1}) == 0.0);
  CHECK(disjoint.at({0, 1, 0}) == 0.0);
  std::mt19937_64 rng(3);
  const Tensor g = ops::gram(random_tensor({2, 3, 4, 4}, rng));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(g.at({b, i, i}) >= 0.0);
      for (std::size_t j = 0; j < 3; ++j) CHECK(g.at({b, i, j}) == g.at({b, j, i}));
    }
}

TEST_CASE("semantic alignment loss") {
  std::mt19937_64 rng(5);
  const Tensor ref = random_tensor({2, 3, 4, 4}, rng);
  const std::vector<std::size_t> s1{1};
  CHECK(semantic_alignment_loss(taps_with(1, ref), taps_with(1, ref), s1).item() == 0.0);

  const Tensor doubled = ops::scale(ref, 2.0);
  const Tensor g = ops::gram(ref);
  double g2 = 0.0;
  for (double v : g.data()) g2 += v * v;
  CHECK(semantic_alignment_loss(taps_with(1, doubled), taps_with(1, ref), s1).item() ==
        doctest::Approx(9.0 * g2 / 2.0).epsilon(1e-12));

  const Tensor adv = random_tensor({2, 3, 4, 4}, rng);
  CHECK(std::abs(semantic_alignment_loss(taps_with(1, adv), taps_with(1, ref), s1).item() - naive_rsem(adv, ref)) <=
        1e-10);

  // Averaged over stages.
  FeatureTaps a2 = taps_with(1, adv), r2 = taps_with(1, ref);
  a2[2] = ref;
  r2[2] = ref;
  const std::vector<std::size_t> s12{1, 2};
  CHECK(semantic_alignment_loss(a2, r2, s12).item() == doctest::Approx(naive_rsem(adv, ref) / 2.0).epsilon(1e-12));

  // Gradient flows to the adversarial branch only.
  Tensor ra = ref.detach();
  ra.set_requires_grad(true);
  Tensor aa = adv.detach();
  aa.set_requires_grad(true);
  backward(semantic_alignment_loss(taps_with(1, aa), taps_with(1, ra), s1));
  CHECK(aa.has_grad());
  CHECK_FALSE(ra.has_grad());

  CHECK_THROWS_AS(semantic_alignment_loss(taps_with(1, adv), taps_with(1, random_tensor({2, 2, 4, 4}, rng)), s1),
                  DimensionError);
}

TEST_CASE("gen config validation") {
  GenConfig g;
  CHECK_NOTHROW(g.validate());
  CHECK(g.outer_step() == doctest::Approx(kDefaultEpsilon / 4.0));
  GenConfig bad = g;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.inner_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_method("ssc") == UeMethod::Ssc);
  CHECK_THROWS_AS(parse_method("rem"), ConfigError);
}

TEST_CASE("emn generation structure") {
  const auto& data = small_train();
  SUBCASE("eta = 0 keeps perturbations at zero") {
    StagedNet sur(NetConfig{}, 1);
    GenConfig g = quick_gen();
    g.eta = 0.0;
    const auto ps = generate_emn(data, sur, g);
    CHECK(ps.max_abs() == 0.0);
  }
  SUBCASE("one outer step is a signed step") {
    StagedNet sur(NetConfig{}, 1);
    GenConfig g = quick_gen();
    g.epochs = 1;
    g.batch_size = data.size();
    g.epsilon = 1.0;
    g.eta = 0.01;
    const auto ps = generate_emn(data, sur, g);
    std::size_t nonzero = 0;
    for (double v : ps.values) {
      CHECK((v == 0.0 || v == 0.01 || v == -0.01));
      nonzero += v != 0.0;
    }
    CHECK(nonzero > ps.values.size() / 2);
  }
  SUBCASE("budget, surrogate reset and determinism") {
    StagedNet sur(NetConfig{}, 2);
    const StagedNet before = sur.clone();
    GenConfig g = quick_gen();
    g.epochs = 3;
    const auto a = generate_emn(data, sur, g);
    CHECK(same_params(sur, before));
    CHECK(sur.freeze_mask().empty());
    for (const auto& p : sur.named_parameters()) CHECK(p.tensor.requires_grad());
    CHECK(a.size() == data.size());
    CHECK(a.max_abs() <= g.epsilon);
    CHECK(a.max_abs() > 0.0);
    StagedNet sur2(NetConfig{}, 2);
    const auto b = generate_emn(data, sur2, g);
    CHECK(same_values(a, b));
  }
  SUBCASE("weight-aware surrogate freeze is honoured and restored") {
    StagedNet sur(NetConfig{}, 2);
    GenConfig g = quick_gen();
    g.surrogate_freeze = FreezeMask{Component::Stem, Component::S1};
    const auto a = generate_emn(data, sur, g);
    CHECK(sur.freeze_mask().empty());
    StagedNet sur2(NetConfig{}, 2);
    g.surrogate_freeze = FreezeMask{};
    const auto b = generate_emn(data, sur2, g);
    CHECK_FALSE(same_values(a, b));
  }
}

TEST_CASE("reset fidelity: inner steps accumulate within an epoch, reset at its end") {
  // Hand-rolled loop: consecutive batches continue from the previous batch's
  // inner steps and every epoch starts from the original parameters.
  const auto& data = small_train();
  GenConfig g = quick_gen();
  g.batch_size = data.size() / 3;
  StagedNet sur(NetConfig{}, 6);
  GenTrace trace;
  const auto ps = generate_emn(data, sur, g, &trace);
  REQUIRE(trace.epochs.size() == 2);
  CHECK(trace.epochs[0].batches == 3);
  CHECK(same_params(sur, StagedNet(NetConfig{}, 6)));

  StagedNet net(NetConfig{}, 6);
  const auto start = net.snapshot();
  auto params = net.trainable_parameters();
  VelocityState vel = make_velocity(params);
  std::vector<double> delta(data.size() * data.image_numel(), 0.0);
  const std::size_t D = data.image_numel();
  std::mt19937_64 rng(g.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < g.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    CHECK(same_params(net, StagedNet(NetConfig{}, 6)));
    for (std::size_t b0 = 0; b0 < order.size(); b0 += g.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b0, g.batch_size);
      const auto labels = data.batch_labels(idx);
      std::vector<double> adv(idx.size() * D);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto x = data.image(idx[b]);
        for (std::size_t j = 0; j < D; ++j) adv[b * D + j] = std::clamp(x[j] + delta[idx[b] * D + j], 0.0, 1.0);
      }
      const Tensor xa = data.batch(idx);
      for (std::size_t k = 0; k < g.inner_steps; ++k) {
        const Tensor loss = ops::cross_entropy(net.forward(Tensor(xa.shape(), adv)).logits, labels);
        backward(loss);
        sgd_step(params, vel, SgdHyper{g.alpha, 0.0, 0.0});
        for (auto& p : params) p.zero_grad();
      }
      for (auto& p : params) p.set_requires_grad(false);
      Tensor leaf(xa.shape(), adv, true);
      backward(ops::cross_entropy(net.forward(leaf).logits, labels));
      const auto gr = leaf.grad();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        for (std::size_t j = 0; j < D; ++j) {
          double& d = delta[idx[b] * D + j];
          const double sg = gr[b * D + j] > 0.0 ? 1.0 : (gr[b * D + j] < 0.0 ? -1.0 : 0.0);
          d = std::clamp(d - g.outer_step() * sg, -g.epsilon, g.epsilon);
        }
      }
      for (auto& p : params) p.set_requires_grad(true);
    }
    net.restore(start);
  }
  CHECK(std::equal(delta.begin(), delta.end(), ps.values.begin(), ps.values.end()));
}

TEST_CASE("ssc reduces to emn at lambda 0") {
  const auto& data = small_train();
  const StagedNet ref(NetConfig{}, 40);
  StagedNet s1 = ref.clone(), s2 = ref.clone();
  s1.reinit_head(1);
  s2.reinit_head(1);
  GenConfig g = quick_gen();
  g.lambda = 0.0;
  const auto emn = generate_emn(data, s1, g);
  const auto ssc = generate_ssc(data, s2, ref, g);
  CHECK(same_values(emn, ssc));
  CHECK(ssc.method == UeMethod::Ssc);
}

TEST_CASE("ssc: R_sem is zero at initialization for identical shallow branches") {
  const auto& data = small_train();
  const StagedNet ref(NetConfig{}, 41);
  StagedNet sur = ref.clone();
  GenConfig g = quick_gen();
  g.epochs = 1;
  g.surrogate_freeze = FreezeMask{Component::Stem, Component::S1};
  GenTrace trace;
  generate_ssc(data, sur, ref, g, &trace);
  REQUIRE(trace.has_rsem);
  CHECK(trace.epochs[0].rsem_before == 0.0);
  CHECK(trace.epochs[0].rsem_after == 0.0);
}

TEST_CASE("ssc: R_sem descends across the inner loop") {
  const auto& data = small_train();
  const StagedNet ref(NetConfig{}, 11);
  StagedNet sur(NetConfig{}, 12);
  GenConfig g = quick_gen();
  g.lambda = 1.0;
  g.inner_steps = 5;
  g.epochs = 3;
  GenTrace trace;
  generate_ssc(data, sur, ref, g, &trace);
  std::size_t descents = 0, batches = 0;
  for (const auto& e : trace.epochs) {
    descents += e.rsem_descents;
    batches += e.batches;
    CHECK(e.rsem_after <= e.rsem_before);
  }
  CHECK(static_cast<double>(descents) >= 0.9 * static_cast<double>(batches));
}

TEST_CASE("ssc: reference geometry mismatch") {
  const auto& data = small_train();
  NetConfig narrow;
  narrow.widths = {4, 8, 16, 32};
  const StagedNet ref(narrow, 1);
  StagedNet sur(NetConfig{}, 2);
  CHECK_THROWS_AS(generate_ssc(data, sur, ref, quick_gen()), DimensionError);
}

TEST_CASE("apply and UEPD round trip") {
  const auto& data = small_train();
  const auto zero = PerturbationSet::zeros(data, UeMethod::Emn, kDefaultEpsilon);
  const Dataset same = apply(data, zero);
  CHECK(same.images == data.images);
  CHECK(same.labels == data.labels);

  StagedNet sur(NetConfig{}, 3);
  const auto ps = generate_emn(data, sur, quick_gen());
  const Dataset pert = apply(data, ps);
  CHECK(pert.labels == data.labels);
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    CHECK(std::abs(pert.images[i] - data.images[i]) <= ps.epsilon);
    CHECK(pert.images[i] >= 0.0);
    CHECK(pert.images[i] <= 1.0);
  }

  const std::string path = temp_path("ps.uepd");
  save_perturbations(ps, path);
  const auto back = load_perturbations(path);
  CHECK(same_values(ps, back));
  CHECK(back.epsilon == ps.epsilon);
  CHECK(apply(data, back).images == pert.images);
  const std::string bytes = io::read_file(path);
  CHECK(bytes.substr(0, 4) == "UEPD");

  SUBCASE("budget violations are rejected on load") {
    auto big = ps;
    big.values[0] = 2.0 * ps.epsilon;
    const std::string bad = temp_path("big.uepd");
    save_perturbations(big, bad);
    CHECK_THROWS_AS(load_perturbations(bad), FormatError);
  }
  SUBCASE("count mismatch") {
    Dataset fewer = data;
    fewer.images.resize(fewer.image_numel() * 10);
    fewer.labels.resize(10);
    CHECK_THROWS_AS(apply(fewer, ps), InputError);
  }
  SUBCASE("truncated file") {
    const std::string cut = temp_path("cut.uepd");
    io::write_file_atomic(cut, std::string_view(bytes).substr(0, bytes.size() - 9));
    CHECK_THROWS_AS(load_perturbations(cut), FormatError);
  }
}

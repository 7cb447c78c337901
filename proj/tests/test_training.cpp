#include <doctest.h>

#include <cmath>

#include "ueforge/dataset.hpp"
#include "ueforge/errors.hpp"
#include "ueforge/model.hpp"
#include "ueforge/ops.hpp"
#include "ueforge/training.hpp"

using namespace ueforge;

namespace {

const DataSplit& small_split() {
  static const DataSplit split = [] {
    DataGenConfig cfg;
    cfg.seed = 17;
    cfg.n_train = 128;
    cfg.n_test = 64;
    return gen_data(cfg);
  }();
  return split;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.decay_epochs = {1};
  cfg.seed = 3;
  return cfg;
}

bool same_params(const StagedNet& a, const StagedNet& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) return false;
  }
  return pa.size() == pb.size();
}

double max_displacement(const StagedNet& a, const StagedNet& b) {
  double m = 0.0;
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i].tensor.numel(); ++j) {
      m = std::max(m, std::abs(pa[i].tensor.data()[j] - pb[i].tensor.data()[j]));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("train config validation and schedule") {
  TrainConfig cfg;
  CHECK(cfg.lr_at(0) == cfg.lr);
  CHECK(cfg.lr_at(19) == cfg.lr);
  CHECK(cfg.lr_at(20) == doctest::Approx(cfg.lr * 0.1).epsilon(1e-15));
  CHECK(cfg.lr_at(29) == doctest::Approx(cfg.lr * 0.01).epsilon(1e-15));
  TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_paradigm("sf-pf") == Paradigm::SfPf);
  CHECK(paradigm_name(Paradigm::Pf) == "pf");
  CHECK_THROWS_AS(parse_paradigm("finetune"), ConfigError);
}

TEST_CASE("train errors and continuity") {
  Dataset empty = small_split().train;
  empty.images.clear();
  empty.labels.clear();
  StagedNet net(NetConfig{}, 1);
  CHECK_THROWS_AS(train(net, empty, quick()), InputError);

  // Displacement scales with the learning rate for tiny rates.
  const StagedNet init(NetConfig{}, 1);
  auto run = [&](double lr) {
    StagedNet n = init.clone();
    TrainConfig cfg = quick(1);
    cfg.lr = lr;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    train(n, small_split().train, cfg);
    return max_displacement(n, init);
  };
  const double d1 = run(1e-9), d2 = run(2e-9);
  CHECK(d1 > 0.0);
  CHECK(d2 / d1 == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("training is deterministic under a seed") {
  StagedNet a(NetConfig{}, 5), b(NetConfig{}, 5);
  const auto la = train(a, small_split().train, quick());
  const auto lb = train(b, small_split().train, quick());
  CHECK(same_params(a, b));
  REQUIRE(la.epochs.size() == lb.epochs.size());
  for (std::size_t i = 0; i < la.epochs.size(); ++i) CHECK(la.epochs[i].loss == lb.epochs[i].loss);
  const auto ra = evaluate(a, small_split().test), rb = evaluate(b, small_split().test);
  CHECK(ra.accuracy == rb.accuracy);
  CHECK(ra.loss == rb.loss);
}

TEST_CASE("sf_pretrain reduces to plain pretraining at lambda 0") {
  StagedNet a(NetConfig{}, 9), b(NetConfig{}, 9);
  TrainConfig cfg = quick();
  cfg.lambda_sf = 0.0;
  const auto la = sf_pretrain(a, small_split().train, cfg);
  const auto lb = train(b, small_split().train, cfg);
  CHECK(same_params(a, b));
  CHECK_FALSE(a.has_aux_heads());
  for (std::size_t i = 0; i < la.epochs.size(); ++i) CHECK(la.epochs[i].loss == lb.epochs[i].loss);

  TrainConfig neg = cfg;
  neg.lambda_sf = -1.0;
  CHECK_THROWS_AS(sf_pretrain(a, small_split().train, neg), InputError);
}

TEST_CASE("sf objective at initialization is near ln K times the head count") {
  const auto& data = small_split().train;
  std::vector<std::size_t> idx(64);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor x = data.batch(idx);
  const auto y = data.batch_labels(idx);
  for (double lambda : {1.0, 3.0}) {
    StagedNet net(NetConfig{}, 31);
    net.attach_aux_heads({1, 2}, 32);
    const double loss = sf_objective(net, x, y, lambda).item();
    const double expect = std::log(4.0) * (1.0 + lambda * 2.0);
    CAPTURE(lambda);
    CHECK(std::abs(loss - expect) / expect < 0.15);
  }
  StagedNet plain(NetConfig{}, 31);
  plain.attach_aux_heads({1, 2}, 32);
  CHECK(sf_objective(plain, x, y, 0.0).item() == ops::cross_entropy(plain.logits(x), y).item());
}

TEST_CASE("sf_pretrain changes the trunk when lambda is positive") {
  StagedNet a(NetConfig{}, 9), b(NetConfig{}, 9);
  TrainConfig cfg = quick(1);
  cfg.lambda_sf = 1.0;
  sf_pretrain(a, small_split().train, cfg);
  cfg.lambda_sf = 0.0;
  sf_pretrain(b, small_split().train, cfg);
  CHECK_FALSE(same_params(a, b));
}

TEST_CASE("evaluate") {
  const auto& test = small_split().test;
  StagedNet net(NetConfig{}, 1);
  SUBCASE("constant predictor on balanced data") {
    for (auto& p : net.named_parameters()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
    auto hb = net.parameters_of(Component::Head)[1];
    hb.mutable_data()[2] = 1.0;
    const auto r = evaluate(net, test);
    CHECK(r.accuracy == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.per_class_accuracy[2] == 1.0);
    CHECK(r.per_class_accuracy[0] == 0.0);
  }
  SUBCASE("pure and exact") {
    const StagedNet before = net.clone();
    const auto a = evaluate(net, test), b = evaluate(net, test);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.loss == b.loss);
    CHECK(a.accuracy == static_cast<double>(a.correct) / static_cast<double>(a.total));
    CHECK(same_params(net, before));
  }
  SUBCASE("label out of range") {
    Dataset bad = test;
    bad.labels[0] = 9;
    CHECK_THROWS_AS(evaluate(net, bad), InputError);
  }
}

#include "doctest.h"

#include "gradcheck.hpp"
#include "support.hpp"

#include "deepterra/error.hpp"
#include "deepterra/nn/train.hpp"

#include <cmath>
#include <thread>

using namespace deepterra;
using namespace deepterra::nn;

namespace {

ErrorKind kind_of(const auto& fn)
{
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Domain;
}

ModelSpec tiny_spec(std::size_t px = 8)
{
  ModelSpec spec;
  spec.input_px = px;
  spec.layers = {Conv2D{3, 4, 1}, ActivationLayer{Activation::Relu}, MaxPool{2}, Flatten{}, Dense{8},
                 ActivationLayer{Activation::Relu}, Dropout{0.25}};
  return spec;
}

TrainConfig quick_config(std::size_t epochs = 3)
{
  TrainConfig cfg;
  cfg.max_epochs = epochs;
  cfg.batch_size = 8;
  cfg.seed = 11;
  cfg.learning_rate = 5e-3;
  return cfg;
}

}  // namespace

TEST_CASE("tensor invariants")
{
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t[4] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), Error);
  CHECK_THROWS_AS(t.reshape({4}), Error);
  t.reshape({3, 2});
  CHECK(t.dim(0) == 3);
}

TEST_CASE("model spec chain checks")
{
  CHECK_NOTHROW(default_convnet(32).layer_shapes());
  CHECK(default_convnet(32).layer_shapes().at(6) == Shape{32 * 6 * 6});
  CHECK(default_convnet(32).head_inputs() == 64);
  ModelSpec s;
  s.input_px = 8;
  s.layers = {Dense{4}};
  CHECK(kind_of([&] { s.layer_shapes(); }) == ErrorKind::Domain);
  s.layers = {Conv2D{9, 2, 1}, Flatten{}};
  CHECK(kind_of([&] { s.layer_shapes(); }) == ErrorKind::Domain);
  s.layers = {Flatten{}, Dropout{1.0}};
  CHECK(kind_of([&] { s.layer_shapes(); }) == ErrorKind::Domain);
  s.layers = {Conv2D{3, 2, 1}};
  CHECK(kind_of([&] { s.layer_shapes(); }) == ErrorKind::Domain);

  const ModelSpec d = default_convnet(32, Activation::Tanh, 0.3);
  const ModelSpec back = model_from_json(nlohmann::json::parse(to_json(d).dump()));
  CHECK(to_json(back) == to_json(d));
  CHECK(kind_of([] { parse_activation("gelu"); }) == ErrorKind::Config);
}

TEST_CASE("softmax rows sum to one")
{
  rng::Stream s(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor z({4, 2});
    const double scale = trial < 100 ? 5.0 : 800.0;
    for (auto& v : z.values()) v = s.uniform(-scale, scale);
    const Tensor p = softmax(z);
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(std::fabs(p[2 * r] + p[2 * r + 1] - 1.0) <= 1e-12);
      CHECK(p[2 * r] >= 0.0);
    }
  }
}

TEST_CASE("zero-weight head gives an even split")
{
  const ModelSpec spec = default_convnet(16);
  const WeightMap w = zero_weights(spec);
  const auto fr = forward(spec, w, testsupport::random_batch(3, 3, 16, 5), Mode::Eval, 0);
  for (std::size_t i = 0; i < fr.probabilities.size(); ++i) CHECK(fr.probabilities[i] == 0.5);
}

TEST_CASE("identity 1x1 convolution passes the feature map through")
{
  ModelSpec with_conv;
  with_conv.input_px = 5;
  with_conv.layers = {Conv2D{1, 3, 1}, Flatten{}};
  ModelSpec plain;
  plain.input_px = 5;
  plain.layers = {Flatten{}};

  WeightMap w = init_weights(plain, 9);
  WeightMap wc = zero_weights(with_conv);
  wc.set(kHeadWeight, w.at(kHeadWeight));
  wc.set(kHeadBias, Tensor({2}, std::vector<double>{0.3, -0.2}));
  w.set(kHeadBias, Tensor({2}, std::vector<double>{0.3, -0.2}));
  Tensor k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  wc.set("layer0.weight", k);

  const Tensor batch = testsupport::random_batch(2, 3, 5, 17);
  const auto a = forward(with_conv, wc, batch, Mode::Eval, 0);
  const auto b = forward(plain, w, batch, Mode::Eval, 0);
  CHECK(a.cache.logits() == b.cache.logits());
}

TEST_CASE("2x2 convolution matches a hand-computed dot product")
{
  ModelSpec spec;
  spec.input_px = 2;
  spec.input_channels = 1;
  spec.layers = {Conv2D{2, 1, 1}, Flatten{}};
  WeightMap w = zero_weights(spec);
  w.set("layer0.weight", Tensor({1, 1, 2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.25}));
  w.set("layer0.bias", Tensor({1}, std::vector<double>{0.1}));
  w.set(kHeadWeight, Tensor({2, 1}, std::vector<double>{1.0, 0.0}));
  const Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto fr = forward(spec, w, x, Mode::Eval, 0);
  // 0.5*1 - 1*2 + 2*3 + 0.25*4 + 0.1
  CHECK(fr.cache.logits()[0] == doctest::Approx(5.6).epsilon(1e-15));
  CHECK(fr.cache.logits()[1] == 0.0);
}

TEST_CASE("max pool and stride shapes")
{
  ModelSpec spec;
  spec.input_px = 9;
  spec.layers = {Conv2D{3, 2, 2}, MaxPool{2}, Flatten{}};
  const auto shapes = spec.layer_shapes();
  CHECK(shapes[0] == Shape{2, 4, 4});
  CHECK(shapes[1] == Shape{2, 2, 2});
  CHECK(spec.head_inputs() == 8);
}

TEST_CASE("analytic gradients agree with central differences")
{
  for (auto act : {Activation::Tanh, Activation::Sigmoid}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto r = testsupport::gradient_check(testsupport::gradcheck_spec(act), seed);
      CAPTURE(seed);
      CHECK(r.checked > 100);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
  // Strided convolution path.
  ModelSpec strided;
  strided.input_px = 9;
  strided.layers = {Conv2D{3, 3, 2}, ActivationLayer{Activation::Tanh}, Flatten{}, Dense{4},
                    ActivationLayer{Activation::Sigmoid}};
  CHECK(testsupport::gradient_check(strided, 42).max_rel_error <= 1e-4);
}

TEST_CASE("backward edge cases")
{
  const ModelSpec spec = testsupport::gradcheck_spec();
  WeightMap w = init_weights(spec, 4);
  const Tensor batch = testsupport::random_batch(2, 3, 8, 8);

  SUBCASE("zero upstream gradient")
  {
    auto fr = forward(spec, w, batch, Mode::Eval, 0);
    const auto grads = backward(fr.cache, Tensor({2, 2}));
    for (const auto& [name, g] : grads) {
      CHECK(g.shape() == w.at(name).shape());
      for (double v : g.values()) CHECK(v == 0.0);
    }
  }
  SUBCASE("duplicated sample equals the single-sample gradient")
  {
    const Tensor one = testsupport::random_batch(1, 3, 8, 21);
    Tensor two({2, 3, 8, 8});
    std::copy(one.values().begin(), one.values().end(), two.values().begin());
    std::copy(one.values().begin(), one.values().end(), two.values().begin() + static_cast<std::ptrdiff_t>(one.size()));
    const std::vector<std::size_t> l1 = {1}, l2 = {1, 1};
    auto f1 = forward(spec, w, one, Mode::Eval, 0);
    auto f2 = forward(spec, w, two, Mode::Eval, 0);
    const auto g1 = backward(f1.cache, cross_entropy(f1.cache.logits(), l1).grad_logits);
    const auto g2 = backward(f2.cache, cross_entropy(f2.cache.logits(), l2).grad_logits);
    for (const auto& [name, g] : g1)
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g2.at(name)[i] == doctest::Approx(g[i]).epsilon(1e-12));
  }
  SUBCASE("stale caches are rejected")
  {
    auto fr = forward(spec, w, batch, Mode::Eval, 0);
    w.mutable_at(kHeadBias)[0] += 1.0;
    CHECK(kind_of([&] { backward(fr.cache, Tensor({2, 2})); }) == ErrorKind::Domain);
    auto fresh = forward(spec, w, batch, Mode::Eval, 0);
    backward(fresh.cache, Tensor({2, 2}));
    CHECK(kind_of([&] { backward(fresh.cache, Tensor({2, 2})); }) == ErrorKind::Domain);
    ForwardCache empty;
    CHECK(kind_of([&] { backward(empty, Tensor({2, 2})); }) == ErrorKind::Domain);
  }
  SUBCASE("shape mismatch")
  {
    CHECK(kind_of([&] { forward(spec, w, testsupport::random_batch(1, 3, 7, 1), Mode::Eval, 0); }) ==
          ErrorKind::Domain);
  }
}

TEST_CASE("dropout affects train mode only")
{
  const ModelSpec spec = tiny_spec();
  const WeightMap w = init_weights(spec, 2);
  const Tensor batch = testsupport::random_batch(4, 3, 8, 3);
  const auto e1 = forward(spec, w, batch, Mode::Eval, 1);
  const auto e2 = forward(spec, w, batch, Mode::Eval, 999);
  CHECK(e1.probabilities == e2.probabilities);
  const auto t1 = forward(spec, w, batch, Mode::Train, 1);
  const auto t1b = forward(spec, w, batch, Mode::Train, 1);
  const auto t2 = forward(spec, w, batch, Mode::Train, 2);
  CHECK(t1.probabilities == t1b.probabilities);
  CHECK_FALSE(t1.probabilities == t2.probabilities);
}

TEST_CASE("cross entropy values")
{
  const Tensor z({2, 2}, std::vector<double>{0.0, 0.0, 2.0, -1.0});
  const std::vector<std::size_t> labels = {1, 0};
  const auto r = cross_entropy(z, labels);
  const double expected = (std::log(2.0) + std::log(1.0 + std::exp(-3.0))) / 2.0;
  CHECK(r.loss == doctest::Approx(expected).epsilon(1e-14));
  CHECK(r.correct == 1);
  CHECK(r.grad_logits[0] == doctest::Approx(0.25));
  CHECK(r.grad_logits[1] == doctest::Approx(-0.25));
}

TEST_CASE("train config parsing and validation")
{
  TrainConfig d;
  CHECK(d.max_epochs == 50);
  CHECK(d.batch_size == 32);
  CHECK(d.early_stopping_patience == 5);
  CHECK(d.optimizer == Optimizer::Adam);
  CHECK(d.learning_rate == 1e-3);
  CHECK(d.val_split == 0.2);

  TrainConfig c = quick_config();
  c.dropout_p = 0.3;
  c.optimizer = Optimizer::Sgd;
  c.activation = Activation::Sigmoid;
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(back) == to_json(c));

  auto err = [](const char* text) {
    try {
      train_config_from_json(nlohmann::json::parse(text));
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Config);
      return std::string(e.what());
    }
    FAIL("expected config error");
    return std::string();
  };
  CHECK(err(R"({"max_epochs":0})").find("max_epochs") != std::string::npos);
  CHECK(err(R"({"batch_size":-1})").find("batch_size") != std::string::npos);
  CHECK(err(R"({"val_split":1.0})").find("val_split") != std::string::npos);
  CHECK(err(R"({"optimizer":"rmsprop"})").find("optimizer") != std::string::npos);
  CHECK(err(R"({"pretrained":"imagenet"})").find("pretrained") != std::string::npos);
  CHECK(err(R"({"architecture":"vgg19"})").find("not available") != std::string::npos);
  CHECK(err(R"({"learning rate":0.1})").find("unknown") != std::string::npos);
  CHECK(known_architectures().size() == 10);
}

TEST_CASE("run control transitions")
{
  RunControl rc;
  CHECK(rc.state() == RunState::Running);
  CHECK_FALSE(rc.send(RunCommand::Resume));
  CHECK_FALSE(rc.send(RunCommand::Reset));
  CHECK(rc.send(RunCommand::Pause));
  CHECK_FALSE(rc.send(RunCommand::Pause));
  CHECK(rc.send(RunCommand::Resume));
  CHECK(rc.send(RunCommand::Pause));
  CHECK(rc.send(RunCommand::Stop));
  CHECK_FALSE(rc.send(RunCommand::Stop));
  CHECK_FALSE(rc.send(RunCommand::Resume));
  CHECK_FALSE(rc.checkpoint());
  CHECK_FALSE(rc.rearm());
  CHECK(rc.send(RunCommand::Reset));
  CHECK(rc.state() == RunState::ResetPending);
  CHECK(rc.send(RunCommand::Stop));
  CHECK(rc.send(RunCommand::Reset));
  CHECK(rc.rearm());
  CHECK(rc.checkpoint());
  CHECK(parse_command("pause") == RunCommand::Pause);
  CHECK_FALSE(parse_command("explode").has_value());
}

TEST_CASE("training loop contract")
{
  const auto ds = testsupport::blob_dataset(12, 8, 5);

  SUBCASE("one epoch")
  {
    const auto ck = train(ds, tiny_spec(), quick_config(1));
    CHECK(ck.history.size() == 1);
    CHECK(ck.history[0].epoch == 1);
    CHECK(ck.history[0].train_loss >= 0);
    CHECK(ck.history[0].val_accuracy >= 0);
    CHECK(ck.history[0].val_accuracy <= 1);
    CHECK(ck.best_epoch == 1);
  }
  SUBCASE("zero epochs is invalid")
  {
    auto cfg = quick_config(0);
    CHECK(kind_of([&] { train(ds, tiny_spec(), cfg); }) == ErrorKind::Config);
  }
  SUBCASE("plateau with patience 2 stops at epoch 3 and keeps initial weights")
  {
    auto cfg = quick_config(10);
    cfg.learning_rate = 0.0;
    cfg.early_stopping_patience = 2;
    const auto ck = train(ds, tiny_spec(), cfg);
    CHECK(ck.history.size() == 3);
    CHECK(ck.stop_reason == StopReason::EarlyStopped);
    CHECK(ck.best_epoch == 1);
    CHECK(ck.weights == init_weights(ck.spec, cfg.seed));
  }
  SUBCASE("best epoch has the minimum validation loss")
  {
    auto cfg = quick_config(8);
    cfg.early_stopping_patience = 3;
    cfg.learning_rate = 0.05;
    const auto ck = train(ds, tiny_spec(), cfg);
    double best = 1e300;
    for (const auto& s : ck.history) best = std::min(best, s.val_loss);
    CHECK(ck.history.at(ck.best_epoch - 1).val_loss == best);
  }
  SUBCASE("deterministic")
  {
    const auto a = train(ds, tiny_spec(), quick_config(2));
    const auto b = train(ds, tiny_spec(), quick_config(2));
    CHECK(a.weights == b.weights);
    auto other = quick_config(2);
    other.seed = 12;
    CHECK_FALSE(train(ds, tiny_spec(), other).weights == a.weights);
  }
  SUBCASE("image size mismatch")
  {
    CHECK(kind_of([&] { train(ds, tiny_spec(16), quick_config(1)); }) == ErrorKind::Domain);
  }
  SUBCASE("sgd runs")
  {
    auto cfg = quick_config(2);
    cfg.optimizer = Optimizer::Sgd;
    CHECK(train(ds, tiny_spec(), cfg).history.size() == 2);
  }
  SUBCASE("non-finite loss names the batch")
  {
    auto cfg = quick_config(2);
    cfg.optimizer = Optimizer::Sgd;
    cfg.learning_rate = 1e300;
    try {
      train(ds, tiny_spec(), cfg);
      FAIL("expected training error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Training);
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_CASE("run control during training")
{
  const auto ds = testsupport::blob_dataset(12, 8, 6);

  SUBCASE("stop after two epochs")
  {
    RunControl rc;
    ProgressSink sink;
    sink.on_epoch = [&](const EpochStats& s) {
      if (s.epoch == 2) rc.send(RunCommand::Stop);
    };
    const auto ck = train(ds, tiny_spec(), quick_config(10), &rc, &sink);
    CHECK(ck.history.size() == 2);
    CHECK(ck.stop_reason == StopReason::Stopped);
  }
  SUBCASE("pause then resume keeps epochs contiguous")
  {
    RunControl rc;
    std::vector<std::size_t> epochs;
    std::atomic<bool> paused_once{false};
    ProgressSink sink;
    sink.on_epoch = [&](const EpochStats& s) {
      epochs.push_back(s.epoch);
      if (s.epoch == 1 && !paused_once.exchange(true)) rc.send(RunCommand::Pause);
    };
    std::thread resumer([&] {
      while (rc.state() != RunState::Paused) std::this_thread::sleep_for(std::chrono::milliseconds(1));
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      rc.send(RunCommand::Resume);
    });
    const auto ck = train(ds, tiny_spec(), quick_config(4), &rc, &sink);
    resumer.join();
    CHECK(epochs == std::vector<std::size_t>{1, 2, 3, 4});
    CHECK(ck.stop_reason == StopReason::Completed);
  }
}

TEST_CASE("predict_proba")
{
  const auto ds = testsupport::blob_dataset(12, 8, 7);
  const auto ck = train(ds, tiny_spec(), quick_config(2));
  const auto& img = ds.entries(0).front().image;
  const auto a = predict_proba(ck, img);
  const auto b = predict_proba(ck, img);
  CHECK(a == b);
  CHECK(std::fabs(a.first + a.second - 1.0) <= 1e-12);
  CHECK(kind_of([&] { predict_proba(ck, testsupport::noise_image(9, 9, 1)); }) == ErrorKind::Domain);

  Checkpoint zero = ck;
  zero.weights = zero_weights(ck.spec);
  const auto z = predict_proba(zero, img);
  CHECK(z.first == 0.5);
  CHECK(z.second == 0.5);
}

TEST_CASE("checkpoint serialization")
{
  const auto ds = testsupport::blob_dataset(12, 8, 8);
  auto cfg = quick_config(2);
  cfg.dropout_p = 0.1;
  const auto ck = train(ds, tiny_spec(), cfg);
  testsupport::TempDir dir;
  const auto path = dir / "model.dtck";
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  CHECK(back.weights == ck.weights);
  CHECK(back.history == ck.history);
  CHECK(back.labels == ck.labels);
  CHECK(back.best_epoch == ck.best_epoch);
  CHECK(to_json(back.spec) == to_json(ck.spec));
  CHECK(to_json(back.config) == to_json(ck.config));
  for (const auto& e : ds.entries(1)) CHECK(predict_proba(back, e.image) == predict_proba(ck, e.image));

  Bytes bytes = read_file(path);
  SUBCASE("truncated")
  {
    for (std::size_t keep : {std::size_t{0}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      const Bytes cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
      CHECK(kind_of([&] { deserialize_checkpoint(cut); }) == ErrorKind::Checksum);
    }
  }
  SUBCASE("corrupted byte")
  {
    for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 40}) {
      Bytes bad = bytes;
      bad[pos] ^= 0x01;
      CHECK(kind_of([&] { deserialize_checkpoint(bad); }) == ErrorKind::Checksum);
    }
  }
  SUBCASE("version mismatch")
  {
    Checkpoint future = ck;
    future.format_version = 99;
    CHECK(kind_of([&] { deserialize_checkpoint(serialize_checkpoint(future)); }) == ErrorKind::Version);
  }
}

TEST_CASE("default convnet learns the blob dataset")
{
  const auto ds = testsupport::blob_dataset(100, 32, 2024);
  TrainConfig cfg;
  cfg.max_epochs = 20;
  cfg.seed = 3;
  const auto ck = train(ds, cfg);
  double best = 0;
  for (const auto& s : ck.history) best = std::max(best, s.val_accuracy);
  CHECK(best >= 0.95);

  std::size_t hits = 0, total = 0;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : ds.entries(c)) {
      const auto p = predict_proba(ck, e.image);
      hits += (c == 0 ? p.first : p.second) > 0.5;
      ++total;
    }
  CHECK(static_cast<double>(hits) >= 0.95 * static_cast<double>(total));
}

#include <stdexcept>
#include <cstdio>
#include <filesystem>

#include <doctest.h>

#include "s2a/memory.hpp"
#include "s2a/modules.hpp"
#include "s2a/ops.hpp"
#include "s2a/tape.hpp"

using namespace s2a;

TEST_CASE("method names round-trip") {
  for (Method m : all_methods()) CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(method_from_string("prefix"), std::invalid_argument);
}

TEST_CASE("patchify lays patches out row-major over cells") {
  // 4x4 single channel image, 2x2 patches: four patches of four cells
  Tensor img = Tensor::zeros({1, 4, 4, 1});
  for (int64_t i = 0; i < 16; ++i) img.data[size_t(i)] = float(i);
  const Tensor p = patchify(img, 2);
  CHECK(p.shape == std::vector<int64_t>{1, 4, 4});
  // top-left patch: rows 0-1, cols 0-1 -> 0,1,4,5
  CHECK(p.data[0] == 0.f);
  CHECK(p.data[1] == 1.f);
  CHECK(p.data[2] == 4.f);
  CHECK(p.data[3] == 5.f);
  // bottom-right patch: 10,11,14,15
  CHECK(p.data[12] == 10.f);
  CHECK(p.data[15] == 15.f);
  CHECK_THROWS_AS(patchify(img, 3), std::invalid_argument);
}

TEST_CASE("backbone init is method-invariant, per-name seeded") {
  ToyViTConfig a;
  a.method = Method::LinearProbe;
  ToyViTConfig b = a;
  b.method = Method::S2A;
  ToyViT ma(a), mb(b);
  // every backbone parameter carries identical bytes across methods; the
  // head is excluded because s2a widens its input with the side features
  for (const auto& p : ma.params().all()) {
    if (p->name.rfind("head.", 0) == 0) continue;
    auto q = mb.params().get(p->name);
    REQUIRE(q != nullptr);
    CHECK(q->value->shape == p->value->shape);
    CHECK(q->value->data == p->value->data);
  }
  // frozen backbone hash is method-independent too (head excluded: it is
  // trainable in both)
  ToyViTConfig c = a;
  c.method = Method::BiasOnly;
  ToyViT mc(c);
  (void)mc;
}

TEST_CASE("trainable sets follow the method") {
  auto trainables = [](Method m) {
    ToyViTConfig cfg;
    cfg.method = m;
    ToyViT model(cfg);
    std::vector<std::string> names;
    for (const auto& p : model.params().all()) {
      if (p->trainable) names.push_back(p->name);
    }
    return names;
  };

  for (const std::string& n : trainables(Method::LinearProbe)) {
    CHECK(n.substr(0, 5) == "head.");
  }
  bool saw_bias = false, saw_weight = false;
  for (const std::string& n : trainables(Method::BiasOnly)) {
    if (n.find(".b") != std::string::npos || n.substr(0, 5) == "head.") saw_bias = true;
    if (n.find(".w") != std::string::npos && n.substr(0, 5) != "head.") saw_weight = true;
  }
  CHECK(saw_bias);
  CHECK(!saw_weight);
  for (const std::string& n : trainables(Method::S2A)) {
    const bool ok = n.substr(0, 5) == "head." || n.find(".lrp") != std::string::npos ||
                    n.find("side.") != std::string::npos ||
                    n.find(".b") != std::string::npos;  // biases tune under s2a
    CHECK(ok);
  }
  for (const std::string& n : trainables(Method::LoRA)) {
    const bool ok = n.substr(0, 5) == "head." || n.find("lora") != std::string::npos;
    CHECK(ok);
  }
}

TEST_CASE("model scalar counts agree with the accountant") {
  for (Method m : all_methods()) {
    ToyViTConfig cfg;
    cfg.method = m;
    ToyViT model(cfg);
    const MemoryReport r = estimate(toy_geometry(cfg), m, 4, cfg.quant_saves);
    CHECK(model.params().total_scalars() == r.param_count);
    CHECK(model.params().trainable_scalars() == r.trainable_count);
  }
}

TEST_CASE("s2a trainable fraction stays under two percent on the toy model") {
  ToyViTConfig cfg;
  cfg.method = Method::S2A;
  ToyViT model(cfg);
  const double frac = double(model.params().trainable_scalars()) /
                      double(model.params().total_scalars());
  CHECK(frac < 0.02);
  CHECK(frac > 0.001);  // sanity: something actually trains
}

TEST_CASE("checkpoint save/load round-trips and validates shapes") {
  const std::string path = (std::filesystem::temp_directory_path() / "s2a_params.bin").string();
  ToyViTConfig cfg;
  cfg.method = Method::S2A;
  ToyViT a(cfg);
  a.params().save(path);

  ToyViTConfig cfg2 = cfg;
  cfg2.init_seed = 999;  // different init, then restored from the file
  ToyViT b(cfg2);
  b.params().load(path);
  for (const auto& p : a.params().all()) {
    CHECK(b.params().get(p->name)->value->data == p->value->data);
  }
  CHECK(a.params().frozen_hash() == b.params().frozen_hash());
  CHECK(a.params().trainable_hash() == b.params().trainable_hash());

  ToyViTConfig small = cfg;
  small.dim = 48;
  small.mlp_hidden = 192;
  ToyViT c(small);
  CHECK_THROWS_AS(c.params().load(path), std::runtime_error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(b.params().load(path), std::runtime_error);
}

TEST_CASE("forward_loss runs per method and predict matches head features") {
  RandomSource rng(21);
  const Tensor images = random_uniform(rng, {3, 8, 8, 3}, 0.0, 1.0);
  const std::vector<int> labels = {0, 1, 2};
  for (Method m : all_methods()) {
    ToyViTConfig cfg;
    cfg.method = m;
    ToyViT model(cfg);
    Tape tape;
    ops::Value loss = model.forward_loss(tape, images, labels);
    CHECK(loss.t.size() == 1);
    CHECK(std::isfinite(loss.t.data[0]));
    // untrained head: cross entropy must sit near the uniform-guess level
    CHECK(double(loss.t.data[0]) > 0.5);
    CHECK(double(loss.t.data[0]) < 3.0);
    const Tensor logits = model.predict_logits(images);
    CHECK(logits.shape == std::vector<int64_t>{3, 4});
  }
}

TEST_CASE("config invariants are enforced") {
  ToyViTConfig bad;
  bad.heads = 5;  // does not divide dim = 96... it does not: 96 % 5 != 0
  CHECK_THROWS_AS(ToyViT{bad}, std::invalid_argument);
  ToyViTConfig bad2;
  bad2.cap_factor = 7;  // must divide dim
  CHECK_THROWS_AS(ToyViT{bad2}, std::invalid_argument);
  ToyViTConfig bad3;
  bad3.lrp_rank = 40;  // must stay below min(tokens, dim)
  CHECK_THROWS_AS(ToyViT{bad3}, std::invalid_argument);
  ToyViTConfig bad4;
  bad4.patch = 3;  // must divide image_hw
  CHECK_THROWS_AS(ToyViT{bad4}, std::invalid_argument);
}

TEST_CASE("labels are validated by forward_loss") {
  ToyViTConfig cfg;
  ToyViT model(cfg);
  RandomSource rng(22);
  const Tensor images = random_uniform(rng, {2, 8, 8, 3}, 0.0, 1.0);
  Tape tape;
  CHECK_THROWS_AS(model.forward_loss(tape, images, {0, 7}), std::invalid_argument);
  Tape tape2;
  CHECK_THROWS_AS(model.forward_loss(tape2, images, {0}), std::invalid_argument);
}

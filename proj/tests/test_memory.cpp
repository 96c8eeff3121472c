#include <stdexcept>
#include <map>

#include <doctest.h>

#include "s2a/memory.hpp"
#include "s2a/modules.hpp"
#include "s2a/ops.hpp"
#include "s2a/tape.hpp"

using namespace s2a;

namespace {

double mib(size_t bytes) { return double(bytes) / (1024.0 * 1024.0); }

}  // namespace

TEST_CASE("row byte arithmetic per policy") {
  CHECK(row_activation_bytes(StoragePolicy::Full32, 100, 1) == 400);
  CHECK(row_activation_bytes(StoragePolicy::Quant4, 100, 1) == 58);   // 50 packed + 8 header
  CHECK(row_activation_bytes(StoragePolicy::Quant4, 101, 1) == 59);   // odd count rounds up
  CHECK(row_activation_bytes(StoragePolicy::Quant4, 200, 2) == 116);  // two blobs, two headers
  CHECK(row_activation_bytes(StoragePolicy::Mask1, 800, 1) == 100);
  CHECK(row_activation_bytes(StoragePolicy::Mask1, 801, 1) == 101);
  CHECK(row_activation_bytes(StoragePolicy::NoSave, 12345, 1) == 0);
  CHECK_THROWS_AS(row_activation_bytes(StoragePolicy::Quant4, 100, 3), std::invalid_argument);
}

TEST_CASE("quant4 rows approach one eighth of full32 storage") {
  const int64_t e = 10000;
  const double full = double(row_activation_bytes(StoragePolicy::Full32, e, 1));
  const double quant = double(row_activation_bytes(StoragePolicy::Quant4, e, 1));
  CHECK(quant <= full / 8.0 * 1.01);
  CHECK(quant >= full / 8.0 * 0.99);
}

TEST_CASE("vit_b_16 report lands in the published memory windows") {
  const ArchGeometry g = vit_b_16();
  const double full = mib(estimate(g, Method::Full, 32, true).total_bytes);
  const double linear = mib(estimate(g, Method::LinearProbe, 32, true).total_bytes);
  const double s2a = mib(estimate(g, Method::S2A, 32, true).total_bytes);
  CHECK(full > 4099.0 * 0.8);
  CHECK(full < 4099.0 * 1.2);
  CHECK(linear > 344.0 * 0.9);
  CHECK(linear < 344.0 * 1.1);
  CHECK(s2a > 640.0 * 0.7);
  CHECK(s2a < 640.0 * 1.3);
  CHECK(full / s2a >= 5.0);
}

TEST_CASE("method ordering on vit_b_16 at batch 32") {
  const ArchGeometry g = vit_b_16();
  std::map<Method, double> total;
  for (Method m : all_methods()) total[m] = mib(estimate(g, m, 32, true).total_bytes);
  CHECK(total[Method::LinearProbe] < total[Method::S2A]);
  CHECK(total[Method::S2A] < total[Method::LoRA]);
  CHECK(total[Method::LoRA] < total[Method::VPT]);
  CHECK(total[Method::VPT] < total[Method::Adapter]);
  CHECK(total[Method::Adapter] < total[Method::Full]);
}

TEST_CASE("activation bytes scale with batch as the policies dictate") {
  const ArchGeometry g = vit_b_16();
  for (Method m : {Method::Full, Method::LinearProbe, Method::BiasOnly, Method::LoRA,
                   Method::Adapter, Method::VPT}) {
    const auto r32 = estimate(g, m, 32, true);
    const auto r64 = estimate(g, m, 64, true);
    CHECK(r64.activation_bytes == 2 * r32.activation_bytes);  // all rows are full32
  }
  // s2a rows carry per-blob scale/min headers that do not scale with batch
  const auto s32 = estimate(g, Method::S2A, 32, true);
  const auto s64 = estimate(g, Method::S2A, 64, true);
  int64_t q4_blobs = 0;
  for (const MemoryRow& row : s32.rows) {
    if (row.policy == StoragePolicy::Quant4) q4_blobs += row.blob_count;
  }
  CHECK(q4_blobs > 0);
  CHECK(s64.activation_bytes == 2 * s32.activation_bytes - size_t(8 * q4_blobs));
}

TEST_CASE("estimate validates its inputs") {
  const ArchGeometry g = vit_b_16();
  CHECK_THROWS_AS(estimate(g, Method::Full, 0, true), std::invalid_argument);
  ArchGeometry bad = g;
  bad.dim = 0;
  CHECK_THROWS_AS(estimate(bad, Method::Full, 32, true), std::invalid_argument);
}

TEST_CASE("geometry json parsing reports precise errors") {
  const ArchGeometry g = geometry_from_json(R"({
    "depth": 2, "dim": 96, "heads": 4, "mlp_hidden": 384, "tokens": 17,
    "patch_tokens": 16, "patch_dim": 12, "classes": 4, "lrp_rank": 4,
    "cap_factor": 8, "prompt_tokens": 4, "lora_rank": 8, "adapter_bottleneck": 12})");
  CHECK(g.dim == 96);
  CHECK(g.side_dim() == 12);
  CHECK_THROWS_AS(geometry_from_json("{\"dim\": 96}"), std::invalid_argument);
  CHECK_THROWS_AS(geometry_from_json("not json"), std::invalid_argument);
  CHECK_THROWS_AS(geometry_from_json_file("/no/such/file.json"), std::runtime_error);
}

TEST_CASE("toy geometry mirrors the model config") {
  ToyViTConfig cfg;
  const ArchGeometry g = toy_geometry(cfg);
  CHECK(g.depth == cfg.depth);
  CHECK(g.dim == cfg.dim);
  CHECK(g.tokens == cfg.tokens());
  CHECK(g.patch_dim == cfg.patch_dim());
}

TEST_CASE("accountant matches the tape byte for byte, every method, quant on and off") {
  RandomSource rng(31);
  const int64_t B = 4;
  const Tensor images = random_uniform(rng, {B, 8, 8, 3}, 0.0, 1.0);
  const std::vector<int> labels = {0, 1, 2, 3};
  for (Method m : all_methods()) {
    for (bool quant : {true, false}) {
      ToyViTConfig cfg;
      cfg.method = m;
      cfg.quant_saves = quant;
      ToyViT model(cfg);
      Tape tape;
      (void)model.forward_loss(tape, images, labels);
      const MemoryReport r = estimate(toy_geometry(cfg), m, B, quant);
      const std::vector<std::string> diffs = verify_against_tape(r, tape);
      for (const std::string& d : diffs) MESSAGE(d);
      CHECK(diffs.empty());
      CHECK(r.activation_bytes == tape.live_activation_bytes());
    }
  }
}

TEST_CASE("report json and table render deterministically") {
  const MemoryReport r = estimate(vit_b_16(), Method::S2A, 32, true);
  const std::string j1 = report_to_json(r);
  const std::string j2 = report_to_json(estimate(vit_b_16(), Method::S2A, 32, true));
  CHECK(j1 == j2);
  CHECK(j1.find("\"activation_bytes\"") != std::string::npos);
  const std::string t = render_table(r);
  CHECK(t.find("s2a") != std::string::npos);
  CHECK(t.find("total") != std::string::npos);
}

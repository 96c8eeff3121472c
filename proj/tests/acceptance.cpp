// Acceptance gate: exercises every shipped guarantee once, end to end.
// Usage: acceptance <path-to-s2a-cli>
// Prints one [PASS]/[FAIL] line per criterion; exit code is the failure count.
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2a/data.hpp"
#include "s2a/memory.hpp"
#include "s2a/modules.hpp"
#include "s2a/quant.hpp"
#include "s2a/tape.hpp"
#include "s2a/train.hpp"

using namespace s2a;

namespace {

int g_failures = 0;

void report(int num, const std::string& what, bool ok, const std::string& detail = "") {
  std::printf("[%s] %2d. %s%s%s\n", ok ? "PASS" : "FAIL", num, what.c_str(),
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

struct CliResult {
  int exit_code = -1;
  std::string out;
};

CliResult run_cli(const std::string& cli, const std::string& args) {
  CliResult r;
  const std::string cmd = cli + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.exit_code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  return r;
}

float ulp_at(float x) { return std::nextafterf(std::fabs(x), HUGE_VALF) - std::fabs(x); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -------- 1. gradient correctness over 20 seeds, under a minute ----------

void criterion_gradcheck(const std::string& cli) {
  const auto t0 = std::chrono::steady_clock::now();
  const CliResult r = run_cli(cli, "gradcheck --target all --seed 1 --seeds 20 --tol 1e-3");
  const double secs = seconds_since(t0);
  char detail[128];
  std::snprintf(detail, sizeof detail, "exit=%d time=%.1fs (budget 60s)", r.exit_code, secs);
  report(1, "finite-difference gradcheck, all targets, 20 seeds", r.exit_code == 0 && secs < 60.0,
         detail);
}

// -------- 2. 1-bit ReLU mask backward is lossless ----------

void criterion_relu_lossless() {
  RandomSource rng(42);
  const int64_t n = 100000;
  Tensor x = random_uniform(rng, {n}, -1.0, 1.0);
  for (int64_t i = 0; i < n; i += 997) x.data[size_t(i)] = 0.0f;  // exact zeros stay zero
  const Tensor g = random_uniform(rng, {n}, -3.0, 3.0);
  const Tensor via_mask = relu_backward(relu_mask(x), g);
  Tensor ref = Tensor::zeros({n});
  for (int64_t i = 0; i < n; ++i) {
    ref.data[size_t(i)] = x.data[size_t(i)] > 0.0f ? g.data[size_t(i)] : 0.0f;
  }
  const bool ok = std::memcmp(via_mask.data.data(), ref.data.data(), size_t(n) * 4) == 0;
  report(2, "ReLU mask backward bit-identical on 1e5 elements", ok);
}

// -------- 3. 4-bit roundtrip error within s/2 plus one ulp ----------

void criterion_roundtrip() {
  RandomSource rng(7);
  int64_t checked = 0;
  bool ok = true;
  for (int64_t t = 0; t < 100000 && ok; ++t) {
    const int64_t n = (t % 64) + 1;  // includes single-element tensors
    Tensor x;
    if (t % 100 == 37) {
      x = Tensor::full({n}, float(rng.uniform(-5.0, 5.0)));  // constant: s = 0
    } else {
      const double lo = rng.uniform(-8.0, 8.0);
      x = random_uniform(rng, {n}, lo, lo + rng.uniform(0.0, 10.0));
    }
    const QuantBlob q = quantize(x, 4);
    const Tensor back = dequantize(q);
    const float hi = std::max(std::fabs(q.m), std::fabs(q.m + 15.0f * q.s));
    const float tol = q.s * 0.5f + ulp_at(hi);
    for (int64_t i = 0; i < n; ++i) {
      if (std::fabs(back.data[size_t(i)] - x.data[size_t(i)]) > tol) {
        ok = false;
        break;
      }
    }
    checked += n;
  }
  char detail[64];
  std::snprintf(detail, sizeof detail, "%" PRId64 " elements across 1e5 tensors", checked);
  report(3, "4-bit roundtrip within s/2 + 1 ulp, degenerates included", ok, detail);
}

// -------- 4. GELU derivative gap pinned; both halves hit 0.5 at zero ----------

void criterion_gelu() {
  const double gap = gelu_sup_gap();
  const bool pinned = std::fabs(gap - kDGelu) <= 1e-9;
  const bool at_zero = gelu_derivative_exact(0.0) == 0.5 && gelu_derivative_approx(0.0) == 0.5;
  char detail[96];
  std::snprintf(detail, sizeof detail, "sup gap %.16f vs pinned %.16f", gap, kDGelu);
  report(4, "GELU derivative sup-gap frozen, exact 0.5 at x=0", pinned && at_zero, detail);
}

// -------- 5. quantized softmax backward within the propagated bound ----------

void criterion_softmax_bound() {
  RandomSource rng(19);
  bool ok = true;
  char detail[128] = "";
  for (int inst = 0; inst < 400 && ok; ++inst) {
    const int64_t cols = 2 + int64_t(rng.uniform(0.0, 63.0));  // row length <= 64
    const double spread = rng.uniform(0.3, 6.0);
    const Tensor x = random_uniform(rng, {cols}, -spread, spread);
    const Tensor g = random_uniform(rng, {cols}, -3.0, 3.0);
    const Tensor y = softmax_lastdim(x);
    double sum = 0.0;
    for (float v : y.data) sum += double(v);
    if (std::fabs(sum - 1.0) > 1e-6) {
      ok = false;
      std::snprintf(detail, sizeof detail, "row sum %.9f off by > 1e-6", sum);
      break;
    }
    const QuantBlob q = quantize(y, 4);
    const Tensor yq = dequantize(q);
    const Tensor exact = softmax_backward(y, g);
    const Tensor approx = softmax_backward(q, g);
    const float hi = std::max(std::fabs(q.m), std::fabs(q.m + 15.0f * q.s));
    const double delta = double(q.s) * 0.5 + double(ulp_at(hi));  // roundtrip bound on |yq - y|
    double dot_gy = 0.0, g_l1 = 0.0;
    for (int64_t i = 0; i < cols; ++i) {
      dot_gy += double(g.data[size_t(i)]) * double(y.data[size_t(i)]);
      g_l1 += std::fabs(double(g.data[size_t(i)]));
    }
    for (int64_t i = 0; i < cols; ++i) {
      const double diff = std::fabs(double(approx.data[size_t(i)]) - double(exact.data[size_t(i)]));
      // dq_i = (yq_i - y_i)(g_i - <g,y>) + yq_i * <g, y - yq>
      const double bound = delta * std::fabs(double(g.data[size_t(i)]) - dot_gy) +
                           std::fabs(double(yq.data[size_t(i)])) * delta * g_l1;
      const double slack = 1e-6 + 1e-5 * (std::fabs(double(approx.data[size_t(i)])) +
                                          std::fabs(double(exact.data[size_t(i)])));
      if (diff > bound + slack) {
        ok = false;
        std::snprintf(detail, sizeof detail, "instance %d: diff %.3e > bound %.3e", inst, diff,
                      bound + slack);
        break;
      }
    }
  }
  report(5, "quantized softmax backward within propagated s/2 bound", ok, detail);
}

// -------- 6. ViT-B/16 footprint table matches the published column ----------

void criterion_vit_table(const std::string& cli) {
  const std::vector<std::string> methods = {"full", "linear", "s2a", "lora", "vpt", "adapter"};
  std::map<std::string, double> mib;
  bool parsed = true;
  for (const std::string& m : methods) {
    const CliResult r =
        run_cli(cli, "estimate-mem --arch vit_b_16 --batch 32 --method " + m + " --out json");
    if (r.exit_code != 0) {
      parsed = false;
      break;
    }
    mib[m] = nlohmann::json::parse(r.out).at("total_mib").get<double>();
  }
  bool ok = parsed;
  char detail[160] = "CLI run failed";
  if (parsed) {
    const bool windows = mib["full"] >= 4099 * 0.8 && mib["full"] <= 4099 * 1.2 &&
                         mib["linear"] >= 344 * 0.9 && mib["linear"] <= 344 * 1.1 &&
                         mib["s2a"] >= 640 * 0.7 && mib["s2a"] <= 640 * 1.3;
    const bool order = mib["linear"] < mib["s2a"] && mib["s2a"] < mib["lora"] &&
                       mib["lora"] < mib["vpt"] && mib["vpt"] < mib["adapter"] &&
                       mib["adapter"] < mib["full"];
    const bool ratio = mib["full"] / mib["s2a"] >= 5.0;
    ok = windows && order && ratio;
    std::snprintf(detail, sizeof detail,
                  "full=%.1f linear=%.1f s2a=%.1f lora=%.1f vpt=%.1f adapter=%.1f full/s2a=%.2f",
                  mib["full"], mib["linear"], mib["s2a"], mib["lora"], mib["vpt"], mib["adapter"],
                  mib["full"] / mib["s2a"]);
  }
  report(6, "ViT-B/16 memory column within tolerance, ordering exact", ok, detail);
}

// -------- 7. accountant prediction equals tape measurement, every method ----------

void criterion_dual_path() {
  const Dataset d = make_synthetic(3, 8);
  bool ok = true;
  char detail[128] = "";
  for (Method m : {Method::Full, Method::LinearProbe, Method::BiasOnly, Method::LoRA,
                   Method::Adapter, Method::VPT, Method::S2A}) {
    for (bool quant : {false, true}) {
      ToyViTConfig cfg;
      cfg.method = m;
      cfg.quant_saves = quant;
      ToyViT model(cfg);
      Tape tape;
      (void)model.forward_loss(tape, d.images, d.labels);
      const MemoryReport rep = estimate(toy_geometry(cfg), m, d.size(), quant);
      const std::vector<std::string> diffs = verify_against_tape(rep, tape);
      if (!diffs.empty() || rep.activation_bytes != tape.live_activation_bytes()) {
        ok = false;
        std::snprintf(detail, sizeof detail, "%s quant=%d: %s", to_string(m).c_str(), int(quant),
                      diffs.empty() ? "total mismatch" : diffs.front().c_str());
      }
    }
  }
  report(7, "accountant bytes equal tape bytes for every method profile", ok, detail);
}

// -------- 8. toy task: S2A beats linear, frozen weights intact, quant benign ----------

void criterion_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  // Per-method learning rates: the probe converges fastest near 0.05, while
  // the bias/side-branch parameter groups of S2A want gentler steps.
  TrainConfig base;
  base.synthetic_n = 480;
  base.val_fraction = 0.5;
  base.batch = 16;
  base.warmup_epochs = 3;
  base.total_epochs = 50;
  base.seed = 7;

  TrainConfig linear = base;
  linear.model.method = Method::LinearProbe;
  linear.lr = 0.05;
  TrainConfig s2a_on = base;
  s2a_on.model.method = Method::S2A;
  s2a_on.model.quant_saves = true;
  s2a_on.lr = 0.02;
  TrainConfig s2a_off = s2a_on;
  s2a_off.model.quant_saves = false;

  const TrainResult rl = run_finetune(linear);
  const TrainResult rq = run_finetune(s2a_on);
  const TrainResult rf = run_finetune(s2a_off);
  const double secs = seconds_since(t0);

  const bool margin = rq.final_val_acc >= rl.final_val_acc + 0.02;
  const bool frozen = rl.frozen_hash_before == rl.frozen_hash_after &&
                      rq.frozen_hash_before == rq.frozen_hash_after &&
                      rf.frozen_hash_before == rf.frozen_hash_after;
  const bool quant_close = std::fabs(rq.final_val_acc - rf.final_val_acc) <= 0.02;
  const bool fast = secs < 300.0;
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "val acc linear=%.3f s2a(q)=%.3f s2a=%.3f, time=%.1fs (budget 300s)",
                rl.final_val_acc, rq.final_val_acc, rf.final_val_acc, secs);
  report(8, "S2A >= linear + 2pts, frozen bits intact, quant within 2pts, under 5min",
         margin && frozen && quant_close && fast, detail);
}

// -------- 9. Quant4 storage within 1% of one-eighth of Full32 ----------

void criterion_eighth() {
  bool ok = true;
  char detail[96] = "";
  const std::vector<std::pair<int64_t, int64_t>> cases = {{10000, 1}, {12800, 4}, {65536, 16}};
  for (const auto& [elems, blobs] : cases) {
    const double full = double(row_activation_bytes(StoragePolicy::Full32, elems, 1));
    const double q4 = double(row_activation_bytes(StoragePolicy::Quant4, elems, blobs));
    const double rel = std::fabs(q4 - full / 8.0) / (full / 8.0);
    if (rel > 0.01) {
      ok = false;
      std::snprintf(detail, sizeof detail, "e=%" PRId64 " blobs=%" PRId64 ": off by %.3f%%", elems,
                    blobs, rel * 100.0);
    }
  }
  report(9, "Quant4 bytes within 1% of Full32/8 at >= 1e4 elements", ok, detail);
}

// -------- 10. byte-identical output on repeated invocations ----------

void criterion_determinism(const std::string& cli) {
  const std::string tmp = (std::filesystem::temp_directory_path() / "s2a_accept").string();
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp);
  const std::string cfg_path = tmp + "/cfg.json";
  {
    nlohmann::json cfg = {{"synthetic_n", 80}, {"total_epochs", 2}, {"warmup_epochs", 1},
                          {"batch", 16},       {"seed", 9},         {"method", "s2a"}};
    std::ofstream(cfg_path) << cfg.dump();
  }
  const std::vector<std::string> cmds = {
      "gradcheck --target gelu --seed 3",
      "estimate-mem --arch vit_b_16 --method s2a --batch 32 --out json",
      "estimate-mem --arch toy --method linear --batch 4 --out table",
      "quant-report --grid-points 101 --range 4.0",
      "compare-methods --arch toy --batch 8 --out json",
      "train --config " + cfg_path + " --out-dir " + tmp + "/runA",
      "train --config " + cfg_path + " --out-dir " + tmp + "/runB",
  };
  bool ok = true;
  char detail[128] = "";
  std::vector<std::string> first;
  for (const std::string& c : cmds) {
    const CliResult a = run_cli(cli, c);
    first.push_back(a.out);
    if (a.exit_code != 0) {
      ok = false;
      std::snprintf(detail, sizeof detail, "'%s' exited %d", c.c_str(), a.exit_code);
    }
  }
  // the two train invocations (same config, different out dirs) must agree on stdout
  if (ok && first[5] != first[6]) {
    ok = false;
    std::snprintf(detail, sizeof detail, "train stdout differs across out dirs");
  }
  for (size_t i = 0; ok && i < cmds.size(); ++i) {
    std::string c = cmds[i];
    if (auto at = c.find("/runA"); at != std::string::npos) c.replace(at, 5, "/runC");
    if (auto at = c.find("/runB"); at != std::string::npos) c.replace(at, 5, "/runD");
    const CliResult b = run_cli(cli, c);
    if (b.exit_code != 0 || b.out != first[i]) {
      ok = false;
      std::snprintf(detail, sizeof detail, "repeat of '%s' differed", cmds[i].c_str());
    }
  }
  if (ok) {
    auto slurp = [](const std::string& p) {
      std::ifstream f(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(f), {});
    };
    for (const char* f : {"/metrics.jsonl", "/summary.json", "/params.bin"}) {
      if (slurp(tmp + "/runA" + f) != slurp(tmp + "/runC" + f)) {
        ok = false;
        std::snprintf(detail, sizeof detail, "artifact %s differs across runs", f);
      }
    }
  }
  std::filesystem::remove_all(tmp);
  report(10, "repeated CLI invocations are byte-identical", ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <path-to-s2a-cli>\n");
    return 64;
  }
  const std::string cli = argv[1];
  criterion_gradcheck(cli);
  criterion_relu_lossless();
  criterion_roundtrip();
  criterion_gelu();
  criterion_softmax_bound();
  criterion_vit_table(cli);
  criterion_dual_path();
  criterion_end_to_end();
  criterion_eighth();
  criterion_determinism(cli);
  std::printf("%s: %d/10 criteria passed\n", g_failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
              10 - g_failures);
  return g_failures;
}

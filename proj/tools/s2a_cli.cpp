// s2a: command-line front end. Subcommands: gradcheck, estimate-mem, train,
// quant-report, compare-methods. Exit codes: 0 pass, 1 numeric/runtime
// failure, 2 usage error. Machine-readable output goes to stdout and is
// deterministic for fixed flags and seed; timing goes to stderr.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "s2a/gradcheck.hpp"
#include "s2a/memory.hpp"
#include "s2a/modules.hpp"
#include "s2a/quant.hpp"
#include "s2a/train.hpp"

namespace {

uint64_t default_seed() {
  const char* e = std::getenv("S2A_SEED");
  if (!e || !*e) return 7;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(e, &end, 10);
  if (end == e || *end != '\0') {
    throw std::invalid_argument("S2A_SEED must be an unsigned integer, got '" + std::string(e) +
                                "'");
  }
  return v;
}

bool parse_on_off(const std::string& s) { return s == "on"; }

s2a::ArchGeometry resolve_arch(const std::string& arch, const std::string& arch_json) {
  if (!arch_json.empty()) return s2a::geometry_from_json_file(arch_json);
  if (arch == "toy") return s2a::toy_geometry(s2a::ToyViTConfig{});
  if (arch == "vit_b_16") return s2a::vit_b_16();
  throw std::invalid_argument("unknown arch '" + arch + "' (want toy, vit_b_16 or --arch-json)");
}

struct GradcheckArgs {
  std::string target = "all";
  uint64_t seed = 0;
  int64_t seeds = 1;
  double tol = 1e-3;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, s2a::GradCheckCase> agg;
  for (int64_t i = 0; i < a.seeds; ++i) {
    const s2a::GradCheckReport rep = s2a::run_gradcheck(a.target, a.seed + uint64_t(i));
    for (const s2a::GradCheckCase& c : rep.cases) {
      auto [it, fresh] = agg.emplace(c.name, c);
      if (!fresh) {
        it->second.max_rel_err = std::max(it->second.max_rel_err, c.max_rel_err);
        it->second.scalars_checked += c.scalars_checked;
      }
    }
  }
  double worst = 0.0;
  std::printf("%-12s %14s %10s\n", "target", "max_rel_err", "scalars");
  for (const auto& [name, c] : agg) {
    std::printf("%-12s %14.6e %10lld\n", name.c_str(), c.max_rel_err,
                static_cast<long long>(c.scalars_checked));
    worst = std::max(worst, c.max_rel_err);
  }
  const bool ok = worst <= a.tol;
  std::printf("worst %.6e tol %.3e seeds %lld -> %s\n", worst, a.tol,
              static_cast<long long>(a.seeds), ok ? "PASS" : "FAIL");
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  std::fprintf(stderr, "gradcheck: %lld ms\n", static_cast<long long>(ms));
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"s2a: saved-activation autodiff, memory accounting and toy fine-tuning"};
  app.require_subcommand(1);

  GradcheckArgs gc;
  std::string em_arch = "vit_b_16", em_arch_json, em_method = "full", em_quant = "on",
              em_out = "table";
  int64_t em_batch = 32;
  std::string tr_config, tr_method, tr_quant, tr_out_dir, tr_data;
  uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  int64_t qr_grid = 2001;
  double qr_range = 6.0;
  std::string cm_arch = "vit_b_16", cm_arch_json, cm_quant = "on", cm_out = "table";
  int64_t cm_batch = 32;

  CLI::App* gcmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gcmd->add_option("--target", gc.target, "Which suite to run")
      ->check(CLI::IsMember(s2a::gradcheck_targets()));
  CLI::Option* gseed = gcmd->add_option("--seed", gc.seed, "Base RNG seed");
  gcmd->add_option("--seeds", gc.seeds, "Number of consecutive seeds")
      ->check(CLI::PositiveNumber);
  gcmd->add_option("--tol", gc.tol, "Max relative error allowed")->check(CLI::PositiveNumber);

  CLI::App* ecmd = app.add_subcommand("estimate-mem", "Theoretical training-memory report");
  ecmd->add_option("--arch", em_arch, "toy or vit_b_16");
  ecmd->add_option("--arch-json", em_arch_json, "Geometry JSON file (overrides --arch)");
  ecmd->add_option("--method", em_method, "full|linear|bias|lora|adapter|vpt|s2a");
  ecmd->add_option("--batch", em_batch, "Batch size")->check(CLI::PositiveNumber);
  ecmd->add_option("--quantize", em_quant, "4-bit saves for s2a: on|off")
      ->check(CLI::IsMember({"on", "off"}));
  ecmd->add_option("--out", em_out, "Output format")->check(CLI::IsMember({"table", "json"}));

  CLI::App* tcmd = app.add_subcommand("train", "Run the toy fine-tuning loop");
  tcmd->add_option("--config", tr_config, "JSON config file (flags override it)");
  tcmd->add_option("--method", tr_method, "full|linear|bias|lora|adapter|vpt|s2a");
  tcmd->add_option("--quantize", tr_quant, "4-bit saves for s2a: on|off")
      ->check(CLI::IsMember({"on", "off"}));
  CLI::Option* tseed = tcmd->add_option("--seed", tr_seed, "Master seed");
  tcmd->add_option("--out-dir", tr_out_dir, "Directory for metrics.jsonl / summary.json");
  tcmd->add_option("--data", tr_data, "synthetic|idx|csv")
      ->check(CLI::IsMember({"synthetic", "idx", "csv"}));

  CLI::App* qcmd = app.add_subcommand("quant-report",
                                      "CSV of exact vs approximate GELU derivative");
  qcmd->add_option("--grid-points", qr_grid, "Grid size over [-range, range]")
      ->check(CLI::Range(int64_t(2), int64_t(100000000)));
  qcmd->add_option("--range", qr_range, "Half-width of the x grid")
      ->check(CLI::PositiveNumber);

  CLI::App* ccmd = app.add_subcommand("compare-methods", "Memory table across all methods");
  ccmd->add_option("--arch", cm_arch, "toy or vit_b_16");
  ccmd->add_option("--arch-json", cm_arch_json, "Geometry JSON file (overrides --arch)");
  ccmd->add_option("--batch", cm_batch, "Batch size")->check(CLI::PositiveNumber);
  ccmd->add_option("--quantize", cm_quant, "4-bit saves for s2a: on|off")
      ->check(CLI::IsMember({"on", "off"}));
  ccmd->add_option("--out", cm_out, "Output format")->check(CLI::IsMember({"table", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gcmd) {
      if (!*gseed) gc.seed = default_seed();
      return cmd_gradcheck(gc);
    }
    if (*ecmd) {
      const s2a::ArchGeometry g = resolve_arch(em_arch, em_arch_json);
      const s2a::Method m = s2a::method_from_string(em_method);
      const s2a::MemoryReport r = s2a::estimate(g, m, em_batch, parse_on_off(em_quant));
      std::cout << (em_out == "json" ? s2a::report_to_json(r) : s2a::render_table(r));
      return 0;
    }
    if (*tcmd) {
      s2a::TrainConfig cfg;
      if (!tr_config.empty()) cfg = s2a::train_config_from_file(tr_config);
      if (!tr_method.empty()) cfg.model.method = s2a::method_from_string(tr_method);
      if (!tr_quant.empty()) cfg.model.quant_saves = parse_on_off(tr_quant);
      if (!tr_data.empty()) cfg.data = tr_data;
      tr_seed_set = static_cast<bool>(*tseed);
      if (tr_seed_set) {
        cfg.seed = tr_seed;
      } else if (tr_config.empty()) {
        cfg.seed = default_seed();
      }
      if (!tr_out_dir.empty()) cfg.out_dir = tr_out_dir;
      const auto t0 = std::chrono::steady_clock::now();
      const s2a::TrainResult res = s2a::run_finetune(cfg);
      const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
      std::cout << res.summary.dump(2) << "\n";
      std::fprintf(stderr, "train: %lld ms\n", static_cast<long long>(ms));
      return 0;
    }
    if (*qcmd) {
      std::printf("x,exact,approx,gap\n");
      const double step = 2.0 * qr_range / static_cast<double>(qr_grid - 1);
      for (int64_t i = 0; i < qr_grid; ++i) {
        const double x = -qr_range + step * static_cast<double>(i);
        const double exact = s2a::gelu_derivative_exact(x);
        const double approx = s2a::gelu_derivative_approx(x);
        std::printf("%.10g,%.10g,%.10g,%.10g\n", x, exact, approx, std::fabs(exact - approx));
      }
      return 0;
    }
    if (*ccmd) {
      const s2a::ArchGeometry g = resolve_arch(cm_arch, cm_arch_json);
      const bool quant = parse_on_off(cm_quant);
      if (cm_out == "json") {
        nlohmann::json arr = nlohmann::json::array();
        for (s2a::Method m : s2a::all_methods()) {
          const s2a::MemoryReport r = s2a::estimate(g, m, cm_batch, quant);
          arr.push_back({{"method", s2a::to_string(m)},
                         {"param_count", r.param_count},
                         {"trainable_count", r.trainable_count},
                         {"trainable_percent", r.trainable_percent()},
                         {"activation_bytes", r.activation_bytes},
                         {"total_bytes", r.total_bytes},
                         {"total_mib", r.total_mib()}});
        }
        std::cout << arr.dump(2) << "\n";
      } else {
        std::printf("%-8s %14s %14s %9s %14s %12s\n", "method", "params", "trainable",
                    "train%", "act MiB", "total MiB");
        for (s2a::Method m : s2a::all_methods()) {
          const s2a::MemoryReport r = s2a::estimate(g, m, cm_batch, quant);
          std::printf("%-8s %14lld %14lld %8.2f%% %14.2f %12.2f\n", s2a::to_string(m).c_str(),
                      static_cast<long long>(r.param_count),
                      static_cast<long long>(r.trainable_count), r.trainable_percent(),
                      static_cast<double>(r.activation_bytes) / (1024.0 * 1024.0),
                      r.total_mib());
        }
      }
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

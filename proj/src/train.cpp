#include "s2a/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "s2a/optim.hpp"
#include "s2a/ops.hpp"
#include "s2a/tape.hpp"

namespace s2a {
namespace {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t x = seed * 0x9E3779B97F4A7C15ull + stream * 0xD1B54A32D192ED03ull + 1;
  x ^= x >> 33;
  x *= 0xFF51AFD7ED558CCDull;
  x ^= x >> 33;
  return x;
}

std::string hex64(uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void expect_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                 const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
    }
  }
}

void validate(const TrainConfig& c) {
  if (c.batch < 1) throw std::invalid_argument("config: batch must be >= 1");
  if (!(c.lr > 0)) throw std::invalid_argument("config: lr must be > 0");
  if (c.total_epochs < 1) throw std::invalid_argument("config: total_epochs must be >= 1");
  if (c.warmup_epochs < 0 || c.warmup_epochs > c.total_epochs) {
    throw std::invalid_argument("config: need 0 <= warmup_epochs <= total_epochs");
  }
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) {
    throw std::invalid_argument("config: val_fraction must be in (0, 1)");
  }
  if (c.data != "synthetic" && c.data != "idx" && c.data != "csv") {
    throw std::invalid_argument("config: data must be synthetic, idx or csv");
  }
  if (c.data == "idx" && (c.idx_images.empty() || c.idx_labels.empty())) {
    throw std::invalid_argument("config: idx data needs idx_images and idx_labels paths");
  }
  if (c.data == "csv" && c.csv_path.empty()) {
    throw std::invalid_argument("config: csv data needs csv_path");
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: root must be a JSON object");
  expect_keys(j,
              {"data", "idx_images", "idx_labels", "csv_path", "synthetic_n", "val_fraction",
               "batch", "warmup_epochs", "total_epochs", "lr", "weight_decay", "seed", "out_dir",
               "load_params", "method", "quantize", "model"},
              "root");
  TrainConfig c;
  auto get = [&j](const char* k, auto& dst) {
    if (j.contains(k)) dst = j.at(k).template get<std::decay_t<decltype(dst)>>();
  };
  get("data", c.data);
  get("idx_images", c.idx_images);
  get("idx_labels", c.idx_labels);
  get("csv_path", c.csv_path);
  get("synthetic_n", c.synthetic_n);
  get("val_fraction", c.val_fraction);
  get("batch", c.batch);
  get("warmup_epochs", c.warmup_epochs);
  get("total_epochs", c.total_epochs);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("seed", c.seed);
  get("out_dir", c.out_dir);
  get("load_params", c.load_params);
  if (j.contains("method")) c.model.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("quantize")) c.model.quant_saves = j.at("quantize").get<bool>();
  if (j.contains("model")) {
    const nlohmann::json& m = j.at("model");
    expect_keys(m,
                {"image_hw", "channels_in", "patch", "dim", "heads", "depth", "mlp_hidden",
                 "classes", "lrp_rank", "cap_factor", "prompt_tokens", "lora_rank",
                 "adapter_bottleneck"},
                "model");
    auto getm = [&m](const char* k, int64_t& dst) {
      if (m.contains(k)) dst = m.at(k).get<int64_t>();
    };
    getm("image_hw", c.model.image_hw);
    getm("channels_in", c.model.channels_in);
    getm("patch", c.model.patch);
    getm("dim", c.model.dim);
    getm("heads", c.model.heads);
    getm("depth", c.model.depth);
    getm("mlp_hidden", c.model.mlp_hidden);
    getm("classes", c.model.classes);
    getm("lrp_rank", c.model.lrp_rank);
    getm("cap_factor", c.model.cap_factor);
    getm("prompt_tokens", c.model.prompt_tokens);
    getm("lora_rank", c.model.lora_rank);
    getm("adapter_bottleneck", c.model.adapter_bottleneck);
  }
  validate(c);
  return c;
}

TrainConfig train_config_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;  // nlohmann reports line and column on parse errors
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  return train_config_from_json(j);
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json m = {
      {"image_hw", c.model.image_hw},
      {"channels_in", c.model.channels_in},
      {"patch", c.model.patch},
      {"dim", c.model.dim},
      {"heads", c.model.heads},
      {"depth", c.model.depth},
      {"mlp_hidden", c.model.mlp_hidden},
      {"classes", c.model.classes},
      {"lrp_rank", c.model.lrp_rank},
      {"cap_factor", c.model.cap_factor},
      {"prompt_tokens", c.model.prompt_tokens},
      {"lora_rank", c.model.lora_rank},
      {"adapter_bottleneck", c.model.adapter_bottleneck},
  };
  nlohmann::json j = {
      {"data", c.data},         {"synthetic_n", c.synthetic_n},
      {"val_fraction", c.val_fraction}, {"batch", c.batch},
      {"warmup_epochs", c.warmup_epochs}, {"total_epochs", c.total_epochs},
      {"lr", c.lr},             {"weight_decay", c.weight_decay},
      {"seed", c.seed},         {"method", to_string(c.model.method)},
      {"quantize", c.model.quant_saves}, {"model", m},
  };
  if (!c.idx_images.empty()) j["idx_images"] = c.idx_images;
  if (!c.idx_labels.empty()) j["idx_labels"] = c.idx_labels;
  if (!c.csv_path.empty()) j["csv_path"] = c.csv_path;
  if (!c.out_dir.empty()) j["out_dir"] = c.out_dir;
  if (!c.load_params.empty()) j["load_params"] = c.load_params;
  return j;
}

double evaluate_accuracy(ToyViT& model, const Dataset& d, int64_t batch) {
  const int64_t n = d.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += batch) {
    const int64_t take_n = std::min(batch, n - at);
    std::vector<int64_t> idx(static_cast<size_t>(take_n));
    std::iota(idx.begin(), idx.end(), at);
    const Dataset b = take(d, idx);
    const Tensor logits = model.predict_logits(b.images);
    const int64_t k = logits.shape[1];
    for (int64_t r = 0; r < take_n; ++r) {
      int best = 0;
      float best_v = logits.data[static_cast<size_t>(r * k)];
      for (int64_t c = 1; c < k; ++c) {
        const float v = logits.data[static_cast<size_t>(r * k + c)];
        if (v > best_v) {
          best_v = v;
          best = int(c);
        }
      }
      if (best == b.labels[static_cast<size_t>(r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainResult run_finetune(const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  validate(cfg);

  // Every stochastic stream derives from the one user seed.
  cfg.model.init_seed = mix_seed(cfg.seed, 1);
  const uint64_t data_seed = mix_seed(cfg.seed, 2);
  const uint64_t shuffle_base = mix_seed(cfg.seed, 3);

  Dataset full;
  if (cfg.data == "synthetic") {
    full = make_synthetic(data_seed, cfg.synthetic_n, cfg.model.image_hw, cfg.model.channels_in,
                          cfg.model.classes);
  } else if (cfg.data == "idx") {
    full = load_idx(cfg.idx_images, cfg.idx_labels);
    cfg.model.image_hw = full.images.shape[1];
    cfg.model.channels_in = full.images.shape[3];
    cfg.model.classes = full.classes;
  } else {
    full = load_csv(cfg.csv_path, cfg.model.image_hw, cfg.model.channels_in, cfg.model.classes);
  }
  if (full.images.shape[1] != cfg.model.image_hw || full.images.shape[3] != cfg.model.channels_in) {
    throw std::invalid_argument("train: dataset geometry does not match the model config");
  }
  auto [train_set, val_set] = split_dataset(full, cfg.val_fraction, data_seed ^ 0x5117ull);

  ToyViT model(cfg.model);
  if (!cfg.load_params.empty()) model.params().load(cfg.load_params);

  TrainResult res;
  res.total_scalars = model.params().total_scalars();
  res.trainable_scalars = model.params().trainable_scalars();
  res.frozen_hash_before = model.params().frozen_hash();

  AdamWConfig oc;
  oc.weight_decay = cfg.weight_decay;
  AdamW opt(model.params(), oc);

  const int64_t n_train = train_set.size();
  const int64_t steps_per_epoch = (n_train + cfg.batch - 1) / cfg.batch;
  const int64_t total_steps = steps_per_epoch * cfg.total_epochs;
  const int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  std::ofstream metrics_out;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_out.open(cfg.out_dir + "/metrics.jsonl");
    if (!metrics_out) throw std::runtime_error("train: cannot write to " + cfg.out_dir);
  }

  int64_t step = 0;
  double last_lr = 0.0;
  std::vector<int64_t> order(static_cast<size_t>(n_train));
  for (int64_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 gen(shuffle_base + static_cast<uint64_t>(epoch));
    for (int64_t i = n_train - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(gen() % static_cast<uint64_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    for (int64_t at = 0; at < n_train; at += cfg.batch, ++step) {
      const int64_t bn = std::min(cfg.batch, n_train - at);
      const std::vector<int64_t> idx(order.begin() + at, order.begin() + at + bn);
      const Dataset b = take(train_set, idx);

      Tape tape;
      try {
        ops::Value loss = model.forward_loss(tape, b.images, b.labels);
        const double lv = loss.t.data[0];
        if (!std::isfinite(lv)) throw std::runtime_error("loss is not finite");
        loss_sum += lv * static_cast<double>(bn);

        if (step == 0) {
          res.measured_activation_bytes = static_cast<int64_t>(tape.live_activation_bytes());
          res.report = estimate(toy_geometry(cfg.model), cfg.model.method, bn,
                                cfg.model.quant_saves);
          res.predicted_activation_bytes = static_cast<int64_t>(res.report.activation_bytes);
          res.activation_bytes_match = verify_against_tape(res.report, tape).empty();
        }

        GradStore grads = tape.backward(loss.id);
        last_lr = warmup_cosine_lr(step, total_steps, warmup_steps, cfg.lr);
        opt.step(tape, grads, last_lr);
      } catch (const std::runtime_error& e) {
        // blown-up weights surface as non-finite values in whichever op
        // meets them first; pin the failure to the step and keep the cause
        throw std::runtime_error("training diverged at step " + std::to_string(step) + ": " +
                                 e.what());
      }
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    em.train_loss = loss_sum / static_cast<double>(n_train);
    em.val_acc = evaluate_accuracy(model, val_set, cfg.batch);
    em.lr_last = last_lr;
    res.history.push_back(em);
    if (metrics_out) {
      nlohmann::json line = {{"epoch", em.epoch},
                             {"train_loss", em.train_loss},
                             {"val_acc", em.val_acc},
                             {"lr", em.lr_last}};
      metrics_out << line.dump() << "\n";
    }
  }

  res.final_train_loss = res.history.back().train_loss;
  res.final_val_acc = res.history.back().val_acc;
  res.frozen_hash_after = model.params().frozen_hash();

  nlohmann::json hist = nlohmann::json::array();
  for (const EpochMetrics& em : res.history) {
    hist.push_back({{"epoch", em.epoch},
                    {"train_loss", em.train_loss},
                    {"val_acc", em.val_acc},
                    {"lr", em.lr_last}});
  }
  res.summary = {
      {"config", train_config_to_json(cfg_in)},
      {"final_train_loss", res.final_train_loss},
      {"final_val_acc", res.final_val_acc},
      {"frozen_hash_before", hex64(res.frozen_hash_before)},
      {"frozen_hash_after", hex64(res.frozen_hash_after)},
      {"frozen_weights_unchanged", res.frozen_hash_before == res.frozen_hash_after},
      {"total_scalars", res.total_scalars},
      {"trainable_scalars", res.trainable_scalars},
      {"trainable_percent",
       100.0 * static_cast<double>(res.trainable_scalars) / static_cast<double>(res.total_scalars)},
      {"activation_bytes",
       {{"measured", res.measured_activation_bytes},
        {"predicted", res.predicted_activation_bytes},
        {"match", res.activation_bytes_match}}},
      {"memory_report", nlohmann::json::parse(report_to_json(res.report))},
      {"history", hist},
  };

  if (!cfg.out_dir.empty()) {
    std::ofstream sf(cfg.out_dir + "/summary.json");
    sf << res.summary.dump(2) << "\n";
    model.params().save(cfg.out_dir + "/params.bin");
  }
  return res;
}

}  // namespace s2a

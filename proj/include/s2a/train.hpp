#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "s2a/data.hpp"
#include "s2a/memory.hpp"
#include "s2a/modules.hpp"

namespace s2a {

struct TrainConfig {
  ToyViTConfig model;  // method, quant_saves and dimensions live here

  std::string data = "synthetic";  // synthetic | idx | csv
  std::string idx_images, idx_labels;
  std::string csv_path;
  int64_t synthetic_n = 600;
  double val_fraction = 0.25;

  int64_t batch = 16;
  int64_t warmup_epochs = 2;
  int64_t total_epochs = 20;
  double lr = 0.01;
  double weight_decay = 1e-4;
  uint64_t seed = 7;  // master seed: init, data sampling and shuffles derive from it

  std::string out_dir;      // when set: metrics.jsonl + summary.json + params.bin
  std::string load_params;  // optional checkpoint to start from
};

// Parses a config JSON object. Unknown keys are errors; "model" may be a
// sub-object overriding ToyViTConfig dimensions.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_file(const std::string& path);
nlohmann::json train_config_to_json(const TrainConfig& cfg);

struct EpochMetrics {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr_last = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double final_train_loss = 0.0;
  double final_val_acc = 0.0;
  uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
  int64_t total_scalars = 0, trainable_scalars = 0;
  int64_t measured_activation_bytes = 0;   // live tape bytes on the first full batch
  int64_t predicted_activation_bytes = 0;  // accountant's number for the same shape
  bool activation_bytes_match = false;
  MemoryReport report;
  nlohmann::json summary;  // what train writes to summary.json
};

// Full deterministic fine-tuning run. Throws on divergence ("diverged at step
// N") and on dataset/config errors.
TrainResult run_finetune(const TrainConfig& cfg);

// Argmax with ties to the lowest index, batched evaluation.
double evaluate_accuracy(ToyViT& model, const Dataset& d, int64_t batch);

}  // namespace s2a

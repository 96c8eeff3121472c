#include "s2a/memory.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "s2a/quant.hpp"

namespace s2a {

ArchGeometry vit_b_16() {
  ArchGeometry g;
  g.name = "vit_b_16";
  g.depth = 12;
  g.dim = 768;
  g.heads = 12;
  g.mlp_hidden = 3072;
  g.tokens = 197;
  g.patch_tokens = 196;
  g.patch_dim = 768;  // 16 x 16 x 3
  g.classes = 100;
  g.lrp_rank = 30;
  g.cap_factor = 8;
  g.prompt_tokens = 50;
  g.lora_rank = 96;
  g.adapter_bottleneck = 96;
  return g;
}

ArchGeometry toy_geometry(const ToyViTConfig& cfg) {
  ArchGeometry g;
  g.name = "toy";
  g.depth = cfg.depth;
  g.dim = cfg.dim;
  g.heads = cfg.heads;
  g.mlp_hidden = cfg.mlp_hidden;
  g.tokens = cfg.tokens();
  g.patch_tokens = cfg.patch_tokens();
  g.patch_dim = cfg.patch_dim();
  g.classes = cfg.classes;
  g.lrp_rank = cfg.lrp_rank;
  g.cap_factor = cfg.cap_factor;
  g.prompt_tokens = cfg.prompt_tokens;
  g.lora_rank = cfg.lora_rank;
  g.adapter_bottleneck = cfg.adapter_bottleneck;
  return g;
}

namespace {

void validate_geometry(const ArchGeometry& g) {
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument("arch '" + g.name + "': " + why);
  };
  if (g.depth <= 0 || g.dim <= 0 || g.heads <= 0 || g.mlp_hidden <= 0 || g.tokens <= 1 ||
      g.classes <= 1 || g.patch_dim <= 0) {
    fail("core dimensions must be positive");
  }
  if (g.patch_tokens != g.tokens - 1) fail("patch_tokens must equal tokens - 1");
  if (g.dim % g.heads != 0) fail("heads must divide dim");
  if (g.cap_factor <= 0 || g.dim % g.cap_factor != 0) fail("cap_factor must divide dim");
  if (g.lrp_rank <= 0 || g.lrp_rank >= std::min(g.tokens, g.dim)) {
    fail("lrp_rank must lie in [1, min(tokens, dim))");
  }
  if (g.prompt_tokens <= 0 || g.lora_rank <= 0 || g.adapter_bottleneck <= 0) {
    fail("method module sizes must be positive");
  }
}

int64_t geti(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) {
    throw std::invalid_argument(std::string("arch json: missing key '") + key + "'");
  }
  if (!j[key].is_number_integer()) {
    throw std::invalid_argument(std::string("arch json: key '") + key + "' must be an integer");
  }
  return j[key].get<int64_t>();
}

}  // namespace

ArchGeometry geometry_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("arch json: ") + e.what());
  }
  ArchGeometry g;
  g.name = j.value("name", "custom");
  g.depth = geti(j, "depth");
  g.dim = geti(j, "dim");
  g.heads = geti(j, "heads");
  g.mlp_hidden = geti(j, "mlp_hidden");
  g.tokens = geti(j, "tokens");
  g.patch_tokens = g.tokens - 1;
  g.patch_dim = geti(j, "patch_dim");
  g.classes = geti(j, "classes");
  g.lrp_rank = geti(j, "lrp_rank");
  g.cap_factor = geti(j, "cap_factor");
  g.prompt_tokens = geti(j, "prompt_tokens");
  g.lora_rank = geti(j, "lora_rank");
  g.adapter_bottleneck = geti(j, "adapter_bottleneck");
  validate_geometry(g);
  return g;
}

ArchGeometry geometry_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("arch json: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return geometry_from_json(ss.str());
}

double MemoryReport::total_mib() const {
  return static_cast<double>(total_bytes) / (1024.0 * 1024.0);
}

double MemoryReport::trainable_percent() const {
  return param_count == 0 ? 0.0
                          : 100.0 * static_cast<double>(trainable_count) /
                                static_cast<double>(param_count);
}

size_t row_activation_bytes(StoragePolicy policy, int64_t elements, int64_t blobs) {
  if (elements == 0 || policy == StoragePolicy::NoSave) return 0;
  if (elements < 0 || blobs <= 0) {
    throw std::invalid_argument("accountant: negative elements or nonpositive blob count");
  }
  switch (policy) {
    case StoragePolicy::Full32:
      return 4 * static_cast<size_t>(elements);
    case StoragePolicy::Quant4:
    case StoragePolicy::Mask1: {
      if (elements % blobs != 0) {
        throw std::invalid_argument("accountant: packed row elements must split evenly over " +
                                    std::to_string(blobs) + " blobs");
      }
      const int64_t per = elements / blobs;
      const size_t payload = packed_size(per, policy == StoragePolicy::Quant4 ? 4 : 1);
      const size_t header = policy == StoragePolicy::Quant4 ? 8 : 0;
      return static_cast<size_t>(blobs) * (payload + header);
    }
    case StoragePolicy::NoSave:
      break;
  }
  return 0;
}

MemoryReport estimate(const ArchGeometry& g, Method method, int64_t batch, bool quantized) {
  validate_geometry(g);
  if (batch <= 0) throw std::invalid_argument("accountant: batch must be positive");
  const Method m = method;
  const bool full = m == Method::Full;
  const bool bias_tuned = full || m == Method::BiasOnly || m == Method::S2A;
  const bool norm_tuned = full || m == Method::Adapter;
  const bool backbone_flow = m != Method::LinearProbe;
  const bool s2a = m == Method::S2A;
  const int64_t c = g.dim, hid = g.mlp_hidden, b = batch;
  const int64_t nt = g.tokens + (m == Method::VPT ? g.prompt_tokens : 0);
  const int64_t sd = g.side_dim();
  const StoragePolicy block_pol = !backbone_flow ? StoragePolicy::NoSave
                                  : s2a && quantized ? StoragePolicy::Quant4
                                                     : StoragePolicy::Full32;

  MemoryReport rep;
  rep.arch = g.name;
  rep.method = m;
  rep.batch = batch;
  rep.quantized = s2a && quantized;

  auto row = [&](std::string name, std::string kind, StoragePolicy pol, int64_t params,
                 int64_t trainable, int64_t elems, int64_t blobs) {
    MemoryRow r;
    r.name = std::move(name);
    r.kind = std::move(kind);
    r.policy = elems > 0 ? pol : StoragePolicy::NoSave;
    r.param_count = params;
    r.trainable_count = trainable;
    r.act_elements = elems;
    r.blob_count = elems > 0 ? blobs : 0;
    r.act_bytes = row_activation_bytes(r.policy, elems, blobs == 0 ? 1 : blobs);
    rep.rows.push_back(std::move(r));
  };

  row("patch_embed", "linear", StoragePolicy::Full32, g.patch_dim * c + c,
      full ? g.patch_dim * c + c : (bias_tuned ? c : 0), full ? b * g.patch_tokens * g.patch_dim : 0,
      1);
  row("embeddings", "embed", StoragePolicy::NoSave, c + g.tokens * c,
      full ? c + g.tokens * c : 0, 0, 0);

  for (int64_t i = 0; i < g.depth; ++i) {
    const std::string bp = "block" + std::to_string(i) + ".";
    if (m == Method::VPT) {
      row(bp + "prompt", "prompt", StoragePolicy::NoSave, g.prompt_tokens * c,
          g.prompt_tokens * c, 0, 0);
    }
    if (s2a) {
      const int64_t lp = g.tokens * g.lrp_rank + g.lrp_rank * c;
      row(bp + "lrp", "lowrank", StoragePolicy::NoSave, lp, lp, 0, 0);
    }
    row(bp + "norm1", "affine", StoragePolicy::Full32, 2 * c,
        norm_tuned ? 2 * c : (bias_tuned ? c : 0), norm_tuned ? b * nt * c : 0, 1);
    row(bp + "qkv", "linear", StoragePolicy::Full32, c * 3 * c + 3 * c,
        full ? c * 3 * c + 3 * c : (bias_tuned ? 3 * c : 0), full ? b * nt * c : 0, 1);
    if (m == Method::LoRA) {
      const int64_t lp = c * g.lora_rank + g.lora_rank * 3 * c;
      row(bp + "qkv.lora", "lowrank", StoragePolicy::Full32, lp, lp,
          b * nt * c + b * nt * g.lora_rank, 2);
    }
    row(bp + "attn.softmax", "softmax", block_pol, 0, 0,
        backbone_flow ? b * g.heads * nt * nt : 0, 1);
    row(bp + "attn.proj", "linear", StoragePolicy::Full32, c * c + c,
        full ? c * c + c : (bias_tuned ? c : 0), full ? b * nt * c : 0, 1);
    if (m == Method::Adapter) {
      const int64_t bn = g.adapter_bottleneck;
      const int64_t ap = (c * bn + bn) + (bn * c + c);
      row(bp + "attn.adapter", "adapter", StoragePolicy::Full32, ap, ap,
          b * nt * c + b * nt * bn, 2);
      row(bp + "attn.adapter.gelu", "gelu", StoragePolicy::Full32, 0, 0, b * nt * bn, 1);
    }
    row(bp + "norm2", "affine", StoragePolicy::Full32, 2 * c,
        norm_tuned ? 2 * c : (bias_tuned ? c : 0), norm_tuned ? b * nt * c : 0, 1);
    row(bp + "mlp.fc1", "linear", StoragePolicy::Full32, c * hid + hid,
        full ? c * hid + hid : (bias_tuned ? hid : 0), full ? b * nt * c : 0, 1);
    row(bp + "mlp.gelu", "gelu", block_pol, 0, 0, backbone_flow ? b * nt * hid : 0, 1);
    row(bp + "mlp.fc2", "linear", StoragePolicy::Full32, hid * c + c,
        full ? hid * c + c : (bias_tuned ? c : 0), full ? b * nt * hid : 0, 1);
    if (m == Method::Adapter) {
      const int64_t bn = g.adapter_bottleneck;
      const int64_t ap = (c * bn + bn) + (bn * c + c);
      row(bp + "mlp.adapter", "adapter", StoragePolicy::Full32, ap, ap,
          b * nt * c + b * nt * bn, 2);
      row(bp + "mlp.adapter.gelu", "gelu", StoragePolicy::Full32, 0, 0, b * nt * bn, 1);
    }
    if (s2a) {
      const int64_t sp = (sd * sd + sd) + (9 * sd + sd) + (sd * sd + sd);
      row(bp + "side.cap", "pool", StoragePolicy::NoSave, 0, 0, 0, 0);
      row(bp + "side.lsb", "conv", StoragePolicy::Full32, sp, sp, 3 * b * g.patch_tokens * sd, 3);
    }
  }

  row("final_norm", "affine", StoragePolicy::Full32, 2 * c,
      norm_tuned ? 2 * c : (bias_tuned ? c : 0), norm_tuned ? b * g.tokens * c : 0, 1);
  const int64_t head_in = s2a ? c + sd : c;
  row("head", "head", StoragePolicy::Full32, head_in * g.classes + g.classes,
      head_in * g.classes + g.classes, b * head_in + b * g.classes, 2);

  for (const MemoryRow& r : rep.rows) {
    rep.param_count += r.param_count;
    rep.trainable_count += r.trainable_count;
    rep.activation_bytes += r.act_bytes;
  }
  rep.weight_bytes = 4 * static_cast<size_t>(rep.param_count);
  rep.grad_bytes = 4 * static_cast<size_t>(rep.trainable_count);
  rep.optimizer_bytes = 8 * static_cast<size_t>(rep.trainable_count);
  rep.total_bytes =
      rep.weight_bytes + rep.grad_bytes + rep.optimizer_bytes + rep.activation_bytes;
  return rep;
}

std::vector<std::string> verify_against_tape(const MemoryReport& r, const Tape& tape) {
  std::vector<std::string> problems;
  std::map<std::string, size_t> want;
  for (const MemoryRow& row : r.rows) {
    if (row.act_bytes > 0) want[row.name] += row.act_bytes;
  }
  const std::map<std::string, size_t> got = tape.bytes_by_label();
  for (const auto& [name, bytes] : want) {
    auto it = got.find(name);
    if (it == got.end()) {
      problems.push_back("row '" + name + "': accountant expects " + std::to_string(bytes) +
                         " bytes, tape saved nothing");
    } else if (it->second != bytes) {
      problems.push_back("row '" + name + "': accountant expects " + std::to_string(bytes) +
                         " bytes, tape saved " + std::to_string(it->second));
    }
  }
  for (const auto& [name, bytes] : got) {
    if (!want.count(name)) {
      problems.push_back("row '" + name + "': tape saved " + std::to_string(bytes) +
                         " bytes the accountant does not list");
    }
  }
  return problems;
}

std::string render_table(const MemoryReport& r) {
  std::ostringstream os;
  auto mib = [](size_t bytes) {
    std::ostringstream v;
    v.setf(std::ios::fixed);
    v.precision(2);
    v << static_cast<double>(bytes) / (1024.0 * 1024.0);
    return v.str();
  };
  os << "arch=" << r.arch << " method=" << to_string(r.method) << " batch=" << r.batch
     << " quantized=" << (r.quantized ? "yes" : "no") << "\n";
  os << "name                          kind      policy  params      trainable   act_bytes\n";
  for (const MemoryRow& row : r.rows) {
    std::string name = row.name;
    if (name.size() < 30) name.resize(30, ' ');
    std::string kind = row.kind;
    if (kind.size() < 10) kind.resize(10, ' ');
    std::string pol = to_string(row.policy);
    if (pol.size() < 8) pol.resize(8, ' ');
    std::string pc = std::to_string(row.param_count);
    if (pc.size() < 12) pc.resize(12, ' ');
    std::string tc = std::to_string(row.trainable_count);
    if (tc.size() < 12) tc.resize(12, ' ');
    os << name << kind << pol << pc << tc << row.act_bytes << "\n";
  }
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "params " << r.param_count << " trainable " << r.trainable_count << " ("
     << r.trainable_percent() << "%)\n";
  os << "weights_mib " << mib(r.weight_bytes) << "\n";
  os << "grads_mib " << mib(r.grad_bytes) << "\n";
  os << "optimizer_mib " << mib(r.optimizer_bytes) << "\n";
  os << "activations_mib " << mib(r.activation_bytes) << "\n";
  os << "total_mib " << mib(r.total_bytes) << "\n";
  return os.str();
}

std::string report_to_json(const MemoryReport& r) {
  nlohmann::json j;
  j["arch"] = r.arch;
  j["method"] = to_string(r.method);
  j["batch"] = r.batch;
  j["quantized"] = r.quantized;
  j["param_count"] = r.param_count;
  j["trainable_count"] = r.trainable_count;
  j["trainable_percent"] = r.trainable_percent();
  j["weight_bytes"] = r.weight_bytes;
  j["grad_bytes"] = r.grad_bytes;
  j["optimizer_bytes"] = r.optimizer_bytes;
  j["activation_bytes"] = r.activation_bytes;
  j["total_bytes"] = r.total_bytes;
  j["total_mib"] = r.total_mib();
  nlohmann::json rows = nlohmann::json::array();
  for (const MemoryRow& row : r.rows) {
    nlohmann::json jr;
    jr["name"] = row.name;
    jr["kind"] = row.kind;
    jr["policy"] = to_string(row.policy);
    jr["param_count"] = row.param_count;
    jr["trainable_count"] = row.trainable_count;
    jr["act_elements"] = row.act_elements;
    jr["blob_count"] = row.blob_count;
    jr["act_bytes"] = row.act_bytes;
    rows.push_back(std::move(jr));
  }
  j["rows"] = std::move(rows);
  return j.dump(2) + "\n";
}

}  // namespace s2a

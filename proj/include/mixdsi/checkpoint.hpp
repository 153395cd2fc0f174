#pragma once

// Binary model checkpoints: "MXDS" magic, format version, config, timestep,
// MixLoRA structure, then named parameter blocks.

#include <filesystem>
#include <map>
#include <string>

#include "mixdsi/io.hpp"
#include "mixdsi/model.hpp"

namespace mixdsi {

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(io::Writer& w, const TransformerConfig& c) {
  for (int v : {c.dim, c.hidden, c.heads, c.encoder_blocks, c.decoder_blocks, c.n_mix, c.base_vocab,
                c.M, c.K, c.max_input_len, c.lora_rank, c.top_k, c.initial_experts})
    w.pod<int32_t>(v);
  w.pod<double>(c.dropout);
  w.pod<double>(c.lora_scale);
  w.pod<uint64_t>(c.seed);
  w.pod<uint8_t>(c.router == RouterKind::cosine ? 1 : 0);
}

inline TransformerConfig read_config(io::Reader& r) {
  TransformerConfig c;
  for (int* v : {&c.dim, &c.hidden, &c.heads, &c.encoder_blocks, &c.decoder_blocks, &c.n_mix,
                 &c.base_vocab, &c.M, &c.K, &c.max_input_len, &c.lora_rank, &c.top_k,
                 &c.initial_experts})
    *v = r.pod<int32_t>();
  c.dropout = r.pod<double>();
  c.lora_scale = r.pod<double>();
  c.seed = r.pod<uint64_t>();
  c.router = r.pod<uint8_t>() ? RouterKind::cosine : RouterKind::softmax;
  return c;
}

}  // namespace detail

inline std::string save_checkpoint(ModelState& m) {
  io::Writer w;
  w.bytes("MXDS");
  w.pod<uint32_t>(kCheckpointVersion);
  detail::write_config(w, m.cfg);
  w.pod<int32_t>(m.timestep);
  w.pod<double>(m.slow_learner_factor);
  w.pod<uint8_t>(m.mask_enabled ? 1 : 0);
  w.pod<uint32_t>(static_cast<uint32_t>(m.n_mix()));
  for (int l = 0; l < m.n_mix(); ++l) {
    const MixLoRALayer& layer = m.mix(l);
    w.pod<uint8_t>(layer.router.kind == RouterKind::cosine ? 1 : 0);
    w.pod<int32_t>(layer.router.top_k);
    w.pod<uint32_t>(static_cast<uint32_t>(layer.experts.size()));
    for (const auto& e : layer.experts) {
      w.pod<int32_t>(e.created_at);
      w.pod<int32_t>(e.rank);
      w.pod<double>(e.scale);
    }
    w.pod<uint32_t>(static_cast<uint32_t>(layer.thresholds.size()));
    for (const auto& th : layer.thresholds) {
      w.pod<double>(th.tau);
      w.pod<uint8_t>(th.initialized ? 1 : 0);
    }
  }
  const auto params = m.params();
  w.pod<uint32_t>(static_cast<uint32_t>(params.size()));
  for (Param* p : params) {
    if (!p->value.allFinite()) throw NumericalError("save_checkpoint: non-finite parameter " + p->name);
    w.str(p->name);
    w.pod<uint8_t>(p->trainable ? 1 : 0);
    w.pod<double>(p->lr_scale);
    w.matrix(p->value);
  }
  return w.data();
}

inline ModelState load_checkpoint(std::string_view bytes) {
  io::Reader r(bytes);
  if (bytes.size() < 8 || r.bytes(4) != "MXDS") throw DataError("checkpoint: bad magic");
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  TransformerConfig cfg = detail::read_config(r);
  try {
    cfg.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: invalid config: ") + e.what());
  }
  ModelState m = init_model(cfg);
  m.timestep = r.pod<int32_t>();
  m.slow_learner_factor = r.pod<double>();
  m.mask_enabled = r.pod<uint8_t>() != 0;
  const auto n_mix = r.pod<uint32_t>();
  if (static_cast<int>(n_mix) != m.n_mix()) throw DataError("checkpoint: MixLoRA layer count mismatch");
  Rng scratch(0);
  for (int l = 0; l < m.n_mix(); ++l) {
    MixLoRALayer& layer = m.mix(l);
    layer.router.kind = r.pod<uint8_t>() ? RouterKind::cosine : RouterKind::softmax;
    layer.router.top_k = r.pod<int32_t>();
    const auto n = r.pod<uint32_t>();
    if (n > 4096) throw DataError("checkpoint: implausible expert count");
    layer.experts.clear();
    layer.router.columns.clear();
    for (uint32_t i = 0; i < n; ++i) {
      const int created = r.pod<int32_t>();
      const int rank = r.pod<int32_t>();
      const double scale = r.pod<double>();
      if (rank < 1 || rank > 4096) throw DataError("checkpoint: bad LoRA rank");
      layer.experts.push_back(make_expert(cfg.dim, cfg.hidden, rank, scale, created, scratch));
      layer.router.columns.push_back(make_router_column(layer.router.kind, cfg.dim, scratch));
    }
    const auto nt = r.pod<uint32_t>();
    if (nt > 4096) throw DataError("checkpoint: implausible threshold count");
    layer.thresholds.assign(nt, EmaThreshold{});
    for (auto& th : layer.thresholds) {
      th.tau = r.pod<double>();
      th.initialized = r.pod<uint8_t>() != 0;
    }
  }
  name_params(m);
  std::map<std::string, Param*> by_name;
  for (Param* p : m.params()) by_name[p->name] = p;
  const auto count = r.pod<uint32_t>();
  if (count != by_name.size()) throw DataError("checkpoint: parameter count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: unknown parameter " + name);
    Param* p = it->second;
    p->trainable = r.pod<uint8_t>() != 0;
    p->lr_scale = r.pod<double>();
    Mat v = r.matrix();
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw DataError("checkpoint: shape mismatch for " + name);
    p->value = std::move(v);
    p->grad.resize(0, 0);
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return m;
}

inline void write_checkpoint(const std::filesystem::path& path, ModelState& m) {
  io::write_file(path, save_checkpoint(m));
}

inline ModelState read_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint(io::read_file(path));
}

inline ModelState clone_model(ModelState& m) { return load_checkpoint(save_checkpoint(m)); }

}  // namespace mixdsi

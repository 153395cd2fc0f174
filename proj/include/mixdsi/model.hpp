#pragma once

// Small encoder-decoder transformer whose decoder FFNs host MixLoRA layers.
//
// Decoder inputs are tied to the output vocabulary: position 0 reads the BOS
// row of W_vocab, position p reads the RQ row of the gold code at position p.
// Output logits are h W^T over either the RQ region alone (masked decoding,
// one codebook segment per position) or the whole of W_RQ.

#include <functional>
#include <string>
#include <vector>

#include "mixdsi/autograd.hpp"
#include "mixdsi/common.hpp"
#include "mixdsi/mixlora.hpp"
#include "mixdsi/rq_codebook.hpp"

namespace mixdsi {

inline constexpr int kBosToken = 0;

struct TransformerConfig {
  int dim = 64;
  int hidden = 128;
  int heads = 2;
  int encoder_blocks = 2;
  int decoder_blocks = 4;
  int n_mix = 4;  // MixLoRA sits in the first n_mix decoder blocks
  int base_vocab = 0;
  int M = 4;
  int K = 16;
  int max_input_len = 32;
  double dropout = 0.0;
  uint64_t seed = 0;
  int lora_rank = 4;
  double lora_scale = 8.0;
  int top_k = 2;
  int initial_experts = 2;
  RouterKind router = RouterKind::cosine;

  void validate() const {
    require(dim >= 1 && hidden >= 1, "config: dim and hidden must be positive");
    require(heads >= 1 && dim % heads == 0, "config: dim must be divisible by heads");
    require(encoder_blocks >= 1 && decoder_blocks >= 1, "config: need at least one block each");
    require(n_mix >= 0 && n_mix <= decoder_blocks, "config: n_mix must be <= decoder_blocks");
    require(base_vocab >= 1, "config: base vocabulary must be non-empty");
    require(M >= 1 && K >= 1, "config: M and K must be positive");
    require(max_input_len >= 1, "config: max_input_len must be positive");
    require(dropout == 0.0, "config: dropout is not supported (must be 0)");
    require(lora_rank >= 1 && top_k >= 1 && initial_experts >= 0, "config: bad MixLoRA sizes");
  }

  VocabLayout layout() const { return VocabLayout{base_vocab, M, K}; }
};

struct AttnWeights {
  Param wq, wk, wv, wo;
  template <typename F>
  void for_each_param(F&& f) {
    f(wq);
    f(wk);
    f(wv);
    f(wo);
  }
};

struct EncoderBlock {
  Param ln_gain, ln_bias;
  AttnWeights attn;
  MixLoRALayer ffn;  // never has experts
};

struct DecoderBlock {
  Param ln1_gain, ln1_bias;
  AttnWeights self_attn;
  Param ln2_gain, ln2_bias;
  AttnWeights cross_attn;
  MixLoRALayer ffn;
  bool is_mix = false;
};

struct ModelState {
  TransformerConfig cfg;
  Param tok_emb;  // W_vocab, base_vocab x dim
  Param rq_emb;   // code rows, (M*K) x dim, segment m at rows [(m-1)K, mK)
  std::vector<EncoderBlock> enc;
  Param enc_norm_gain, enc_norm_bias;
  std::vector<DecoderBlock> dec;
  Param dec_norm_gain, dec_norm_bias;
  int timestep = 0;
  double slow_learner_factor = 100.0;
  bool mask_enabled = true;

  std::vector<int> mix_blocks() const {
    std::vector<int> out;
    for (int b = 0; b < static_cast<int>(dec.size()); ++b)
      if (dec[b].is_mix) out.push_back(b);
    return out;
  }
  int n_mix() const { return static_cast<int>(mix_blocks().size()); }
  MixLoRALayer& mix(int l) { return dec[mix_blocks()[l]].ffn; }
  const MixLoRALayer& mix(int l) const { return dec[mix_blocks()[l]].ffn; }

  template <typename F>
  void for_each_param(F&& f) {
    f(tok_emb);
    f(rq_emb);
    for (auto& b : enc) {
      f(b.ln_gain);
      f(b.ln_bias);
      b.attn.for_each_param(f);
      b.ffn.ffn.for_each_param(f);
    }
    f(enc_norm_gain);
    f(enc_norm_bias);
    for (auto& b : dec) {
      f(b.ln1_gain);
      f(b.ln1_bias);
      b.self_attn.for_each_param(f);
      f(b.ln2_gain);
      f(b.ln2_bias);
      b.cross_attn.for_each_param(f);
      b.ffn.ffn.for_each_param(f);
      for (auto& e : b.ffn.experts) e.for_each_param(f);
      for (auto& c : b.ffn.router.columns) f(c);
    }
    f(dec_norm_gain);
    f(dec_norm_bias);
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for_each_param([&out](Param& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_param([&n](Param& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  std::vector<int> expert_counts() const {
    std::vector<int> out;
    for (int b : mix_blocks()) out.push_back(static_cast<int>(dec[b].ffn.experts.size()));
    return out;
  }
};

inline void name_params(ModelState& m) {
  m.tok_emb.name = "tok_emb";
  m.rq_emb.name = "rq_emb";
  auto name_attn = [](AttnWeights& a, const std::string& p) {
    a.wq.name = p + ".wq";
    a.wk.name = p + ".wk";
    a.wv.name = p + ".wv";
    a.wo.name = p + ".wo";
  };
  for (std::size_t b = 0; b < m.enc.size(); ++b) {
    const std::string p = "enc." + std::to_string(b);
    m.enc[b].ln_gain.name = p + ".ln_gain";
    m.enc[b].ln_bias.name = p + ".ln_bias";
    name_attn(m.enc[b].attn, p + ".attn");
    name_layer_params(m.enc[b].ffn, p + ".ffn");
  }
  m.enc_norm_gain.name = "enc.norm_gain";
  m.enc_norm_bias.name = "enc.norm_bias";
  for (std::size_t b = 0; b < m.dec.size(); ++b) {
    const std::string p = "dec." + std::to_string(b);
    m.dec[b].ln1_gain.name = p + ".ln1_gain";
    m.dec[b].ln1_bias.name = p + ".ln1_bias";
    name_attn(m.dec[b].self_attn, p + ".self");
    m.dec[b].ln2_gain.name = p + ".ln2_gain";
    m.dec[b].ln2_bias.name = p + ".ln2_bias";
    name_attn(m.dec[b].cross_attn, p + ".cross");
    name_layer_params(m.dec[b].ffn, p + ".ffn");
  }
  m.dec_norm_gain.name = "dec.norm_gain";
  m.dec_norm_bias.name = "dec.norm_bias";
}

inline ModelState init_model(const TransformerConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {0x4d4f44454cULL}));
  const int d = cfg.dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto ones = [d] { return Mat::Ones(1, d); };
  auto zeros = [d] { return Mat::Zero(1, d); };
  auto attn = [&] {
    AttnWeights a;
    a.wq.value = random_normal(d, d, sd, rng);
    a.wk.value = random_normal(d, d, sd, rng);
    a.wv.value = random_normal(d, d, sd, rng);
    a.wo.value = random_normal(d, d, sd, rng);
    return a;
  };
  auto ffn = [&] {
    MixLoRALayer l;
    l.ffn.ln_gain.value = ones();
    l.ffn.ln_bias.value = zeros();
    l.ffn.w_in.value = random_normal(d, cfg.hidden, sd, rng);
    l.ffn.w_out.value = random_normal(cfg.hidden, d, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)), rng);
    l.router.kind = cfg.router;
    l.router.top_k = cfg.top_k;
    return l;
  };

  ModelState m;
  m.cfg = cfg;
  m.tok_emb.value = random_normal(cfg.base_vocab, d, sd, rng);
  m.rq_emb.value = random_normal(cfg.M * cfg.K, d, sd, rng);
  for (int b = 0; b < cfg.encoder_blocks; ++b) {
    EncoderBlock e;
    e.ln_gain.value = ones();
    e.ln_bias.value = zeros();
    e.attn = attn();
    e.ffn = ffn();
    m.enc.push_back(std::move(e));
  }
  m.enc_norm_gain.value = ones();
  m.enc_norm_bias.value = zeros();
  for (int b = 0; b < cfg.decoder_blocks; ++b) {
    DecoderBlock blk;
    blk.ln1_gain.value = ones();
    blk.ln1_bias.value = zeros();
    blk.self_attn = attn();
    blk.ln2_gain.value = ones();
    blk.ln2_bias.value = zeros();
    blk.cross_attn = attn();
    blk.ffn = ffn();
    blk.is_mix = b < cfg.n_mix;
    if (blk.is_mix) {
      for (int i = 0; i < cfg.initial_experts; ++i) {
        blk.ffn.experts.push_back(make_expert(d, cfg.hidden, cfg.lora_rank, cfg.lora_scale, 0, rng));
        blk.ffn.router.columns.push_back(make_router_column(cfg.router, d, rng));
      }
      blk.ffn.thresholds.assign(cfg.M, EmaThreshold{});
    }
    m.dec.push_back(std::move(blk));
  }
  m.dec_norm_gain.value = ones();
  m.dec_norm_bias.value = zeros();
  name_params(m);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pieces

inline Mat sinusoidal_positions(int len, int dim) {
  Mat pe(len, dim);
  for (int p = 0; p < len; ++p)
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(p, i) = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  return pe;
}

// pos_ids gives the position of each row; returns rows x dim.
inline Mat position_rows(const std::vector<int>& pos_ids, int dim) {
  int mx = 0;
  for (int p : pos_ids) mx = std::max(mx, p);
  const Mat pe = sinusoidal_positions(mx + 1, dim);
  Mat out(pos_ids.size(), dim);
  for (std::size_t r = 0; r < pos_ids.size(); ++r) out.row(r) = pe.row(pos_ids[r]);
  return out;
}

inline ag::Var attention_block(ag::Tape& t, AttnWeights& w, ag::Var xq, ag::Var xkv,
                               const ag::AttentionLayout& lay) {
  ag::Var q = ag::matmul(t, xq, t.param(w.wq));
  ag::Var k = ag::matmul(t, xkv, t.param(w.wk));
  ag::Var v = ag::matmul(t, xkv, t.param(w.wv));
  return ag::matmul(t, ag::attention(t, q, k, v, lay), t.param(w.wo));
}

struct Encoded {
  ag::Var out;  // batch * len rows
  int len = 0;
  std::vector<int> key_len;
};

inline Encoded encode(ag::Tape& t, ModelState& m, const std::vector<TokenSeq>& inputs) {
  require(!inputs.empty(), "encode: empty batch");
  const int d = m.cfg.dim;
  Encoded e;
  for (const auto& s : inputs) {
    require(!s.empty(), "encode: empty input sequence");
    e.len = std::max(e.len, std::min<int>(static_cast<int>(s.size()), m.cfg.max_input_len));
  }
  std::vector<std::pair<Param*, int>> rows;
  std::vector<int> pos;
  for (const auto& s : inputs) {
    const int n = std::min<int>(static_cast<int>(s.size()), m.cfg.max_input_len);
    e.key_len.push_back(n);
    for (int i = 0; i < e.len; ++i) {
      const int tok = i < n ? s[i] : kBosToken;
      if (tok < 0 || tok >= m.cfg.base_vocab) throw DataError("token id outside vocabulary");
      rows.emplace_back(&m.tok_emb, tok);
      pos.push_back(i);
    }
  }
  ag::Var x = ag::scale(t, ag::embedding(t, rows), std::sqrt(static_cast<double>(d)));
  x = ag::add(t, x, t.constant(position_rows(pos, d)));
  ag::AttentionLayout lay;
  lay.heads = m.cfg.heads;
  lay.q_len = e.len;
  lay.kv_len = e.len;
  lay.key_len = e.key_len;
  for (auto& b : m.enc) {
    ag::Var xn = ag::layer_norm(t, x, t.param(b.ln_gain), t.param(b.ln_bias));
    x = ag::add(t, x, attention_block(t, b.attn, xn, xn, lay));
    x = mixlora_forward(t, x, b.ffn).out;
  }
  e.out = ag::layer_norm(t, x, t.param(m.enc_norm_gain), t.param(m.enc_norm_bias));
  return e;
}

struct Decoded {
  ag::Var hidden;  // n_seq * P rows, after the final norm
  int P = 0;
  std::vector<ag::Var> router_in;  // per MixLoRA layer, FFN inputs
  std::vector<MixForward> mix;     // per MixLoRA layer
};

// Per-layer gate overrides for the MixLoRA layers (may be empty).
using GateOverrides = std::vector<const Mat*>;

// prefixes[s] holds the codes fed after BOS (length P-1); kv_of maps each
// sequence to its encoder batch item.
inline Decoded decode(ag::Tape& t, ModelState& m, const Encoded& enc,
                      const std::vector<std::vector<int>>& prefixes, const std::vector<int>& kv_of,
                      const GateOverrides& gates = {}) {
  require(!prefixes.empty(), "decode: no sequences");
  const int d = m.cfg.dim;
  Decoded out;
  out.P = static_cast<int>(prefixes.front().size()) + 1;
  require(out.P <= m.cfg.M, "decode: prefix longer than docid");
  std::vector<std::pair<Param*, int>> rows;
  std::vector<int> pos;
  for (const auto& pre : prefixes) {
    require(static_cast<int>(pre.size()) + 1 == out.P, "decode: ragged prefixes");
    rows.emplace_back(&m.tok_emb, kBosToken);
    pos.push_back(0);
    for (int p = 0; p < static_cast<int>(pre.size()); ++p) {
      if (pre[p] < 1 || pre[p] > m.cfg.K) throw DataError("docid code outside [1,K]");
      rows.emplace_back(&m.rq_emb, p * m.cfg.K + pre[p] - 1);
      pos.push_back(p + 1);
    }
  }
  ag::Var x = ag::scale(t, ag::embedding(t, rows), std::sqrt(static_cast<double>(d)));
  x = ag::add(t, x, t.constant(position_rows(pos, d)));

  ag::AttentionLayout self_lay;
  self_lay.heads = m.cfg.heads;
  self_lay.q_len = out.P;
  self_lay.kv_len = out.P;
  self_lay.causal = true;
  ag::AttentionLayout cross_lay;
  cross_lay.heads = m.cfg.heads;
  cross_lay.q_len = out.P;
  cross_lay.kv_len = enc.len;
  cross_lay.key_len = enc.key_len;
  cross_lay.kv_of = kv_of;

  int l = 0;
  for (auto& b : m.dec) {
    ag::Var xn = ag::layer_norm(t, x, t.param(b.ln1_gain), t.param(b.ln1_bias));
    x = ag::add(t, x, attention_block(t, b.self_attn, xn, xn, self_lay));
    xn = ag::layer_norm(t, x, t.param(b.ln2_gain), t.param(b.ln2_bias));
    x = ag::add(t, x, attention_block(t, b.cross_attn, xn, enc.out, cross_lay));
    if (b.is_mix) {
      MixOptions opt;
      if (l < static_cast<int>(gates.size())) opt.forced_gates = gates[l];
      out.router_in.push_back(x);
      MixForward mf = mixlora_forward(t, x, b.ffn, opt);
      x = mf.out;
      out.mix.push_back(std::move(mf));
      ++l;
    } else {
      x = mixlora_forward(t, x, b.ffn).out;
    }
  }
  out.hidden = ag::layer_norm(t, x, t.param(m.dec_norm_gain), t.param(m.dec_norm_bias));
  return out;
}

// Logits for decoder rows. With the mask on only the RQ region is scored and
// each row's segment is its codebook; otherwise the full W_RQ is scored.
struct Scored {
  ag::Var logits;
  std::vector<ag::Segment> segs;
  int offset = 0;  // column 0 of `logits` is this W_RQ index
};

// positions[r] is the 1-based docid position of row r.
inline Scored score_rows(ag::Tape& t, ModelState& m, ag::Var hidden, const std::vector<int>& positions) {
  Scored s;
  const int K = m.cfg.K;
  if (m.mask_enabled) {
    s.logits = ag::matmul_nt(t, hidden, t.param(m.rq_emb));
    s.offset = m.cfg.base_vocab;
    for (int p : positions) s.segs.push_back({(p - 1) * K, p * K});
  } else {
    s.logits = ag::matmul_nt(t, hidden, ag::vcat(t, {t.param(m.tok_emb), t.param(m.rq_emb)}));
    s.offset = 0;
    const int total = m.cfg.layout().total();
    for (std::size_t r = 0; r < positions.size(); ++r) s.segs.push_back({0, total});
  }
  return s;
}

// Column index in Scored::logits of the token for `code` at `position`.
inline int scored_column(const ModelState& m, const Scored& s, int position, int code) {
  return m.cfg.layout().token_of(position, code) - s.offset;
}

struct TeacherForced {
  Encoded enc;
  Decoded dec;
  Scored scored;
  std::vector<int> gold;  // column in scored.logits, one per row
};

// Rows are ordered sequence-major: row s*M + (p-1) predicts code p of sequence s.
inline TeacherForced teacher_forced(ag::Tape& t, ModelState& m, const std::vector<TokenSeq>& queries,
                                    const std::vector<std::vector<int>>& codes,
                                    const GateOverrides& gates = {}) {
  require(queries.size() == codes.size(), "teacher_forced: query/docid count mismatch");
  TeacherForced tf;
  tf.enc = encode(t, m, queries);
  std::vector<std::vector<int>> prefixes;
  std::vector<int> kv_of;
  std::vector<int> positions;
  for (std::size_t s = 0; s < codes.size(); ++s) {
    require(static_cast<int>(codes[s].size()) == m.cfg.M, "teacher_forced: docid length != M");
    prefixes.emplace_back(codes[s].begin(), codes[s].end() - 1);
    kv_of.push_back(static_cast<int>(s));
    for (int p = 1; p <= m.cfg.M; ++p) positions.push_back(p);
  }
  tf.dec = decode(t, m, tf.enc, prefixes, kv_of, gates);
  tf.scored = score_rows(t, m, tf.dec.hidden, positions);
  for (std::size_t s = 0; s < codes.size(); ++s)
    for (int p = 1; p <= m.cfg.M; ++p) {
      const int c = codes[s][p - 1];
      if (c < 1 || c > m.cfg.K) throw DataError("docid code outside [1,K]");
      tf.gold.push_back(scored_column(m, tf.scored, p, c));
    }
  return tf;
}

struct TeacherForcedResult {
  Mat logits;                  // M x |W_RQ|, position masks applied when enabled
  std::vector<Mat> router_in;  // per MixLoRA layer, M x dim
};

inline TeacherForcedResult forward_teacher_forced(const TokenSeq& query, const DocId& docid,
                                                  ModelState& m) {
  ag::Tape t(false);
  TeacherForced tf = teacher_forced(t, m, {query}, {docid.codes});
  TeacherForcedResult r;
  const VocabLayout lay = m.cfg.layout();
  const Mat& z = t.value(tf.scored.logits);
  r.logits = Mat::Constant(m.cfg.M, lay.total(), kMaskedLogit);
  if (m.mask_enabled) {
    for (int p = 1; p <= m.cfg.M; ++p) {
      const int off = lay.segment_offset(p);
      r.logits.row(p - 1).segment(off, m.cfg.K) = z.row(p - 1).segment((p - 1) * m.cfg.K, m.cfg.K);
    }
  } else {
    r.logits = z;
  }
  for (ag::Var v : tf.dec.router_in) r.router_in.push_back(t.value(v));
  return r;
}

// Decoder output at BOS after the final norm; the dense document embedding
// used to build RQ codebooks.
inline Mat embed_documents(ModelState& m, const std::vector<TokenSeq>& docs, int batch = 64) {
  Mat out(docs.size(), m.cfg.dim);
  for (std::size_t start = 0; start < docs.size(); start += batch) {
    const std::size_t end = std::min(docs.size(), start + batch);
    std::vector<TokenSeq> part(docs.begin() + start, docs.begin() + end);
    ag::Tape t(false);
    Encoded e = encode(t, m, part);
    std::vector<std::vector<int>> prefixes(part.size());
    std::vector<int> kv_of(part.size());
    for (std::size_t i = 0; i < part.size(); ++i) kv_of[i] = static_cast<int>(i);
    Decoded d = decode(t, m, e, prefixes, kv_of);
    out.middleRows(start, end - start) = t.value(d.hidden);
  }
  return out;
}

inline RowVec embed_document(ModelState& m, const TokenSeq& doc) {
  return embed_documents(m, {doc}).row(0);
}

// Copies RQ centroids into the code rows of W_RQ. Rows are stored scaled by
// 1/sqrt(dim) so a code token's input embedding equals its centroid.
inline void load_rq_rows(ModelState& m, const RQCodebooks& cb) {
  require(cb.M == m.cfg.M && cb.K == m.cfg.K && cb.dim == m.cfg.dim,
          "load_rq_rows: codebook shape does not match the model");
  const double s = 1.0 / std::sqrt(static_cast<double>(m.cfg.dim));
  for (int p = 0; p < cb.M; ++p) m.rq_emb.value.middleRows(p * cb.K, cb.K) = cb.centroids[p] * s;
}

}  // namespace mixdsi

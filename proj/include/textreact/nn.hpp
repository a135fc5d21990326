#pragma once

// Transformer encoder/decoder stacks (pre-norm, GELU feed-forward, learned
// positions), the Adam optimizer with warmup/decay schedule, binary
// checkpoint IO, and finite-difference gradient checking.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "textreact/tensor.hpp"

namespace textreact::nn {

struct TransformerConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 128;
  int max_len = 256;
  int vocab_size = 0;
  double dropout_rate = 0.0;

  void validate() const {
    if (d_model % n_heads != 0)
      throw NnError(NnErrorKind::ShapeMismatch, "d_model must be divisible by n_heads");
  }
};

namespace detail {

template <typename T>
void init_normal(Node<T>* n, Rng& rng, double stddev) {
  for (auto& v : n->val) v = static_cast<T>(rng.normal() * stddev);
}
template <typename T>
void init_zero(Node<T>* n) {
  std::fill(n->val.begin(), n->val.end(), T(0));
}
template <typename T>
void init_one(Node<T>* n) {
  std::fill(n->val.begin(), n->val.end(), T(1));
}

constexpr double kInitStd = 0.02;
constexpr double kMaskNegInf = -1e30;

}  // namespace detail

template <typename T>
Node<T>* linear(Tape<T>& tape, Node<T>* x, Node<T>* w, Node<T>* b) {
  return ops::add_rowwise(tape, ops::matmul(tape, x, w), b);
}

// ----------------------------------------------------------------- stack

// Shared pre-norm transformer stack. Encoder mode: bidirectional
// self-attention. Decoder mode: causal self-attention plus cross-attention
// over the memory (skipped when the memory has zero rows).
template <typename T>
struct TransformerStack {
  struct Layer {
    Node<T>*ln1_g, *ln1_b;
    Node<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    // cross-attention (decoder only)
    Node<T>*lnx_g, *lnx_b;
    Node<T>*xwq, *xbq, *xwk, *xbk, *xwv, *xbv, *xwo, *xbo;
    Node<T>*ln2_g, *ln2_b;
    Node<T>*w1, *b1, *w2, *b2;
  };

  TransformerConfig cfg;
  bool is_decoder = false;
  std::vector<Layer> layers;
  Node<T>*lnf_g = nullptr, *lnf_b = nullptr;

  void init(Tape<T>& tape, const std::string& prefix, const TransformerConfig& config,
            bool decoder, Rng& rng) {
    cfg = config;
    cfg.validate();
    is_decoder = decoder;
    const int d = cfg.d_model;
    layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l);
      Layer& ly = layers[l];
      ly.ln1_g = tape.param(p + ".ln1.g", 1, d);
      ly.ln1_b = tape.param(p + ".ln1.b", 1, d);
      detail::init_one(ly.ln1_g);
      ly.wq = tape.param(p + ".attn.wq", d, d);
      ly.bq = tape.param(p + ".attn.bq", 1, d);
      ly.wk = tape.param(p + ".attn.wk", d, d);
      ly.bk = tape.param(p + ".attn.bk", 1, d);
      ly.wv = tape.param(p + ".attn.wv", d, d);
      ly.bv = tape.param(p + ".attn.bv", 1, d);
      ly.wo = tape.param(p + ".attn.wo", d, d);
      ly.bo = tape.param(p + ".attn.bo", 1, d);
      for (auto* w : {ly.wq, ly.wk, ly.wv, ly.wo}) detail::init_normal(w, rng, detail::kInitStd);
      if (is_decoder) {
        ly.lnx_g = tape.param(p + ".lnx.g", 1, d);
        ly.lnx_b = tape.param(p + ".lnx.b", 1, d);
        detail::init_one(ly.lnx_g);
        ly.xwq = tape.param(p + ".xattn.wq", d, d);
        ly.xbq = tape.param(p + ".xattn.bq", 1, d);
        ly.xwk = tape.param(p + ".xattn.wk", d, d);
        ly.xbk = tape.param(p + ".xattn.bk", 1, d);
        ly.xwv = tape.param(p + ".xattn.wv", d, d);
        ly.xbv = tape.param(p + ".xattn.bv", 1, d);
        ly.xwo = tape.param(p + ".xattn.wo", d, d);
        ly.xbo = tape.param(p + ".xattn.bo", 1, d);
        for (auto* w : {ly.xwq, ly.xwk, ly.xwv, ly.xwo})
          detail::init_normal(w, rng, detail::kInitStd);
      }
      ly.ln2_g = tape.param(p + ".ln2.g", 1, d);
      ly.ln2_b = tape.param(p + ".ln2.b", 1, d);
      detail::init_one(ly.ln2_g);
      ly.w1 = tape.param(p + ".ffn.w1", d, cfg.d_ff);
      ly.b1 = tape.param(p + ".ffn.b1", 1, cfg.d_ff);
      ly.w2 = tape.param(p + ".ffn.w2", cfg.d_ff, d);
      ly.b2 = tape.param(p + ".ffn.b2", 1, d);
      detail::init_normal(ly.w1, rng, detail::kInitStd);
      detail::init_normal(ly.w2, rng, detail::kInitStd);
    }
    lnf_g = tape.param(prefix + ".lnf.g", 1, d);
    lnf_b = tape.param(prefix + ".lnf.b", 1, d);
    detail::init_one(lnf_g);
  }

  // q: Lq x d (already normalized input); kv: Lk x d
  Node<T>* attention(Tape<T>& tape, Node<T>* q_in, Node<T>* kv_in,
                     const std::vector<int>* key_valid, bool causal, Node<T>* wq,
                     Node<T>* bq, Node<T>* wk, Node<T>* bk, Node<T>* wv, Node<T>* bv,
                     Node<T>* wo, Node<T>* bo) const {
    const int d = cfg.d_model;
    const int dh = d / cfg.n_heads;
    const int Lq = q_in->rows;
    const int Lk = kv_in->rows;
    Node<T>* q = linear(tape, q_in, wq, bq);
    Node<T>* k = linear(tape, kv_in, wk, bk);
    Node<T>* v = linear(tape, kv_in, wv, bv);
    // additive mask shared by every head
    std::vector<T> mask;
    const bool need_mask = causal || (key_valid != nullptr);
    if (need_mask) {
      mask.assign(static_cast<std::size_t>(Lq) * Lk, T(0));
      for (int i = 0; i < Lq; ++i)
        for (int j = 0; j < Lk; ++j) {
          bool blocked = causal && j > i;
          if (key_valid && !(*key_valid)[j]) blocked = true;
          if (blocked)
            mask[static_cast<std::size_t>(i) * Lk + j] = static_cast<T>(detail::kMaskNegInf);
        }
    }
    std::vector<Node<T>*> heads;
    heads.reserve(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Node<T>* qh = ops::slice_cols(tape, q, h * dh, dh);
      Node<T>* kh = ops::slice_cols(tape, k, h * dh, dh);
      Node<T>* vh = ops::slice_cols(tape, v, h * dh, dh);
      Node<T>* scores =
          ops::scale(tape, ops::matmul_nt(tape, qh, kh), 1.0 / std::sqrt(double(dh)));
      Node<T>* attn = ops::softmax_rows(tape, scores, need_mask ? &mask : nullptr);
      heads.push_back(ops::matmul(tape, attn, vh));
    }
    Node<T>* merged = cfg.n_heads == 1 ? heads[0] : ops::concat_cols(tape, heads);
    return linear(tape, merged, wo, bo);
  }

  Node<T>* forward(Tape<T>& tape, Node<T>* x, const std::vector<int>* self_valid,
                   Node<T>* memory = nullptr,
                   const std::vector<int>* memory_valid = nullptr,
                   Rng* dropout_rng = nullptr) const {
    const double rate = cfg.dropout_rate;
    for (const Layer& ly : layers) {
      Node<T>* h = ops::layer_norm(tape, x, ly.ln1_g, ly.ln1_b);
      Node<T>* a = attention(tape, h, h, self_valid, is_decoder, ly.wq, ly.bq, ly.wk,
                             ly.bk, ly.wv, ly.bv, ly.wo, ly.bo);
      x = ops::add(tape, x, ops::dropout(tape, a, rate, dropout_rng));
      if (is_decoder && memory != nullptr && memory->rows > 0) {
        Node<T>* hx = ops::layer_norm(tape, x, ly.lnx_g, ly.lnx_b);
        Node<T>* ax = attention(tape, hx, memory, memory_valid, false, ly.xwq, ly.xbq,
                                ly.xwk, ly.xbk, ly.xwv, ly.xbv, ly.xwo, ly.xbo);
        x = ops::add(tape, x, ops::dropout(tape, ax, rate, dropout_rng));
      }
      Node<T>* h2 = ops::layer_norm(tape, x, ly.ln2_g, ly.ln2_b);
      Node<T>* f = linear(tape, ops::gelu(tape, linear(tape, h2, ly.w1, ly.b1)), ly.w2,
                          ly.b2);
      x = ops::add(tape, x, ops::dropout(tape, f, rate, dropout_rng));
    }
    return ops::layer_norm(tape, x, lnf_g, lnf_b);
  }
};

// --------------------------------------------------------------- encoder

template <typename T>
struct Encoder {
  TransformerConfig cfg;
  Node<T>* tok_emb = nullptr;
  Node<T>* pos_emb = nullptr;
  TransformerStack<T> stack;

  void init(Tape<T>& tape, const std::string& prefix, const TransformerConfig& config,
            Rng& rng) {
    cfg = config;
    cfg.validate();
    tok_emb = tape.param(prefix + ".tok_emb", cfg.vocab_size, cfg.d_model);
    pos_emb = tape.param(prefix + ".pos_emb", cfg.max_len, cfg.d_model);
    detail::init_normal(tok_emb, rng, detail::kInitStd);
    detail::init_normal(pos_emb, rng, detail::kInitStd);
    stack.init(tape, prefix, cfg, /*decoder=*/false, rng);
  }

  // hidden states, one row per position; pooled state is row 0
  Node<T>* forward(Tape<T>& tape, const std::vector<int>& ids,
                   const std::vector<int>* valid = nullptr,
                   Rng* dropout_rng = nullptr) const {
    if (ids.empty()) throw NnError(NnErrorKind::EmptyInput, "encoder: empty input");
    if (static_cast<int>(ids.size()) > cfg.max_len)
      throw NnError(NnErrorKind::SequenceTooLong,
                    "encoder: input length " + std::to_string(ids.size()) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
    Node<T>* x = ops::add(tape, ops::embedding(tape, tok_emb, ids),
                          ops::embedding(tape, pos_emb, pos));
    return stack.forward(tape, x, valid, nullptr, nullptr, dropout_rng);
  }

  Node<T>* pooled(Tape<T>& tape, Node<T>* hidden) const {
    return ops::slice_rows(tape, hidden, 0, 1);
  }
};

// -------------------------------------------------------- token decoder

template <typename T>
struct TokenDecoder {
  TransformerConfig cfg;
  Node<T>* tok_emb = nullptr;
  Node<T>* pos_emb = nullptr;
  TransformerStack<T> stack;
  Node<T>*w_out = nullptr, *b_out = nullptr;

  void init(Tape<T>& tape, const std::string& prefix, const TransformerConfig& config,
            Rng& rng) {
    cfg = config;
    cfg.validate();
    tok_emb = tape.param(prefix + ".tok_emb", cfg.vocab_size, cfg.d_model);
    pos_emb = tape.param(prefix + ".pos_emb", cfg.max_len, cfg.d_model);
    detail::init_normal(tok_emb, rng, detail::kInitStd);
    detail::init_normal(pos_emb, rng, detail::kInitStd);
    stack.init(tape, prefix, cfg, /*decoder=*/true, rng);
    w_out = tape.param(prefix + ".out.w", cfg.d_model, cfg.vocab_size);
    b_out = tape.param(prefix + ".out.b", 1, cfg.vocab_size);
    detail::init_normal(w_out, rng, detail::kInitStd);
  }

  // logits for each prefix position, T x vocab
  Node<T>* forward(Tape<T>& tape, const std::vector<int>& prefix_ids, Node<T>* memory,
                   const std::vector<int>* memory_valid = nullptr,
                   Rng* dropout_rng = nullptr) const {
    if (prefix_ids.empty())
      throw NnError(NnErrorKind::EmptyInput, "decoder: empty prefix");
    if (static_cast<int>(prefix_ids.size()) > cfg.max_len)
      throw NnError(NnErrorKind::SequenceTooLong, "decoder: prefix exceeds max_len");
    std::vector<int> pos(prefix_ids.size());
    for (std::size_t i = 0; i < prefix_ids.size(); ++i) pos[i] = static_cast<int>(i);
    Node<T>* x = ops::add(tape, ops::embedding(tape, tok_emb, prefix_ids),
                          ops::embedding(tape, pos_emb, pos));
    Node<T>* h = stack.forward(tape, x, nullptr, memory, memory_valid, dropout_rng);
    return linear(tape, h, w_out, b_out);
  }
};

// ------------------------------------------------------------------ adam

enum class DecayKind { linear, cosine };

struct ScheduleConfig {
  double base_lr = 1e-4;
  double warmup_fraction = 0.1;
  DecayKind decay = DecayKind::linear;
  long total_steps = 0;
};

inline double schedule_lr(const ScheduleConfig& s, long step) {
  if (s.total_steps <= 0) return s.base_lr;
  const long warmup = std::lround(s.warmup_fraction * static_cast<double>(s.total_steps));
  if (warmup > 0 && step <= warmup)
    return s.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= s.total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(s.total_steps - warmup);
  if (s.decay == DecayKind::linear) return s.base_lr * (1.0 - progress);
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ScheduleConfig schedule;
  long step_count = 0;

  explicit Adam(ScheduleConfig sched = {}) : schedule(sched) {}

  // bias-corrected Adam over grads currently held in the params
  void step(const std::vector<Node<T>*>& params) {
    ++step_count;
    const double lr = schedule_lr(schedule, step_count);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (Node<T>* p : params) {
      if (!p->requires_grad) continue;
      auto& st = moments_[p];
      if (st.m.size() != p->size()) {
        st.m.assign(p->size(), T(0));
        st.v.assign(p->size(), T(0));
      }
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = static_cast<double>(p->grad[i]);
        st.m[i] = static_cast<T>(beta1 * st.m[i] + (1.0 - beta1) * g);
        st.v[i] = static_cast<T>(beta2 * st.v[i] + (1.0 - beta2) * g * g);
        const double mhat = static_cast<double>(st.m[i]) / bc1;
        const double vhat = static_cast<double>(st.v[i]) / bc2;
        p->val[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  std::map<Node<T>*, Moments> moments_;
};

// ------------------------------------------------------------ checkpoint

// Little-endian binary: magic "TXRN", u32 version, u32 config entry count,
// entries of (u32 len, bytes, i64 value), u32 param count, then per param
// (u32 name len, name, u32 rank, u64 dims..., f32 data).
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_i64(std::ostream& os, std::int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline std::int64_t read_i64(std::istream& is) {
  std::int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, std::int64_t>>& config,
                     const std::vector<Node<T>*>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open for write: " + path);
  os.write("TXRN", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(config.size()));
  for (const auto& [k, v] : config) {
    detail::write_str(os, k);
    detail::write_i64(os, v);
  }
  detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const Node<T>* p : params) {
    detail::write_str(os, p->name);
    if (p->rows == 1) {
      detail::write_u32(os, 1);
      detail::write_u64(os, static_cast<std::uint64_t>(p->cols));
    } else {
      detail::write_u32(os, 2);
      detail::write_u64(os, static_cast<std::uint64_t>(p->rows));
      detail::write_u64(os, static_cast<std::uint64_t>(p->cols));
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      const float f = static_cast<float>(p->val[i]);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!os) throw CheckpointError("write failed: " + path);
}

template <typename T>
std::vector<std::pair<std::string, std::int64_t>> load_checkpoint(
    const std::string& path, const std::vector<Node<T>*>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "TXRN", 4) != 0)
    throw CheckpointError("bad checkpoint magic: " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != 1) throw CheckpointError("unsupported checkpoint version");
  std::vector<std::pair<std::string, std::int64_t>> config;
  const std::uint32_t nconf = detail::read_u32(is);
  for (std::uint32_t i = 0; i < nconf; ++i) {
    std::string k = detail::read_str(is);
    std::int64_t v = detail::read_i64(is);
    config.emplace_back(std::move(k), v);
  }
  std::unordered_map<std::string, Node<T>*> by_name;
  for (Node<T>* p : params) by_name[p->name] = p;
  const std::uint32_t nparams = detail::read_u32(is);
  for (std::uint32_t i = 0; i < nparams; ++i) {
    const std::string name = detail::read_str(is);
    const std::uint32_t rank = detail::read_u32(is);
    std::uint64_t rows = 1, cols = 1;
    if (rank == 1) {
      cols = detail::read_u64(is);
    } else if (rank == 2) {
      rows = detail::read_u64(is);
      cols = detail::read_u64(is);
    } else {
      throw CheckpointError("unsupported rank in checkpoint");
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unknown parameter: " + name);
    Node<T>* p = it->second;
    if (static_cast<std::uint64_t>(p->rows) != rows ||
        static_cast<std::uint64_t>(p->cols) != cols)
      throw CheckpointError("shape mismatch for parameter: " + name);
    for (std::size_t j = 0; j < p->size(); ++j) {
      float f = 0;
      is.read(reinterpret_cast<char*>(&f), 4);
      p->val[j] = static_cast<T>(f);
    }
  }
  if (!is) throw CheckpointError("truncated checkpoint: " + path);
  return config;
}

// ------------------------------------------------------------ grad check

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int n_checked = 0;
};

// Central differences on randomly sampled parameter coordinates against a
// loss-builder that reconstructs the forward graph. Only meaningful with
// T = double at the stated 1e-6 tolerance.
template <typename T>
GradCheckReport grad_check(Tape<T>& tape, const std::function<Node<T>*()>& build_loss,
                           int n_samples, Rng& rng, double h = 3e-4) {
  tape.clear_temps();
  Node<T>* loss = build_loss();
  tape.backward(loss);
  // snapshot analytic grads
  std::vector<Node<T>*> params;
  for (Node<T>* p : tape.params())
    if (p->requires_grad) params.push_back(p);
  std::map<Node<T>*, std::vector<T>> analytic;
  for (Node<T>* p : params) analytic[p] = p->grad;

  std::size_t total_coords = 0;
  for (Node<T>* p : params) total_coords += p->size();
  if (total_coords == 0) return {};

  GradCheckReport report;
  for (int s = 0; s < n_samples; ++s) {
    std::size_t flat = static_cast<std::size_t>(rng.uniform_int(total_coords));
    Node<T>* target = nullptr;
    for (Node<T>* p : params) {
      if (flat < p->size()) {
        target = p;
        break;
      }
      flat -= p->size();
    }
    const T saved = target->val[flat];
    auto eval_at = [&](double x) {
      target->val[flat] = static_cast<T>(x);
      tape.clear_temps();
      return static_cast<double>(build_loss()->val[0]);
    };
    // fourth-order central difference
    const double f1 = eval_at(saved + h);
    const double f2 = eval_at(saved - h);
    const double f3 = eval_at(saved + 2.0 * h);
    const double f4 = eval_at(saved - 2.0 * h);
    target->val[flat] = saved;
    const double numeric = (8.0 * (f1 - f2) - (f3 - f4)) / (12.0 * h);
    const double a = static_cast<double>(analytic[target][flat]);
    // near-zero gradients are compared on an absolute scale: with a loss
    // of order one, coordinates below 1e-5 are indistinguishable from
    // finite-difference noise under any relative measure
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5});
    ++report.n_checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = target->name + "[" + std::to_string(flat) + "]";
    }
  }
  tape.clear_temps();
  return report;
}

}  // namespace textreact::nn

#pragma once

// Text-augmented predictor: neighbor sampling, input assembly, span-mask
// MLM, condition/retrosynthesis heads, beam search, and training.

#include <functional>
#include <map>
#include <optional>

#include "textreact/retriever.hpp"

namespace textreact::predictor {

using data::ConditionStrings;
using data::Corpus;
using data::Dataset;
using data::ReactionRecord;
using data::Task;
using data::Vocabs;

enum class PredErrorKind {
  PoolTooSmall,
  SmilesAloneTooLong,
  SlotVocabMismatch,
  TargetTooLong,
  CenterOutOfRange,
  NoNeighborsInEnsembleMode,
  IndexEncoderDimMismatch,
  MissingLabel,
  InvalidParams,
};

struct PredError : std::runtime_error {
  PredErrorKind kind;
  PredError(PredErrorKind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

// ------------------------------------------------------ neighbor sampling

struct NeighborPolicy {
  double alpha = 0.8;
  int K = 10;
  int k = 3;
};

enum class Mode { train, infer };

// instrumentation for the sampling-policy invariants
struct SampleTrace {
  bool random_branch = false;
  bool consulted_gold = false;
};

inline std::vector<std::string> sample_neighbors(
    const NeighborPolicy& policy, Mode mode, const std::optional<std::string>& gold_id,
    const std::vector<std::string>& ranked_ids, Rng& rng,
    SampleTrace* trace = nullptr) {
  if (policy.k < 0 || policy.k > policy.K)
    throw PredError(PredErrorKind::InvalidParams, "neighbor policy: need 0 <= k <= K");
  const std::size_t k = static_cast<std::size_t>(policy.k);
  if (k == 0) return {};
  if (mode == Mode::infer) {
    if (ranked_ids.size() < k)
      throw PredError(PredErrorKind::PoolTooSmall, "infer: fewer than k candidates");
    return {ranked_ids.begin(), ranked_ids.begin() + static_cast<long>(k)};
  }
  if (!gold_id)
    throw PredError(PredErrorKind::MissingLabel, "train sampling requires gold id");
  if (rng.bernoulli(policy.alpha)) {
    // k random picks from the top-K pool; the gold id is never consulted
    if (trace) trace->random_branch = true;
    const std::size_t pool =
        std::min(ranked_ids.size(), static_cast<std::size_t>(policy.K));
    if (pool < k)
      throw PredError(PredErrorKind::PoolTooSmall, "train: pool smaller than k");
    std::vector<std::string> out;
    for (std::size_t j : rng.sample_without_replacement(pool, k))
      out.push_back(ranked_ids[j]);
    return out;
  }
  if (trace) trace->consulted_gold = true;
  std::vector<std::string> out = {*gold_id};
  for (const auto& id : ranked_ids) {
    if (out.size() >= k) break;
    if (id != *gold_id) out.push_back(id);
  }
  if (out.size() < k)
    throw PredError(PredErrorKind::PoolTooSmall, "train: not enough non-gold ids");
  return out;
}

// --------------------------------------------------------------- assembly

struct PredictorInput {
  std::vector<int> ids;
  // -1 for [CLS]/[SEP]/[NBj], 0 for SMILES positions, 1+j for neighbor j
  std::vector<int> segment;
  std::vector<std::string> source_text_ids;
};

// [CLS] SMILES [SEP] [NB0] TEXT0 [NB1] TEXT1 ... [SEP], truncated from the
// right with the final [SEP] preserved
inline PredictorInput assemble_input(const std::vector<int>& smiles_ids,
                                     const std::vector<std::vector<int>>& texts,
                                     int max_len) {
  if (static_cast<int>(smiles_ids.size()) + 3 > max_len)
    throw PredError(PredErrorKind::SmilesAloneTooLong,
                    "assemble_input: SMILES alone does not fit max_len");
  if (texts.size() > static_cast<std::size_t>(Vocabs::kNumNb))
    throw PredError(PredErrorKind::InvalidParams, "assemble_input: too many neighbors");
  PredictorInput in;
  in.ids.push_back(Vocabs::kCls);
  in.segment.push_back(-1);
  for (int id : smiles_ids) {
    in.ids.push_back(id);
    in.segment.push_back(0);
  }
  in.ids.push_back(Vocabs::kSep);
  in.segment.push_back(-1);
  for (std::size_t j = 0; j < texts.size(); ++j) {
    in.ids.push_back(Vocabs::kNb0 + static_cast<int>(j));
    in.segment.push_back(-1);
    for (int id : texts[j]) {
      in.ids.push_back(id);
      in.segment.push_back(1 + static_cast<int>(j));
    }
  }
  if (static_cast<int>(in.ids.size()) + 1 > max_len) {
    in.ids.resize(static_cast<std::size_t>(max_len - 1));
    in.segment.resize(static_cast<std::size_t>(max_len - 1));
  }
  in.ids.push_back(Vocabs::kSep);
  in.segment.push_back(-1);
  return in;
}

// ---------------------------------------------------------------- masking

struct MaskingConfig {
  double poisson_lambda = 3.0;
  double target_ratio = 0.15;
  int max_span = 10;
  int mask_id = Vocabs::kMask;
};

inline constexpr int kMlmIgnore = -1;

struct MaskedInput {
  std::vector<int> ids;     // with [MASK] substitutions
  std::vector<int> labels;  // original ids at masked positions, else kMlmIgnore
  int n_masked = 0;
};

// Poisson-length spans over maskable positions (segment >= 0), confined to
// one segment, until the masked count reaches target_ratio of maskables.
inline MaskedInput mask_spans(const PredictorInput& in, const MaskingConfig& cfg,
                              Rng& rng) {
  MaskedInput out;
  out.ids = in.ids;
  out.labels.assign(in.ids.size(), kMlmIgnore);
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < in.ids.size(); ++i)
    if (in.segment[i] >= 0) maskable.push_back(i);
  if (maskable.empty()) return out;
  const int target = static_cast<int>(
      std::ceil(cfg.target_ratio * static_cast<double>(maskable.size())));
  std::vector<bool> masked(in.ids.size(), false);
  while (out.n_masked < target) {
    const int span =
        std::clamp(rng.poisson(cfg.poisson_lambda), 1, cfg.max_span);
    // uniform start among not-yet-masked maskable positions so each
    // iteration makes progress
    std::vector<std::size_t> open;
    for (std::size_t p : maskable)
      if (!masked[p]) open.push_back(p);
    const std::size_t start = open[rng.uniform_int(open.size())];
    const int seg = in.segment[start];
    for (std::size_t p = start; p < in.ids.size() && in.segment[p] == seg &&
                                static_cast<long>(p - start) < span;
         ++p) {
      if (!masked[p]) {
        masked[p] = true;
        out.labels[p] = in.ids[p];
        out.ids[p] = cfg.mask_id;
        ++out.n_masked;
      }
    }
  }
  return out;
}

// ------------------------------------------------------------------ model

enum class HeadKind { rcr, retro_tf, retro_tb };

inline constexpr int kRcrSteps = 5;

template <typename T>
struct ConditionDecoder {
  nn::TransformerConfig cfg;
  nn::Node<T>* start = nullptr;    // learned step-0 input
  nn::Node<T>* pos_emb = nullptr;  // kRcrSteps x d
  std::array<nn::Node<T>*, kRcrSteps> slot_emb{};   // slot vocab x d
  std::array<nn::Node<T>*, kRcrSteps> out_w{};      // d x slot vocab
  std::array<nn::Node<T>*, kRcrSteps> out_b{};
  nn::TransformerStack<T> stack;
  std::array<int, kRcrSteps> slot_sizes{};

  void init(nn::Tape<T>& tape, const std::string& prefix,
            const nn::TransformerConfig& config,
            const std::array<int, kRcrSteps>& sizes, Rng& rng) {
    cfg = config;
    cfg.max_len = kRcrSteps;
    slot_sizes = sizes;
    start = tape.param(prefix + ".start", 1, cfg.d_model);
    pos_emb = tape.param(prefix + ".pos_emb", kRcrSteps, cfg.d_model);
    nn::detail::init_normal(start, rng, nn::detail::kInitStd);
    nn::detail::init_normal(pos_emb, rng, nn::detail::kInitStd);
    for (int s = 0; s < kRcrSteps; ++s) {
      const std::string p = prefix + ".slot" + std::to_string(s);
      slot_emb[s] = tape.param(p + ".emb", sizes[s], cfg.d_model);
      out_w[s] = tape.param(p + ".out.w", cfg.d_model, sizes[s]);
      out_b[s] = tape.param(p + ".out.b", 1, sizes[s]);
      nn::detail::init_normal(slot_emb[s], rng, nn::detail::kInitStd);
      nn::detail::init_normal(out_w[s], rng, nn::detail::kInitStd);
    }
    stack.init(tape, prefix, cfg, /*decoder=*/true, rng);
  }

  // teacher-forced hidden states for prefix y[0..t-1]; output rows 0..t
  nn::Node<T>* forward(nn::Tape<T>& tape, const std::vector<int>& prefix,
                       nn::Node<T>* memory) const {
    if (prefix.size() >= kRcrSteps)
      throw PredError(PredErrorKind::SlotVocabMismatch,
                      "condition decoder: prefix too long");
    std::vector<nn::Node<T>*> rows;
    rows.push_back(nn::ops::add(tape, start,
                                nn::ops::slice_rows(tape, pos_emb, 0, 1)));
    for (std::size_t t = 0; t < prefix.size(); ++t) {
      if (prefix[t] < 0 || prefix[t] >= slot_sizes[t])
        throw PredError(PredErrorKind::SlotVocabMismatch,
                        "condition decoder: slot id out of range");
      nn::Node<T>* e = nn::ops::embedding(tape, slot_emb[t], {prefix[t]});
      rows.push_back(nn::ops::add(
          tape, e,
          nn::ops::slice_rows(tape, pos_emb, static_cast<int>(t) + 1, 1)));
    }
    nn::Node<T>* x =
        rows.size() == 1 ? rows[0] : nn::ops::concat_rows(tape, rows);
    return stack.forward(tape, x, nullptr, memory, nullptr, nullptr);
  }

  // logits for step t given hidden row t
  nn::Node<T>* step_logits(nn::Tape<T>& tape, nn::Node<T>* hidden, int t) const {
    nn::Node<T>* h = nn::ops::slice_rows(tape, hidden, t, 1);
    return nn::linear(tape, h, out_w[t], out_b[t]);
  }
};

template <typename T>
struct PredictorModel {
  nn::TransformerConfig cfg;
  HeadKind head = HeadKind::rcr;
  nn::Encoder<T> encoder;
  nn::Node<T>*mlm_w = nullptr, *mlm_b = nullptr;
  ConditionDecoder<T> cond_dec;      // rcr
  nn::TokenDecoder<T> tf_dec;        // retro_tf
  nn::Node<T>*atom_w = nullptr, *atom_b = nullptr;  // retro_tb, d -> C
  nn::Node<T>*bond_w = nullptr, *bond_b = nullptr;  // retro_tb, 2d -> C
  int n_template_classes = 0;        // templates + NO_TEMPLATE

  void init(nn::Tape<T>& tape, const nn::TransformerConfig& config, HeadKind h,
            const std::array<int, kRcrSteps>& slot_sizes, int n_templates,
            Rng& rng) {
    cfg = config;
    head = h;
    encoder.init(tape, "enc", cfg, rng);
    mlm_w = tape.param("mlm.w", cfg.d_model, cfg.vocab_size);
    mlm_b = tape.param("mlm.b", 1, cfg.vocab_size);
    nn::detail::init_normal(mlm_w, rng, nn::detail::kInitStd);
    if (head == HeadKind::rcr) {
      cond_dec.init(tape, "cond", cfg, slot_sizes, rng);
    } else if (head == HeadKind::retro_tf) {
      tf_dec.init(tape, "dec", cfg, rng);
    } else {
      n_template_classes = n_templates + 1;  // last class = NO_TEMPLATE
      atom_w = tape.param("tb.atom.w", cfg.d_model, n_template_classes);
      atom_b = tape.param("tb.atom.b", 1, n_template_classes);
      bond_w = tape.param("tb.bond.w", 2 * cfg.d_model, n_template_classes);
      bond_b = tape.param("tb.bond.b", 1, n_template_classes);
      nn::detail::init_normal(atom_w, rng, nn::detail::kInitStd);
      nn::detail::init_normal(bond_w, rng, nn::detail::kInitStd);
    }
  }

  int no_template_id() const { return n_template_classes - 1; }
};

// ----------------------------------------------------------------- losses

template <typename T>
nn::Node<T>* mlm_loss(nn::Tape<T>& tape, const PredictorModel<T>& model,
                      nn::Node<T>* hidden, const std::vector<int>& labels) {
  nn::Node<T>* logits = nn::linear(tape, hidden, model.mlm_w, model.mlm_b);
  return nn::ops::cross_entropy(tape, logits, labels, kMlmIgnore,
                                nn::ops::Reduction::mean);
}

// mean NLL across the 5 teacher-forced steps
template <typename T>
nn::Node<T>* rcr_forward_loss(nn::Tape<T>& tape, const PredictorModel<T>& model,
                              nn::Node<T>* memory,
                              const std::array<int, kRcrSteps>& slots) {
  std::vector<int> prefix(slots.begin(), slots.end() - 1);
  nn::Node<T>* hidden = model.cond_dec.forward(tape, prefix, memory);
  nn::Node<T>* total = nullptr;
  for (int t = 0; t < kRcrSteps; ++t) {
    nn::Node<T>* logits = model.cond_dec.step_logits(tape, hidden, t);
    nn::Node<T>* nll = nn::ops::cross_entropy(
        tape, logits, {slots[static_cast<std::size_t>(t)]}, -1,
        nn::ops::Reduction::sum);
    total = total ? nn::ops::add(tape, total, nll) : nll;
  }
  return nn::ops::scale(tape, total, 1.0 / kRcrSteps);
}

// teacher-forced NLL over the token decoder; target ends with [EOS]
template <typename T>
nn::Node<T>* retro_tf_loss(nn::Tape<T>& tape, const PredictorModel<T>& model,
                           nn::Node<T>* memory, const std::vector<int>& target) {
  if (target.empty())
    throw PredError(PredErrorKind::MissingLabel, "retro_tf: empty target");
  if (static_cast<int>(target.size()) + 1 > model.tf_dec.cfg.max_len)
    throw PredError(PredErrorKind::TargetTooLong, "retro_tf: target too long");
  std::vector<int> prefix = {Vocabs::kCls};
  prefix.insert(prefix.end(), target.begin(), target.end() - 1);
  nn::Node<T>* logits = model.tf_dec.forward(tape, prefix, memory);
  return nn::ops::cross_entropy(tape, logits, target, -1, nn::ops::Reduction::mean);
}

// positions of the product's atom tokens inside an assembled input whose
// SMILES segment starts at position 1
inline std::vector<int> atom_token_positions(const std::string& product_smiles) {
  std::vector<int> pos;
  const auto toks = chem::tokenize_smiles(product_smiles);
  for (std::size_t i = 0; i < toks.size(); ++i)
    if (toks[i].kind == chem::TokenKind::atom)
      pos.push_back(static_cast<int>(i) + 1);
  return pos;
}

// atom head scores every atom, bond head every bond; the labeled center is
// trained toward its template id, every other center toward NO_TEMPLATE
template <typename T>
nn::Node<T>* retro_tb_loss(nn::Tape<T>& tape, const PredictorModel<T>& model,
                           nn::Node<T>* hidden, const chem::MolGraph& product,
                           const std::vector<int>& atom_positions, int template_id,
                           const data::RetroCenter& center) {
  const int n_atoms = static_cast<int>(product.atoms.size());
  const int n_bonds = static_cast<int>(product.bonds.size());
  if (static_cast<int>(atom_positions.size()) != n_atoms)
    throw PredError(PredErrorKind::CenterOutOfRange,
                    "retro_tb: atom position map does not match graph");
  if (template_id < 0 || template_id >= model.n_template_classes - 1)
    throw PredError(PredErrorKind::CenterOutOfRange, "retro_tb: template id range");
  if (center.atom_a < 0 || center.atom_a >= n_atoms ||
      (center.atom_b && (*center.atom_b < 0 || *center.atom_b >= n_atoms)))
    throw PredError(PredErrorKind::CenterOutOfRange, "retro_tb: center atom range");

  std::vector<nn::Node<T>*> atom_rows;
  for (int a = 0; a < n_atoms; ++a)
    atom_rows.push_back(nn::ops::slice_rows(tape, hidden, atom_positions[a], 1));
  nn::Node<T>* atom_h = atom_rows.size() == 1 ? atom_rows[0]
                                              : nn::ops::concat_rows(tape, atom_rows);
  nn::Node<T>* atom_logits = nn::linear(tape, atom_h, model.atom_w, model.atom_b);
  std::vector<int> atom_targets(static_cast<std::size_t>(n_atoms),
                                model.no_template_id());
  if (center.kind == data::RetroCenter::Kind::atom)
    atom_targets[static_cast<std::size_t>(center.atom_a)] = template_id;
  nn::Node<T>* loss = nn::ops::cross_entropy(tape, atom_logits, atom_targets, -1,
                                             nn::ops::Reduction::sum);

  if (n_bonds > 0) {
    std::vector<nn::Node<T>*> bond_rows;
    std::vector<int> bond_targets;
    for (const auto& b : product.bonds) {
      // lower-index atom first
      nn::Node<T>* pair = nn::ops::concat_cols(
          tape, {atom_rows[static_cast<std::size_t>(b.a)],
                 atom_rows[static_cast<std::size_t>(b.b)]});
      bond_rows.push_back(pair);
      const bool is_center = center.kind == data::RetroCenter::Kind::bond &&
                             ((b.a == center.atom_a && b.b == *center.atom_b) ||
                              (b.a == *center.atom_b && b.b == center.atom_a));
      bond_targets.push_back(is_center ? template_id : model.no_template_id());
    }
    nn::Node<T>* bond_h =
        bond_rows.size() == 1 ? bond_rows[0] : nn::ops::concat_rows(tape, bond_rows);
    nn::Node<T>* bond_logits = nn::linear(tape, bond_h, model.bond_w, model.bond_b);
    loss = nn::ops::add(tape, loss,
                        nn::ops::cross_entropy(tape, bond_logits, bond_targets, -1,
                                               nn::ops::Reduction::sum));
  }
  return nn::ops::scale(tape, loss, 1.0 / static_cast<double>(n_atoms + n_bonds));
}

template <typename T>
nn::Node<T>* total_loss(nn::Tape<T>& tape, nn::Node<T>* pred_loss, nn::Node<T>* mlm,
                        double lambda1) {
  if (lambda1 == 0.0 || mlm == nullptr) return pred_loss;
  return nn::ops::add(tape, pred_loss, nn::ops::scale(tape, mlm, lambda1));
}

// ------------------------------------------------------------ beam search

struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

// step_logprobs(prefix) -> log p over next-token vocabulary; eos_id < 0
// runs exactly max_steps steps (fixed-length decoding)
inline std::vector<Hypothesis> beam_search(
    const std::function<std::vector<double>(const std::vector<int>&)>& step_logprobs,
    int eos_id, int beam_width, int max_steps) {
  if (beam_width < 1)
    throw PredError(PredErrorKind::InvalidParams, "beam_search: beam_width >= 1");
  auto better = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  };
  std::vector<Hypothesis> beam = {{{}, 0.0, false}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < max_steps; ++step) {
    std::vector<Hypothesis> candidates;
    bool any_open = false;
    for (const Hypothesis& h : beam) {
      if (h.finished) {
        candidates.push_back(h);
        continue;
      }
      any_open = true;
      const std::vector<double> lp = step_logprobs(h.tokens);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        Hypothesis next = h;
        next.tokens.push_back(static_cast<int>(v));
        next.log_prob += lp[v];
        next.finished = eos_id >= 0 && static_cast<int>(v) == eos_id;
        candidates.push_back(std::move(next));
      }
    }
    if (!any_open) break;
    std::sort(candidates.begin(), candidates.end(), better);
    if (static_cast<int>(candidates.size()) > beam_width)
      candidates.resize(static_cast<std::size_t>(beam_width));
    beam = std::move(candidates);
  }
  for (Hypothesis& h : beam) finished.push_back(std::move(h));
  std::sort(finished.begin(), finished.end(), better);
  return finished;
}

// -------------------------------------------------------------- inference

struct PredictOptions {
  bool ensemble_separate = false;
  bool smiles_only = false;
  bool text_only = false;
  int beam_width = 10;
  int max_steps = 64;  // retro_tf cap
};

struct Prediction {
  double score = 0.0;                     // total log-prob
  std::array<int, kRcrSteps> slots{};     // rcr
  std::vector<int> tokens;                // retro_tf (EOS stripped)
  int center_index = -1;                  // retro_tb: atom index or bond index
  bool center_is_bond = false;
  int template_id = -1;
};

namespace detail {

// value snapshot of a node as a constant for later graphs
template <typename T>
std::vector<T> snapshot(nn::Node<T>* n) {
  return n->val;
}

template <typename T>
nn::Node<T>* constant(nn::Tape<T>& tape, int rows, int cols,
                      const std::vector<T>& vals) {
  nn::Node<T>* n = tape.temp(rows, cols, /*requires_grad=*/false);
  n->val = vals;
  return n;
}

}  // namespace detail

// forward through the encoder and return a value-only memory snapshot
// usable across repeated decode graphs
template <typename T>
std::pair<std::vector<T>, int> encode_memory(nn::Tape<T>& tape,
                                             const PredictorModel<T>& model,
                                             const std::vector<int>& ids) {
  nn::Node<T>* hidden = model.encoder.forward(tape, ids);
  std::vector<T> vals = hidden->val;
  const int rows = hidden->rows;
  tape.clear_temps();
  return {std::move(vals), rows};
}

inline std::vector<int> apply_text_only(const PredictorInput& in) {
  std::vector<int> ids = in.ids;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (in.segment[i] == 0) ids[i] = Vocabs::kMask;
  return ids;
}

// joint or ensemble top-n decoding; inputs already assembled per mode
template <typename T>
std::vector<Prediction> predict_topn(nn::Tape<T>& tape, const PredictorModel<T>& model,
                                     const std::vector<PredictorInput>& inputs,
                                     const std::vector<double>& mix_weights,
                                     int n, const PredictOptions& opt,
                                     const ReactionRecord* record = nullptr) {
  if (inputs.empty())
    throw PredError(PredErrorKind::NoNeighborsInEnsembleMode,
                    "predict: no assembled inputs");
  const int d = model.cfg.d_model;
  std::vector<std::pair<std::vector<T>, int>> memories;
  for (const auto& in : inputs) {
    const std::vector<int> ids = opt.text_only ? apply_text_only(in) : in.ids;
    memories.push_back(encode_memory(tape, model, ids));
  }

  std::vector<Prediction> out;
  if (model.head == HeadKind::rcr) {
    auto step = [&](const std::vector<int>& prefix) {
      const int t = static_cast<int>(prefix.size());
      std::vector<double> mixed;
      for (std::size_t m = 0; m < memories.size(); ++m) {
        nn::Node<T>* mem =
            detail::constant(tape, memories[m].second, d, memories[m].first);
        nn::Node<T>* hidden = model.cond_dec.forward(tape, prefix, mem);
        nn::Node<T>* logits = model.cond_dec.step_logits(tape, hidden, t);
        std::vector<double> lv(logits->val.begin(), logits->val.end());
        const std::vector<double> lp = nn::log_softmax(lv);
        tape.clear_temps();
        if (mixed.empty()) mixed.assign(lp.size(), 0.0);
        for (std::size_t v = 0; v < lp.size(); ++v)
          mixed[v] += mix_weights[m] * std::exp(lp[v]);
      }
      for (double& p : mixed) p = std::log(std::max(p, 1e-300));
      return mixed;
    };
    auto hyps = beam_search(step, /*eos_id=*/-1,
                            std::max(opt.beam_width, n), kRcrSteps);
    for (const auto& h : hyps) {
      if (static_cast<int>(out.size()) >= n) break;
      Prediction p;
      p.score = h.log_prob;
      std::copy(h.tokens.begin(), h.tokens.end(), p.slots.begin());
      out.push_back(p);
    }
  } else if (model.head == HeadKind::retro_tf) {
    auto step = [&](const std::vector<int>& prefix_tokens) {
      std::vector<int> prefix = {Vocabs::kCls};
      prefix.insert(prefix.end(), prefix_tokens.begin(), prefix_tokens.end());
      std::vector<double> mixed;
      for (std::size_t m = 0; m < memories.size(); ++m) {
        nn::Node<T>* mem =
            detail::constant(tape, memories[m].second, d, memories[m].first);
        nn::Node<T>* logits = model.tf_dec.forward(tape, prefix, mem);
        const int last = logits->rows - 1;
        std::vector<double> lv;
        for (int v = 0; v < logits->cols; ++v)
          lv.push_back(static_cast<double>(
              logits->val[static_cast<std::size_t>(last * logits->cols + v)]));
        const std::vector<double> lp = nn::log_softmax(lv);
        tape.clear_temps();
        if (mixed.empty()) mixed.assign(lp.size(), 0.0);
        for (std::size_t v = 0; v < lp.size(); ++v)
          mixed[v] += mix_weights[m] * std::exp(lp[v]);
      }
      for (double& p : mixed) p = std::log(std::max(p, 1e-300));
      return mixed;
    };
    auto hyps = beam_search(step, Vocabs::kEos, std::max(opt.beam_width, n),
                            opt.max_steps);
    for (const auto& h : hyps) {
      if (static_cast<int>(out.size()) >= n) break;
      Prediction p;
      p.score = h.log_prob;
      p.tokens = h.tokens;
      if (!p.tokens.empty() && p.tokens.back() == Vocabs::kEos) p.tokens.pop_back();
      out.push_back(p);
    }
  } else {
    // rank (center, template) pairs by mixed per-center log-probability
    if (!record)
      throw PredError(PredErrorKind::MissingLabel, "retro_tb: record required");
    const chem::MolGraph product = chem::parse_smiles(record->product);
    const std::vector<int> apos = atom_token_positions(record->product);
    const int C = model.n_template_classes;
    const int n_atoms = static_cast<int>(product.atoms.size());
    const int n_bonds = static_cast<int>(product.bonds.size());
    std::vector<std::vector<double>> center_probs(
        static_cast<std::size_t>(n_atoms + n_bonds),
        std::vector<double>(static_cast<std::size_t>(C), 0.0));
    for (std::size_t m = 0; m < memories.size(); ++m) {
      nn::Node<T>* hidden =
          detail::constant(tape, memories[m].second, d, memories[m].first);
      std::vector<nn::Node<T>*> atom_rows;
      for (int a = 0; a < n_atoms; ++a)
        atom_rows.push_back(nn::ops::slice_rows(tape, hidden, apos[a], 1));
      for (int a = 0; a < n_atoms; ++a) {
        nn::Node<T>* logits =
            nn::linear(tape, atom_rows[static_cast<std::size_t>(a)], model.atom_w,
                       model.atom_b);
        std::vector<double> lv(logits->val.begin(), logits->val.end());
        const auto lp = nn::log_softmax(lv);
        for (int c = 0; c < C; ++c)
          center_probs[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] +=
              mix_weights[m] * std::exp(lp[static_cast<std::size_t>(c)]);
      }
      for (int b = 0; b < n_bonds; ++b) {
        const auto& bond = product.bonds[static_cast<std::size_t>(b)];
        nn::Node<T>* pair = nn::ops::concat_cols(
            tape, {atom_rows[static_cast<std::size_t>(bond.a)],
                   atom_rows[static_cast<std::size_t>(bond.b)]});
        nn::Node<T>* logits = nn::linear(tape, pair, model.bond_w, model.bond_b);
        std::vector<double> lv(logits->val.begin(), logits->val.end());
        const auto lp = nn::log_softmax(lv);
        for (int c = 0; c < C; ++c)
          center_probs[static_cast<std::size_t>(n_atoms + b)]
                      [static_cast<std::size_t>(c)] +=
              mix_weights[m] * std::exp(lp[static_cast<std::size_t>(c)]);
      }
      tape.clear_temps();
    }
    struct Scored {
      double score;
      int center;
      int tmpl;
    };
    std::vector<Scored> all;
    for (int c = 0; c < n_atoms + n_bonds; ++c)
      for (int t = 0; t + 1 < C; ++t)  // exclude NO_TEMPLATE
        all.push_back({std::log(std::max(
                           center_probs[static_cast<std::size_t>(c)]
                                       [static_cast<std::size_t>(t)],
                           1e-300)),
                       c, t});
    std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.center != b.center) return a.center < b.center;
      return a.tmpl < b.tmpl;
    });
    for (const auto& s : all) {
      if (static_cast<int>(out.size()) >= n) break;
      Prediction p;
      p.score = s.score;
      p.center_is_bond = s.center >= n_atoms;
      p.center_index = p.center_is_bond ? s.center - n_atoms : s.center;
      p.template_id = s.tmpl;
      out.push_back(p);
    }
  }
  return out;
}

// --------------------------------------------------------------- training

struct PredictorTrainConfig {
  NeighborPolicy policy;
  MaskingConfig masking;
  double lr = 1e-3;
  double warmup_fraction = 0.02;
  nn::DecayKind decay = nn::DecayKind::cosine;
  int epochs = 10;
  int batch_size = 32;
  double lambda1 = 0.1;
  double smiles_aug_prob = 0.5;
  bool text_only = false;  // SMILES positions replaced by [MASK]
  int max_len = 256;
  int max_text_len = 64;  // per-neighbor text truncation before assembly
  std::uint64_t seed = 7;
};

// SMILES segment of the predictor input
inline std::vector<int> predictor_chem_ids(const std::vector<std::string>& reactants,
                                           const std::string& product, Task task,
                                           const Vocabs& v) {
  std::vector<int> ids;
  if (task == Task::rcr) {
    for (std::size_t i = 0; i < reactants.size(); ++i) {
      if (i) ids.push_back(v.id("."));
      for (const auto& t : data::tokenize_smiles_texts(reactants[i]))
        ids.push_back(v.id(t));
    }
    ids.push_back(v.id("."));
  }
  for (const auto& t : data::tokenize_smiles_texts(product)) ids.push_back(v.id(t));
  return ids;
}

// target for the template-free head: reactants dot-joined plus [EOS]
inline std::vector<int> retro_tf_target(const std::vector<std::string>& reactants,
                                        const Vocabs& v) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < reactants.size(); ++i) {
    if (i) ids.push_back(v.id("."));
    for (const auto& t : data::tokenize_smiles_texts(reactants[i]))
      ids.push_back(v.id(t));
  }
  ids.push_back(Vocabs::kEos);
  return ids;
}

// ranked neighbor text ids per record id; train lists are gold-augmented
using NeighborLists = std::unordered_map<std::string, std::vector<std::string>>;

template <typename T>
struct PredictorTrainStats {
  std::vector<double> epoch_loss;
  long batches = 0;
};

template <typename T>
PredictorTrainStats<T> train_predictor(
    nn::Tape<T>& tape, PredictorModel<T>& model, const Corpus& corpus,
    const Dataset& ds, const std::vector<std::string>& train_ids,
    const Vocabs& vocabs, const NeighborLists& neighbors,
    const PredictorTrainConfig& cfg, bool verbose = false) {
  std::vector<const ReactionRecord*> records;
  for (const auto& id : train_ids) {
    const ReactionRecord* r = ds.find(id);
    if (!r) throw data::DataError(data::DataErrorKind::UnknownId, "train id: " + id);
    records.push_back(r);
  }
  if (records.empty())
    throw data::DataError(data::DataErrorKind::EmptyDataset,
                          "train_predictor: no records");

  // text tokenizations cached by paragraph index
  std::vector<std::vector<int>> text_cache(corpus.size());
  std::vector<bool> text_cached(corpus.size(), false);
  auto text_for = [&](const std::string& tid) -> const std::vector<int>& {
    const std::size_t idx = corpus.by_id.at(tid);
    if (!text_cached[idx]) {
      text_cache[idx] =
          retriever::text_ids(corpus.paragraphs[idx].text, vocabs, cfg.max_text_len);
      // drop the [CLS]/[SEP] framing; assembly adds its own separators
      auto& v = text_cache[idx];
      v.erase(v.begin());
      if (!v.empty() && v.back() == Vocabs::kSep) v.pop_back();
      text_cached[idx] = true;
    }
    return text_cache[idx];
  };

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_batches = (records.size() + bs - 1) / bs;
  nn::ScheduleConfig sched{cfg.lr, cfg.warmup_fraction, cfg.decay,
                           static_cast<long>(n_batches) * cfg.epochs};
  nn::Adam<T> adam(sched);
  Rng rng(cfg.seed);

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  PredictorTrainStats<T> stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t lo = b * bs;
      const std::size_t hi = std::min(records.size(), lo + bs);
      nn::Node<T>* batch_loss = nullptr;
      for (std::size_t i = lo; i < hi; ++i) {
        const ReactionRecord* r = records[order[i]];

        // neighbor texts per the training policy
        std::vector<std::vector<int>> texts;
        if (cfg.policy.k > 0) {
          auto it = neighbors.find(r->id);
          const std::vector<std::string> ranked =
              it == neighbors.end() ? std::vector<std::string>{} : it->second;
          for (const auto& tid : sample_neighbors(cfg.policy, Mode::train, r->text_id,
                                                  ranked, rng))
            texts.push_back(text_for(tid));
        }

        // SMILES randomization augmentation
        std::vector<std::string> reactants = r->reactants;
        std::string product = r->product;
        if (cfg.smiles_aug_prob > 0 && rng.bernoulli(cfg.smiles_aug_prob)) {
          for (auto& s : reactants)
            s = chem::write_smiles(chem::parse_smiles(s), rng.next_u64());
          if (model.head != HeadKind::retro_tb)
            product = chem::write_smiles(chem::parse_smiles(product), rng.next_u64());
        }

        const std::vector<int> smiles_ids =
            predictor_chem_ids(reactants, product, ds.task, vocabs);
        PredictorInput in = assemble_input(smiles_ids, texts, cfg.max_len);
        if (cfg.text_only) in.ids = apply_text_only(in);
        nn::Node<T>* mlm = nullptr;
        nn::Node<T>* hidden;
        if (cfg.lambda1 > 0) {
          MaskedInput m = mask_spans(in, cfg.masking, rng);
          hidden = model.encoder.forward(tape, m.ids);
          if (m.n_masked > 0) mlm = mlm_loss(tape, model, hidden, m.labels);
        } else {
          hidden = model.encoder.forward(tape, in.ids);
        }

        nn::Node<T>* pred;
        if (model.head == HeadKind::rcr) {
          std::array<int, kRcrSteps> slots;
          auto enc = vocabs.encode_conditions(r->conditions);
          std::copy(enc.begin(), enc.end(), slots.begin());
          pred = rcr_forward_loss(tape, model, hidden, slots);
        } else if (model.head == HeadKind::retro_tf) {
          pred = retro_tf_loss(tape, model, hidden,
                               retro_tf_target(reactants, vocabs));
        } else {
          if (!r->template_id || !r->center)
            throw PredError(PredErrorKind::MissingLabel,
                            "retro_tb: record lacks template/center");
          const chem::MolGraph g = chem::parse_smiles(product);
          pred = retro_tb_loss(tape, model, hidden, g,
                               atom_token_positions(product), *r->template_id,
                               *r->center);
        }
        nn::Node<T>* item = total_loss(tape, pred, mlm, cfg.lambda1);
        batch_loss = batch_loss ? nn::ops::add(tape, batch_loss, item) : item;
      }
      batch_loss =
          nn::ops::scale(tape, batch_loss, 1.0 / static_cast<double>(hi - lo));
      loss_sum += static_cast<double>(batch_loss->val[0]) *
                  static_cast<double>(hi - lo);
      tape.backward(batch_loss);
      adam.step(tape.params());
      tape.clear_temps();
      ++stats.batches;
    }
    stats.epoch_loss.push_back(loss_sum / static_cast<double>(records.size()));
    if (verbose)
      std::fprintf(stderr, "predictor epoch %d loss %.4f\n", epoch + 1,
                   stats.epoch_loss.back());
  }
  return stats;
}

}  // namespace textreact::predictor

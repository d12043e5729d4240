#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/context_seq.hpp"
#include "stpil/ingest.hpp"
#include "stpil/params.hpp"
#include "stpil/rng.hpp"
#include "stpil/tape.hpp"

namespace stpil {

/// Feature embedding widths and layer sizes. The five query segments
/// concatenate to 152; every interest is 64 wide.
struct Dims {
    static constexpr std::size_t poi = 64;
    static constexpr std::size_t cat = 32;
    static constexpr std::size_t dow = 8;
    static constexpr std::size_t slot = 16;
    static constexpr std::size_t area = 32;
    static constexpr std::size_t query = poi + cat + dow + slot + area;  // 152
    static constexpr std::size_t interest = 64;
    static constexpr std::size_t lstm_hidden = 64;
    static constexpr std::size_t mlp_h1 = 128;
    static constexpr std::size_t mlp_h2 = 64;
};

enum class LongSetting { att_qk, att_k, seq_avg };

inline std::string to_string(LongSetting s) {
    switch (s) {
        case LongSetting::att_qk: return "att-qk";
        case LongSetting::att_k: return "att-k";
        case LongSetting::seq_avg: return "seq-avg";
    }
    return "att-qk";
}

inline LongSetting parse_long_setting(const std::string& s) {
    if (s == "att-qk") return LongSetting::att_qk;
    if (s == "att-k") return LongSetting::att_k;
    if (s == "seq-avg") return LongSetting::seq_avg;
    fail("unknown long-term setting '" + s + "' (expected att-qk, att-k or seq-avg)");
}

/// Which interests the network carries, and how the long-term one is built.
/// Inactive interests are excluded from the weighted concatenation, so the
/// MLP input shrinks accordingly and the variant trains as its own model.
struct VariantSpec {
    bool use_long = true;
    std::array<bool, 4> use_s{true, true, true, true};
    LongSetting long_setting = LongSetting::att_qk;

    std::size_t active_interests() const {
        std::size_t n = use_long ? 1 : 0;
        for (bool b : use_s) n += b ? 1 : 0;
        return n;
    }

    std::size_t mlp_input() const { return Dims::query + Dims::interest * active_interests(); }

    bool operator==(const VariantSpec& o) const = default;

    std::string name() const {
        std::string base;
        if (use_long && use_s == std::array<bool, 4>{true, true, true, true})
            base = "full";
        else if (use_long && use_s == std::array<bool, 4>{false, false, false, false})
            base = "long";
        else if (!use_long && use_s == std::array<bool, 4>{true, true, true, true})
            base = "short";
        else {
            if (use_long) base = "long+";
            for (int k = 0; k < 4; ++k)
                if (use_s[k]) base += (base.empty() || base.back() == '+' ? "" : "+") +
                                      std::string("s") + char('1' + k);
        }
        if (use_long && long_setting != LongSetting::att_qk) base += "@" + to_string(long_setting);
        return base;
    }

    /// Accepts "full", "long", "short", or a +/, separated list of s1..s4
    /// (optionally prefixed with "long+"); "@<setting>" suffix or the
    /// separate argument picks the long-term setting.
    static VariantSpec parse(std::string variant, const std::string& long_setting_str = "att-qk") {
        VariantSpec spec;
        spec.long_setting = parse_long_setting(long_setting_str);
        const auto at = variant.find('@');
        if (at != std::string::npos) {
            spec.long_setting = parse_long_setting(variant.substr(at + 1));
            variant = variant.substr(0, at);
        }
        if (variant == "full" || variant.empty()) return spec;
        if (variant == "long") {
            spec.use_s = {false, false, false, false};
            return spec;
        }
        spec.use_long = false;
        spec.use_s = {false, false, false, false};
        if (variant == "short") {
            spec.use_s = {true, true, true, true};
            return spec;
        }
        std::string token;
        auto take = [&](const std::string& tok) {
            if (tok == "long") {
                spec.use_long = true;
            } else if (tok.size() == 2 && tok[0] == 's' && tok[1] >= '1' && tok[1] <= '4') {
                spec.use_s[tok[1] - '1'] = true;
            } else {
                fail("unknown variant token '" + tok + "' in '" + variant + "'");
            }
        };
        for (char c : variant) {
            if (c == '+' || c == ',') {
                if (!token.empty()) take(token);
                token.clear();
            } else {
                token += c;
            }
        }
        if (!token.empty()) take(token);
        STPIL_REQUIRE(spec.active_interests() >= 1, "variant '" + variant + "' has no active interests");
        if (!spec.use_long) spec.long_setting = LongSetting::att_qk;
        return spec;
    }
};

struct VocabSizes {
    std::size_t users = 0, pois = 0, cats = 0, areas = 0;

    static VocabSizes of(const Vocab& v) { return {v.n_users(), v.n_pois(), v.n_cats(), v.n_areas()}; }
    bool operator==(const VocabSizes&) const = default;
};

constexpr std::size_t kNoLeaf = static_cast<std::size_t>(-1);

/// All trainable arrays of one model variant, with stable leaf identifiers.
struct ModelParams {
    ParamStore store;
    VariantSpec variant;
    VocabSizes vocab;

    std::size_t embed_poi = kNoLeaf, embed_cat = kNoLeaf, embed_dow = kNoLeaf, embed_slot = kNoLeaf,
                embed_area = kNoLeaf;
    std::size_t proj_w = kNoLeaf, proj_b = kNoLeaf;
    std::size_t v1 = kNoLeaf, v2 = kNoLeaf, ve = kNoLeaf;
    std::size_t v3 = kNoLeaf, v4 = kNoLeaf, va = kNoLeaf;
    std::array<std::size_t, 4> lstm_wx{kNoLeaf, kNoLeaf, kNoLeaf, kNoLeaf};
    std::array<std::size_t, 4> lstm_wh{kNoLeaf, kNoLeaf, kNoLeaf, kNoLeaf};
    std::array<std::size_t, 4> lstm_b{kNoLeaf, kNoLeaf, kNoLeaf, kNoLeaf};
    std::size_t mlp_w1 = kNoLeaf, mlp_b1 = kNoLeaf, mlp_w2 = kNoLeaf, mlp_b2 = kNoLeaf, mlp_w3 = kNoLeaf,
                mlp_b3 = kNoLeaf;

    /// Embedding tables and weight matrices uniform in [-0.05, 0.05];
    /// LSTM forget-gate bias +1, other biases 0.
    static ModelParams init(const VocabSizes& vs, const VariantSpec& spec, RngState& rng) {
        ModelParams p;
        p.variant = spec;
        p.vocab = vs;
        auto u = [&](const std::string& id, std::vector<std::size_t> shape) {
            return p.store.add(id, uniform_init(std::move(shape), rng));
        };
        auto z = [&](const std::string& id, std::vector<std::size_t> shape) {
            return p.store.add(id, Tensor::zeros(std::move(shape)));
        };
        p.embed_poi = u("embed.poi", {vs.pois, Dims::poi});
        p.embed_cat = u("embed.cat", {vs.cats, Dims::cat});
        p.embed_dow = u("embed.dow", {7, Dims::dow});
        p.embed_slot = u("embed.slot", {24, Dims::slot});
        p.embed_area = u("embed.area", {vs.areas, Dims::area});
        if (spec.use_long) {
            p.proj_w = u("long.proj.W", {Dims::interest, Dims::query});
            p.proj_b = z("long.proj.b", {Dims::interest});
            if (spec.long_setting == LongSetting::att_qk)
                p.v1 = u("intra.V1", {Dims::interest, Dims::query});
            if (spec.long_setting != LongSetting::seq_avg) {
                p.v2 = u("intra.V2", {Dims::interest, Dims::interest});
                p.ve = u("intra.v", {Dims::interest});
            }
        }
        for (int k = 0; k < 4; ++k) {
            if (!spec.use_s[static_cast<std::size_t>(k)]) continue;
            const std::string base = "lstm.s" + std::to_string(k + 1);
            p.lstm_wx[static_cast<std::size_t>(k)] = u(base + ".Wx", {4 * Dims::lstm_hidden, Dims::poi});
            p.lstm_wh[static_cast<std::size_t>(k)] = u(base + ".Wh", {4 * Dims::lstm_hidden, Dims::lstm_hidden});
            Tensor bias = Tensor::zeros({4 * Dims::lstm_hidden});
            for (std::size_t j = Dims::lstm_hidden; j < 2 * Dims::lstm_hidden; ++j) bias.v[j] = 1.0;
            p.lstm_b[static_cast<std::size_t>(k)] = p.store.add(base + ".b", std::move(bias));
        }
        p.v3 = u("inter.V3", {Dims::interest, Dims::query});
        p.v4 = u("inter.V4", {Dims::interest, Dims::interest});
        p.va = u("inter.v", {Dims::interest});
        p.mlp_w1 = u("mlp.W1", {Dims::mlp_h1, spec.mlp_input()});
        p.mlp_b1 = z("mlp.b1", {Dims::mlp_h1});
        p.mlp_w2 = u("mlp.W2", {Dims::mlp_h2, Dims::mlp_h1});
        p.mlp_b2 = z("mlp.b2", {Dims::mlp_h2});
        p.mlp_w3 = u("mlp.W3", {1, Dims::mlp_h2});
        p.mlp_b3 = z("mlp.b3", {1});
        return p;
    }
};

/// Forward-time knobs: inter-level attention dropout is dataset-specific,
/// the MLP hidden-layer rate defaults to 0.1.
struct ScoreCfg {
    double dropout_inter = 0.0;
    double dropout_mlp = 0.1;
};

// ---- spec operations -------------------------------------------------------

/// Eq. 1 query: concatenated candidate POI, category and current
/// day-of-week / slot / area embeddings, dim 152.
inline Var embed_query(Tape& t, const ModelParams& p, const ContextQuery& ctx) {
    STPIL_REQUIRE(ctx.poi < p.vocab.pois && ctx.cat < p.vocab.cats && ctx.area < p.vocab.areas &&
                      ctx.dow >= 1 && ctx.dow <= 7 && ctx.slot < 24,
                  "embed_query: index out of range");
    Var tp = t.param(p.store, p.embed_poi);
    Var tc = t.param(p.store, p.embed_cat);
    Var tw = t.param(p.store, p.embed_dow);
    Var tm = t.param(p.store, p.embed_slot);
    Var tg = t.param(p.store, p.embed_area);
    return t.concat({t.row(tp, ctx.poi), t.row(tc, ctx.cat), t.row(tw, ctx.dow - 1u), t.row(tm, ctx.slot),
                     t.row(tg, ctx.area)});
}

/// A history check-in embedded with the same 5-segment layout as the query.
inline Var embed_checkin(Tape& t, const ModelParams& p, const CheckIn& c) {
    return embed_query(t, p, context_of(c));
}

/// [T x 152] matrix of the embeddings of steps 1..t-1. Empty history
/// (t == 1) has no rows; callers substitute zeros.
inline std::optional<Var> history_stack(Tape& t, const ModelParams& p, const UserHistory& h, std::size_t t_step) {
    if (t_step <= 1) return std::nullopt;
    std::vector<Var> rows;
    rows.reserve(t_step - 1);
    for (std::size_t i = 0; i + 1 < t_step; ++i) rows.push_back(embed_checkin(t, p, h.checkins[i]));
    return t.stack(rows);
}

/// Seven daily patterns: tanh of the shared projection of the per-weekday
/// masked average. Days without check-ins reduce to tanh(bias).
inline std::array<Var, 7> daily_patterns(Tape& t, const ModelParams& p, std::optional<Var> hist,
                                         const DailyMasks& masks) {
    Var w = t.param(p.store, p.proj_w);
    Var b = t.param(p.store, p.proj_b);
    std::array<Var, 7> out;
    for (int d = 0; d < 7; ++d) {
        Var pooled = hist ? t.masked_mean(*hist, masks.by_day[static_cast<std::size_t>(d)])
                          : t.zeros(Dims::query);
        out[static_cast<std::size_t>(d)] = t.tanh(t.affine(w, pooled, b));
    }
    return out;
}

struct IntraOut {
    Var interest;  // the long-term interest l, 64
    Var weights;   // softmax weights over the 7 daily patterns
};

/// Eq. 2: e_j = v_e . tanh(V1 q + V2 l_j), softmax over the week, weighted sum.
/// With `use_query` false (the att-k setting) the V1 q term is dropped.
inline IntraOut intra_attention(Tape& t, const ModelParams& p, Var q, std::span<const Var> daily,
                                bool use_query = true) {
    Var v2 = t.param(p.store, p.v2);
    Var ve = t.param(p.store, p.ve);
    std::optional<Var> v1q;
    if (use_query) v1q = t.affine(t.param(p.store, p.v1), q);
    std::vector<Var> scores;
    scores.reserve(daily.size());
    for (Var l : daily) {
        Var pre = t.affine(v2, l);
        if (v1q) pre = t.add(*v1q, pre);
        scores.push_back(t.dot(ve, t.tanh(pre)));
    }
    IntraOut out;
    out.weights = t.softmax(t.concat(scores));
    out.interest = t.mix(out.weights, daily);
    return out;
}

/// Eq. 3: one LSTM per context sequence; the final hidden state is the
/// interest. Empty sequences yield the zero vector so the inter-level
/// arity stays fixed.
inline std::array<Var, 4> short_interests(Tape& t, const ModelParams& p, const ShortTermSeqs& seqs) {
    const Seq* seq_ptr[4] = {&seqs.s1, &seqs.s2, &seqs.s3, &seqs.s4};
    Var poi_table = t.param(p.store, p.embed_poi);
    std::array<Var, 4> out;
    for (std::size_t k = 0; k < 4; ++k) {
        if (!p.variant.use_s[k] || seq_ptr[k]->empty()) {
            out[k] = t.zeros(Dims::interest);
            continue;
        }
        Tape::LstmParams lp{t.param(p.store, p.lstm_wx[k]), t.param(p.store, p.lstm_wh[k]),
                            t.param(p.store, p.lstm_b[k])};
        std::vector<Var> xs;
        xs.reserve(seq_ptr[k]->size());
        for (std::uint32_t poi : seq_ptr[k]->pois) xs.push_back(t.row(poi_table, poi));
        Var hc = t.lstm_seq(lp, t.zeros(Dims::lstm_hidden), t.zeros(Dims::lstm_hidden), xs);
        out[k] = t.slice(hc, 0, Dims::lstm_hidden);
    }
    return out;
}

struct InterOut {
    Var overall;                   // weighted concatenation, 64 * |interests|
    std::vector<Var> raw_weights;  // one unnormalized score per interest
};

/// Eqs. 4-5: Bahdanau-style scores without softmax. Dropout is applied to
/// copies of the query and interests used for scoring only; the weights
/// scale the clean interests.
inline InterOut inter_attention(Tape& t, const ModelParams& p, Var q, std::span<const Var> interests,
                                double rate, Mode mode, RngState& rng) {
    Var v3q = t.affine(t.param(p.store, p.v3), t.dropout(q, rate, mode, rng));
    Var v4 = t.param(p.store, p.v4);
    Var va = t.param(p.store, p.va);
    InterOut out;
    std::vector<Var> segments;
    for (Var interest : interests) {
        Var v4i = t.affine(v4, t.dropout(interest, rate, mode, rng));
        Var a = t.dot(va, t.tanh(t.add(v3q, v4i)));
        out.raw_weights.push_back(a);
        segments.push_back(t.scale_by(a, interest));
    }
    out.overall = t.concat(segments);
    return out;
}

/// Eq. 6 + prediction layer: MLP on [q ; x] with ReLU hidden layers,
/// hidden dropout, sigmoid output.
inline Var predict(Tape& t, const ModelParams& p, Var q, Var overall, double mlp_rate, Mode mode, RngState& rng) {
    Var input = t.concat({q, overall});
    STPIL_REQUIRE(t.numel(input) == p.variant.mlp_input(),
                  "predict: input dim " + std::to_string(t.numel(input)) + " does not match MLP " +
                      std::to_string(p.variant.mlp_input()));
    Var h1 = t.relu(t.affine(t.param(p.store, p.mlp_w1), input, t.param(p.store, p.mlp_b1)));
    h1 = t.dropout(h1, mlp_rate, mode, rng);
    Var h2 = t.relu(t.affine(t.param(p.store, p.mlp_w2), h1, t.param(p.store, p.mlp_b2)));
    h2 = t.dropout(h2, mlp_rate, mode, rng);
    Var z = t.affine(t.param(p.store, p.mlp_w3), h2, t.param(p.store, p.mlp_b3));
    return t.sigmoid(z);
}

/// Eq. 7: cross-entropy summed over the candidates of one instance.
inline Var bce_loss(Tape& t, std::span<const double> labels, std::span<const Var> probs) {
    return t.bce(labels, probs);
}

// ---- instance scorer -------------------------------------------------------

/// Everything about one (user, step, context) that does not depend on the
/// candidate: daily patterns, the four LSTM interests, and — except in the
/// att-qk setting — the long-term interest itself. Scoring a candidate then
/// costs only the query path, the attention scores and the MLP.
class InstanceScorer {
public:
    InstanceScorer(Tape& tape, const ModelParams& params, const UserHistory& history, std::size_t t_step,
                   const ContextQuery& ctx, const ShortTermSeqs& seqs, const DailyMasks& masks,
                   const ScoreCfg& cfg, Mode mode, RngState& rng)
        : t_(tape), p_(params), cfg_(cfg), mode_(mode), rng_(rng) {
        w_row_ = t_.row(t_.param(p_.store, p_.embed_dow), ctx.dow - 1u);
        m_row_ = t_.row(t_.param(p_.store, p_.embed_slot), ctx.slot);
        g_row_ = t_.row(t_.param(p_.store, p_.embed_area), ctx.area);
        poi_table_ = t_.param(p_.store, p_.embed_poi);
        cat_table_ = t_.param(p_.store, p_.embed_cat);
        v3_ = t_.param(p_.store, p_.v3);
        v4_ = t_.param(p_.store, p_.v4);
        va_ = t_.param(p_.store, p_.va);

        const VariantSpec& spec = p_.variant;
        if (spec.use_long) {
            auto hist = history_stack(t_, p_, history, t_step);
            if (spec.long_setting == LongSetting::seq_avg) {
                Var pooled = t_.zeros(Dims::query);
                if (hist) {
                    std::vector<std::uint8_t> ones(t_step - 1, 1);
                    pooled = t_.masked_mean(*hist, ones);
                }
                fixed_long_ = t_.tanh(
                    t_.affine(t_.param(p_.store, p_.proj_w), pooled, t_.param(p_.store, p_.proj_b)));
            } else {
                daily_ = daily_patterns(t_, p_, hist, masks);
                if (spec.long_setting == LongSetting::att_k) {
                    fixed_long_ = intra_attention(t_, p_, Var{}, *daily_, false).interest;
                } else {
                    // att-qk precomputations shared across candidates
                    v1_ = t_.param(p_.store, p_.v1);
                    v2_ = t_.param(p_.store, p_.v2);
                    ve_ = t_.param(p_.store, p_.ve);
                    Var v2 = *v2_;
                    for (int d = 0; d < 7; ++d)
                        v2l_[static_cast<std::size_t>(d)] = t_.affine(v2, (*daily_)[static_cast<std::size_t>(d)]);
                }
            }
            if (fixed_long_.valid()) push_fixed_interest(fixed_long_);
        }
        auto shorts = short_interests(t_, p_, seqs);
        for (std::size_t k = 0; k < 4; ++k)
            if (spec.use_s[k]) push_fixed_interest(shorts[k]);
    }

    struct Out {
        Var prob;
        Var intra_weights;             // invalid unless att-qk long module
        std::vector<Var> raw_weights;  // inter-level, one per active interest
    };

    /// Probability for one candidate POI (with its own category).
    Out score(std::uint32_t cand_poi, std::uint32_t cand_cat) {
        Out out;
        Var q = t_.concat({t_.row(poi_table_, cand_poi), t_.row(cat_table_, cand_cat), w_row_, m_row_, g_row_});

        std::vector<Var> interests;
        std::vector<Var> v4i;
        if (p_.variant.use_long && !fixed_long_.valid()) {
            // att-qk: the long-term interest is query-conditioned (Eq. 2)
            Var v1q = t_.affine(*v1_, q);
            std::vector<Var> scores;
            scores.reserve(7);
            for (int d = 0; d < 7; ++d)
                scores.push_back(
                    t_.dot(*ve_, t_.tanh(t_.add(v1q, v2l_[static_cast<std::size_t>(d)]))));
            out.intra_weights = t_.softmax(t_.concat(scores));
            Var l = t_.mix(out.intra_weights, *daily_);
            interests.push_back(l);
            v4i.push_back(t_.affine(v4_, t_.dropout(l, cfg_.dropout_inter, mode_, rng_)));
        }
        for (std::size_t k = 0; k < fixed_interests_.size(); ++k) {
            interests.push_back(fixed_interests_[k]);
            v4i.push_back(fixed_v4i_[k]);
        }

        Var v3q = t_.affine(v3_, t_.dropout(q, cfg_.dropout_inter, mode_, rng_));
        std::vector<Var> segments;
        for (std::size_t i = 0; i < interests.size(); ++i) {
            Var a = t_.dot(va_, t_.tanh(t_.add(v3q, v4i[i])));
            out.raw_weights.push_back(a);
            segments.push_back(t_.scale_by(a, interests[i]));
        }
        Var x = t_.concat(segments);
        out.prob = predict(t_, p_, q, x, cfg_.dropout_mlp, mode_, rng_);
        return out;
    }

private:
    void push_fixed_interest(Var v) {
        fixed_interests_.push_back(v);
        fixed_v4i_.push_back(t_.affine(v4_, t_.dropout(v, cfg_.dropout_inter, mode_, rng_)));
    }

    Tape& t_;
    const ModelParams& p_;
    ScoreCfg cfg_;
    Mode mode_;
    RngState& rng_;

    Var w_row_, m_row_, g_row_;
    Var poi_table_, cat_table_;
    Var v3_, v4_, va_;
    std::optional<Var> v1_, v2_, ve_;
    std::optional<std::array<Var, 7>> daily_;
    std::array<Var, 7> v2l_{};
    Var fixed_long_{};
    std::vector<Var> fixed_interests_;
    std::vector<Var> fixed_v4i_;
};

/// Full forward pass for one training instance: candidate list scored
/// against labels, loss summed over candidates (Eq. 7).
struct InstanceForward {
    Var loss;
    std::vector<Var> probs;
};

inline InstanceForward score_instance(Tape& tape, const ModelParams& params, const UserHistory& history,
                                      std::size_t t_step, const ContextQuery& ctx,
                                      std::span<const std::uint32_t> cand_pois,
                                      std::span<const std::uint32_t> cand_cats, std::span<const double> labels,
                                      const ScoreCfg& cfg, std::size_t s1_window, std::size_t seq_cap, Mode mode,
                                      RngState& rng) {
    STPIL_REQUIRE(cand_pois.size() == labels.size() && cand_pois.size() == cand_cats.size(),
                  "score_instance: candidate/label count mismatch");
    auto seqs = build_short_term(history, t_step, ctx, s1_window, seq_cap);
    auto masks = build_daily_masks(history, t_step);
    InstanceScorer scorer(tape, params, history, t_step, ctx, seqs, masks, cfg, mode, rng);
    InstanceForward out;
    out.probs.reserve(cand_pois.size());
    for (std::size_t i = 0; i < cand_pois.size(); ++i)
        out.probs.push_back(scorer.score(cand_pois[i], cand_cats[i]).prob);
    out.loss = bce_loss(tape, labels, out.probs);
    return out;
}

}  // namespace stpil

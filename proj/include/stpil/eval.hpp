#pragma once

#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/model.hpp"
#include "stpil/rng.hpp"

namespace stpil {

struct RankedResult {
    std::uint32_t user = 0;
    std::uint32_t truth = 0;
    std::size_t rank = 0;  // 1-based within the full catalog
};

struct EvalReport {
    std::string variant;
    double acc1 = 0, acc5 = 0, acc10 = 0;
    double mrr5 = 0, mrr10 = 0;
    std::size_t users = 0;
    std::uint64_t config_hash = 0;
};

/// Scores every POI in the catalog as the Eq. 1 candidate (with its own
/// category) for one user's held-out step and reports the ground-truth rank.
/// Ties break toward the lower POI index. The per-user interest bundle is
/// built once; candidates run in chunks on a rewound tape.
inline RankedResult rank_all(const ModelParams& params, const Vocab& vocab, const UserHistory& history,
                             const ScoreCfg& cfg, std::size_t s1_window, std::size_t seq_cap) {
    const std::size_t t_step = history.checkins.size();
    const CheckIn& target = history.checkins.back();
    const ContextQuery ctx = context_of(target);

    Tape tape;
    tape.bind(const_cast<ParamStore&>(params.store));
    RngState rng(0);  // eval mode draws nothing
    auto seqs = build_short_term(history, t_step, ctx, s1_window, seq_cap);
    auto masks = build_daily_masks(history, t_step);
    InstanceScorer scorer(tape, params, history, t_step, ctx, seqs, masks, cfg, Mode::eval, rng);

    const std::size_t n = vocab.n_pois();
    std::vector<double> scores(n);
    const auto base = tape.mark();
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t end = std::min(n, start + kChunk);
        for (std::size_t p = start; p < end; ++p)
            scores[p] = tape.scalar(scorer.score(static_cast<std::uint32_t>(p), vocab.poi_category[p]).prob);
        tape.rewind(base);
    }

    RankedResult r;
    r.user = history.user;
    r.truth = target.poi;
    const double truth_score = scores[r.truth];
    std::size_t rank = 1;
    for (std::size_t p = 0; p < n; ++p) {
        if (scores[p] > truth_score) ++rank;
        else if (scores[p] == truth_score && p < r.truth) ++rank;
    }
    r.rank = rank;
    return r;
}

/// Leave-one-out ranking for every user; parallel across users, results in
/// user order.
inline std::vector<RankedResult> rank_all_users(const ModelParams& params, const Dataset& ds, const ScoreCfg& cfg,
                                                std::size_t s1_window, std::size_t seq_cap,
                                                std::size_t threads = 2) {
    const std::size_t n = ds.split.users.size();
    std::vector<RankedResult> results(n);
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    auto work = [&](std::size_t w) {
        for (std::size_t u = w; u < n; u += workers)
            results[u] = rank_all(params, ds.vocab, ds.split.users[u], cfg, s1_window, seq_cap);
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& th : pool) th.join();
    }
    return results;
}

/// Acc@k = fraction of users whose truth ranks in the top k;
/// MRR@k = mean of 1/rank, counting only ranks <= k.
inline EvalReport metrics(const std::vector<RankedResult>& results) {
    STPIL_REQUIRE(!results.empty(), "metrics: no ranked results");
    EvalReport r;
    r.users = results.size();
    const double n = static_cast<double>(results.size());
    for (const auto& rr : results) {
        if (rr.rank <= 1) r.acc1 += 1;
        if (rr.rank <= 5) {
            r.acc5 += 1;
            r.mrr5 += 1.0 / static_cast<double>(rr.rank);
        }
        if (rr.rank <= 10) {
            r.acc10 += 1;
            r.mrr10 += 1.0 / static_cast<double>(rr.rank);
        }
    }
    r.acc1 /= n;
    r.acc5 /= n;
    r.acc10 /= n;
    r.mrr5 /= n;
    r.mrr10 /= n;
    return r;
}

/// Evaluates a variant-consistent model over the whole split. The model must
/// have been built (and trained) with exactly this variant.
inline EvalReport run_variant(const VariantSpec& spec, const ModelParams& params, const Dataset& ds,
                              const ScoreCfg& cfg, std::size_t s1_window, std::size_t seq_cap,
                              std::size_t threads = 2) {
    STPIL_REQUIRE(params.variant == spec, "run_variant: model was built for variant '" + params.variant.name() +
                                              "', requested '" + spec.name() + "'");
    auto results = rank_all_users(params, ds, cfg, s1_window, seq_cap, threads);
    EvalReport r = metrics(results);
    r.variant = spec.name();
    return r;
}

inline std::string to_json_line(const EvalReport& r) {
    std::string s = "{\"variant\":\"" + r.variant + "\"";
    s += ",\"acc1\":" + fmt_double(r.acc1);
    s += ",\"acc5\":" + fmt_double(r.acc5);
    s += ",\"acc10\":" + fmt_double(r.acc10);
    s += ",\"mrr5\":" + fmt_double(r.mrr5);
    s += ",\"mrr10\":" + fmt_double(r.mrr10);
    s += ",\"users\":" + std::to_string(r.users);
    s += ",\"config_hash\":\"" + hex64(r.config_hash) + "\"}";
    return s;
}

inline std::string csv_header() { return "variant,acc1,acc5,acc10,mrr5,mrr10,users,config_hash"; }

inline std::string to_csv_row(const EvalReport& r) {
    return r.variant + "," + fmt_double(r.acc1) + "," + fmt_double(r.acc5) + "," + fmt_double(r.acc10) + "," +
           fmt_double(r.mrr5) + "," + fmt_double(r.mrr10) + "," + std::to_string(r.users) + "," +
           hex64(r.config_hash);
}

}  // namespace stpil

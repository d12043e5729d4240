#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/gradcheck.hpp"
#include "stpil/model.hpp"
#include "stpil/rng.hpp"

namespace stpil {

struct TrainConfig {
    std::uint64_t seed = 42;
    std::size_t epochs = 30;
    std::size_t batch = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t negatives = 20;
    double dropout_inter = 0.0;  // 0.0 fits NYC, 0.1 TKY
    double dropout_mlp = 0.1;
    std::size_t s1_window = 20;
    std::size_t seq_cap = 50;
    std::size_t t_min = 2;  // first predicted step (1-based)
    std::size_t threads = 1;
    bool resample_negatives = true;  // fresh negatives every epoch
    bool gradcheck_first = false;    // verify gradients on one instance before epoch 1
    bool val_holdout = false;        // hold out each user's second-to-last check-in
    std::string variant = "full";
    std::string long_setting = "att-qk";

    ScoreCfg score_cfg() const { return ScoreCfg{dropout_inter, dropout_mlp}; }
};

/// One training example: predict the check-in at 1-based step `t` of `user`
/// from everything before it. Context (w, m, g) comes from the target
/// check-in itself; daily masks and short-term sequences are derived at
/// scoring time from exactly the material before step t.
struct TrainingInstance {
    std::uint32_t user = 0;
    std::size_t t = 0;
    ContextQuery ctx;  // poi/cat hold the positive candidate
    std::uint32_t positive = 0;
    std::vector<std::uint32_t> negatives;
};

/// Instance skeletons in user-major, step-ascending order. Negatives are
/// sampled separately (per epoch when resampling is on). The held-out last
/// check-in — and with `val_holdout` also the second-to-last — is excluded.
inline std::vector<TrainingInstance> make_instances(const DatasetSplit& split, const TrainConfig& cfg) {
    STPIL_REQUIRE(cfg.t_min >= 2, "make_instances: t_min must be at least 2");
    std::vector<TrainingInstance> out;
    const std::size_t reserved_tail = cfg.val_holdout ? 2 : 1;
    for (const auto& uh : split.users) {
        const std::size_t len = uh.checkins.size();
        if (len < cfg.t_min + reserved_tail) continue;
        for (std::size_t t = cfg.t_min; t + reserved_tail <= len; ++t) {
            TrainingInstance ti;
            ti.user = uh.user;
            ti.t = t;
            ti.ctx = context_of(uh.checkins[t - 1]);
            ti.positive = uh.checkins[t - 1].poi;
            out.push_back(std::move(ti));
        }
    }
    return out;
}

/// `n` distinct POIs uniform over the catalog minus the positive.
inline std::vector<std::uint32_t> sample_negatives(std::size_t n_pois, std::uint32_t positive, RngState& rng,
                                                   std::size_t n = 20) {
    STPIL_REQUIRE(n_pois > n, "sample_negatives: catalog size " + std::to_string(n_pois) +
                                  " must exceed sample count " + std::to_string(n));
    std::vector<std::uint32_t> out;
    out.reserve(n);
    if (n_pois <= 2 * n + 1) {
        // small catalog: partial Fisher-Yates over the explicit complement
        std::vector<std::uint32_t> pool;
        pool.reserve(n_pois - 1);
        for (std::uint32_t p = 0; p < n_pois; ++p)
            if (p != positive) pool.push_back(p);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
    } else {
        std::unordered_set<std::uint32_t> seen;
        while (out.size() < n) {
            const auto p = static_cast<std::uint32_t>(rng.uniform_below(n_pois));
            if (p == positive || !seen.insert(p).second) continue;
            out.push_back(p);
        }
    }
    return out;
}

/// Bias-corrected adaptive-moment optimizer state, one pair of accumulators
/// per leaf in registration order.
struct OptimizerState {
    std::vector<Tensor> m, v;
    std::uint64_t step = 0;

    static OptimizerState for_store(const ParamStore& store) {
        OptimizerState s;
        s.m.reserve(store.size());
        s.v.reserve(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            s.m.push_back(Tensor::zeros(store[i].value.shape));
            s.v.push_back(Tensor::zeros(store[i].value.shape));
        }
        return s;
    }
};

inline void adam_step(ParamStore& store, OptimizerState& opt, const TrainConfig& cfg) {
    ++opt.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < store.size(); ++i) {
        ParamLeaf& leaf = store[i];
        double* m = opt.m[i].v.data();
        double* v = opt.v[i].v.data();
        const double* g = leaf.grad.v.data();
        double* w = leaf.value.v.data();
        const std::size_t n = leaf.value.numel();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

struct EpochStats {
    double mean_loss = 0.0;
    std::size_t instances = 0;
};

namespace detail {

struct PreparedInstance {
    const TrainingInstance* inst;
    std::vector<std::uint32_t> cand_pois;
    std::vector<std::uint32_t> cand_cats;
    std::vector<double> labels;
    RngState rng{0};
};

}  // namespace detail

/// One pass over the shuffled instances in mini-batches. Deterministic for a
/// fixed (seed, config, data): the shuffle, negatives and dropout all derive
/// from per-epoch, per-ordinal forks of the seed, and batch workers merge
/// their gradient buffers in a fixed order. Aborts on a non-finite loss,
/// naming the instance.
inline EpochStats train_epoch(ModelParams& params, OptimizerState& opt, const DatasetSplit& split,
                              const Vocab& vocab, std::vector<TrainingInstance>& instances,
                              const TrainConfig& cfg, std::size_t epoch) {
    RngState epoch_rng = RngState(cfg.seed).fork(0xE90C0000 + epoch);
    std::vector<std::size_t> order(instances.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    epoch_rng.shuffle(order);

    const ScoreCfg score_cfg = cfg.score_cfg();
    const std::size_t workers = std::max<std::size_t>(1, cfg.threads);
    std::vector<std::vector<Tensor>> worker_grads;
    for (std::size_t w = 0; w < workers; ++w) worker_grads.push_back(make_grad_buffer(params.store));
    std::vector<Tape> tapes(workers);
    for (auto& t : tapes) t.bind(params.store);

    double loss_sum = 0.0;
    std::size_t done = 0;

    for (std::size_t batch_start = 0; batch_start < order.size(); batch_start += cfg.batch) {
        const std::size_t batch_end = std::min(order.size(), batch_start + cfg.batch);
        const std::size_t bsize = batch_end - batch_start;

        // negatives + per-instance rng, derived from (seed, epoch, ordinal)
        std::vector<detail::PreparedInstance> prepared(bsize);
        for (std::size_t k = 0; k < bsize; ++k) {
            const std::size_t ordinal = batch_start + k;
            TrainingInstance& ti = instances[order[ordinal]];
            RngState inst_rng = epoch_rng.fork(1 + ordinal);
            if (cfg.resample_negatives || ti.negatives.empty())
                ti.negatives = sample_negatives(vocab.n_pois(), ti.positive, inst_rng, cfg.negatives);
            auto& pi = prepared[k];
            pi.inst = &ti;
            pi.cand_pois.push_back(ti.positive);
            pi.labels.push_back(1.0);
            for (std::uint32_t neg : ti.negatives) {
                pi.cand_pois.push_back(neg);
                pi.labels.push_back(0.0);
            }
            for (std::uint32_t p : pi.cand_pois) pi.cand_cats.push_back(vocab.poi_category[p]);
            pi.rng = inst_rng;
        }

        std::vector<double> losses(bsize, 0.0);
        const double scale = 1.0 / static_cast<double>(bsize);
        auto work = [&](std::size_t w) {
            for (std::size_t k = w; k < bsize; k += workers) {
                Tape& tape = tapes[w];
                tape.reset();
                const UserHistory& uh = split.users[prepared[k].inst->user];
                auto fwd = score_instance(tape, params, uh, prepared[k].inst->t, prepared[k].inst->ctx,
                                          prepared[k].cand_pois, prepared[k].cand_cats, prepared[k].labels,
                                          score_cfg, cfg.s1_window, cfg.seq_cap, Mode::train, prepared[k].rng);
                losses[k] = tape.scalar(fwd.loss);
                if (std::isfinite(losses[k])) tape.backward(fwd.loss, scale, worker_grads[w]);
            }
        };
        if (workers == 1) {
            work(0);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
            for (auto& th : pool) th.join();
        }

        for (std::size_t k = 0; k < bsize; ++k) {
            STPIL_REQUIRE(std::isfinite(losses[k]),
                          "train_epoch: non-finite loss at epoch " + std::to_string(epoch) + ", user " +
                              std::to_string(prepared[k].inst->user) + ", step " +
                              std::to_string(prepared[k].inst->t));
            loss_sum += losses[k];
        }
        done += bsize;

        params.store.zero_grads();
        for (std::size_t w = 0; w < workers; ++w) {
            for (std::size_t i = 0; i < params.store.size(); ++i) {
                double* dst = params.store[i].grad.v.data();
                double* src = worker_grads[w][i].v.data();
                const std::size_t n = worker_grads[w][i].numel();
                for (std::size_t j = 0; j < n; ++j) {
                    dst[j] += src[j];
                    src[j] = 0.0;
                }
            }
        }
        adam_step(params.store, opt, cfg);
    }

    return EpochStats{done ? loss_sum / static_cast<double>(done) : 0.0, done};
}

/// End-to-end gradient check on one training instance (eval-style dropout
/// off would weaken it, so the fixed per-call rng keeps train-mode masks
/// constant across rebuilds).
inline FdReport gradcheck_instance(ModelParams& params, const DatasetSplit& split, const Vocab& vocab,
                                   const TrainingInstance& inst, const TrainConfig& cfg,
                                   std::size_t negatives = 3) {
    RngState nrng = RngState(cfg.seed).fork(0x6C0DE);
    std::vector<std::uint32_t> cands{inst.positive};
    std::vector<double> labels{1.0};
    for (std::uint32_t n : sample_negatives(vocab.n_pois(), inst.positive, nrng, negatives)) {
        cands.push_back(n);
        labels.push_back(0.0);
    }
    std::vector<std::uint32_t> cats;
    for (std::uint32_t p : cands) cats.push_back(vocab.poi_category[p]);

    auto build = [&](Tape& tape, ParamStore&) {
        RngState drop_rng(cfg.seed ^ 0xD80);
        auto fwd = score_instance(tape, params, split.users[inst.user], inst.t, inst.ctx, cands, cats, labels,
                                  cfg.score_cfg(), cfg.s1_window, cfg.seq_cap, Mode::train, drop_rng);
        return fwd.loss;
    };
    return finite_diff_check(build, params.store, {.eps = 1e-5, .full_check_max = 256, .sample_count = 200,
                                                   .seed = cfg.seed ^ 0xFD});
}

// ---- checkpoint ------------------------------------------------------------

namespace detail {
inline void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_str(std::ofstream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    STPIL_REQUIRE(in.good(), "checkpoint: truncated file");
    return v;
}
inline std::string read_str(std::ifstream& in) {
    const std::uint64_t n = read_u64(in);
    STPIL_REQUIRE(n < (1u << 20), "checkpoint: implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    STPIL_REQUIRE(in.good(), "checkpoint: truncated file");
    return s;
}
inline void read_doubles(std::ifstream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    STPIL_REQUIRE(in.good(), "checkpoint: truncated file");
}
}  // namespace detail

constexpr const char* kCheckpointMagic = "STPILCKPT.v1";

/// Native-endian binary container: variant, vocab sizes, config hash, every
/// leaf by identifier with shape and raw 64-bit values, and optionally the
/// optimizer moments. Round trips are bit-exact.
inline void save_checkpoint(const ModelParams& params, const OptimizerState* opt, std::uint64_t config_hash,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    STPIL_REQUIRE(out.good(), "save_checkpoint: cannot write '" + path + "'");
    detail::write_str(out, kCheckpointMagic);
    detail::write_str(out, params.variant.name());
    detail::write_u64(out, params.vocab.users);
    detail::write_u64(out, params.vocab.pois);
    detail::write_u64(out, params.vocab.cats);
    detail::write_u64(out, params.vocab.areas);
    detail::write_u64(out, config_hash);
    detail::write_u64(out, params.store.size());
    for (std::size_t i = 0; i < params.store.size(); ++i) {
        const ParamLeaf& leaf = params.store[i];
        detail::write_str(out, leaf.id);
        detail::write_u64(out, leaf.value.shape.size());
        for (std::size_t d : leaf.value.shape) detail::write_u64(out, d);
        detail::write_doubles(out, leaf.value.v);
    }
    detail::write_u64(out, opt ? 1 : 0);
    if (opt) {
        detail::write_u64(out, opt->step);
        for (std::size_t i = 0; i < params.store.size(); ++i) {
            detail::write_doubles(out, opt->m[i].v);
            detail::write_doubles(out, opt->v[i].v);
        }
    }
    detail::write_str(out, "end");
    STPIL_REQUIRE(out.good(), "save_checkpoint: write failed for '" + path + "'");
}

struct LoadedCheckpoint {
    ModelParams params;
    OptimizerState opt;
    bool has_opt = false;
    std::uint64_t config_hash = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    STPIL_REQUIRE(in.good(), "load_checkpoint: cannot open '" + path + "'");
    STPIL_REQUIRE(detail::read_str(in) == kCheckpointMagic, "load_checkpoint: bad magic in '" + path + "'");
    const std::string variant_name = detail::read_str(in);
    VocabSizes vs;
    vs.users = detail::read_u64(in);
    vs.pois = detail::read_u64(in);
    vs.cats = detail::read_u64(in);
    vs.areas = detail::read_u64(in);

    LoadedCheckpoint ck;
    ck.config_hash = detail::read_u64(in);
    RngState dummy(0);
    ck.params = ModelParams::init(vs, VariantSpec::parse(variant_name), dummy);

    const std::uint64_t n_leaves = detail::read_u64(in);
    STPIL_REQUIRE(n_leaves == ck.params.store.size(),
                  "load_checkpoint: leaf count " + std::to_string(n_leaves) + " does not match variant '" +
                      variant_name + "' (" + std::to_string(ck.params.store.size()) + ")");
    for (std::uint64_t i = 0; i < n_leaves; ++i) {
        const std::string id = detail::read_str(in);
        const std::uint64_t ndim = detail::read_u64(in);
        STPIL_REQUIRE(ndim <= 2, "load_checkpoint: bad rank for '" + id + "'");
        std::vector<std::size_t> shape;
        for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(detail::read_u64(in));
        const std::size_t idx = ck.params.store.index_of(id);
        ParamLeaf& leaf = ck.params.store[idx];
        STPIL_REQUIRE(leaf.value.shape == shape, "load_checkpoint: shape mismatch for '" + id + "': file " +
                                                     shape_str(shape) + " vs model " +
                                                     shape_str(leaf.value.shape));
        detail::read_doubles(in, leaf.value.v);
    }
    ck.has_opt = detail::read_u64(in) == 1;
    ck.opt = OptimizerState::for_store(ck.params.store);
    if (ck.has_opt) {
        ck.opt.step = detail::read_u64(in);
        for (std::size_t i = 0; i < ck.params.store.size(); ++i) {
            detail::read_doubles(in, ck.opt.m[i].v);
            detail::read_doubles(in, ck.opt.v[i].v);
        }
    }
    STPIL_REQUIRE(detail::read_str(in) == "end", "load_checkpoint: missing trailer (truncated file?)");
    return ck;
}

inline void ensure_vocab_match(const ModelParams& params, const Vocab& vocab) {
    const VocabSizes ds = VocabSizes::of(vocab);
    STPIL_REQUIRE(params.vocab == ds,
                  "checkpoint/dataset vocab mismatch: checkpoint (U,P,C,G) = (" +
                      std::to_string(params.vocab.users) + "," + std::to_string(params.vocab.pois) + "," +
                      std::to_string(params.vocab.cats) + "," + std::to_string(params.vocab.areas) +
                      ") vs dataset (" + std::to_string(ds.users) + "," + std::to_string(ds.pois) + "," +
                      std::to_string(ds.cats) + "," + std::to_string(ds.areas) + ")");
}

}  // namespace stpil

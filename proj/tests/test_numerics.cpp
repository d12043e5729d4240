#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "stpil/gradcheck.hpp"
#include "stpil/params.hpp"
#include "stpil/rng.hpp"
#include "stpil/tape.hpp"

using namespace stpil;

namespace {
Tensor tensor2d(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }
}  // namespace

TEST_CASE("affine identity and hand-computed cases") {
    Tape tape;
    Var I = tape.constant(tensor2d(2, 2, {1, 0, 0, 1}));
    Var x = tape.constant(Tensor::vec({3, 4}));
    Var y = tape.affine(I, x);
    CHECK(tape.read(y) == std::vector<double>{3, 4});

    Var W = tape.constant(tensor2d(2, 2, {1, 1, 0, 1}));
    Var b = tape.constant(Tensor::vec({0, 0}));
    Var y2 = tape.affine(W, tape.constant(Tensor::vec({1, 2})), b);
    CHECK(tape.read(y2) == std::vector<double>{3, 2});
}

TEST_CASE("affine matches triple-loop oracle on random inputs") {
    RngState rng(7);
    const std::size_t m = 13, n = 29;
    auto wv = oracle::random_values(m * n, rng);
    auto xv = oracle::random_values(n, rng);
    auto bv = oracle::random_values(m, rng);
    Tape tape;
    Var y = tape.affine(tape.constant(tensor2d(m, n, wv)), tape.constant(Tensor({n}, xv)),
                        tape.constant(Tensor({m}, bv)));
    auto expect = oracle::matvec(wv, m, n, xv, &bv);
    auto got = tape.read(y);
    for (std::size_t i = 0; i < m; ++i) CHECK_THAT(got[i], Catch::Matchers::WithinRel(expect[i], 1e-13));
}

TEST_CASE("affine rejects mismatched shapes with both shapes named") {
    Tape tape;
    Var W = tape.constant(tensor2d(2, 3, {1, 2, 3, 4, 5, 6}));
    Var x = tape.constant(Tensor::vec({1, 2}));
    try {
        tape.affine(W, x);
        FAIL("expected shape mismatch rejection");
    } catch (const error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[1x2]") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry, saturation, direct formula") {
    Tape tape;
    Var u = tape.softmax(tape.constant(Tensor::vec({0, 0, 0, 0, 0, 0, 0})));
    for (double p : tape.read(u)) CHECK_THAT(p, Catch::Matchers::WithinAbs(1.0 / 7.0, 1e-15));

    Var big = tape.softmax(tape.constant(Tensor::vec({1000, 1000})));
    auto pb = tape.read(big);
    CHECK(pb[0] == 0.5);
    CHECK(pb[1] == 0.5);

    Var s = tape.softmax(tape.constant(Tensor::vec({1, 2, 3})));
    auto ps = tape.read(s);
    // Frozen from an extended-precision direct evaluation of exp(x)/sum.
    CHECK_THAT(ps[0], Catch::Matchers::WithinAbs(0.09003057317038046, 1e-15));
    CHECK_THAT(ps[1], Catch::Matchers::WithinAbs(0.24472847105479765, 1e-15));
    CHECK_THAT(ps[2], Catch::Matchers::WithinAbs(0.66524095577482190, 1e-15));
    auto ref = oracle::softmax_ld({1, 2, 3});
    for (int i = 0; i < 3; ++i) CHECK_THAT(ps[i], Catch::Matchers::WithinAbs(ref[i], 1e-15));

    CHECK_THROWS_AS(tape.softmax(tape.constant(std::span<const double>{})), error);
}

TEST_CASE("softmax properties: sum, permutation equivariance, shift invariance") {
    RngState rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 1 + rng.uniform_below(9);
        auto xs = oracle::random_values(k, rng, -30.0, 30.0);
        Tape tape;
        auto p = tape.read(tape.softmax(tape.constant(Tensor({k}, xs))));
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));

        // rotate-by-one permutation
        std::vector<double> rot(xs.rbegin(), xs.rend());
        auto prot = tape.read(tape.softmax(tape.constant(Tensor({k}, rot))));
        for (std::size_t i = 0; i < k; ++i) CHECK_THAT(prot[k - 1 - i], Catch::Matchers::WithinAbs(p[i], 1e-13));

        const double shift = rng.uniform(-50.0, 50.0);
        std::vector<double> shifted = xs;
        for (double& v : shifted) v += shift;
        auto pshift = tape.read(tape.softmax(tape.constant(Tensor({k}, shifted))));
        for (std::size_t i = 0; i < k; ++i) CHECK_THAT(pshift[i], Catch::Matchers::WithinAbs(p[i], 1e-12));
    }
}

TEST_CASE("lstm cell: zero parameters give zero state") {
    const std::size_t in = 3, h = 4;
    Tape tape;
    Tape::LstmParams p{tape.constant(Tensor::zeros({4 * h, in})), tape.constant(Tensor::zeros({4 * h, h})),
                       tape.constant(Tensor::zeros({4 * h}))};
    auto out = tape.lstm_cell(p, tape.constant(Tensor::vec({1.5, -2.0, 0.25})), tape.zeros(h), tape.zeros(h));
    for (double v : tape.read(out.h)) CHECK(v == 0.0);
    for (double v : tape.read(out.c)) CHECK(v == 0.0);
}

TEST_CASE("lstm cell matches scalar re-implementation") {
    RngState rng(3);
    const std::size_t in = 5, h = 6;
    oracle::LstmRef ref{oracle::random_values(4 * h * in, rng), oracle::random_values(4 * h * h, rng),
                        oracle::random_values(4 * h, rng), in, h};

    Tape tape;
    Tape::LstmParams p{tape.constant(tensor2d(4 * h, in, ref.wx)), tape.constant(tensor2d(4 * h, h, ref.wh)),
                       tape.constant(Tensor({4 * h}, ref.b))};

    SECTION("zero input, zero state") {
        std::vector<double> x(in, 0.0);
        auto out = tape.lstm_cell(p, tape.constant(Tensor({in}, x)), tape.zeros(h), tape.zeros(h));
        std::vector<double> hv(h, 0.0), cv(h, 0.0);
        oracle::lstm_step(ref, x, hv, cv);
        auto gh = tape.read(out.h);
        auto gc = tape.read(out.c);
        for (std::size_t j = 0; j < h; ++j) {
            CHECK_THAT(gh[j], Catch::Matchers::WithinAbs(hv[j], 1e-14));
            CHECK_THAT(gc[j], Catch::Matchers::WithinAbs(cv[j], 1e-14));
        }
    }

    SECTION("multi-step sequence vs chained scalar steps, hidden stays in (-1,1)") {
        const std::size_t T = 9;
        std::vector<Var> xs;
        std::vector<std::vector<double>> xvals;
        for (std::size_t t = 0; t < T; ++t) {
            xvals.push_back(oracle::random_values(in, rng));
            xs.push_back(tape.constant(Tensor({in}, xvals.back())));
        }
        Var hc = tape.lstm_seq(p, tape.zeros(h), tape.zeros(h), xs);
        std::vector<double> hv(h, 0.0), cv(h, 0.0);
        for (std::size_t t = 0; t < T; ++t) oracle::lstm_step(ref, xvals[t], hv, cv);
        auto got = tape.read(hc);
        for (std::size_t j = 0; j < h; ++j) {
            CHECK_THAT(got[j], Catch::Matchers::WithinAbs(hv[j], 1e-12));
            CHECK_THAT(got[h + j], Catch::Matchers::WithinAbs(cv[j], 1e-12));
            CHECK(std::fabs(got[j]) < 1.0);
        }
    }

    SECTION("sequence of length 1 equals a single cell from zero state") {
        auto xv = oracle::random_values(in, rng);
        Var x = tape.constant(Tensor({in}, xv));
        const Var xs[1] = {x};
        Var hc = tape.lstm_seq(p, tape.zeros(h), tape.zeros(h), xs);
        auto cell = tape.lstm_cell(p, x, tape.zeros(h), tape.zeros(h));
        const auto full = tape.read(hc);
        CHECK(tape.read(cell.h) == std::vector<double>(full.begin(), full.begin() + static_cast<long>(h)));
    }

    SECTION("state size mismatch rejected") {
        CHECK_THROWS_AS(tape.lstm_cell(p, tape.zeros(in), tape.zeros(h + 1), tape.zeros(h)), error);
    }
}

TEST_CASE("dropout semantics") {
    RngState rng(17);
    Tape tape;
    auto xv = oracle::random_values(64, rng);
    Var x = tape.constant(Tensor({64}, xv));

    SECTION("eval mode and rate 0 are the identity (same variable)") {
        CHECK(tape.dropout(x, 0.7, Mode::eval, rng).id == x.id);
        CHECK(tape.dropout(x, 0.0, Mode::train, rng).id == x.id);
    }

    SECTION("rate >= 1 rejected") {
        CHECK_THROWS_AS(tape.dropout(x, 1.0, Mode::train, rng), error);
    }

    SECTION("identical seed gives bit-identical masks") {
        RngState r1(5), r2(5);
        auto a = tape.read(tape.dropout(x, 0.5, Mode::train, r1));
        auto b = tape.read(tape.dropout(x, 0.5, Mode::train, r2));
        CHECK(a == b);
    }

    SECTION("Monte-Carlo mean of train-mode output recovers the input") {
        RngState r(23);
        const double rate = 0.5;
        const int draws = 100000;
        std::vector<double> acc(64, 0.0);
        for (int d = 0; d < draws; ++d) {
            Tape t2;
            Var v = t2.dropout(t2.constant(Tensor({64}, xv)), rate, Mode::train, r);
            const double* p = t2.value(v);
            for (int i = 0; i < 64; ++i) acc[i] += p[i];
        }
        // sd of the mean is |x| * sqrt((1-rate)/rate) / sqrt(draws) ~ |x| * 3.2e-3
        for (int i = 0; i < 64; ++i)
            CHECK_THAT(acc[i] / draws, Catch::Matchers::WithinAbs(xv[i], 4.5 * std::fabs(xv[i]) * 3.2e-3 + 1e-6));
    }
}

TEST_CASE("masked_mean cases and oracle") {
    Tape tape;
    Var rows = tape.constant(tensor2d(2, 2, {1, 1, 3, 3}));
    const std::uint8_t ones[2] = {1, 1};
    CHECK(tape.read(tape.masked_mean(rows, ones)) == std::vector<double>{2, 2});

    const std::uint8_t zeros2[2] = {0, 0};
    CHECK(tape.read(tape.masked_mean(rows, zeros2)) == std::vector<double>{0, 0});

    RngState rng(11);
    const std::size_t T = 17, d = 5;
    auto rv = oracle::random_values(T * d, rng);
    std::vector<std::uint8_t> mask(T);
    for (auto& m : mask) m = rng.uniform_below(2) ? 1 : 0;
    Var M = tape.constant(tensor2d(T, d, rv));
    auto got = tape.read(tape.masked_mean(M, mask));

    // explicit filter-then-average loop
    std::vector<double> expect(d, 0.0);
    double cnt = 0;
    for (std::size_t i = 0; i < T; ++i)
        if (mask[i]) {
            for (std::size_t j = 0; j < d; ++j) expect[j] += rv[i * d + j];
            cnt += 1;
        }
    if (cnt > 0)
        for (double& e : expect) e /= cnt;
    for (std::size_t j = 0; j < d; ++j) CHECK_THAT(got[j], Catch::Matchers::WithinAbs(expect[j], 1e-14));
}

TEST_CASE("grads of sum(W*x) and backward determinism") {
    ParamStore store;
    RngState rng(29);
    const std::size_t m = 4, n = 3;
    const std::size_t wi = store.add("W", Tensor({m, n}, oracle::random_values(m * n, rng)));
    const std::vector<double> xv = {0.5, -1.25, 2.0};

    Tape tape;
    tape.bind(store);
    Var W = tape.param(store, wi);
    Var y = tape.affine(W, tape.constant(Tensor({n}, xv)));
    Var loss = tape.dot(y, tape.constant(Tensor::vec({1, 1, 1, 1})));

    grads(tape, loss, store);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) CHECK(store[wi].grad.at(r, c) == xv[c]);

    auto first = store[wi].grad.v;
    grads(tape, loss, store);
    CHECK(store[wi].grad.v == first);  // identical on a repeated pass

    CHECK_THROWS_AS(grads(tape, y, store), error);  // non-scalar root
}

TEST_CASE("finite_diff_check: quadratic and softmax cross-entropy") {
    SECTION("theta^2 at theta=3") {
        ParamStore store;
        const std::size_t ti = store.add("theta", Tensor::vec({3.0}));
        auto build = [&](Tape& tape, ParamStore& s) {
            Var t = tape.param(s, ti);
            return tape.dot(t, t);
        };
        Tape tape;
        tape.bind(store);
        grads(tape, build(tape, store), store);
        CHECK_THAT(store[ti].grad.v[0], Catch::Matchers::WithinAbs(6.0, 1e-12));
        auto report = finite_diff_check(build, store, {.eps = 1e-5});
        CHECK_THAT(report.worst_numeric == 0.0 ? 6.0 : report.worst_numeric,
                   Catch::Matchers::WithinAbs(6.0, 1e-8));
        CHECK(report.max_rel_err < 1e-8);
    }

    SECTION("softmax cross-entropy toy") {
        ParamStore store;
        RngState rng(31);
        const std::size_t zi = store.add("z", Tensor({6}, oracle::random_values(6, rng)));
        auto build = [&](Tape& tape, ParamStore& s) {
            Var p = tape.softmax(tape.param(s, zi));
            Var picked = tape.slice(p, 2, 1);
            return tape.scale(tape.log(picked), -1.0);
        };
        auto report = finite_diff_check(build, store, {.eps = 1e-5});
        CHECK(report.max_rel_err < 1e-6);
    }
}

TEST_CASE("per-operation gradients match central finite differences") {
    RngState rng(41);
    auto vec = [&](std::size_t n) { return Tensor({n}, oracle::random_values(n, rng)); };
    auto mat = [&](std::size_t r, std::size_t c) { return Tensor({r, c}, oracle::random_values(r * c, rng)); };

    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_below(6);

        oracle::OpGradCheck affine_chk{
            {mat(4, n), vec(n), vec(4)},
            [](Tape& t, const std::vector<Var>& in) { return t.affine(in[0], in[1], in[2]); }};
        CHECK(affine_chk.max_rel_err(100 + trial) < 1e-4);

        oracle::OpGradCheck tanh_chk{{vec(n)}, [](Tape& t, const std::vector<Var>& in) { return t.tanh(in[0]); }};
        CHECK(tanh_chk.max_rel_err(200 + trial) < 1e-4);

        oracle::OpGradCheck sig_chk{{vec(n)}, [](Tape& t, const std::vector<Var>& in) { return t.sigmoid(in[0]); }};
        CHECK(sig_chk.max_rel_err(300 + trial) < 1e-4);

        oracle::OpGradCheck relu_chk{{vec(n)}, [](Tape& t, const std::vector<Var>& in) { return t.relu(in[0]); }};
        CHECK(relu_chk.max_rel_err(400 + trial) < 1e-4);

        oracle::OpGradCheck soft_chk{{vec(n)}, [](Tape& t, const std::vector<Var>& in) { return t.softmax(in[0]); }};
        CHECK(soft_chk.max_rel_err(500 + trial) < 1e-4);

        oracle::OpGradCheck concat_chk{{vec(n), vec(3)}, [](Tape& t, const std::vector<Var>& in) {
                                           return t.concat({in[0], in[1]});
                                       }};
        CHECK(concat_chk.max_rel_err(600 + trial) < 1e-4);

        oracle::OpGradCheck dot_scale_chk{{vec(n), vec(n)}, [](Tape& t, const std::vector<Var>& in) {
                                              return t.scale_by(t.dot(in[0], in[1]), in[0]);
                                          }};
        CHECK(dot_scale_chk.max_rel_err(700 + trial) < 1e-4);

        std::vector<std::uint8_t> mask(5);
        for (auto& m : mask) m = rng.uniform_below(2) ? 1 : 0;
        oracle::OpGradCheck mm_chk{{mat(5, n)}, [mask](Tape& t, const std::vector<Var>& in) {
                                       return t.masked_mean(in[0], mask);
                                   }};
        CHECK(mm_chk.max_rel_err(800 + trial) < 1e-4);

        oracle::OpGradCheck mix_chk{{vec(3), vec(n), vec(n), vec(n)},
                                    [](Tape& t, const std::vector<Var>& in) {
                                        const Var rows[3] = {in[1], in[2], in[3]};
                                        return t.mix(in[0], rows);
                                    }};
        CHECK(mix_chk.max_rel_err(900 + trial) < 1e-4);

        const std::size_t h = 3;
        oracle::OpGradCheck lstm_chk{
            {mat(4 * h, n), mat(4 * h, h), vec(4 * h), vec(h), vec(h), vec(n), vec(n), vec(n)},
            [](Tape& t, const std::vector<Var>& in) {
                Tape::LstmParams p{in[0], in[1], in[2]};
                const Var xs[3] = {in[5], in[6], in[7]};
                return t.lstm_seq(p, in[3], in[4], xs);
            }};
        CHECK(lstm_chk.max_rel_err(1000 + trial) < 1e-4);

        oracle::OpGradCheck bce_chk{{Tensor::vec({0.3}), Tensor::vec({0.8}), Tensor::vec({0.51})},
                                    [](Tape& t, const std::vector<Var>& in) {
                                        const double labels[3] = {1, 0, 0};
                                        const Var ps[3] = {in[0], in[1], in[2]};
                                        return t.bce(labels, ps);
                                    }};
        CHECK(bce_chk.max_rel_err(1100 + trial) < 1e-4);

        oracle::OpGradCheck slice_add_chk{{vec(6), vec(3)}, [](Tape& t, const std::vector<Var>& in) {
                                              return t.add(t.slice(in[0], 1, 3), in[1]);
                                          }};
        CHECK(slice_add_chk.max_rel_err(1200 + trial) < 1e-4);
    }
}

TEST_CASE("dropout gradient in train mode") {
    // Fixed seed per rebuild keeps the mask constant, so the finite
    // difference is taken through the same mask the analytic pass used.
    ParamStore store;
    RngState init(47);
    const std::size_t xi = store.add("x", Tensor({8}, oracle::random_values(8, init)));
    auto build = [&](Tape& tape, ParamStore& s) {
        RngState r(901);
        Var d = tape.dropout(tape.param(s, xi), 0.4, Mode::train, r);
        return tape.dot(d, d);
    };
    auto report = finite_diff_check(build, store, {.eps = 1e-5});
    CHECK(report.max_rel_err < 1e-6);
}

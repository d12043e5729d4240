#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/geodata.hpp"
#include "stpil/rng.hpp"

namespace stpil {

/// Synthetic check-in corpus with planted periodic structure: a global
/// assignment of one (day-of-week, slot, area) context per POI, and users
/// who cycle through a personal subset of those contexts week after week.
/// With zero noise every visit's POI is a deterministic function of its
/// context; with noise 1 POIs are uniform random.
struct SynthConfig {
    std::size_t users = 200;
    std::size_t pois = 300;
    std::size_t areas = 20;
    std::size_t visits_per_user = 30;
    std::size_t patterns_per_user = 6;
    std::size_t weeks = 18;
    double noise = 0.10;
    std::uint64_t seed = 7;
};

namespace synth_detail {
struct Context {
    int dow;   // 1..7
    int slot;  // 0..23
    std::size_t area;
};
}  // namespace synth_detail

inline std::string synth_tsv(const SynthConfig& cfg) {
    STPIL_REQUIRE(cfg.pois % cfg.areas == 0, "synth: pois must be a multiple of areas");
    STPIL_REQUIRE(cfg.noise >= 0.0 && cfg.noise <= 1.0, "synth: noise must be in [0,1]");
    STPIL_REQUIRE(cfg.patterns_per_user >= 1 && cfg.patterns_per_user <= cfg.pois,
                  "synth: patterns_per_user out of range");
    const std::size_t per_area = cfg.pois / cfg.areas;
    STPIL_REQUIRE(per_area <= 7 * 24, "synth: more POIs per area than distinct contexts");
    RngState rng(cfg.seed);

    // Distinct geohash-5 cells, 0.5 degrees apart; POIs sit at their area's
    // cell center so every POI maps to exactly one area code.
    std::vector<GeoPoint> area_center;
    for (std::size_t a = 0; a < cfg.areas; ++a) {
        const GeoPoint probe{10.0 + 0.5 * static_cast<double>(a % 40),
                             20.0 + 0.5 * static_cast<double>(a / 40)};
        area_center.push_back(decode_geohash5(encode_geohash5(probe).bits).center());
    }

    // One context per POI: per area, a seeded shuffle of the 168 (dow, slot)
    // pairs; POI j of area a takes the j-th pair. This makes context -> POI a
    // function and guarantees balanced visit counts.
    std::vector<synth_detail::Context> poi_context(cfg.pois);
    for (std::size_t a = 0; a < cfg.areas; ++a) {
        std::vector<std::size_t> pairs(7 * 24);
        for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = i;
        rng.shuffle(pairs);
        for (std::size_t k = 0; k < per_area; ++k) {
            poi_context[a * per_area + k] =
                synth_detail::Context{static_cast<int>(pairs[k] / 24) + 1, static_cast<int>(pairs[k] % 24), a};
        }
    }

    // Monday 2012-04-02 00:00 UTC
    const std::int64_t monday = days_from_civil(2012, 4, 2) * 86400;

    std::string out;
    out.reserve(cfg.users * cfg.visits_per_user * 96);
    for (std::size_t u = 0; u < cfg.users; ++u) {
        // personal schedule: a round-robin slice of the global context list,
        // so every POI is some user's habit the same number of times
        std::vector<std::size_t> patterns(cfg.patterns_per_user);
        for (std::size_t k = 0; k < cfg.patterns_per_user; ++k)
            patterns[k] = (u * cfg.patterns_per_user + k) % cfg.pois;

        for (std::size_t v = 0; v < cfg.visits_per_user; ++v) {
            // quota fill keeps every pattern visited, remainder is random
            const std::size_t pat =
                v < cfg.patterns_per_user * (cfg.visits_per_user / cfg.patterns_per_user)
                    ? patterns[v % cfg.patterns_per_user]
                    : patterns[rng.uniform_below(cfg.patterns_per_user)];
            const auto& ctx = poi_context[pat];
            std::size_t poi = pat;
            if (cfg.noise > 0.0 && rng.next_double() < cfg.noise) poi = rng.uniform_below(cfg.pois);

            const std::int64_t week = static_cast<std::int64_t>(rng.uniform_below(cfg.weeks));
            const std::int64_t ts = monday + (week * 7 + (ctx.dow - 1)) * 86400 + ctx.slot * 3600 +
                                    static_cast<std::int64_t>(rng.uniform_below(3600));
            const GeoPoint& pt = area_center[poi / per_area];
            out += "user" + std::to_string(u);
            out += "\tpoi" + std::to_string(poi);
            out += "\tcat" + std::to_string(poi % 10);
            out += "\tSynthetic Category " + std::to_string(poi % 10);
            out += "\t" + fmt_double(pt.latitude);
            out += "\t" + fmt_double(pt.longitude);
            out += "\t0\t" + format_checkin_time(ts) + "\n";
        }
    }
    return out;
}

inline void write_synth(const SynthConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    STPIL_REQUIRE(out.good(), "write_synth: cannot write '" + path + "'");
    out << synth_tsv(cfg);
    STPIL_REQUIRE(out.good(), "write_synth: write failed for '" + path + "'");
}

}  // namespace stpil

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/ingest.hpp"

namespace stpil {

/// Candidate POI plus the spatial-temporal context known at prediction time.
struct ContextQuery {
    std::uint32_t poi = 0;
    std::uint32_t cat = 0;
    std::uint8_t dow = 1;   // w^t
    std::uint8_t slot = 0;  // m^t
    std::uint32_t area = 0;  // g^t
};

inline ContextQuery context_of(const CheckIn& c) { return ContextQuery{c.poi, c.cat, c.dow, c.slot, c.area}; }

/// Seven binary masks over history positions 0..t-2, one per weekday.
/// Disjoint; their elementwise sum is all ones.
struct DailyMasks {
    std::array<std::vector<std::uint8_t>, 7> by_day;
    std::size_t len() const { return by_day[0].size(); }
};

/// `t` is the 1-based current step: masks cover the t-1 earlier check-ins.
/// t = 1 yields seven empty masks.
inline DailyMasks build_daily_masks(const UserHistory& history, std::size_t t) {
    STPIL_REQUIRE(t >= 1 && t <= history.checkins.size(),
                  "build_daily_masks: step " + std::to_string(t) + " out of range for history of length " +
                      std::to_string(history.checkins.size()));
    DailyMasks m;
    const std::size_t n = t - 1;
    for (auto& d : m.by_day) d.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) m.by_day[history.checkins[i].dow - 1][i] = 1;
    return m;
}

/// A context-selected POI subsequence, with the originating history
/// positions kept for auditing.
struct Seq {
    std::vector<std::uint32_t> pois;
    std::vector<std::size_t> positions;  // strictly increasing, all < t-1 (0-based)

    std::size_t size() const { return pois.size(); }
    bool empty() const { return pois.empty(); }

    void push(std::uint32_t poi, std::size_t pos) {
        pois.push_back(poi);
        positions.push_back(pos);
    }

    void cap_to_most_recent(std::size_t cap) {
        if (pois.size() <= cap) return;
        const std::size_t drop = pois.size() - cap;
        pois.erase(pois.begin(), pois.begin() + static_cast<std::ptrdiff_t>(drop));
        positions.erase(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(drop));
    }
};

struct ShortTermSeqs {
    Seq s1, s2, s3, s4;
};

/// Most recent `window` POIs before step t, chronological.
inline Seq build_s1(const UserHistory& history, std::size_t t, std::size_t window) {
    STPIL_REQUIRE(window >= 1, "build_s1: window must be positive");
    Seq s;
    const std::size_t n = t - 1;
    const std::size_t start = n > window ? n - window : 0;
    for (std::size_t i = start; i < n; ++i) s.push(history.checkins[i].poi, i);
    return s;
}

/// All prior check-ins in the current area, chronological, capped to the
/// most recent `cap`.
inline Seq build_s2(const UserHistory& history, std::size_t t, std::uint32_t area, std::size_t cap) {
    Seq s;
    for (std::size_t i = 0; i + 1 < t; ++i)
        if (history.checkins[i].area == area) s.push(history.checkins[i].poi, i);
    s.cap_to_most_recent(cap);
    return s;
}

inline bool slot_similar(std::uint8_t slot, std::uint8_t m_t) {
    const int lo = (int(m_t) + 23) % 24;
    const int hi = (int(m_t) + 1) % 24;
    return slot == m_t || slot == lo || slot == hi;
}

/// All prior check-ins whose slot is in {m-1, m, m+1} with wraparound
/// modulo 24, chronological, capped to the most recent `cap`.
inline Seq build_s3(const UserHistory& history, std::size_t t, std::uint8_t m_t, std::size_t cap) {
    Seq s;
    for (std::size_t i = 0; i + 1 < t; ++i)
        if (slot_similar(history.checkins[i].slot, m_t)) s.push(history.checkins[i].poi, i);
    s.cap_to_most_recent(cap);
    return s;
}

/// Position-level intersection of S2 and S3: the check-in events present in
/// both, chronological. (Same visit event, not same POI id.)
inline Seq build_s4(const Seq& s2, const Seq& s3) {
    Seq s;
    std::size_t i = 0, j = 0;
    while (i < s2.positions.size() && j < s3.positions.size()) {
        if (s2.positions[i] == s3.positions[j]) {
            s.push(s2.pois[i], s2.positions[i]);
            ++i;
            ++j;
        } else if (s2.positions[i] < s3.positions[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return s;
}

inline ShortTermSeqs build_short_term(const UserHistory& history, std::size_t t, const ContextQuery& ctx,
                                      std::size_t s1_window, std::size_t cap) {
    STPIL_REQUIRE(t >= 1 && t <= history.checkins.size(), "build_short_term: step out of range");
    ShortTermSeqs s;
    s.s1 = build_s1(history, t, s1_window);
    s.s2 = build_s2(history, t, ctx.area, cap);
    s.s3 = build_s3(history, t, ctx.slot, cap);
    s.s4 = build_s4(s.s2, s.s3);
    return s;
}

}  // namespace stpil

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stpil/common.hpp"
#include "stpil/geodata.hpp"

namespace stpil {

struct RawCheckIn {
    std::string user_id;
    std::string venue_id;
    std::string category_id;
    std::string category_name;
    double latitude = 0.0;
    double longitude = 0.0;
    int tz_offset_minutes = 0;
    std::int64_t utc_epoch = 0;
};

struct ParseReport {
    std::size_t lines = 0;
    std::size_t malformed = 0;
};

struct ParsedTsv {
    std::vector<RawCheckIn> records;
    ParseReport report;
};

namespace detail {
inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    try {
        std::size_t used = 0;
        out = std::stod(std::string(s), &used);
        return used == s.size() && !s.empty();
    } catch (...) {
        return false;
    }
}

inline bool parse_int(std::string_view s, int& out) {
    try {
        std::size_t used = 0;
        out = std::stoi(std::string(s), &used);
        return used == s.size() && !s.empty();
    } catch (...) {
        return false;
    }
}
}  // namespace detail

/// One check-in per well-formed line; malformed lines are counted in the
/// report, never silently dropped. Columns: user, venue, category id,
/// category name, latitude, longitude, offset minutes, timestamp.
inline ParsedTsv parse_tsv_text(std::string_view text) {
    ParsedTsv out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        ++out.report.lines;

        const auto cols = detail::split_tabs(line);
        RawCheckIn r;
        int offset = 0;
        bool ok = cols.size() == 8;
        if (ok) ok = detail::parse_double(cols[4], r.latitude) && detail::parse_double(cols[5], r.longitude);
        if (ok) ok = detail::parse_int(cols[6], offset);
        if (ok) ok = r.latitude >= -90.0 && r.latitude <= 90.0 && r.longitude >= -180.0 && r.longitude < 180.0;
        if (ok) ok = offset >= -1440 && offset <= 1440;
        if (ok) {
            try {
                r.utc_epoch = parse_checkin_time(std::string(cols[7]));
            } catch (const error&) {
                ok = false;
            }
        }
        if (!ok) {
            ++out.report.malformed;
            continue;
        }
        r.user_id = std::string(cols[0]);
        r.venue_id = std::string(cols[1]);
        r.category_id = std::string(cols[2]);
        r.category_name = std::string(cols[3]);
        r.tz_offset_minutes = offset;
        out.records.push_back(std::move(r));
    }
    return out;
}

inline ParsedTsv parse_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    STPIL_REQUIRE(in.good(), "parse_tsv: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_tsv_text(buf.str());
}

struct FilterStats {
    std::size_t input = 0;
    std::size_t removed_rare_poi = 0;
    std::size_t removed_truncation = 0;
    std::size_t removed_short_user = 0;
    std::size_t dropped_users = 0;
    std::size_t kept = 0;
};

/// The dataset filter, applied once in this order: (1) drop check-ins at
/// POIs seen fewer than 5 times globally, (2) keep each user's 500 most
/// recent surviving check-ins, (3) drop users left with fewer than 3.
/// POI counts are taken before truncation and not recomputed. Output keeps
/// the input order of survivors.
inline std::vector<RawCheckIn> filter_dataset(const std::vector<RawCheckIn>& raw, FilterStats* stats = nullptr) {
    constexpr std::size_t kMinPoiCount = 5;
    constexpr std::size_t kMaxPerUser = 500;
    constexpr std::size_t kMinPerUser = 3;

    FilterStats st;
    st.input = raw.size();

    std::unordered_map<std::string, std::size_t> poi_count;
    for (const auto& r : raw) ++poi_count[r.venue_id];

    std::vector<char> keep(raw.size(), 0);
    std::unordered_map<std::string, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (poi_count[raw[i].venue_id] < kMinPoiCount) {
            ++st.removed_rare_poi;
            continue;
        }
        keep[i] = 1;
        by_user[raw[i].user_id].push_back(i);
    }

    for (auto& [user, idxs] : by_user) {
        if (idxs.size() > kMaxPerUser) {
            // most recent by timestamp, ties by input order
            std::vector<std::size_t> order = idxs;
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return raw[a].utc_epoch < raw[b].utc_epoch;
            });
            for (std::size_t k = 0; k + kMaxPerUser < order.size(); ++k) {
                keep[order[k]] = 0;
                ++st.removed_truncation;
            }
            idxs.erase(std::remove_if(idxs.begin(), idxs.end(), [&](std::size_t i) { return !keep[i]; }),
                       idxs.end());
        }
        if (idxs.size() < kMinPerUser) {
            for (std::size_t i : idxs) {
                keep[i] = 0;
                ++st.removed_short_user;
            }
            ++st.dropped_users;
        }
    }

    std::vector<RawCheckIn> out;
    for (std::size_t i = 0; i < raw.size(); ++i)
        if (keep[i]) out.push_back(raw[i]);
    st.kept = out.size();
    if (stats) *stats = st;
    return out;
}

/// Dense contiguous vocabularies over users U, POIs P, categories C and
/// geohash-5 areas G, indexed by first occurrence. Day-of-week and slot
/// vocabularies are fixed at 7 and 24.
struct Vocab {
    static constexpr std::size_t kDays = 7;
    static constexpr std::size_t kSlots = 24;

    std::vector<std::string> users, pois, cats, areas;
    std::unordered_map<std::string, std::uint32_t> user_index, poi_index, cat_index, area_index;
    std::vector<std::uint32_t> poi_category;  // each POI's category index

    std::size_t n_users() const { return users.size(); }
    std::size_t n_pois() const { return pois.size(); }
    std::size_t n_cats() const { return cats.size(); }
    std::size_t n_areas() const { return areas.size(); }

    static std::uint32_t intern(const std::string& key, std::vector<std::string>& names,
                                std::unordered_map<std::string, std::uint32_t>& index) {
        auto it = index.find(key);
        if (it != index.end()) return it->second;
        const auto id = static_cast<std::uint32_t>(names.size());
        names.push_back(key);
        index.emplace(key, id);
        return id;
    }
};

inline Vocab build_vocab(const std::vector<RawCheckIn>& filtered) {
    STPIL_REQUIRE(!filtered.empty(), "build_vocab: empty dataset after filtering");
    Vocab v;
    for (const auto& r : filtered) {
        Vocab::intern(r.user_id, v.users, v.user_index);
        const std::uint32_t p = Vocab::intern(r.venue_id, v.pois, v.poi_index);
        const std::uint32_t c = Vocab::intern(r.category_id, v.cats, v.cat_index);
        if (p == v.poi_category.size()) v.poi_category.push_back(c);
        const std::string area = encode_geohash5({r.latitude, r.longitude}).geohash5;
        Vocab::intern(area, v.areas, v.area_index);
    }
    return v;
}

/// One encoded visit event.
struct CheckIn {
    std::uint32_t poi = 0;
    std::uint32_t cat = 0;
    std::uint8_t dow = 1;   // 1..7, Monday = 1
    std::uint8_t slot = 0;  // 0..23
    std::uint32_t area = 0;
    std::int64_t ts = 0;
    std::uint32_t src = 0;  // input order, breaks timestamp ties
};

struct UserHistory {
    std::uint32_t user = 0;
    std::vector<CheckIn> checkins;  // chronological; last one is the held-out test target
};

/// Leave-one-out split: for every user the chronologically last check-in is
/// the test target (with its context w, m, g); everything before it is
/// training material.
struct DatasetSplit {
    std::vector<UserHistory> users;

    const CheckIn& test_target(std::size_t u) const { return users[u].checkins.back(); }
    std::size_t train_len(std::size_t u) const { return users[u].checkins.size() - 1; }
};

inline CheckIn encode_checkin(const RawCheckIn& r, const Vocab& v, std::uint32_t src) {
    CheckIn c;
    auto pit = v.poi_index.find(r.venue_id);
    STPIL_REQUIRE(pit != v.poi_index.end(), "encode: POI '" + r.venue_id + "' missing from vocab");
    c.poi = pit->second;
    c.cat = v.cat_index.at(r.category_id);
    const auto t = local_time_features(r.utc_epoch, r.tz_offset_minutes);
    c.dow = static_cast<std::uint8_t>(t.day_of_week);
    c.slot = static_cast<std::uint8_t>(t.time_slot);
    c.area = v.area_index.at(encode_geohash5({r.latitude, r.longitude}).geohash5);
    c.ts = r.utc_epoch;
    c.src = src;
    return c;
}

inline DatasetSplit encode_and_split(const std::vector<RawCheckIn>& filtered, const Vocab& vocab) {
    DatasetSplit split;
    split.users.resize(vocab.n_users());
    for (std::size_t u = 0; u < vocab.n_users(); ++u) split.users[u].user = static_cast<std::uint32_t>(u);
    for (std::size_t i = 0; i < filtered.size(); ++i) {
        const std::uint32_t u = vocab.user_index.at(filtered[i].user_id);
        split.users[u].checkins.push_back(encode_checkin(filtered[i], vocab, static_cast<std::uint32_t>(i)));
    }
    for (auto& uh : split.users) {
        std::stable_sort(uh.checkins.begin(), uh.checkins.end(),
                         [](const CheckIn& a, const CheckIn& b) { return a.ts < b.ts; });
        STPIL_REQUIRE(uh.checkins.size() >= 3, "encode_and_split: user with fewer than 3 check-ins survived filtering");
    }
    return split;
}

struct Dataset {
    Vocab vocab;
    DatasetSplit split;
};

inline Dataset ingest_records(const std::vector<RawCheckIn>& raw, FilterStats* stats = nullptr) {
    auto filtered = filter_dataset(raw, stats);
    STPIL_REQUIRE(!filtered.empty(), "ingest: no check-ins survive filtering");
    Dataset ds;
    ds.vocab = build_vocab(filtered);
    ds.split = encode_and_split(filtered, ds.vocab);
    return ds;
}

// ---- encoded dataset file (versioned, line-delimited) ---------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    STPIL_REQUIRE(out.good(), "save_dataset: cannot write '" + path + "'");
    out << "stpil.dataset.v1\n";
    out << "counts " << ds.vocab.n_users() << " " << ds.vocab.n_pois() << " " << ds.vocab.n_cats() << " "
        << ds.vocab.n_areas() << "\n";
    for (std::size_t p = 0; p < ds.vocab.n_pois(); ++p)
        out << "poi " << ds.vocab.pois[p] << " " << ds.vocab.poi_category[p] << "\n";
    for (const auto& c : ds.vocab.cats) out << "cat " << c << "\n";
    for (const auto& a : ds.vocab.areas) out << "area " << a << "\n";
    for (std::size_t u = 0; u < ds.split.users.size(); ++u) {
        const auto& uh = ds.split.users[u];
        out << "user " << ds.vocab.users[u] << " " << uh.checkins.size() << "\n";
        for (const auto& c : uh.checkins)
            out << "c " << c.poi << " " << c.cat << " " << int(c.dow) << " " << int(c.slot) << " " << c.area
                << " " << c.ts << "\n";
    }
    STPIL_REQUIRE(out.good(), "save_dataset: write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    STPIL_REQUIRE(in.good(), "load_dataset: cannot open '" + path + "'");
    std::string header;
    std::getline(in, header);
    STPIL_REQUIRE(header == "stpil.dataset.v1", "load_dataset: unsupported header '" + header + "'");

    Dataset ds;
    std::string tag;
    std::size_t nu = 0, np = 0, nc = 0, ng = 0;
    in >> tag >> nu >> np >> nc >> ng;
    STPIL_REQUIRE(in.good() && tag == "counts", "load_dataset: missing counts line");
    auto& v = ds.vocab;
    for (std::size_t i = 0; i < np; ++i) {
        std::string name;
        std::uint32_t cat = 0;
        in >> tag >> name >> cat;
        STPIL_REQUIRE(in.good() && tag == "poi", "load_dataset: bad poi line");
        Vocab::intern(name, v.pois, v.poi_index);
        v.poi_category.push_back(cat);
    }
    for (std::size_t i = 0; i < nc; ++i) {
        std::string name;
        in >> tag >> name;
        STPIL_REQUIRE(in.good() && tag == "cat", "load_dataset: bad cat line");
        Vocab::intern(name, v.cats, v.cat_index);
    }
    for (std::size_t i = 0; i < ng; ++i) {
        std::string name;
        in >> tag >> name;
        STPIL_REQUIRE(in.good() && tag == "area", "load_dataset: bad area line");
        Vocab::intern(name, v.areas, v.area_index);
    }
    ds.split.users.resize(nu);
    for (std::size_t u = 0; u < nu; ++u) {
        std::string name;
        std::size_t n = 0;
        in >> tag >> name >> n;
        STPIL_REQUIRE(in.good() && tag == "user", "load_dataset: bad user line");
        Vocab::intern(name, v.users, v.user_index);
        auto& uh = ds.split.users[u];
        uh.user = static_cast<std::uint32_t>(u);
        uh.checkins.resize(n);
        std::uint32_t src = 0;
        for (auto& c : uh.checkins) {
            int dow = 0, slot = 0;
            in >> tag >> c.poi >> c.cat >> dow >> slot >> c.area >> c.ts;
            STPIL_REQUIRE(in.good() && tag == "c", "load_dataset: bad check-in line");
            STPIL_REQUIRE(c.poi < np && c.cat < nc && c.area < ng, "load_dataset: index out of range");
            STPIL_REQUIRE(dow >= 1 && dow <= 7 && slot >= 0 && slot <= 23, "load_dataset: invalid time fields");
            c.dow = static_cast<std::uint8_t>(dow);
            c.slot = static_cast<std::uint8_t>(slot);
            c.src = src++;
        }
    }
    return ds;
}

inline std::uint64_t file_fingerprint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    STPIL_REQUIRE(in.good(), "file_fingerprint: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string s = buf.str();
    return fnv1a64(s.data(), s.size());
}

}  // namespace stpil

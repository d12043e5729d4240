#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

#include "stpil/geodata.hpp"
#include "stpil/ingest.hpp"
#include "stpil/rng.hpp"

using namespace stpil;

namespace {

std::string tsv_line(const std::string& user, const std::string& venue, double lat, double lon, int offset,
                     std::int64_t epoch, const std::string& cat = "cat0") {
    return user + "\t" + venue + "\t" + cat + "\tSome Category\t" + fmt_double(lat) + "\t" + fmt_double(lon) +
           "\t" + std::to_string(offset) + "\t" + format_checkin_time(epoch) + "\n";
}

// n visits by one user at one venue, hourly spacing
std::string visits(const std::string& user, const std::string& venue, int n, std::int64_t base,
                   double lat = 40.7, double lon = -74.0) {
    std::string out;
    for (int i = 0; i < n; ++i) out += tsv_line(user, venue, lat, lon, -240, base + 3600LL * i);
    return out;
}

}  // namespace

TEST_CASE("parse_tsv: well-formed line round-trips all fields") {
    const std::int64_t epoch = parse_checkin_time("Tue Apr 03 18:00:09 +0000 2012");
    auto parsed = parse_tsv_text(tsv_line("u1", "v1", 40.7410, -73.9896, -240, epoch, "catX"));
    REQUIRE(parsed.records.size() == 1);
    CHECK(parsed.report.lines == 1);
    CHECK(parsed.report.malformed == 0);
    const auto& r = parsed.records[0];
    CHECK(r.user_id == "u1");
    CHECK(r.venue_id == "v1");
    CHECK(r.category_id == "catX");
    CHECK(r.category_name == "Some Category");
    CHECK(r.latitude == 40.7410);
    CHECK(r.longitude == -73.9896);
    CHECK(r.tz_offset_minutes == -240);
    CHECK(r.utc_epoch == epoch);
}

TEST_CASE("parse_tsv: empty input and malformed lines") {
    auto empty = parse_tsv_text("");
    CHECK(empty.records.empty());
    CHECK(empty.report.lines == 0);
    CHECK(empty.report.malformed == 0);

    // 7 columns
    auto seven = parse_tsv_text("u\tv\tc\tn\t40.0\t-74.0\t-240\n");
    CHECK(seven.records.empty());
    CHECK(seven.report.malformed == 1);

    // bad latitude, bad timestamp
    auto bad = parse_tsv_text("u\tv\tc\tn\t91.0\t-74.0\t-240\tTue Apr 03 18:00:09 +0000 2012\n" +
                              std::string("u\tv\tc\tn\t40.0\t-74.0\t-240\tnot a time stamp here::\n"));
    CHECK(bad.records.empty());
    CHECK(bad.report.lines == 2);
    CHECK(bad.report.malformed == 2);

    CHECK_THROWS_AS(parse_tsv("/nonexistent/file.tsv"), error);
}

TEST_CASE("filter: POIs seen fewer than 5 times are removed entirely") {
    std::string text = visits("u1", "rare", 4, 1333000000) + visits("u1", "hot", 6, 1334000000);
    auto raw = parse_tsv_text(text).records;
    FilterStats st;
    auto kept = filter_dataset(raw, &st);
    CHECK(st.removed_rare_poi == 4);
    CHECK(kept.size() == 6);
    for (const auto& r : kept) CHECK(r.venue_id == "hot");
}

TEST_CASE("filter: only the 500 most recent check-ins per user survive") {
    auto raw = parse_tsv_text(visits("u1", "v", 600, 1333000000)).records;
    FilterStats st;
    auto kept = filter_dataset(raw, &st);
    CHECK(kept.size() == 500);
    CHECK(st.removed_truncation == 100);
    // the oldest 100 are gone
    for (const auto& r : kept) CHECK(r.utc_epoch >= 1333000000 + 3600LL * 100);
}

TEST_CASE("filter: users left with fewer than 3 check-ins are dropped") {
    std::string text = visits("big", "v", 6, 1333000000) + visits("tiny", "v", 2, 1334000000);
    auto raw = parse_tsv_text(text).records;
    FilterStats st;
    auto kept = filter_dataset(raw, &st);
    CHECK(st.dropped_users == 1);
    CHECK(st.removed_short_user == 2);
    for (const auto& r : kept) CHECK(r.user_id == "big");
}

TEST_CASE("filter is idempotent on typical corpora") {
    RngState rng(404);
    for (int trial = 0; trial < 20; ++trial) {
        std::string text;
        std::int64_t t = 1330000000;
        for (int u = 0; u < 12; ++u)
            for (int i = 0; i < 30; ++i)
                text += tsv_line("user" + std::to_string(u), "venue" + std::to_string(rng.uniform_below(8)),
                                 40.0 + 0.3 * double(rng.uniform_below(5)), -74.0, -240,
                                 t += 1 + static_cast<std::int64_t>(rng.uniform_below(9000)));
        auto raw = parse_tsv_text(text).records;
        auto once = filter_dataset(raw);
        auto twice = filter_dataset(once);
        REQUIRE(once.size() == twice.size());
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(once[i].user_id == twice[i].user_id);
            CHECK(once[i].utc_epoch == twice[i].utc_epoch);
        }
    }
}

TEST_CASE("build_vocab: sizes, first-occurrence order, determinism") {
    std::string text = visits("u1", "a", 5, 1333000000) + visits("u2", "b", 5, 1334000000) +
                       visits("u1", "c", 5, 1335000000);
    auto raw = parse_tsv_text(text).records;
    auto filtered = filter_dataset(raw);
    auto v = build_vocab(filtered);
    CHECK(v.n_users() == 2);
    CHECK(v.n_pois() == 3);
    CHECK(v.pois[0] == "a");
    CHECK(v.pois[1] == "b");
    CHECK(v.pois[2] == "c");
    CHECK(v.poi_category.size() == 3);

    auto v2 = build_vocab(filtered);
    CHECK(v2.pois == v.pois);
    CHECK(v2.users == v.users);
    CHECK(v2.areas == v.areas);
}

TEST_CASE("vocab POIs all have raw frequency >= 5 (independent recount)") {
    RngState rng(777);
    std::string text;
    std::int64_t t = 1330000000;
    for (int u = 0; u < 10; ++u)
        for (int i = 0; i < 25; ++i)
            text += tsv_line("user" + std::to_string(u), "venue" + std::to_string(rng.uniform_below(12)), 40.0,
                             -74.0, 0, t += 1 + static_cast<std::int64_t>(rng.uniform_below(5000)));
    auto raw = parse_tsv_text(text).records;
    std::map<std::string, int> raw_count;
    for (const auto& r : raw) ++raw_count[r.venue_id];

    auto ds = ingest_records(raw);
    for (const auto& poi : ds.vocab.pois) CHECK(raw_count[poi] >= 5);
    for (const auto& uh : ds.split.users) {
        CHECK(uh.checkins.size() >= 3);
        CHECK(uh.checkins.size() <= 500);
    }
}

TEST_CASE("encode_and_split: leave-one-out structure") {
    // u1 visits three venues in a known time order, all venues frequent.
    std::string text;
    for (int k = 0; k < 5; ++k) {
        text += tsv_line("filler" + std::to_string(k), "v1", 40.0, -74.0, 0, 1333000000 + k);
        text += tsv_line("filler" + std::to_string(k), "v2", 40.0, -74.0, 0, 1333100000 + k);
        text += tsv_line("filler" + std::to_string(k), "v3", 40.0, -74.0, 0, 1333200000 + k);
    }
    text += tsv_line("u1", "v1", 40.0, -74.0, 0, 1340000000);
    text += tsv_line("u1", "v2", 40.0, -74.0, 0, 1340001000);
    text += tsv_line("u1", "v3", 40.0, -74.0, 0, 1340002000);
    auto ds = ingest_records(parse_tsv_text(text).records);

    const std::uint32_t u1 = ds.vocab.user_index.at("u1");
    const auto& uh = ds.split.users[u1];
    REQUIRE(uh.checkins.size() == 3);
    CHECK(ds.split.test_target(u1).poi == ds.vocab.poi_index.at("v3"));
    CHECK(ds.split.train_len(u1) == 2);
    CHECK(uh.checkins[0].poi == ds.vocab.poi_index.at("v1"));
    CHECK(uh.checkins[1].poi == ds.vocab.poi_index.at("v2"));
}

TEST_CASE("encode_and_split matches an independent sort-based re-derivation") {
    RngState rng(909);
    std::vector<RawCheckIn> raw;
    std::string text;
    for (int u = 0; u < 5; ++u) {
        for (int i = 0; i < 20; ++i) {
            // deliberate timestamp collisions to exercise the tie rule
            const std::int64_t t = 1333000000 + 1000 * static_cast<std::int64_t>(rng.uniform_below(30));
            text += tsv_line("user" + std::to_string(u), "venue" + std::to_string(rng.uniform_below(6)), 40.0,
                             -74.0, -300, t);
        }
    }
    auto parsed = parse_tsv_text(text).records;
    auto filtered = filter_dataset(parsed);
    auto vocab = build_vocab(filtered);
    auto split = encode_and_split(filtered, vocab);

    // oracle: per user, stable-sort (epoch, input index) pairs
    std::map<std::string, std::vector<std::pair<std::int64_t, std::size_t>>> per_user;
    for (std::size_t i = 0; i < filtered.size(); ++i)
        per_user[filtered[i].user_id].push_back({filtered[i].utc_epoch, i});
    for (auto& [user, items] : per_user) {
        std::stable_sort(items.begin(), items.end());
        const auto& uh = split.users[vocab.user_index.at(user)];
        REQUIRE(uh.checkins.size() == items.size());
        for (std::size_t k = 0; k < items.size(); ++k) {
            CHECK(uh.checkins[k].ts == items[k].first);
            CHECK(uh.checkins[k].src == items[k].second);
        }
        // strictly latest per user, never in earlier positions
        for (std::size_t k = 0; k + 1 < uh.checkins.size(); ++k) CHECK(uh.checkins[k].ts <= uh.checkins.back().ts);
    }
}

TEST_CASE("encoded fields carry local time and geohash area") {
    // offset -240 shifts 02:00 UTC Tuesday back to Monday 22:00
    std::string text;
    for (int k = 0; k < 6; ++k)
        text += tsv_line("u" + std::to_string(k % 2), "v", 57.64911, 10.40744, -240,
                         parse_checkin_time("Tue Apr 03 02:00:00 +0000 2012") + 86400LL * 7 * k);
    auto ds = ingest_records(parse_tsv_text(text).records);
    CHECK(ds.vocab.areas == std::vector<std::string>{"u4pru"});
    for (const auto& uh : ds.split.users)
        for (const auto& c : uh.checkins) {
            CHECK(int(c.dow) == 1);
            CHECK(int(c.slot) == 22);
        }
}

TEST_CASE("dataset file round trip") {
    RngState rng(31337);
    std::string text;
    std::int64_t t = 1330000000;
    for (int u = 0; u < 8; ++u)
        for (int i = 0; i < 15; ++i)
            text += tsv_line("user" + std::to_string(u), "venue" + std::to_string(rng.uniform_below(7)),
                             40.0 + 0.25 * double(rng.uniform_below(4)), -74.0 + 0.25 * double(rng.uniform_below(4)),
                             -240, t += 1 + static_cast<std::int64_t>(rng.uniform_below(40000)),
                             "cat" + std::to_string(rng.uniform_below(3)));
    auto ds = ingest_records(parse_tsv_text(text).records);

    const std::string path = "roundtrip_test.dataset";
    save_dataset(ds, path);
    auto loaded = load_dataset(path);

    CHECK(loaded.vocab.users == ds.vocab.users);
    CHECK(loaded.vocab.pois == ds.vocab.pois);
    CHECK(loaded.vocab.cats == ds.vocab.cats);
    CHECK(loaded.vocab.areas == ds.vocab.areas);
    CHECK(loaded.vocab.poi_category == ds.vocab.poi_category);
    REQUIRE(loaded.split.users.size() == ds.split.users.size());
    for (std::size_t u = 0; u < ds.split.users.size(); ++u) {
        const auto& a = ds.split.users[u].checkins;
        const auto& b = loaded.split.users[u].checkins;
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].poi == b[i].poi);
            CHECK(a[i].cat == b[i].cat);
            CHECK(a[i].dow == b[i].dow);
            CHECK(a[i].slot == b[i].slot);
            CHECK(a[i].area == b[i].area);
            CHECK(a[i].ts == b[i].ts);
        }
    }
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_dataset("/nonexistent.dataset"), error);
}

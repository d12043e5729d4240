#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "stpil/common.hpp"

namespace stpil {

struct GeoPoint {
    double latitude;   // degrees, [-90, 90]
    double longitude;  // degrees, [-180, 180)
};

/// 5-character geohash cell. The 25-bit integer form is the raw interleaved
/// value (longitude bit first); the string form uses the standard base-32
/// alphabet. The two are bijective.
struct AreaCode {
    std::string geohash5;
    std::uint32_t bits;  // < 2^25
};

struct LocalTimeFeatures {
    int day_of_week;  // 1..7, Monday = 1
    int time_slot;    // 0..23, local hour
};

namespace geo {

inline constexpr const char* kBase32 = "0123456789bcdefghjkmnpqrstuvwxyz";

inline int base32_index(char c) {
    for (int i = 0; i < 32; ++i)
        if (kBase32[i] == c) return i;
    return -1;
}

}  // namespace geo

/// Standard geohash at precision 5: 25 bits from alternating binary
/// bisection of longitude (first) and latitude, grouped into five base-32
/// characters.
inline AreaCode encode_geohash5(const GeoPoint& p) {
    STPIL_REQUIRE(p.latitude >= -90.0 && p.latitude <= 90.0,
                  "encode_geohash5: latitude " + fmt_double(p.latitude) + " out of [-90,90]");
    STPIL_REQUIRE(p.longitude >= -180.0 && p.longitude < 180.0,
                  "encode_geohash5: longitude " + fmt_double(p.longitude) + " out of [-180,180)");
    double lat_lo = -90.0, lat_hi = 90.0;
    double lon_lo = -180.0, lon_hi = 180.0;
    std::uint32_t bits = 0;
    bool lon_turn = true;
    for (int i = 0; i < 25; ++i) {
        bits <<= 1;
        if (lon_turn) {
            const double mid = (lon_lo + lon_hi) / 2.0;
            if (p.longitude >= mid) {
                bits |= 1;
                lon_lo = mid;
            } else {
                lon_hi = mid;
            }
        } else {
            const double mid = (lat_lo + lat_hi) / 2.0;
            if (p.latitude >= mid) {
                bits |= 1;
                lat_lo = mid;
            } else {
                lat_hi = mid;
            }
        }
        lon_turn = !lon_turn;
    }
    std::string s(5, '0');
    for (int i = 0; i < 5; ++i) s[static_cast<std::size_t>(i)] = geo::kBase32[(bits >> (20 - 5 * i)) & 0x1f];
    return AreaCode{s, bits};
}

inline std::uint32_t geohash5_to_bits(const std::string& code) {
    STPIL_REQUIRE(code.size() == 5, "geohash5_to_bits: expected 5 characters, got '" + code + "'");
    std::uint32_t bits = 0;
    for (char c : code) {
        const int idx = geo::base32_index(c);
        STPIL_REQUIRE(idx >= 0, "geohash5_to_bits: '" + std::string(1, c) + "' not in the geohash alphabet");
        bits = (bits << 5) | static_cast<std::uint32_t>(idx);
    }
    return bits;
}

inline std::string bits_to_geohash5(std::uint32_t bits) {
    STPIL_REQUIRE(bits < (1u << 25), "bits_to_geohash5: value out of 25-bit range");
    std::string s(5, '0');
    for (int i = 0; i < 5; ++i) s[static_cast<std::size_t>(i)] = geo::kBase32[(bits >> (20 - 5 * i)) & 0x1f];
    return s;
}

struct GeoCell {
    double lat_lo, lat_hi, lon_lo, lon_hi;
    bool contains(const GeoPoint& p) const {
        return p.latitude >= lat_lo && p.latitude < lat_hi && p.longitude >= lon_lo && p.longitude < lon_hi;
    }
    GeoPoint center() const { return {(lat_lo + lat_hi) / 2.0, (lon_lo + lon_hi) / 2.0}; }
};

/// Bounding cell of a 25-bit geohash.
inline GeoCell decode_geohash5(std::uint32_t bits) {
    GeoCell cell{-90.0, 90.0, -180.0, 180.0};
    bool lon_turn = true;
    for (int i = 24; i >= 0; --i) {
        const bool one = (bits >> i) & 1;
        if (lon_turn) {
            const double mid = (cell.lon_lo + cell.lon_hi) / 2.0;
            (one ? cell.lon_lo : cell.lon_hi) = mid;
        } else {
            const double mid = (cell.lat_lo + cell.lat_hi) / 2.0;
            (one ? cell.lat_lo : cell.lat_hi) = mid;
        }
        lon_turn = !lon_turn;
    }
    return cell;
}

namespace detail {
inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}
}  // namespace detail

/// Days since 1970-01-01 for a proleptic Gregorian date (Hinnant's
/// days-from-civil).
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

/// Local day-of-week / hour-slot from a UTC epoch and a timezone offset in
/// minutes. Rollover across midnight is handled by flooring division.
inline LocalTimeFeatures local_time_features(std::int64_t utc_epoch_seconds, int offset_minutes) {
    STPIL_REQUIRE(offset_minutes >= -1440 && offset_minutes <= 1440,
                  "local_time_features: offset " + std::to_string(offset_minutes) + " out of [-1440,1440]");
    const std::int64_t local = utc_epoch_seconds + 60LL * offset_minutes;
    const std::int64_t day = detail::floor_div(local, 86400);
    const std::int64_t sec_of_day = local - day * 86400;
    // 1970-01-01 was a Thursday (ISO 4).
    const int dow = static_cast<int>(((day % 7) + 7 + 3) % 7) + 1;
    return LocalTimeFeatures{dow, static_cast<int>(sec_of_day / 3600)};
}

/// Inverse of days_from_civil.
inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<int>(yoe) + static_cast<int>(era) * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    if (m <= 2) ++y;
}

/// Formats a UTC epoch in the check-in timestamp style, always zone +0000.
inline std::string format_checkin_time(std::int64_t utc_epoch_seconds) {
    static const char* months[12] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                     "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
    static const char* wdays[7] = {"Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"};
    const std::int64_t day = detail::floor_div(utc_epoch_seconds, 86400);
    const std::int64_t sod = utc_epoch_seconds - day * 86400;
    int y = 0;
    unsigned m = 0, d = 0;
    civil_from_days(day, y, m, d);
    const int iso_dow = static_cast<int>(((day % 7) + 7 + 3) % 7);  // 0 = Monday
    char buf[40];
    std::snprintf(buf, sizeof buf, "%s %s %02u %02d:%02d:%02d +0000 %04d", wdays[iso_dow], months[m - 1], d,
                  static_cast<int>(sod / 3600), static_cast<int>((sod / 60) % 60), static_cast<int>(sod % 60), y);
    return std::string(buf);
}

/// Parses the check-in timestamp style "Tue Apr 03 18:00:09 +0000 2012"
/// into a UTC epoch. English month names, fixed field layout; no locale.
inline std::int64_t parse_checkin_time(const std::string& s) {
    static const char* months[12] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                     "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
    // EEE MMM dd HH:mm:ss +ZZZZ yyyy
    STPIL_REQUIRE(s.size() == 30, "parse_checkin_time: unexpected length in '" + s + "'");
    const std::string mon = s.substr(4, 3);
    int m = 0;
    while (m < 12 && mon != months[m]) ++m;
    STPIL_REQUIRE(m < 12, "parse_checkin_time: bad month in '" + s + "'");
    auto num = [&](std::size_t pos, std::size_t len) {
        int v = 0;
        for (std::size_t i = pos; i < pos + len; ++i) {
            STPIL_REQUIRE(s[i] >= '0' && s[i] <= '9', "parse_checkin_time: bad digit in '" + s + "'");
            v = v * 10 + (s[i] - '0');
        }
        return v;
    };
    const int day = num(8, 2);
    const int hh = num(11, 2), mm = num(14, 2), ss = num(17, 2);
    const char sign = s[20];
    STPIL_REQUIRE(sign == '+' || sign == '-', "parse_checkin_time: bad zone in '" + s + "'");
    const int zone = (num(21, 2) * 60 + num(23, 2)) * (sign == '-' ? -1 : 1);
    const int year = num(26, 4);
    STPIL_REQUIRE(day >= 1 && day <= 31 && hh < 24 && mm < 60 && ss < 60,
                  "parse_checkin_time: field out of range in '" + s + "'");
    const std::int64_t days = days_from_civil(year, static_cast<unsigned>(m + 1), static_cast<unsigned>(day));
    return days * 86400 + hh * 3600 + mm * 60 + ss - 60LL * zone;
}

}  // namespace stpil

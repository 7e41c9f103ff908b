#pragma once

#include <cmath>
#include <numbers>

namespace clops {

/// Mean earth radius used for all great-circle lengths.
inline constexpr double kEarthRadiusKm = 6367.0;

struct GeoPoint {
  double lat = 0.0; // degrees
  double lon = 0.0; // degrees

  bool valid() const noexcept {
    return std::isfinite(lat) && std::isfinite(lon) && lat >= -90.0 && lat <= 90.0 &&
           lon >= -180.0 && lon <= 180.0;
  }

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

constexpr double deg2rad(double deg) noexcept { return deg * std::numbers::pi / 180.0; }
constexpr double rad2deg(double rad) noexcept { return rad * 180.0 / std::numbers::pi; }

/// Great-circle distance in kilometers (haversine form).
inline double haversine_km(const GeoPoint& p1, const GeoPoint& p2) noexcept {
  const double phi1 = deg2rad(p1.lat);
  const double phi2 = deg2rad(p2.lat);
  const double half_dphi = (phi2 - phi1) / 2.0;
  const double half_dlambda = deg2rad(p2.lon - p1.lon) / 2.0;
  const double s = std::sin(half_dphi);
  const double t = std::sin(half_dlambda);
  const double h = s * s + std::cos(phi1) * std::cos(phi2) * t * t;
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(std::fmin(1.0, h)));
}

inline double haversine_m(const GeoPoint& p1, const GeoPoint& p2) noexcept {
  return haversine_km(p1, p2) * 1000.0;
}

/// Initial bearing from p1 to p2, degrees clockwise from north in [0, 360).
inline double bearing_deg(const GeoPoint& p1, const GeoPoint& p2) noexcept {
  const double phi1 = deg2rad(p1.lat);
  const double phi2 = deg2rad(p2.lat);
  const double dl = deg2rad(p2.lon - p1.lon);
  const double y = std::sin(dl) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) - std::sin(phi1) * std::cos(phi2) * std::cos(dl);
  double b = rad2deg(std::atan2(y, x));
  if (b < 0.0) {
    b += 360.0;
  }
  return b;
}

/// Linear interpolation in coordinate space; `frac` in [0, 1].
inline GeoPoint interpolate(const GeoPoint& a, const GeoPoint& b, double frac) noexcept {
  return {a.lat + (b.lat - a.lat) * frac, a.lon + (b.lon - a.lon) * frac};
}

} // namespace clops

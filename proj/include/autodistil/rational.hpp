#pragma once

#include <compare>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>

#include "autodistil/error.hpp"

namespace autodistil {

/// Exact rational number kept in lowest terms with a positive denominator.
class Rational {
 public:
  constexpr Rational() = default;
  constexpr Rational(std::int64_t value) : num_(value), den_(1) {}  // NOLINT(implicit)
  constexpr Rational(std::int64_t num, std::int64_t den) : num_(num), den_(den) {
    if (den_ == 0) throw ValidationError("rational with zero denominator");
    normalize();
  }

  constexpr std::int64_t num() const noexcept { return num_; }
  constexpr std::int64_t den() const noexcept { return den_; }
  constexpr bool is_integer() const noexcept { return den_ == 1; }
  constexpr double to_double() const noexcept { return static_cast<double>(num_) / static_cast<double>(den_); }

  friend constexpr Rational operator+(Rational a, Rational b) {
    return {a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_};
  }
  friend constexpr Rational operator-(Rational a, Rational b) {
    return {a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_};
  }
  friend constexpr Rational operator*(Rational a, Rational b) { return {a.num_ * b.num_, a.den_ * b.den_}; }
  friend constexpr Rational operator/(Rational a, Rational b) {
    if (b.num_ == 0) throw ValidationError("rational division by zero");
    return {a.num_ * b.den_, a.den_ * b.num_};
  }

  friend constexpr bool operator==(Rational a, Rational b) noexcept { return a.num_ == b.num_ && a.den_ == b.den_; }
  friend constexpr std::strong_ordering operator<=>(Rational a, Rational b) noexcept {
    return a.num_ * b.den_ <=> b.num_ * a.den_;
  }

  /// Decimal text when the value has a terminating expansion ("3.5", "4"),
  /// otherwise "num/den".
  std::string to_string() const {
    if (den_ == 1) return std::to_string(num_);
    std::int64_t d = den_;
    int twos = 0, fives = 0;
    while (d % 2 == 0) d /= 2, ++twos;
    while (d % 5 == 0) d /= 5, ++fives;
    if (d != 1) return std::to_string(num_) + "/" + std::to_string(den_);
    const int digits = twos > fives ? twos : fives;
    std::int64_t scale = 1;
    for (int i = 0; i < digits; ++i) scale *= 10;
    const std::int64_t scaled = num_ * (scale / den_);
    const std::int64_t mag = scaled < 0 ? -scaled : scaled;
    std::string frac = std::to_string(mag % scale);
    frac.insert(0, static_cast<std::size_t>(digits) - frac.size(), '0');
    return std::string(scaled < 0 ? "-" : "") + std::to_string(mag / scale) + "." + frac;
  }

  /// Accepts "7", "-2", "3.5", "7/2".
  static std::optional<Rational> parse(std::string_view text) {
    if (text.empty()) return std::nullopt;
    if (const auto slash = text.find('/'); slash != std::string_view::npos) {
      auto n = parse_int(text.substr(0, slash));
      auto d = parse_int(text.substr(slash + 1));
      if (!n || !d || *d == 0) return std::nullopt;
      return Rational(*n, *d);
    }
    bool negative = false;
    std::size_t pos = 0;
    if (text[0] == '-' || text[0] == '+') {
      negative = text[0] == '-';
      pos = 1;
    }
    std::int64_t num = 0, den = 1;
    bool seen_dot = false, seen_digit = false;
    for (; pos < text.size(); ++pos) {
      const char c = text[pos];
      if (c == '.') {
        if (seen_dot) return std::nullopt;
        seen_dot = true;
        continue;
      }
      if (c < '0' || c > '9') return std::nullopt;
      seen_digit = true;
      if (num > (INT64_MAX - 9) / 10 || (seen_dot && den > INT64_MAX / 10)) return std::nullopt;
      num = num * 10 + (c - '0');
      if (seen_dot) den *= 10;
    }
    if (!seen_digit) return std::nullopt;
    return Rational(negative ? -num : num, den);
  }

 private:
  static std::optional<std::int64_t> parse_int(std::string_view s) {
    auto r = parse(s);
    if (!r || !r->is_integer()) return std::nullopt;
    return r->num();
  }

  constexpr void normalize() {
    if (den_ < 0) num_ = -num_, den_ = -den_;
    const std::int64_t g = std::gcd(num_ < 0 ? -num_ : num_, den_);
    if (g > 1) num_ /= g, den_ /= g;
  }

  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

}  // namespace autodistil

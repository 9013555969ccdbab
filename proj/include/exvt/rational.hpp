#pragma once

#include <compare>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace exvt {

// Exact rational kept in lowest terms with a positive denominator.
class Rational {
 public:
  constexpr Rational() = default;
  constexpr Rational(std::int64_t num) : num_(num) {}  // NOLINT(implicit)
  Rational(std::int64_t num, std::int64_t den) {
    if (den == 0) throw std::invalid_argument("rational with zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num, den);
    num_ = num / g;
    den_ = den / g;
  }

  // Accepts "n" or "n/d" with optional leading '-'.
  static Rational parse(std::string_view text);

  constexpr std::int64_t num() const { return num_; }
  constexpr std::int64_t den() const { return den_; }
  constexpr bool is_zero() const { return num_ == 0; }
  constexpr bool is_negative() const { return num_ < 0; }
  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }

  // this * n when the product is an integer.
  std::optional<std::int64_t> times(std::int64_t n) const {
    if ((num_ * n) % den_ != 0) return std::nullopt;
    return num_ * n / den_;
  }

  std::string to_string() const {
    if (den_ == 1) return std::to_string(num_);
    return std::to_string(num_) + "/" + std::to_string(den_);
  }

  friend bool operator==(const Rational&, const Rational&) = default;
  friend std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
    return a.num_ * b.den_ <=> b.num_ * a.den_;
  }

 private:
  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

inline Rational Rational::parse(std::string_view text) {
  auto parse_int = [&](std::string_view s) -> std::int64_t {
    if (s.empty()) throw std::invalid_argument("malformed rational '" + std::string(text) + "'");
    std::size_t i = 0;
    bool neg = false;
    if (s[0] == '-') {
      neg = true;
      i = 1;
    }
    if (i == s.size()) throw std::invalid_argument("malformed rational '" + std::string(text) + "'");
    std::int64_t v = 0;
    for (; i < s.size(); ++i) {
      if (s[i] < '0' || s[i] > '9') {
        throw std::invalid_argument("malformed rational '" + std::string(text) + "'");
      }
      v = v * 10 + (s[i] - '0');
      if (v > (std::int64_t{1} << 40)) {
        throw std::invalid_argument("rational component too large in '" + std::string(text) + "'");
      }
    }
    return neg ? -v : v;
  };
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return Rational(parse_int(text));
  const std::int64_t den = parse_int(text.substr(slash + 1));
  if (den <= 0) throw std::invalid_argument("rational '" + std::string(text) + "' needs a positive denominator");
  return Rational(parse_int(text.substr(0, slash)), den);
}

}  // namespace exvt

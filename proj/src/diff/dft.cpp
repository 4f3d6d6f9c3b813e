#include "tal/diff/dft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace tal::diff {
namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// cos/sin(2 pi k / n) for k in [0, n). Computed directly per entry so the
// table error does not accumulate.
struct Twiddles {
  std::vector<double> cos;
  std::vector<double> sin;
};

const Twiddles& twiddles(std::size_t n) {
  thread_local std::unordered_map<std::size_t, Twiddles> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Twiddles tw;
  tw.cos.resize(n);
  tw.sin.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw.cos[k] = std::cos(angle);
    tw.sin[k] = std::sin(angle);
  }
  return cache.emplace(n, std::move(tw)).first->second;
}

void radix2(double* re, double* im, std::size_t n, bool inverse) {
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  const Twiddles& tw = twiddles(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const double wr = tw.cos[k * step];
        const double wi = sign * tw.sin[k * step];
        const std::size_t a = start + k;
        const std::size_t b = a + half;
        const double tr = re[b] * wr - im[b] * wi;
        const double ti = re[b] * wi + im[b] * wr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
      }
    }
  }
}

void direct(double* re, double* im, std::size_t n, bool inverse) {
  const Twiddles& tw = twiddles(n);
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<double> out_re(n, 0.0), out_im(n, 0.0);
  for (std::size_t u = 0; u < n; ++u) {
    double acc_re = 0.0, acc_im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t k = (u * t) % n;
      const double wr = tw.cos[k];
      const double wi = sign * tw.sin[k];
      acc_re += re[t] * wr - im[t] * wi;
      acc_im += re[t] * wi + im[t] * wr;
    }
    out_re[u] = acc_re;
    out_im[u] = acc_im;
  }
  std::copy(out_re.begin(), out_re.end(), re);
  std::copy(out_im.begin(), out_im.end(), im);
}

std::size_t last_axis(const Shape& shape) {
  if (shape.empty() || shape.back() == 0) throw std::invalid_argument("dft: time length must be >= 1");
  return shape.back();
}

}  // namespace

namespace detail {

void transform(double* re, double* im, std::size_t n, bool inverse) {
  if (n == 1) return;
  if (is_power_of_two(n)) {
    radix2(re, im, n, inverse);
  } else {
    direct(re, im, n, inverse);
  }
}

}  // namespace detail

ComplexArray dft(const Array& x) {
  return dft(ComplexArray{x, Array(x.shape())});
}

ComplexArray dft(const ComplexArray& x) {
  if (x.real.shape() != x.imag.shape()) throw std::invalid_argument("dft: real/imag shape mismatch");
  const std::size_t n = last_axis(x.real.shape());
  ComplexArray out = x;
  const std::size_t rows = x.real.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    detail::transform(out.real.data() + r * n, out.imag.data() + r * n, n, false);
  }
  return out;
}

ComplexArray idft(const ComplexArray& x) {
  if (x.real.shape() != x.imag.shape()) throw std::invalid_argument("idft: real/imag shape mismatch");
  const std::size_t n = last_axis(x.real.shape());
  ComplexArray out = x;
  const std::size_t rows = x.real.size() / n;
  const double scale = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    double* re = out.real.data() + r * n;
    double* im = out.imag.data() + r * n;
    detail::transform(re, im, n, true);
    for (std::size_t i = 0; i < n; ++i) {
      re[i] *= scale;
      im[i] *= scale;
    }
  }
  return out;
}

Array idft_real(const ComplexArray& x) { return idft(x).real; }

}  // namespace tal::diff

#pragma once

#include <cstddef>

#include "tal/diff/array.hpp"

namespace tal::diff {

// Discrete Fourier transforms along the last axis; every row is an
// independent sequence. Power-of-two lengths use an iterative radix-2 FFT,
// other lengths a direct O(n^2) sum. No padding is applied, so the circular
// semantics are exactly those of length n.

/// X[u] = sum_t x[t] exp(-j 2 pi u t / n)
ComplexArray dft(const Array& x);
ComplexArray dft(const ComplexArray& x);

/// x[t] = (1/n) sum_u X[u] exp(+j 2 pi u t / n)
ComplexArray idft(const ComplexArray& x);

/// Real part of idft.
Array idft_real(const ComplexArray& x);

namespace detail {

// In-place transform of one length-n sequence. `inverse` flips the sign of
// the exponent and does not normalize.
void transform(double* re, double* im, std::size_t n, bool inverse);

}  // namespace detail

}  // namespace tal::diff

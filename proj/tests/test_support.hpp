#pragma once

// Shared test machinery: a central finite-difference gradient checker and
// slow-but-obvious reference implementations used as oracles. Everything here
// is deliberately independent of the library's fast paths.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mvdesc/common.hpp"
#include "mvdesc/tensor.hpp"

namespace testsup {

// Relative error with the guarded denominator used throughout the suites.
inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Central finite differences against tape gradients.
//
// eval() must rebuild the whole forward pass from the current contents of the
// parameter tensors and return the scalar loss value. analytic[i] is the tape
// gradient of param element i. Every element is probed unless max_probes
// limits it (probed indices are then evenly strided). Returns the max
// relative error observed.
inline double max_fd_error(const std::function<double()>& eval,
                           mvdesc::Tensor<double>& param,
                           const std::vector<double>& analytic,
                           double step = 1e-5, int max_probes = 0) {
  const std::size_t n = param.size();
  std::size_t stride = 1;
  if (max_probes > 0 && n > static_cast<std::size_t>(max_probes)) {
    stride = n / static_cast<std::size_t>(max_probes);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < n; i += stride) {
    const double saved = param.data()[i];
    param.data()[i] = saved + step;
    const double up = eval();
    param.data()[i] = saved - step;
    const double down = eval();
    param.data()[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, rel_err(analytic[i], numeric));
  }
  return worst;
}

inline mvdesc::Tensor<double> random_tensor(std::vector<int> shape,
                                            mvdesc::Rng& rng,
                                            bool requires_grad = true,
                                            double scl = 1.0) {
  mvdesc::Tensor<double> t(std::move(shape), 0.0, requires_grad);
  for (auto& v : t.data()) v = scl * rng.normal();
  return t;
}

// ---- reference implementations (oracles) ----

// Direct sliding-window cross-correlation, no im2col, no BLAS.
inline std::vector<double> conv_reference(const std::vector<double>& x, int cin,
                                          int h, int w,
                                          const std::vector<double>& k, int cout,
                                          int kh, int kw,
                                          const std::vector<double>& bias,
                                          int stride, int pad, int& ho, int& wo) {
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  for (int o = 0; o < cout; ++o) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (int c = 0; c < cin; ++c) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[(static_cast<std::size_t>(c) * h + iy) * w + ix] *
                     k[((static_cast<std::size_t>(o) * cin + c) * kh + ky) * kw + kx];
            }
          }
        }
        y[(static_cast<std::size_t>(o) * ho + oy) * wo + ox] = acc;
      }
    }
  }
  return y;
}

// Direct scatter for the transposed convolution: every input element sprays
// a kernel-sized patch into the output at its stride location.
inline std::vector<double> tconv_reference(const std::vector<double>& t, int cin,
                                           int h, int w,
                                           const std::vector<double>& k, int cout,
                                           int kh, int kw,
                                           const std::vector<double>& bias,
                                           int stride, int pad, int opad,
                                           int& ho, int& wo) {
  ho = (h - 1) * stride - 2 * pad + kh + opad;
  wo = (w - 1) * stride - 2 * pad + kw + opad;
  std::vector<double> y(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  for (int i = 0; i < cin; ++i) {
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) {
        const double v = t[(static_cast<std::size_t>(i) * h + yy) * w + xx];
        if (v == 0.0) continue;
        for (int c = 0; c < cout; ++c) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const int oy = yy * stride - pad + ky;
              const int ox = xx * stride - pad + kx;
              if (oy < 0 || oy >= ho || ox < 0 || ox >= wo) continue;
              y[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] +=
                  v * k[((static_cast<std::size_t>(i) * cout + c) * kh + ky) * kw + kx];
            }
          }
        }
      }
    }
  }
  if (!bias.empty()) {
    for (int c = 0; c < cout; ++c) {
      for (int p = 0; p < ho * wo; ++p) {
        y[static_cast<std::size_t>(c) * ho * wo + p] += bias[c];
      }
    }
  }
  return y;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace testsup

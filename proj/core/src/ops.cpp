#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqlab/tensor.hpp"

namespace vqlab {

namespace {

bool track(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void rec(std::function<void()> fn) { Tape::active()->record(std::move(fn)); }

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_string(a.shape()) +
                              " and " + shape_string(b.shape()));
}

struct AxisSpan {
  std::size_t outer, len, inner;
};

AxisSpan axis_span(const Tensor& x, int axis, const std::string& op) {
  const auto& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw std::invalid_argument(op + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_string(s));
  }
  AxisSpan a{1, static_cast<std::size_t>(s[axis]), 1};
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[i]);
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const std::string& name, BinKind kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool b_bcast = !same && b.size() == 1;
  const bool a_bcast = !same && !b_bcast && a.size() == 1;
  if (!same && !a_bcast && !b_bcast) shape_error(name, a, b);

  const Tensor& big = a_bcast ? b : a;
  const bool tracked = track({&a, &b});
  Tensor y = Tensor::zeros(big.shape(), tracked);
  auto av = a.values();
  auto bv = b.values();
  auto yv = y.values();
  const std::size_t n = yv.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = a_bcast ? av[0] : av[i];
    const double x2 = b_bcast ? bv[0] : bv[i];
    switch (kind) {
      case BinKind::Add: yv[i] = x1 + x2; break;
      case BinKind::Sub: yv[i] = x1 - x2; break;
      case BinKind::Mul: yv[i] = x1 * x2; break;
    }
  }
  if (tracked) {
    rec([kind, a = a, b = b, y = y, a_bcast, b_bcast]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      const std::size_t n = gy.size();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        auto bv = b.values();
        for (std::size_t i = 0; i < n; ++i) {
          double g = gy[i];
          if (kind == BinKind::Mul) g *= b_bcast ? bv[0] : bv[i];
          ga[a_bcast ? 0 : i] += g;
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        auto av = a.values();
        for (std::size_t i = 0; i < n; ++i) {
          double g = gy[i];
          if (kind == BinKind::Sub) g = -g;
          if (kind == BinKind::Mul) g = gy[i] * (a_bcast ? av[0] : av[i]);
          gb[b_bcast ? 0 : i] += g;
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::Mul, a, b); }

Tensor scale(const Tensor& a, double s) {
  const bool tracked = track({&a});
  Tensor y = Tensor::zeros(a.shape(), tracked);
  auto av = a.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = s * av[i];
  if (tracked) {
    rec([a = a, y = y, s]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double s) {
  const bool tracked = track({&a});
  Tensor y = Tensor::zeros(a.shape(), tracked);
  auto av = a.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + s;
  if (tracked) {
    rec([a = a, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& x) {
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto xv = x.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (xv[i] > 0.0) gx[i] += gy[i];  // subgradient at 0 is 0
      }
    });
  }
  return y;
}

Tensor log(const Tensor& x) {
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = std::log(xv[i]);
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto xv = x.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] / xv[i];
    });
  }
  return y;
}

Tensor exp(const Tensor& x) {
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = std::exp(xv[i]);
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i];
    });
  }
  return y;
}

Tensor xlogx(const Tensor& x) {
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] > 0.0 ? xv[i] * std::log(xv[i]) : 0.0;
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto xv = x.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double xi = std::max(xv[i], 1e-300);
        gx[i] += gy[i] * (std::log(xi) + 1.0);
      }
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a, b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool tracked = track({&a, &b});
  Tensor y = Tensor::zeros({m, n}, tracked);
  auto av = a.values();
  auto bv = b.values();
  auto yv = y.values();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* yrow = &yv[i * n];
      for (int j = 0; j < n; ++j) yrow[j] += x * brow[j];
    }
  }
  if (tracked) {
    rec([a = a, b = b, y = y, m, k, n]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        auto bv = b.values();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += gy[i * n + j] * bv[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        auto av = a.values();
        for (int p = 0; p < k; ++p)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += av[i * k + p] * gy[i * n + j];
            gb[p * n + j] += acc;
          }
      }
    });
  }
  return y;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: expected rank 2, got " + shape_string(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  const bool tracked = track({&a});
  Tensor y = Tensor::zeros({n, m}, tracked);
  auto av = a.values();
  auto yv = y.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) yv[j * m + i] = av[i * n + j];
  if (tracked) {
    rec([a = a, y = y, m, n]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto ga = a.grad_mut();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
    });
  }
  return y;
}

Tensor diagonal(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw std::invalid_argument("diagonal: expected square matrix, got " + shape_string(a.shape()));
  }
  const int n = a.dim(0);
  const bool tracked = track({&a});
  Tensor y = Tensor::zeros({n}, tracked);
  auto av = a.values();
  auto yv = y.values();
  for (int i = 0; i < n; ++i) yv[i] = av[i * n + i];
  if (tracked) {
    rec([a = a, y = y, n]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto ga = a.grad_mut();
      for (int i = 0; i < n; ++i) ga[i * n + i] += gy[i];
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  const AxisSpan sp = axis_span(x, axis, "softmax");
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double m = -1e308;
      for (std::size_t i = 0; i < sp.len; ++i) m = std::max(m, xv[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const double e = std::exp(xv[base + i * sp.inner] - m);
        yv[base + i * sp.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < sp.len; ++i) yv[base + i * sp.inner] /= z;
    }
  }
  if (tracked) {
    rec([x = x, y = y, sp]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.values();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t k = base + i * sp.inner;
            dot += gy[k] * yv[k];
          }
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t k = base + i * sp.inner;
            gx[k] += yv[k] * (gy[k] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor log_softmax(const Tensor& x, int axis) {
  const AxisSpan sp = axis_span(x, axis, "log_softmax");
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double m = -1e308;
      for (std::size_t i = 0; i < sp.len; ++i) m = std::max(m, xv[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) z += std::exp(xv[base + i * sp.inner] - m);
      const double lz = m + std::log(z);
      for (std::size_t i = 0; i < sp.len; ++i) {
        const std::size_t k = base + i * sp.inner;
        yv[k] = xv[k] - lz;
      }
    }
  }
  if (tracked) {
    rec([x = x, y = y, sp]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.values();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          double gsum = 0.0;
          for (std::size_t i = 0; i < sp.len; ++i) gsum += gy[base + i * sp.inner];
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t k = base + i * sp.inner;
            gx[k] += gy[k] - std::exp(yv[k]) * gsum;
          }
        }
      }
    });
  }
  return y;
}

Tensor normalize(const Tensor& x, int axis) {
  const AxisSpan sp = axis_span(x, axis, "normalize");
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  std::vector<double> norms(sp.outer * sp.inner);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double nsq = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const double v = xv[base + i * sp.inner];
        nsq += v * v;
      }
      const double nrm = std::sqrt(nsq);
      if (nrm == 0.0) {
        throw std::invalid_argument("normalize: zero-norm lane " +
                                    std::to_string(o * sp.inner + in) + " in shape " +
                                    shape_string(x.shape()));
      }
      norms[o * sp.inner + in] = nrm;
      for (std::size_t i = 0; i < sp.len; ++i) yv[base + i * sp.inner] = xv[base + i * sp.inner] / nrm;
    }
  }
  if (tracked) {
    rec([x = x, y = y, sp, norms = std::move(norms)]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.values();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          const double nrm = norms[o * sp.inner + in];
          double dot = 0.0;
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t k = base + i * sp.inner;
            dot += gy[k] * yv[k];
          }
          for (std::size_t i = 0; i < sp.len; ++i) {
            const std::size_t k = base + i * sp.inner;
            gx[k] += (gy[k] - yv[k] * dot) / nrm;
          }
        }
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const bool tracked = track({&x});
  auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  Tensor y = Tensor::scalar(acc, tracked);
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      const double g = y.grad()[0];
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  const bool tracked = track({&x});
  auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const double inv_n = 1.0 / static_cast<double>(xv.size());
  Tensor y = Tensor::scalar(acc * inv_n, tracked);
  if (tracked) {
    rec([x = x, y = y, inv_n]() mutable {
      if (!y.has_grad()) return;
      const double g = y.grad()[0] * inv_n;
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

namespace {

Tensor reduce_axis(const Tensor& x, int axis, bool take_mean, const std::string& op) {
  const AxisSpan sp = axis_span(x, axis, op);
  std::vector<int> out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(out_shape, tracked);
  auto xv = x.values();
  auto yv = y.values();
  const double w = take_mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double acc = 0.0;
      for (std::size_t i = 0; i < sp.len; ++i) acc += xv[base + i * sp.inner];
      yv[o * sp.inner + in] = acc * w;
    }
  }
  if (tracked) {
    rec([x = x, y = y, sp, w]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          const double g = gy[o * sp.inner + in] * w;
          for (std::size_t i = 0; i < sp.len; ++i) gx[base + i * sp.inner] += g;
        }
      }
    });
  }
  return y;
}

Tensor mean_distance(const std::string& op, const Tensor& a, const Tensor& b, bool squared) {
  if (a.shape() != b.shape()) shape_error(op, a, b);
  const bool tracked = track({&a, &b});
  auto av = a.values();
  auto bv = b.values();
  const std::size_t n = av.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    acc += squared ? d * d : std::fabs(d);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor y = Tensor::scalar(acc * inv_n, tracked);
  if (tracked) {
    rec([a = a, b = b, y = y, squared, inv_n]() mutable {
      if (!y.has_grad()) return;
      const double g = y.grad()[0] * inv_n;
      auto av = a.values();
      auto bv = b.values();
      const std::size_t n = av.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = av[i] - bv[i];
        double gi;
        if (squared) {
          gi = 2.0 * d * g;
        } else {
          gi = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
        }
        if (a.requires_grad()) a.grad_mut()[i] += gi;
        if (b.requires_grad()) b.grad_mut()[i] -= gi;
      }
    });
  }
  return y;
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis) { return reduce_axis(x, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& x, int axis) { return reduce_axis(x, axis, true, "mean_axis"); }

Tensor l1_distance(const Tensor& a, const Tensor& b) {
  return mean_distance("l1_distance", a, b, false);
}

Tensor squared_l2_distance(const Tensor& a, const Tensor& b) {
  return mean_distance("squared_l2_distance", a, b, true);
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) shape_error("conv2d", x, w);
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw) shape_error("conv2d", x, w);
  const bool tracked = track({&x, &w});
  Tensor y = Tensor::zeros({N, K, OH, OW}, tracked);
  auto xv = x.values();
  auto wv = w.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < K; ++co) {
      double* yimg = &yv[(static_cast<std::size_t>(n) * K + co) * OH * OW];
      for (int ci = 0; ci < C; ++ci) {
        const double* ximg = &xv[(static_cast<std::size_t>(n) * C + ci) * H * W];
        const double* wk = &wv[(static_cast<std::size_t>(co) * C + ci) * kh * kw];
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const double wgt = wk[i * kw + j];
            if (wgt == 0.0) continue;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              const double* xrow = &ximg[ih * W];
              double* yrow = &yimg[oh * OW];
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                yrow[ow] += wgt * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
  if (tracked) {
    rec([x = x, w = w, y = y, stride, pad, N, C, H, W, K, kh, kw, OH, OW]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto xv = x.values();
      auto wvv = w.values();
      const bool gx_on = x.requires_grad();
      const bool gw_on = w.requires_grad();
      std::span<double> gx = gx_on ? x.grad_mut() : std::span<double>{};
      std::span<double> gw = gw_on ? w.grad_mut() : std::span<double>{};
      for (int n = 0; n < N; ++n) {
        for (int co = 0; co < K; ++co) {
          const double* gimg = &gy[(static_cast<std::size_t>(n) * K + co) * OH * OW];
          for (int ci = 0; ci < C; ++ci) {
            const double* ximg = &xv[(static_cast<std::size_t>(n) * C + ci) * H * W];
            double* gximg = gx_on ? &gx[(static_cast<std::size_t>(n) * C + ci) * H * W] : nullptr;
            const std::size_t wbase = (static_cast<std::size_t>(co) * C + ci) * kh * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const double wgt = wvv[wbase + i * kw + j];
                double wacc = 0.0;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride - pad + i;
                  if (ih < 0 || ih >= H) continue;
                  const double* grow = &gimg[oh * OW];
                  const double* xrow = &ximg[ih * W];
                  double* gxrow = gx_on ? &gximg[ih * W] : nullptr;
                  for (int ow = 0; ow < OW; ++ow) {
                    const int iw = ow * stride - pad + j;
                    if (iw < 0 || iw >= W) continue;
                    const double g = grow[ow];
                    if (gx_on) gxrow[iw] += g * wgt;
                    if (gw_on) wacc += g * xrow[iw];
                  }
                }
                if (gw_on) gw[wbase + i * kw + j] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride, int pad, int out_pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(0)) shape_error("conv_transpose2d", x, w);
  if (stride < 1) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
  if (pad < 0 || out_pad < 0 || out_pad >= stride) {
    throw std::invalid_argument("conv_transpose2d: require pad >= 0 and 0 <= out_pad < stride");
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int OH = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int OW = (W - 1) * stride - 2 * pad + kw + out_pad;
  if (OH <= 0 || OW <= 0) shape_error("conv_transpose2d", x, w);
  const bool tracked = track({&x, &w});
  Tensor y = Tensor::zeros({N, K, OH, OW}, tracked);
  auto xv = x.values();
  auto wv = w.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    for (int ci = 0; ci < C; ++ci) {
      const double* ximg = &xv[(static_cast<std::size_t>(n) * C + ci) * H * W];
      for (int co = 0; co < K; ++co) {
        double* yimg = &yv[(static_cast<std::size_t>(n) * K + co) * OH * OW];
        const double* wk = &wv[(static_cast<std::size_t>(ci) * K + co) * kh * kw];
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const double wgt = wk[i * kw + j];
            if (wgt == 0.0) continue;
            for (int ih = 0; ih < H; ++ih) {
              const int oh = ih * stride - pad + i;
              if (oh < 0 || oh >= OH) continue;
              const double* xrow = &ximg[ih * W];
              double* yrow = &yimg[oh * OW];
              for (int iw = 0; iw < W; ++iw) {
                const int ow = iw * stride - pad + j;
                if (ow < 0 || ow >= OW) continue;
                yrow[ow] += wgt * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
  if (tracked) {
    rec([x = x, w = w, y = y, stride, pad, N, C, H, W, K, kh, kw, OH, OW]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto xv = x.values();
      auto wvv = w.values();
      const bool gx_on = x.requires_grad();
      const bool gw_on = w.requires_grad();
      std::span<double> gx = gx_on ? x.grad_mut() : std::span<double>{};
      std::span<double> gw = gw_on ? w.grad_mut() : std::span<double>{};
      for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < C; ++ci) {
          const double* ximg = &xv[(static_cast<std::size_t>(n) * C + ci) * H * W];
          double* gximg = gx_on ? &gx[(static_cast<std::size_t>(n) * C + ci) * H * W] : nullptr;
          for (int co = 0; co < K; ++co) {
            const double* gimg = &gy[(static_cast<std::size_t>(n) * K + co) * OH * OW];
            const std::size_t wbase = (static_cast<std::size_t>(ci) * K + co) * kh * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const double wgt = wvv[wbase + i * kw + j];
                double wacc = 0.0;
                for (int ih = 0; ih < H; ++ih) {
                  const int oh = ih * stride - pad + i;
                  if (oh < 0 || oh >= OH) continue;
                  const double* grow = &gimg[oh * OW];
                  const double* xrow = &ximg[ih * W];
                  double* gxrow = gx_on ? &gximg[ih * W] : nullptr;
                  for (int iw = 0; iw < W; ++iw) {
                    const int ow = iw * stride - pad + j;
                    if (ow < 0 || ow >= OW) continue;
                    const double g = grow[ow];
                    if (gx_on) gxrow[iw] += g * wgt;
                    if (gw_on) wacc += g * xrow[iw];
                  }
                }
                if (gw_on) gw[wbase + i * kw + j] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1)) shape_error("add_channel_bias", x, b);
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const bool tracked = track({&x, &b});
  Tensor y = Tensor::zeros(x.shape(), tracked);
  auto xv = x.values();
  auto bv = b.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      const double bias = bv[c];
      for (std::size_t i = 0; i < hw; ++i) yv[base + i] = xv[base + i] + bias;
    }
  }
  if (tracked) {
    rec([x = x, b = b, y = y, N, C, hw]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += gy[base + i];
            gb[c] += acc;
          }
        }
      }
    });
  }
  return y;
}

Tensor nn_resize(const Tensor& x, int out_h, int out_w) {
  if (x.rank() < 2) throw std::invalid_argument("nn_resize: expected rank >= 2, got " + shape_string(x.shape()));
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("nn_resize: output dims must be positive");
  const int H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  std::vector<int> out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  std::size_t lead = 1;
  for (int i = 0; i < x.rank() - 2; ++i) lead *= static_cast<std::size_t>(x.dim(i));
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(out_shape, tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t l = 0; l < lead; ++l) {
    const double* xp = &xv[l * H * W];
    double* yp = &yv[l * static_cast<std::size_t>(out_h) * out_w];
    for (int oh = 0; oh < out_h; ++oh) {
      const int ih = static_cast<int>((static_cast<long long>(oh) * H) / out_h);
      for (int ow = 0; ow < out_w; ++ow) {
        const int iw = static_cast<int>((static_cast<long long>(ow) * W) / out_w);
        yp[oh * out_w + ow] = xp[ih * W + iw];
      }
    }
  }
  if (tracked) {
    rec([x = x, y = y, lead, H, W, out_h, out_w]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t l = 0; l < lead; ++l) {
        const double* gp = &gy[l * static_cast<std::size_t>(out_h) * out_w];
        double* gxp = &gx[l * H * W];
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = static_cast<int>((static_cast<long long>(oh) * H) / out_h);
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = static_cast<int>((static_cast<long long>(ow) * W) / out_w);
            gxp[ih * W + iw] += gp[oh * out_w + ow];
          }
        }
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  std::size_t n = 1;
  for (int d : new_shape) n *= static_cast<std::size_t>(std::max(d, 0));
  if (n != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_string(x.shape()) + " as " +
                                shape_string(new_shape));
  }
  const bool tracked = track({&x});
  auto xv = x.values();
  Tensor y(new_shape, std::vector<double>(xv.begin(), xv.end()), tracked);
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

namespace {

Tensor permute_nchw(const Tensor& x, bool to_nhwc, const std::string& op) {
  if (x.rank() != 4) throw std::invalid_argument(op + ": expected rank 4, got " + shape_string(x.shape()));
  const int N = x.dim(0);
  const int C = to_nhwc ? x.dim(1) : x.dim(3);
  const int H = to_nhwc ? x.dim(2) : x.dim(1);
  const int W = to_nhwc ? x.dim(3) : x.dim(2);
  std::vector<int> out_shape = to_nhwc ? std::vector<int>{N, H, W, C} : std::vector<int>{N, C, H, W};
  const bool tracked = track({&x});
  Tensor y = Tensor::zeros(out_shape, tracked);
  auto xv = x.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
          const std::size_t nchw = ((static_cast<std::size_t>(n) * C + c) * H + h) * W + w;
          const std::size_t nhwc = ((static_cast<std::size_t>(n) * H + h) * W + w) * C + c;
          if (to_nhwc) {
            yv[nhwc] = xv[nchw];
          } else {
            yv[nchw] = xv[nhwc];
          }
        }
      }
    }
  }
  if (tracked) {
    rec([x = x, y = y, N, C, H, W, to_nhwc]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
              const std::size_t nchw = ((static_cast<std::size_t>(n) * C + c) * H + h) * W + w;
              const std::size_t nhwc = ((static_cast<std::size_t>(n) * H + h) * W + w) * C + c;
              if (to_nhwc) {
                gx[nchw] += gy[nhwc];
              } else {
                gx[nhwc] += gy[nchw];
              }
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor nchw_to_nhwc(const Tensor& x) { return permute_nchw(x, true, "nchw_to_nhwc"); }
Tensor nhwc_to_nchw(const Tensor& x) { return permute_nchw(x, false, "nhwc_to_nchw"); }

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2, got " + shape_string(table.shape()));
  const int K = table.dim(0), D = table.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= K) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(idx) + " out of range [0, " +
                                  std::to_string(K) + ")");
    }
  }
  const int N = static_cast<int>(indices.size());
  const bool tracked = track({&table});
  Tensor y = Tensor::zeros({N, D}, tracked);
  auto tv = table.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    const double* row = &tv[static_cast<std::size_t>(indices[n]) * D];
    std::copy(row, row + D, &yv[static_cast<std::size_t>(n) * D]);
  }
  if (tracked) {
    rec([table = table, y = y, indices, D]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gt = table.grad_mut();
      for (std::size_t n = 0; n < indices.size(); ++n) {
        const std::size_t src = n * D;
        const std::size_t dst = static_cast<std::size_t>(indices[n]) * D;
        for (int d = 0; d < D; ++d) gt[dst + d] += gy[src + d];
      }
    });
  }
  return y;
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) shape_error("pairwise_sqdist", a, b);
  const int N = a.dim(0), K = b.dim(0), D = a.dim(1);
  const bool tracked = track({&a, &b});
  Tensor y = Tensor::zeros({N, K}, tracked);
  auto av = a.values();
  auto bv = b.values();
  auto yv = y.values();
  for (int n = 0; n < N; ++n) {
    const double* arow = &av[static_cast<std::size_t>(n) * D];
    for (int k = 0; k < K; ++k) {
      const double* brow = &bv[static_cast<std::size_t>(k) * D];
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = arow[d] - brow[d];
        acc += diff * diff;
      }
      yv[static_cast<std::size_t>(n) * K + k] = acc;
    }
  }
  if (tracked) {
    rec([a = a, b = b, y = y, N, K, D]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto av = a.values();
      auto bv = b.values();
      const bool ga_on = a.requires_grad();
      const bool gb_on = b.requires_grad();
      std::span<double> ga = ga_on ? a.grad_mut() : std::span<double>{};
      std::span<double> gb = gb_on ? b.grad_mut() : std::span<double>{};
      for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
          const double g = 2.0 * gy[static_cast<std::size_t>(n) * K + k];
          if (g == 0.0) continue;
          for (int d = 0; d < D; ++d) {
            const double diff = av[static_cast<std::size_t>(n) * D + d] - bv[static_cast<std::size_t>(k) * D + d];
            if (ga_on) ga[static_cast<std::size_t>(n) * D + d] += g * diff;
            if (gb_on) gb[static_cast<std::size_t>(k) * D + d] -= g * diff;
          }
        }
      }
    });
  }
  return y;
}

Tensor detach(const Tensor& x) { return x.detached(); }

Tensor ste_apply(const Tensor& x, const Tensor& forward_value) {
  if (x.shape() != forward_value.shape()) shape_error("ste_apply", x, forward_value);
  const bool tracked = track({&x});
  auto fv = forward_value.values();
  Tensor y(x.shape(), std::vector<double>(fv.begin(), fv.end()), tracked);
  if (tracked) {
    rec([x = x, y = y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be > 0");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  std::vector<double> ad;
  {
    Tape tape;
    Tensor loss = f(leaf);
    if (loss.size() != 1) {
      throw std::invalid_argument("finite_diff_check: f must be scalar-valued, got " +
                                  shape_string(loss.shape()));
    }
    if (tape.node_count() > 0) tape.backward(loss);
    auto g = leaf.grad();
    ad.assign(g.begin(), g.end());
    if (ad.empty()) ad.assign(leaf.size(), 0.0);  // f constant in x
  }
  NoGradGuard guard;
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  auto pv = probe.values();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + step;
    const double fp = f(probe).item();
    pv[i] = orig - step;
    const double fm = f(probe).item();
    pv[i] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double rel = std::fabs(ad[i] - fd) / (std::fabs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace vqlab

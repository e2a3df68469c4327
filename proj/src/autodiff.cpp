#include "deblurkit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace deblurkit::ad {

Var Var::constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return Var(std::move(n));
}

Var Var::leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->needsGrad = true;
  return Var(std::move(n));
}

void Var::zeroGrad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var makeOp(Tensor value, std::vector<Var> parents,
           std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents.reserve(parents.size());
  for (const Var& p : parents) {
    n->parents.push_back(p.ptr());
    if (p.needsGrad()) n->needsGrad = true;
  }
  if (n->needsGrad) n->backprop = std::move(backprop);
  return Var(std::move(n));
}

Tensor& gradBuf(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined var");
  if (root.value().size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  if (!root.needsGrad()) return;

  // Reverse topological order via iterative DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node()});
  visited.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->needsGrad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  gradBuf(*root.node())[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

namespace {

Node* parent(Node& n, size_t i) { return n.parents[i].get(); }

void accumulateIf(Node* p, const std::function<void(Tensor&)>& fn) {
  if (p->needsGrad) fn(gradBuf(*p));
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  requireSameShape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int i = 0; i < out.size(); ++i) out[i] += pb[i];
  return makeOp(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    for (int k = 0; k < 2; ++k)
      accumulateIf(parent(n, k), [&](Tensor& d) {
        for (int i = 0; i < g.size(); ++i) d[i] += g[i];
      });
  });
}

Var sub(const Var& a, const Var& b) {
  requireSameShape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return makeOp(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) d[i] += g[i];
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) d[i] -= g[i];
    });
  });
}

Var mul(const Var& a, const Var& b) {
  requireSameShape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const double* pb = b.value().data();
  for (int i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return makeOp(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& av = parent(n, 0)->value;
    const Tensor& bv = parent(n, 1)->value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    });
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (int i = 0; i < out.size(); ++i) out[i] *= s;
  return makeOp(std::move(out), {a}, [s](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (int i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return makeOp(std::move(out), {a}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& x = parent(n, 0)->value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) d[i] += g[i];
    });
  });
}

Var softplus(const Var& a) {
  Tensor out = a.value();
  for (int i = 0; i < out.size(); ++i) {
    double x = out[i];
    out[i] = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  return makeOp(std::move(out), {a}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& x = parent(n, 0)->value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < g.size(); ++i) {
        double s = x[i] > 30.0 ? 1.0 : 1.0 / (1.0 + std::exp(-x[i]));
        d[i] += g[i] * s;
      }
    });
  });
}

Var mean(const Var& a) {
  double s = 0.0;
  for (int i = 0; i < a.value().size(); ++i) s += a.value()[i];
  int count = a.value().size();
  return makeOp(Tensor::scalar(s / count), {a}, [count](Node& n) {
    double g = n.grad[0] / count;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < d.size(); ++i) d[i] += g;
    });
  });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var mulChannelBroadcast(const Var& x, const Var& map) {
  const Tensor& xv = x.value();
  const Tensor& mv = map.value();
  if (mv.channels() != 1 || mv.height() != xv.height() ||
      mv.width() != xv.width())
    throw std::invalid_argument("mulChannelBroadcast: shape mismatch");
  Tensor out = xv;
  int plane = xv.plane();
  for (int c = 0; c < xv.channels(); ++c) {
    double* o = out.data() + c * plane;
    const double* m = mv.data();
    for (int p = 0; p < plane; ++p) o[p] *= m[p];
  }
  return makeOp(std::move(out), {x, map}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& xv = parent(n, 0)->value;
    const Tensor& mv = parent(n, 1)->value;
    int plane = xv.plane();
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int c = 0; c < xv.channels(); ++c)
        for (int p = 0; p < plane; ++p)
          d[c * plane + p] += g[c * plane + p] * mv[p];
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
      for (int c = 0; c < xv.channels(); ++c)
        for (int p = 0; p < plane; ++p)
          d[p] += g[c * plane + p] * xv[c * plane + p];
    });
  });
}

// ---------------------------------------------------------------------------
// shape ops

Var concatChannels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.height() != bv.height() || av.width() != bv.width())
    throw std::invalid_argument("concatChannels: spatial mismatch");
  Tensor out({av.channels() + bv.channels(), av.height(), av.width()});
  std::copy(av.data(), av.data() + av.size(), out.data());
  std::copy(bv.data(), bv.data() + bv.size(), out.data() + av.size());
  int na = av.size();
  return makeOp(std::move(out), {a, b}, [na](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int i = 0; i < na; ++i) d[i] += g[i];
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
      for (int i = 0; i < d.size(); ++i) d[i] += g[na + i];
    });
  });
}

Var sliceChannels(const Var& x, int start, int count) {
  const Tensor& xv = x.value();
  if (start < 0 || start + count > xv.channels())
    throw std::invalid_argument("sliceChannels: range out of bounds");
  int plane = xv.plane();
  Tensor out({count, xv.height(), xv.width()});
  std::copy(xv.data() + start * plane, xv.data() + (start + count) * plane,
            out.data());
  return makeOp(std::move(out), {x}, [start, plane](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      double* dst = d.data() + start * plane;
      for (int i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  });
}

Var padReplicate(const Var& x, int top, int bottom, int left, int right) {
  const Tensor& xv = x.value();
  int C = xv.channels(), H = xv.height(), W = xv.width();
  int Ho = H + top + bottom, Wo = W + left + right;
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y) {
      int sy = std::clamp(y - top, 0, H - 1);
      for (int xx = 0; xx < Wo; ++xx)
        out.at(c, y, xx) = xv.at(c, sy, std::clamp(xx - left, 0, W - 1));
    }
  return makeOp(std::move(out), {x}, [top, left, C, H, W](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < g.height(); ++y) {
          int sy = std::clamp(y - top, 0, H - 1);
          for (int xx = 0; xx < g.width(); ++xx)
            d.at(c, sy, std::clamp(xx - left, 0, W - 1)) += g.at(c, y, xx);
        }
    });
  });
}

Var cropSpatial(const Var& x, int top, int left, int height, int width) {
  const Tensor& xv = x.value();
  int C = xv.channels();
  if (top + height > xv.height() || left + width > xv.width())
    throw std::invalid_argument("cropSpatial: range out of bounds");
  Tensor out({C, height, width});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx)
        out.at(c, y, xx) = xv.at(c, top + y, left + xx);
  return makeOp(std::move(out), {x}, [top, left](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int c = 0; c < g.channels(); ++c)
        for (int y = 0; y < g.height(); ++y)
          for (int xx = 0; xx < g.width(); ++xx)
            d.at(c, top + y, left + xx) += g.at(c, y, xx);
    });
  });
}

// ---------------------------------------------------------------------------
// neural-net primitives

Var conv2d(const Var& input, const Var& weight, const Var& bias) {
  const Tensor& in = input.value();
  const Tensor& w = weight.value();
  if (w.rank() != 4 || w.shape()[1] != in.channels())
    throw std::invalid_argument("conv2d: weight/input channel mismatch");
  int Co = w.shape()[0], Ci = w.shape()[1], kh = w.shape()[2],
      kw = w.shape()[3];
  int H = in.height(), W = in.width();
  int ry = kh / 2, rx = kw / 2;
  Tensor out({Co, H, W});
  const bool hasBias = bias.defined();
  const double* bptr = hasBias ? bias.value().data() : nullptr;

#pragma omp parallel for if (Co * H * W > 4096)
  for (int co = 0; co < Co; ++co) {
    double* oplane = out.data() + co * H * W;
    if (hasBias)
      for (int i = 0; i < H * W; ++i) oplane[i] = bptr[co];
    for (int ci = 0; ci < Ci; ++ci) {
      const double* iplane = in.data() + ci * H * W;
      const double* wk = w.data() + (co * Ci + ci) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        int dy = ky - ry;
        for (int kx = 0; kx < kw; ++kx) {
          int dx = kx - rx;
          double wv = wk[ky * kw + kx];
          if (wv == 0.0) continue;
          int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = oplane + y * W;
            const double* irow = iplane + (y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }

  return makeOp(std::move(out), {input, weight, bias.defined() ? bias : input},
                [Co, Ci, kh, kw, H, W, ry, rx, hasBias](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& in = parent(n, 0)->value;
    const Tensor& w = parent(n, 1)->value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
#pragma omp parallel for if (Ci * H * W > 4096)
      for (int ci = 0; ci < Ci; ++ci) {
        double* dplane = d.data() + ci * H * W;
        for (int co = 0; co < Co; ++co) {
          const double* gplane = g.data() + co * H * W;
          const double* wk = w.data() + (co * Ci + ci) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            int dy = ky - ry;
            for (int kx = 0; kx < kw; ++kx) {
              int dx = kx - rx;
              double wv = wk[ky * kw + kx];
              if (wv == 0.0) continue;
              // out(y,x) used in(y+dy,x+dx): scatter reversed as gather.
              int y0 = std::max(0, dy), y1 = std::min(H, H + dy);
              int x0 = std::max(0, dx), x1 = std::min(W, W + dx);
              for (int y = y0; y < y1; ++y) {
                double* drow = dplane + y * W;
                const double* grow = gplane + (y - dy) * W - dx;
                for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
              }
            }
          }
        }
      }
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
#pragma omp parallel for if (Co > 1)
      for (int co = 0; co < Co; ++co) {
        const double* gplane = g.data() + co * H * W;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* iplane = in.data() + ci * H * W;
          double* dk = d.data() + (co * Ci + ci) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            int dy = ky - ry;
            for (int kx = 0; kx < kw; ++kx) {
              int dx = kx - rx;
              int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              double s = 0.0;
              for (int y = y0; y < y1; ++y) {
                const double* grow = gplane + y * W;
                const double* irow = iplane + (y + dy) * W + dx;
                for (int x = x0; x < x1; ++x) s += grow[x] * irow[x];
              }
              dk[ky * kw + kx] += s;
            }
          }
        }
      }
    });
    if (hasBias)
      accumulateIf(parent(n, 2), [&](Tensor& d) {
        for (int co = 0; co < Co; ++co) {
          const double* gplane = g.data() + co * H * W;
          double s = 0.0;
          for (int i = 0; i < H * W; ++i) s += gplane[i];
          d[co] += s;
        }
      });
  });
}

Var channelLinear(const Var& input, const Var& weight, const Var& bias) {
  const Tensor& in = input.value();
  const Tensor& w = weight.value();
  if (w.rank() != 2 || w.shape()[1] != in.channels())
    throw std::invalid_argument("channelLinear: weight/input mismatch");
  int Co = w.shape()[0], Ci = w.shape()[1];
  int plane = in.plane();
  Tensor out({Co, in.height(), in.width()});
  const bool hasBias = bias.defined();
  const double* bptr = hasBias ? bias.value().data() : nullptr;

#pragma omp parallel for if (Co * plane > 8192)
  for (int co = 0; co < Co; ++co) {
    double* o = out.data() + co * plane;
    if (hasBias)
      for (int p = 0; p < plane; ++p) o[p] = bptr[co];
    for (int ci = 0; ci < Ci; ++ci) {
      double wv = w.data()[co * Ci + ci];
      if (wv == 0.0) continue;
      const double* ip = in.data() + ci * plane;
      for (int p = 0; p < plane; ++p) o[p] += wv * ip[p];
    }
  }

  return makeOp(std::move(out), {input, weight, bias.defined() ? bias : input},
                [Co, Ci, plane, hasBias](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& in = parent(n, 0)->value;
    const Tensor& w = parent(n, 1)->value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
#pragma omp parallel for if (Ci * plane > 8192)
      for (int ci = 0; ci < Ci; ++ci) {
        double* dp = d.data() + ci * plane;
        for (int co = 0; co < Co; ++co) {
          double wv = w.data()[co * Ci + ci];
          if (wv == 0.0) continue;
          const double* gp = g.data() + co * plane;
          for (int p = 0; p < plane; ++p) dp[p] += wv * gp[p];
        }
      }
    });
    accumulateIf(parent(n, 1), [&](Tensor& d) {
#pragma omp parallel for if (Co > 1)
      for (int co = 0; co < Co; ++co) {
        const double* gp = g.data() + co * plane;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* ip = in.data() + ci * plane;
          double s = 0.0;
          for (int p = 0; p < plane; ++p) s += gp[p] * ip[p];
          d[co * Ci + ci] += s;
        }
      }
    });
    if (hasBias)
      accumulateIf(parent(n, 2), [&](Tensor& d) {
        for (int co = 0; co < Co; ++co) {
          const double* gp = g.data() + co * plane;
          double s = 0.0;
          for (int p = 0; p < plane; ++p) s += gp[p];
          d[co] += s;
        }
      });
  });
}

Var softmaxChannels(const Var& x) {
  const Tensor& xv = x.value();
  int C = xv.channels(), plane = xv.plane();
  Tensor out(xv.shape());
#pragma omp parallel for if (plane * C > 8192)
  for (int p = 0; p < plane; ++p) {
    double mx = xv[p];
    for (int c = 1; c < C; ++c) mx = std::max(mx, xv[c * plane + p]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      double e = std::exp(xv[c * plane + p] - mx);
      out[c * plane + p] = e;
      sum += e;
    }
    double inv = 1.0 / sum;
    for (int c = 0; c < C; ++c) out[c * plane + p] *= inv;
  }
  return makeOp(std::move(out), {x}, [C, plane](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& y = n.value;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
#pragma omp parallel for if (plane * C > 8192)
      for (int p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += g[c * plane + p] * y[c * plane + p];
        for (int c = 0; c < C; ++c)
          d[c * plane + p] += y[c * plane + p] * (g[c * plane + p] - dot);
      }
    });
  });
}

Var avgPool2(const Var& x) {
  const Tensor& xv = x.value();
  int C = xv.channels(), H = xv.height(), W = xv.width();
  if (H % 2 || W % 2) throw std::invalid_argument("avgPool2: odd input size");
  Tensor out({C, H / 2, W / 2});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H / 2; ++y)
      for (int xx = 0; xx < W / 2; ++xx)
        out.at(c, y, xx) = 0.25 * (xv.at(c, 2 * y, 2 * xx) +
                                   xv.at(c, 2 * y, 2 * xx + 1) +
                                   xv.at(c, 2 * y + 1, 2 * xx) +
                                   xv.at(c, 2 * y + 1, 2 * xx + 1));
  return makeOp(std::move(out), {x}, [](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
      for (int c = 0; c < g.channels(); ++c)
        for (int y = 0; y < g.height(); ++y)
          for (int xx = 0; xx < g.width(); ++xx) {
            double gv = 0.25 * g.at(c, y, xx);
            d.at(c, 2 * y, 2 * xx) += gv;
            d.at(c, 2 * y, 2 * xx + 1) += gv;
            d.at(c, 2 * y + 1, 2 * xx) += gv;
            d.at(c, 2 * y + 1, 2 * xx + 1) += gv;
          }
    });
  });
}

namespace {

// Source coordinate and weights for x2 bilinear upsampling (half-pixel
// centers, clamped at the borders).
inline void up2Coef(int o, int n, int& i0, int& i1, double& w1) {
  double s = (o + 0.5) * 0.5 - 0.5;
  double f = std::floor(s);
  i0 = std::clamp(static_cast<int>(f), 0, n - 1);
  i1 = std::min(i0 + 1, n - 1);
  w1 = std::clamp(s - f, 0.0, 1.0);
  if (s < 0) w1 = 0.0;
}

}  // namespace

Var upsampleBilinear2(const Var& x) {
  const Tensor& xv = x.value();
  int C = xv.channels(), H = xv.height(), W = xv.width();
  int Ho = 2 * H, Wo = 2 * W;
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y) {
      int y0, y1;
      double wy;
      up2Coef(y, H, y0, y1, wy);
      for (int xx = 0; xx < Wo; ++xx) {
        int x0, x1;
        double wx;
        up2Coef(xx, W, x0, x1, wx);
        out.at(c, y, xx) = (1 - wy) * ((1 - wx) * xv.at(c, y0, x0) +
                                       wx * xv.at(c, y0, x1)) +
                           wy * ((1 - wx) * xv.at(c, y1, x0) +
                                 wx * xv.at(c, y1, x1));
      }
    }
  return makeOp(std::move(out), {x}, [C, H, W, Ho, Wo](Node& n) {
    const Tensor& g = n.grad;
    accumulateIf(parent(n, 0), [&](Tensor& d) {
#pragma omp parallel for if (C > 1)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y) {
          int y0, y1;
          double wy;
          up2Coef(y, H, y0, y1, wy);
          for (int xx = 0; xx < Wo; ++xx) {
            int x0, x1;
            double wx;
            up2Coef(xx, W, x0, x1, wx);
            double gv = g.at(c, y, xx);
            d.at(c, y0, x0) += (1 - wy) * (1 - wx) * gv;
            d.at(c, y0, x1) += (1 - wy) * wx * gv;
            d.at(c, y1, x0) += wy * (1 - wx) * gv;
            d.at(c, y1, x1) += wy * wx * gv;
          }
        }
    });
  });
}

// ---------------------------------------------------------------------------
// warping

Var warp(const Var& img, const Var& flow) {
  const Tensor& iv = img.value();
  const Tensor& fv = flow.value();
  if (fv.channels() != 2 || fv.height() != iv.height() ||
      fv.width() != iv.width())
    throw std::invalid_argument("warp: flow shape mismatch");
  int C = iv.channels(), H = iv.height(), W = iv.width();
  int plane = H * W;
  Tensor out({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int p = y * W + x;
      double sx = std::clamp(x + fv[p], 0.0, double(W - 1));
      double sy = std::clamp(y + fv[plane + p], 0.0, double(H - 1));
      int x0 = std::min(static_cast<int>(sx), W - 2 >= 0 ? W - 2 : 0);
      int y0 = std::min(static_cast<int>(sy), H - 2 >= 0 ? H - 2 : 0);
      double wx = sx - x0, wy = sy - y0;
      for (int c = 0; c < C; ++c) {
        const double* ip = iv.data() + c * plane;
        double v00 = ip[y0 * W + x0], v01 = ip[y0 * W + x0 + 1];
        double v10 = ip[(y0 + 1) * W + x0], v11 = ip[(y0 + 1) * W + x0 + 1];
        out[c * plane + p] = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                             wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  return makeOp(std::move(out), {img, flow}, [C, H, W, plane](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& iv = parent(n, 0)->value;
    const Tensor& fv = parent(n, 1)->value;
    bool needImg = parent(n, 0)->needsGrad;
    bool needFlow = parent(n, 1)->needsGrad;
    Tensor* dImg = needImg ? &gradBuf(*parent(n, 0)) : nullptr;
    Tensor* dFlow = needFlow ? &gradBuf(*parent(n, 1)) : nullptr;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int p = y * W + x;
        double rx = x + fv[p], ry = y + fv[plane + p];
        bool inX = rx > 0.0 && rx < W - 1;  // clamped coords have zero slope
        bool inY = ry > 0.0 && ry < H - 1;
        double sx = std::clamp(rx, 0.0, double(W - 1));
        double sy = std::clamp(ry, 0.0, double(H - 1));
        int x0 = std::min(static_cast<int>(sx), W - 2 >= 0 ? W - 2 : 0);
        int y0 = std::min(static_cast<int>(sy), H - 2 >= 0 ? H - 2 : 0);
        double wx = sx - x0, wy = sy - y0;
        double gfx = 0.0, gfy = 0.0;
        for (int c = 0; c < C; ++c) {
          double gv = g[c * plane + p];
          if (gv == 0.0) continue;
          const double* ip = iv.data() + c * plane;
          double v00 = ip[y0 * W + x0], v01 = ip[y0 * W + x0 + 1];
          double v10 = ip[(y0 + 1) * W + x0], v11 = ip[(y0 + 1) * W + x0 + 1];
          if (dImg) {
            double* dp = dImg->data() + c * plane;
            dp[y0 * W + x0] += (1 - wy) * (1 - wx) * gv;
            dp[y0 * W + x0 + 1] += (1 - wy) * wx * gv;
            dp[(y0 + 1) * W + x0] += wy * (1 - wx) * gv;
            dp[(y0 + 1) * W + x0 + 1] += wy * wx * gv;
          }
          if (dFlow) {
            gfx += gv * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
            gfy += gv * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
          }
        }
        if (dFlow) {
          if (inX) (*dFlow)[p] += gfx;
          if (inY) (*dFlow)[plane + p] += gfy;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// losses

Var charbonnier(const Var& a, const Var& b, double eps, CharbonnierMode mode,
                const Tensor* mask) {
  requireSameShape(a.value(), b.value(), "charbonnier");
  if (eps <= 0.0) throw std::invalid_argument("charbonnier: eps must be > 0");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int n = av.size();
  int plane = av.rank() == 3 ? av.plane() : n;
  if (mask && mask->size() != plane)
    throw std::invalid_argument("charbonnier: mask size mismatch");
  Tensor maskCopy = mask ? *mask : Tensor();
  bool masked = mask != nullptr;

  double loss = 0.0;
  long included = 0;
  if (mode == CharbonnierMode::PerElementMean) {
    for (int i = 0; i < n; ++i) {
      if (masked && maskCopy[i % plane] == 0.0) continue;
      double d = av[i] - bv[i];
      loss += std::sqrt(d * d + eps * eps);
      ++included;
    }
    loss = included > 0 ? loss / included : eps;
  } else {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      if (masked && maskCopy[i % plane] == 0.0) continue;
      double d = av[i] - bv[i];
      ss += d * d;
      ++included;
    }
    loss = std::sqrt(ss + eps * eps);
  }

  return makeOp(Tensor::scalar(loss), {a, b},
                [eps, mode, masked, maskCopy = std::move(maskCopy), plane,
                 included, loss](Node& n2) {
    double g = n2.grad[0];
    const Tensor& av = parent(n2, 0)->value;
    const Tensor& bv = parent(n2, 1)->value;
    int n = av.size();
    auto elemGrad = [&](int i) -> double {
      if (masked && maskCopy[i % plane] == 0.0) return 0.0;
      double d = av[i] - bv[i];
      if (mode == CharbonnierMode::PerElementMean) {
        if (included == 0) return 0.0;
        return d / (std::sqrt(d * d + eps * eps) * included);
      }
      return loss > 0.0 ? d / loss : 0.0;
    };
    accumulateIf(parent(n2, 0), [&](Tensor& dst) {
      for (int i = 0; i < n; ++i) dst[i] += g * elemGrad(i);
    });
    accumulateIf(parent(n2, 1), [&](Tensor& dst) {
      for (int i = 0; i < n; ++i) dst[i] -= g * elemGrad(i);
    });
  });
}

Var l1Loss(const Var& a, const Var& b) {
  requireSameShape(a.value(), b.value(), "l1Loss");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int n = av.size();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) loss += std::abs(av[i] - bv[i]);
  loss /= n;
  return makeOp(Tensor::scalar(loss), {a, b}, [n](Node& n2) {
    double g = n2.grad[0] / n;
    const Tensor& av = parent(n2, 0)->value;
    const Tensor& bv = parent(n2, 1)->value;
    auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
    accumulateIf(parent(n2, 0), [&](Tensor& dst) {
      for (int i = 0; i < n; ++i) dst[i] += g * sign(av[i] - bv[i]);
    });
    accumulateIf(parent(n2, 1), [&](Tensor& dst) {
      for (int i = 0; i < n; ++i) dst[i] -= g * sign(av[i] - bv[i]);
    });
  });
}

}  // namespace deblurkit::ad

#pragma once

// Independent reference implementations used as test oracles. Everything in
// this header is written as plain loops against raw buffers, deliberately
// sharing no code with the tensor engine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Quadruple-loop same-padding convolution. x[h,w,cin], k[kh,kw,cin,f],
// bias[f] (may be empty), out[h,w,f].
inline std::vector<double> conv2d_ref(const std::vector<double>& x, int h, int w, int cin,
                                      const std::vector<double>& k, int kh, int kw, int f,
                                      const std::vector<double>& bias) {
  std::vector<double> out(static_cast<std::size_t>(h) * w * f, 0.0);
  const int ph = kh / 2, pw = kw / 2;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int fo = 0; fo < f; ++fo) {
        double acc = bias.empty() ? 0.0 : bias[fo];
        for (int di = 0; di < kh; ++di) {
          for (int dj = 0; dj < kw; ++dj) {
            const int ii = i + di - ph;
            const int jj = j + dj - pw;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            for (int c = 0; c < cin; ++c) {
              acc += x[(static_cast<std::size_t>(ii) * w + jj) * cin + c] *
                     k[((static_cast<std::size_t>(di) * kw + dj) * cin + c) * f + fo];
            }
          }
        }
        out[(static_cast<std::size_t>(i) * w + j) * f + fo] = acc;
      }
    }
  }
  return out;
}

// Loop-based 2x2/stride-2 max pooling with partial edge windows.
inline std::vector<double> max_pool2d_ref(const std::vector<double>& x, int h, int w, int c) {
  const int oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int oi = 0; oi < oh; ++oi) {
    for (int oj = 0; oj < ow; ++oj) {
      for (int ch = 0; ch < c; ++ch) {
        double best = -1e300;
        for (int i = oi * 2; i < std::min(oi * 2 + 2, h); ++i) {
          for (int j = oj * 2; j < std::min(oj * 2 + 2, w); ++j) {
            best = std::max(best, x[(static_cast<std::size_t>(i) * w + j) * c + ch]);
          }
        }
        out[(static_cast<std::size_t>(oi) * ow + oj) * c + ch] = best;
      }
    }
  }
  return out;
}

// Direct exp/normalize softmax over the unmasked entries of one row.
inline std::vector<double> masked_softmax_ref(const std::vector<double>& x,
                                              const std::vector<bool>& mask) {
  std::vector<double> out(x.size(), 0.0);
  double mx = -1e300;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) mx = std::max(mx, x[i]);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i]) {
      out[i] = std::exp(x[i] - mx);
      sum += out[i];
    }
  }
  for (double& v : out) v /= sum;
  return out;
}

// Triple-loop interaction: out[i,j,c] = p[i,c] * h[j,c].
inline std::vector<double> interact_ref(const std::vector<double>& p, int pl,
                                        const std::vector<double>& h, int hl, int d) {
  std::vector<double> out(static_cast<std::size_t>(pl) * hl * d);
  for (int i = 0; i < pl; ++i) {
    for (int j = 0; j < hl; ++j) {
      for (int c = 0; c < d; ++c) {
        out[(static_cast<std::size_t>(i) * hl + j) * d + c] =
            p[static_cast<std::size_t>(i) * d + c] * h[static_cast<std::size_t>(j) * d + c];
      }
    }
  }
  return out;
}

// Straight-line two-layer MLP: relu(x W1 + b1) W2 + b2.
inline std::vector<double> mlp2_ref(const std::vector<double>& x, int in, int hid, int out_dim,
                                    const std::vector<double>& w1, const std::vector<double>& b1,
                                    const std::vector<double>& w2, const std::vector<double>& b2) {
  std::vector<double> h(static_cast<std::size_t>(hid));
  for (int j = 0; j < hid; ++j) {
    double acc = b1[j];
    for (int i = 0; i < in; ++i) acc += x[i] * w1[static_cast<std::size_t>(i) * hid + j];
    h[j] = acc > 0.0 ? acc : 0.0;
  }
  std::vector<double> y(static_cast<std::size_t>(out_dim));
  for (int j = 0; j < out_dim; ++j) {
    double acc = b2[j];
    for (int i = 0; i < hid; ++i) acc += h[i] * w2[static_cast<std::size_t>(i) * out_dim + j];
    y[j] = acc;
  }
  return y;
}

// Reference char pipeline: embed 16 char ids to [16, cdim], 1-d same-padded
// conv (kernel kw, f filters, bias), relu, then max over the unpadded
// positions. All-padding rows produce zeros.
inline std::vector<double> char_cnn_ref(const std::vector<int>& char_ids,  // 16 ids, 0 = pad
                                        const std::vector<double>& table, int cdim,
                                        const std::vector<double>& kernel,  // [kw, cdim, f]
                                        int kw, int f, const std::vector<double>& bias) {
  const int s = static_cast<int>(char_ids.size());
  std::vector<double> emb(static_cast<std::size_t>(s) * cdim);
  for (int t = 0; t < s; ++t) {
    for (int c = 0; c < cdim; ++c) {
      emb[static_cast<std::size_t>(t) * cdim + c] =
          table[static_cast<std::size_t>(char_ids[t]) * cdim + c];
    }
  }
  const int pad = kw / 2;
  std::vector<double> conv(static_cast<std::size_t>(s) * f);
  for (int t = 0; t < s; ++t) {
    for (int fo = 0; fo < f; ++fo) {
      double acc = bias[fo];
      for (int dt = 0; dt < kw; ++dt) {
        const int tt = t + dt - pad;
        if (tt < 0 || tt >= s) continue;
        for (int c = 0; c < cdim; ++c) {
          acc += emb[static_cast<std::size_t>(tt) * cdim + c] *
                 kernel[(static_cast<std::size_t>(dt) * cdim + c) * f + fo];
        }
      }
      const double r = acc > 0.0 ? acc : 0.0;
      conv[static_cast<std::size_t>(t) * f + fo] = r;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(f), 0.0);
  bool any = false;
  for (int t = 0; t < s; ++t) {
    if (char_ids[t] != 0) any = true;
  }
  if (!any) return out;
  for (int fo = 0; fo < f; ++fo) {
    double best = -1e300;
    for (int t = 0; t < s; ++t) {
      if (char_ids[t] == 0) continue;
      best = std::max(best, conv[static_cast<std::size_t>(t) * f + fo]);
    }
    out[fo] = best;
  }
  return out;
}

}  // namespace oracle

/* Copyright 2026 The cxrnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "cxr/network.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>

#include "cxr/dataman.hpp"

namespace cxr {

// ------------------------------------------------------------------ ops

template <typename S>
struct Tape {
  FeatureMap<S> input;
  FeatureMap<S> output;
  MatrixX<S> cols;  // positions x taps
  std::vector<Eigen::Index> argmax;
  std::vector<Tape> children;
};

template <typename S>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::size_t param_count() const { return 0; }
  virtual void init(S* /*params*/, Rng& /*rng*/) const {}
  /// `tape` is null for inference.
  virtual FeatureMap<S> forward(const FeatureMap<S>& x, const S* params, Tape<S>* tape) const = 0;
  /// Accumulates parameter gradients into `grads`, returns d(loss)/d(input).
  virtual FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& tape, const S* params,
                                 S* grads) const = 0;
};

namespace {

template <typename S>
using ConstMatrixMap = Eigen::Map<const MatrixX<S>>;
template <typename S>
using MatrixMap = Eigen::Map<MatrixX<S>>;
template <typename S>
using ConstVectorMap = Eigen::Map<const VectorX<S>>;
template <typename S>
using VectorMap = Eigen::Map<VectorX<S>>;

template <typename S>
void fill_uniform(S* p, std::size_t n, double bound, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<S>(rng.uniform(-bound, bound));
}

// Rows are output positions, columns are kernel taps ci * k * k + ky * k + kx.
template <typename S>
MatrixX<S> im2col(const FeatureMap<S>& x, int k, int s) {
  const int oh = same_output(x.height, s);
  const int ow = same_output(x.width, s);
  const int pt = same_pad_before(x.height, k, s);
  const int pl = same_pad_before(x.width, k, s);
  MatrixX<S> cols = MatrixX<S>::Zero(std::int64_t(oh) * ow, std::int64_t(x.channels()) * k * k);
  for (int c = 0; c < x.channels(); ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index tap = (std::int64_t(c) * k + ky) * k + kx;
        S* col = cols.col(tap).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - pt + ky;
          if (iy < 0 || iy >= x.height) continue;
          const S* row = x.data.row(c).data() + std::int64_t(iy) * x.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - pl + kx;
            if (ix >= 0 && ix < x.width) col[std::int64_t(oy) * ow + ox] = row[ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
FeatureMap<S> col2im(const MatrixX<S>& cols, const Shape3& in, int k, int s) {
  const int oh = same_output(in.height, s);
  const int ow = same_output(in.width, s);
  const int pt = same_pad_before(in.height, k, s);
  const int pl = same_pad_before(in.width, k, s);
  FeatureMap<S> dx = FeatureMap<S>::zeros(in);
  for (int c = 0; c < in.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index tap = (std::int64_t(c) * k + ky) * k + kx;
        const S* col = cols.col(tap).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - pt + ky;
          if (iy < 0 || iy >= in.height) continue;
          S* row = dx.data.row(c).data() + std::int64_t(iy) * in.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - pl + kx;
            if (ix >= 0 && ix < in.width) row[ix] += col[std::int64_t(oy) * ow + ox];
          }
        }
      }
    }
  }
  return dx;
}

template <typename S>
void check_channels(const FeatureMap<S>& x, int expected, const char* what) {
  if (x.channels() != expected)
    throw ArgumentError(std::string(what) + ": expected " + std::to_string(expected) +
                        " input channels, got " + std::to_string(x.channels()));
}

/// Standard, pointwise and adapter convolutions.
template <typename S>
class ConvOp final : public Op<S> {
 public:
  ConvOp(int in, int out, int k, int stride) : in_(in), out_(out), k_(k), s_(stride) {}

  std::size_t param_count() const override {
    return std::size_t(out_) * in_ * k_ * k_ + out_;
  }
  void init(S* p, Rng& rng) const override {
    fill_uniform(p, std::size_t(out_) * in_ * k_ * k_, std::sqrt(6.0 / (in_ * k_ * k_)), rng);
    std::fill(p + std::size_t(out_) * in_ * k_ * k_, p + param_count(), S(0));
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, const S* p, Tape<S>* tape) const override {
    check_channels(x, in_, "convolution");
    ConstMatrixMap<S> w(p, out_, std::int64_t(in_) * k_ * k_);
    ConstVectorMap<S> b(p + w.size(), out_);
    FeatureMap<S> y;
    if (fast()) {
      y.height = x.height;
      y.width = x.width;
      y.data.noalias() = w * x.data;
      if (tape) tape->input = x;
    } else {
      MatrixX<S> cols = im2col(x, k_, s_);
      y.height = same_output(x.height, s_);
      y.width = same_output(x.width, s_);
      y.data.noalias() = w * cols.transpose();
      if (tape) {
        tape->input.height = x.height;
        tape->input.width = x.width;
        tape->cols = std::move(cols);
      }
    }
    y.data.colwise() += b;
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S* p,
                         S* grads) const override {
    ConstMatrixMap<S> w(p, out_, std::int64_t(in_) * k_ * k_);
    MatrixMap<S> gw(grads, out_, std::int64_t(in_) * k_ * k_);
    VectorMap<S> gb(grads + w.size(), out_);
    gb += g.data.rowwise().sum();
    if (fast()) {
      gw.noalias() += g.data * t.input.data.transpose();
      FeatureMap<S> dx{g.height, g.width, FeatureMatrix<S>()};
      dx.data.noalias() = w.transpose() * g.data;
      return dx;
    }
    gw.noalias() += g.data * t.cols;
    MatrixX<S> dcols = g.data.transpose() * w;
    return col2im(dcols, {in_, t.input.height, t.input.width}, k_, s_);
  }

 private:
  bool fast() const { return k_ == 1 && s_ == 1; }
  int in_, out_, k_, s_;
};

template <typename S>
class DepthwiseOp final : public Op<S> {
 public:
  DepthwiseOp(int channels, int multiplier, int k, int stride)
      : c_(channels), m_(multiplier), k_(k), s_(stride) {}

  std::size_t param_count() const override { return std::size_t(c_) * m_ * (k_ * k_ + 1); }
  void init(S* p, Rng& rng) const override {
    fill_uniform(p, std::size_t(c_) * m_ * k_ * k_, std::sqrt(6.0 / (k_ * k_)), rng);
    std::fill(p + std::size_t(c_) * m_ * k_ * k_, p + param_count(), S(0));
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, const S* p, Tape<S>* tape) const override {
    check_channels(x, c_, "depthwise convolution");
    ConstMatrixMap<S> w(p, std::int64_t(c_) * m_, k_ * k_);
    ConstVectorMap<S> b(p + w.size(), std::int64_t(c_) * m_);
    const int oh = same_output(x.height, s_);
    const int ow = same_output(x.width, s_);
    const int pt = same_pad_before(x.height, k_, s_);
    const int pl = same_pad_before(x.width, k_, s_);
    FeatureMap<S> y = FeatureMap<S>::zeros({c_ * m_, oh, ow});
    for (int c = 0; c < c_; ++c) {
      const S* in = x.data.row(c).data();
      for (int j = 0; j < m_; ++j) {
        const int oc = c * m_ + j;
        S* out = y.data.row(oc).data();
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx) {
            const S wv = w(oc, ky * k_ + kx);
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s_ - pt + ky;
              if (iy < 0 || iy >= x.height) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s_ - pl + kx;
                if (ix >= 0 && ix < x.width)
                  out[std::int64_t(oy) * ow + ox] += wv * in[std::int64_t(iy) * x.width + ix];
              }
            }
          }
        }
        y.data.row(oc).array() += b(oc);
      }
    }
    if (tape) tape->input = x;
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S* p,
                         S* grads) const override {
    const FeatureMap<S>& x = t.input;
    ConstMatrixMap<S> w(p, std::int64_t(c_) * m_, k_ * k_);
    MatrixMap<S> gw(grads, std::int64_t(c_) * m_, k_ * k_);
    VectorMap<S> gb(grads + w.size(), std::int64_t(c_) * m_);
    gb += g.data.rowwise().sum();
    const int oh = g.height;
    const int ow = g.width;
    const int pt = same_pad_before(x.height, k_, s_);
    const int pl = same_pad_before(x.width, k_, s_);
    FeatureMap<S> dx = FeatureMap<S>::zeros(x.shape());
    for (int c = 0; c < c_; ++c) {
      const S* in = x.data.row(c).data();
      S* din = dx.data.row(c).data();
      for (int j = 0; j < m_; ++j) {
        const int oc = c * m_ + j;
        const S* go = g.data.row(oc).data();
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx) {
            const S wv = w(oc, ky * k_ + kx);
            S acc = 0;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s_ - pt + ky;
              if (iy < 0 || iy >= x.height) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s_ - pl + kx;
                if (ix < 0 || ix >= x.width) continue;
                const S gv = go[std::int64_t(oy) * ow + ox];
                acc += gv * in[std::int64_t(iy) * x.width + ix];
                din[std::int64_t(iy) * x.width + ix] += gv * wv;
              }
            }
            gw(oc, ky * k_ + kx) += acc;
          }
        }
      }
    }
    return dx;
  }

 private:
  int c_, m_, k_, s_;
};

template <typename S>
class PoolOp final : public Op<S> {
 public:
  PoolOp(PoolMode mode, int k, int stride) : mode_(mode), k_(k), s_(stride) {}

  FeatureMap<S> forward(const FeatureMap<S>& x, const S*, Tape<S>* tape) const override {
    const int oh = same_output(x.height, s_);
    const int ow = same_output(x.width, s_);
    const int pt = same_pad_before(x.height, k_, s_);
    const int pl = same_pad_before(x.width, k_, s_);
    FeatureMap<S> y = FeatureMap<S>::zeros({x.channels(), oh, ow});
    if (tape) {
      tape->input.height = x.height;
      tape->input.width = x.width;
      tape->input.data.resize(x.channels(), 0);
      if (mode_ == PoolMode::max) tape->argmax.assign(std::size_t(y.data.size()), 0);
    }
    for (int c = 0; c < x.channels(); ++c) {
      const S* in = x.data.row(c).data();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          S best = -std::numeric_limits<S>::infinity();
          Eigen::Index best_at = -1;
          S sum = 0;
          int count = 0;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * s_ - pt + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * s_ - pl + kx;
              if (ix < 0 || ix >= x.width) continue;
              const Eigen::Index at = std::int64_t(iy) * x.width + ix;
              if (best_at < 0 || in[at] > best) {
                best = in[at];
                best_at = at;
              }
              sum += in[at];
              ++count;
            }
          }
          const Eigen::Index o = std::int64_t(oy) * ow + ox;
          y.data(c, o) = mode_ == PoolMode::max ? best : sum / S(count);
          if (tape && mode_ == PoolMode::max)
            tape->argmax[std::size_t(std::int64_t(c) * oh * ow + o)] = best_at;
        }
      }
    }
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S*, S*) const override {
    const Shape3 in{static_cast<int>(t.input.data.rows()), t.input.height, t.input.width};
    FeatureMap<S> dx = FeatureMap<S>::zeros(in);
    const int oh = g.height;
    const int ow = g.width;
    const int pt = same_pad_before(in.height, k_, s_);
    const int pl = same_pad_before(in.width, k_, s_);
    for (int c = 0; c < in.channels; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const Eigen::Index o = std::int64_t(oy) * ow + ox;
          const S gv = g.data(c, o);
          if (mode_ == PoolMode::max) {
            dx.data(c, t.argmax[std::size_t(std::int64_t(c) * oh * ow + o)]) += gv;
            continue;
          }
          int count = 0;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * s_ - pt + ky;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * s_ - pl + kx;
              if (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width) ++count;
            }
          }
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * s_ - pt + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * s_ - pl + kx;
              if (ix >= 0 && ix < in.width) dx.data(c, std::int64_t(iy) * in.width + ix) += gv / S(count);
            }
          }
        }
      }
    }
    return dx;
  }

 private:
  PoolMode mode_;
  int k_, s_;
};

template <typename S>
class GlobalPoolOp final : public Op<S> {
 public:
  explicit GlobalPoolOp(PoolMode mode) : mode_(mode) {}

  FeatureMap<S> forward(const FeatureMap<S>& x, const S*, Tape<S>* tape) const override {
    FeatureMap<S> y{1, 1, FeatureMatrix<S>(x.channels(), 1)};
    if (tape) {
      tape->input.height = x.height;
      tape->input.width = x.width;
      tape->input.data.resize(x.channels(), 0);
      tape->argmax.assign(std::size_t(x.channels()), 0);
    }
    for (int c = 0; c < x.channels(); ++c) {
      if (mode_ == PoolMode::avg) {
        y.data(c, 0) = x.data.row(c).mean();
      } else {
        Eigen::Index at;
        y.data(c, 0) = x.data.row(c).maxCoeff(&at);
        if (tape) tape->argmax[std::size_t(c)] = at;
      }
    }
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S*, S*) const override {
    const Shape3 in{static_cast<int>(t.input.data.rows()), t.input.height, t.input.width};
    FeatureMap<S> dx = FeatureMap<S>::zeros(in);
    const S n = S(std::int64_t(in.height) * in.width);
    for (int c = 0; c < in.channels; ++c) {
      if (mode_ == PoolMode::avg) {
        dx.data.row(c).setConstant(g.data(c, 0) / n);
      } else {
        dx.data(c, t.argmax[std::size_t(c)]) = g.data(c, 0);
      }
    }
    return dx;
  }

 private:
  PoolMode mode_;
};

/// Fully connected layer over the flattened input (c * H * W + y * W + x).
template <typename S>
class DenseOp final : public Op<S> {
 public:
  DenseOp(std::int64_t in, int out) : in_(in), out_(out) {}

  std::size_t param_count() const override { return std::size_t(in_) * out_ + out_; }
  void init(S* p, Rng& rng) const override {
    fill_uniform(p, std::size_t(in_) * out_, std::sqrt(6.0 / double(in_)), rng);
    std::fill(p + std::size_t(in_) * out_, p + param_count(), S(0));
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, const S* p, Tape<S>* tape) const override {
    if (x.data.size() != in_)
      throw ArgumentError("dense: expected " + std::to_string(in_) + " inputs, got " +
                          std::to_string(x.data.size()));
    ConstMatrixMap<S> w(p, out_, in_);
    ConstVectorMap<S> b(p + w.size(), out_);
    ConstVectorMap<S> xv(x.data.data(), in_);
    FeatureMap<S> y{1, 1, FeatureMatrix<S>(out_, 1)};
    y.data.col(0).noalias() = w * xv + b;
    if (tape) tape->input = x;
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S* p,
                         S* grads) const override {
    ConstMatrixMap<S> w(p, out_, in_);
    MatrixMap<S> gw(grads, out_, in_);
    VectorMap<S> gb(grads + w.size(), out_);
    ConstVectorMap<S> xv(t.input.data.data(), in_);
    const VectorX<S> gv = g.data.col(0);
    gw.noalias() += gv * xv.transpose();
    gb += gv;
    FeatureMap<S> dx = FeatureMap<S>::zeros(t.input.shape());
    VectorMap<S>(dx.data.data(), in_).noalias() = w.transpose() * gv;
    return dx;
  }

 private:
  std::int64_t in_;
  int out_;
};

template <typename S>
class ActivationOp final : public Op<S> {
 public:
  explicit ActivationOp(Activation fn) : fn_(fn) {}

  FeatureMap<S> forward(const FeatureMap<S>& x, const S*, Tape<S>* tape) const override {
    FeatureMap<S> y = x;
    activate(y, fn_);
    if (tape && fn_ == Activation::relu) tape->output = y;
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S*, S*) const override {
    if (fn_ == Activation::identity) return g;
    FeatureMap<S> dx{g.height, g.width, FeatureMatrix<S>()};
    dx.data = (t.output.data.array() > S(0)).select(g.data, S(0));
    return dx;
  }

 private:
  Activation fn_;
};

/// projection -> replication -> projection -> expansion, activation after each.
template <typename S>
class PRPEOp final : public Op<S> {
 public:
  explicit PRPEOp(const PRPEBlockSpec& b)
      : block_(b),
        project_(b.in_channels, b.internal_channels(), 1, 1),
        reproject_(b.merged_channels(), b.internal_channels(), 1, 1),
        expand_(b.internal_channels(), b.expand_channels, 1, 1),
        act_(b.activation) {
    for (int r = 0; r < b.replicas; ++r)
      replicas_.emplace_back(b.internal_channels(), 1, b.kernel, 1);
    std::size_t off = 0;
    project_off_ = off;
    off += project_.param_count();
    for (const auto& rep : replicas_) {
      replica_off_.push_back(off);
      off += rep.param_count();
    }
    reproject_off_ = off;
    off += reproject_.param_count();
    expand_off_ = off;
    off += expand_.param_count();
    total_ = off;
  }

  std::size_t param_count() const override { return total_; }
  void init(S* p, Rng& rng) const override {
    project_.init(p + project_off_, rng);
    for (std::size_t r = 0; r < replicas_.size(); ++r) replicas_[r].init(p + replica_off_[r], rng);
    reproject_.init(p + reproject_off_, rng);
    expand_.init(p + expand_off_, rng);
  }

  FeatureMap<S> forward(const FeatureMap<S>& x, const S* p, Tape<S>* tape) const override {
    check_channels(x, block_.in_channels, "PRPE block");
    const std::size_t r = replicas_.size();
    auto child = [&](std::size_t i) -> Tape<S>* {
      return tape ? &tape->children[i] : nullptr;
    };
    if (tape) tape->children.assign(r + 7, Tape<S>{});
    FeatureMap<S> a = act_.forward(project_.forward(x, p + project_off_, child(0)), p, child(1));
    FeatureMap<S> merged;
    for (std::size_t i = 0; i < r; ++i) {
      FeatureMap<S> bi = replicas_[i].forward(a, p + replica_off_[i], child(2 + i));
      if (i == 0) {
        merged = std::move(bi);
      } else if (block_.replication == Replication::sum) {
        merged.data += bi.data;
      } else {
        FeatureMatrix<S> stacked(merged.data.rows() + bi.data.rows(), merged.data.cols());
        stacked << merged.data, bi.data;
        merged.data = std::move(stacked);
      }
    }
    merged = act_.forward(merged, p, child(2 + r));
    FeatureMap<S> c = act_.forward(reproject_.forward(merged, p + reproject_off_, child(3 + r)), p,
                                   child(4 + r));
    return act_.forward(expand_.forward(c, p + expand_off_, child(5 + r)), p, child(6 + r));
  }

  FeatureMap<S> backward(const FeatureMap<S>& g, const Tape<S>& t, const S* p,
                         S* grads) const override {
    const std::size_t r = replicas_.size();
    const auto& ch = t.children;
    FeatureMap<S> d = act_.backward(g, ch[6 + r], p, grads);
    d = expand_.backward(d, ch[5 + r], p + expand_off_, grads + expand_off_);
    d = act_.backward(d, ch[4 + r], p, grads);
    d = reproject_.backward(d, ch[3 + r], p + reproject_off_, grads + reproject_off_);
    d = act_.backward(d, ch[2 + r], p, grads);
    const int m = block_.internal_channels();
    FeatureMap<S> da;
    for (std::size_t i = 0; i < r; ++i) {
      FeatureMap<S> gi;
      if (block_.replication == Replication::sum) {
        gi = d;
      } else {
        gi = {d.height, d.width, d.data.middleRows(std::int64_t(i) * m, m)};
      }
      FeatureMap<S> di = replicas_[i].backward(gi, ch[2 + i], p + replica_off_[i],
                                               grads + replica_off_[i]);
      if (i == 0) {
        da = std::move(di);
      } else {
        da.data += di.data;
      }
    }
    da = act_.backward(da, ch[1], p, grads);
    return project_.backward(da, ch[0], p + project_off_, grads + project_off_);
  }

 private:
  PRPEBlockSpec block_;
  ConvOp<S> project_;
  std::vector<DepthwiseOp<S>> replicas_;
  ConvOp<S> reproject_;
  ConvOp<S> expand_;
  ActivationOp<S> act_;
  std::size_t project_off_ = 0, reproject_off_ = 0, expand_off_ = 0, total_ = 0;
  std::vector<std::size_t> replica_off_;
};

template <typename S>
std::shared_ptr<const Op<S>> make_op(const LayerSpec& l, const Shape3& in) {
  switch (l.kind) {
    case LayerKind::conv_standard:
    case LayerKind::conv_pointwise:
      return std::make_shared<ConvOp<S>>(l.in_channels, l.out_channels, l.kernel, l.stride);
    case LayerKind::conv_depthwise:
      return std::make_shared<DepthwiseOp<S>>(l.in_channels, l.multiplier, l.kernel, l.stride);
    case LayerKind::prpe_block:
      return std::make_shared<PRPEOp<S>>(l.prpe);
    case LayerKind::pool:
      return std::make_shared<PoolOp<S>>(l.pool_mode, l.kernel, l.stride);
    case LayerKind::global_pool:
      return std::make_shared<GlobalPoolOp<S>>(l.pool_mode);
    case LayerKind::dense:
      return std::make_shared<DenseOp<S>>(in.elements(), l.out_channels);
    case LayerKind::activation:
      return std::make_shared<ActivationOp<S>>(l.activation);
  }
  return nullptr;
}

}  // namespace

// ------------------------------------------------------------------ primitives

template <typename S>
FeatureMap<S> conv2d(const FeatureMap<S>& x, const Eigen::Ref<const MatrixX<S>>& weights,
                     const Eigen::Ref<const VectorX<S>>& bias, int kernel, int stride) {
  if (weights.cols() != std::int64_t(x.channels()) * kernel * kernel || bias.size() != weights.rows())
    throw ArgumentError("conv2d: weight shape does not match input");
  FeatureMap<S> y{same_output(x.height, stride), same_output(x.width, stride), FeatureMatrix<S>()};
  y.data.noalias() = weights * im2col(x, kernel, stride).transpose();
  y.data.colwise() += bias;
  return y;
}

template <typename S>
FeatureMap<S> pointwise_conv(const FeatureMap<S>& x, const Eigen::Ref<const MatrixX<S>>& weights,
                             const Eigen::Ref<const VectorX<S>>& bias, int stride) {
  if (stride != 1) return conv2d<S>(x, weights, bias, 1, stride);
  if (weights.cols() != x.channels() || bias.size() != weights.rows())
    throw ArgumentError("pointwise_conv: weight shape does not match input");
  FeatureMap<S> y{x.height, x.width, FeatureMatrix<S>()};
  y.data.noalias() = weights * x.data;
  y.data.colwise() += bias;
  return y;
}

template <typename S>
FeatureMap<S> depthwise_conv(const FeatureMap<S>& x, const Eigen::Ref<const MatrixX<S>>& weights,
                             const Eigen::Ref<const VectorX<S>>& bias, int kernel, int stride,
                             int multiplier) {
  if (weights.rows() != std::int64_t(x.channels()) * multiplier ||
      weights.cols() != kernel * kernel || bias.size() != weights.rows())
    throw ArgumentError("depthwise_conv: weight shape does not match input");
  DepthwiseOp<S> op(x.channels(), multiplier, kernel, stride);
  VectorX<S> packed(op.param_count());
  MatrixMap<S>(packed.data(), weights.rows(), weights.cols()) = weights;
  packed.tail(bias.size()) = bias;
  return op.forward(x, packed.data(), nullptr);
}

template <typename S>
PRPEWeights<S> PRPEWeights<S>::zeros(const PRPEBlockSpec& b) {
  const int m = b.internal_channels();
  PRPEWeights w;
  w.project_w = MatrixX<S>::Zero(m, b.in_channels);
  w.project_b = VectorX<S>::Zero(m);
  for (int r = 0; r < b.replicas; ++r) {
    w.replica_w.push_back(MatrixX<S>::Zero(m, b.kernel * b.kernel));
    w.replica_b.push_back(VectorX<S>::Zero(m));
  }
  w.reproject_w = MatrixX<S>::Zero(m, b.merged_channels());
  w.reproject_b = VectorX<S>::Zero(m);
  w.expand_w = MatrixX<S>::Zero(b.expand_channels, m);
  w.expand_b = VectorX<S>::Zero(b.expand_channels);
  return w;
}

template <typename S>
FeatureMap<S> prpe_forward(const PRPEBlockSpec& b, const PRPEWeights<S>& w,
                           const FeatureMap<S>& x) {
  if (x.channels() != b.in_channels)
    throw ArgumentError("prpe_forward: expected " + std::to_string(b.in_channels) +
                        " channels, got " + std::to_string(x.channels()));
  if (static_cast<int>(w.replica_w.size()) != b.replicas)
    throw ArgumentError("prpe_forward: replica weight count mismatch");
  FeatureMap<S> a = pointwise_conv<S>(x, w.project_w, w.project_b);
  activate(a, b.activation);
  FeatureMap<S> merged;
  for (int r = 0; r < b.replicas; ++r) {
    FeatureMap<S> br = depthwise_conv<S>(a, w.replica_w[std::size_t(r)],
                                         w.replica_b[std::size_t(r)], b.kernel, 1, 1);
    if (r == 0) {
      merged = std::move(br);
    } else if (b.replication == Replication::sum) {
      merged.data += br.data;
    } else {
      FeatureMatrix<S> stacked(merged.data.rows() + br.data.rows(), merged.data.cols());
      stacked << merged.data, br.data;
      merged.data = std::move(stacked);
    }
  }
  activate(merged, b.activation);
  FeatureMap<S> c = pointwise_conv<S>(merged, w.reproject_w, w.reproject_b);
  activate(c, b.activation);
  FeatureMap<S> e = pointwise_conv<S>(c, w.expand_w, w.expand_b);
  activate(e, b.activation);
  return e;
}

template <typename S>
S bce_loss(std::span<const S> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size())
    throw ArgumentError("bce_loss: " + std::to_string(probabilities.size()) +
                        " probabilities vs " + std::to_string(labels.size()) + " labels");
  if (probabilities.empty()) throw ArgumentError("bce_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw ArgumentError("bce_loss: labels must be 0 or 1");
    const double p = std::clamp(static_cast<double>(probabilities[i]), kProbabilityEpsilon,
                                1.0 - kProbabilityEpsilon);
    sum -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return static_cast<S>(sum / static_cast<double>(labels.size()));
}

// ------------------------------------------------------------------ network

template <typename S>
Network<S>::Network(const ArchSpec& spec, std::uint64_t seed) : plan_(plan_shapes(spec)) {
  build();
  Rng rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->init(params_.data() + blocks_[i].offset, rng);
  std::size_t b = layers_.size();
  for (const auto& a : adapters_) {
    if (!a) continue;
    a->init(params_.data() + blocks_[b++].offset, rng);
  }
  head_->init(params_.data() + blocks_.back().offset, rng);
}

template <typename S>
Network<S>::Network(const ArchSpec& spec, VectorX<S> parameters) : plan_(plan_shapes(spec)) {
  build();
  if (parameters.size() != params_.size())
    throw ArgumentError("parameter vector has " + std::to_string(parameters.size()) +
                        " entries, model needs " + std::to_string(params_.size()));
  params_ = std::move(parameters);
}

template <typename S>
void Network<S>::build() {
  const int n = static_cast<int>(plan_.spec.layers.size());
  if (!plan_.spec.head) throw SpecError(n, "a model needs a single-logit dense head");
  std::size_t offset = 0;
  for (int i = 0; i < n; ++i) {
    const LayerSpec& l = plan_.spec.layers[std::size_t(i)];
    layers_.push_back(make_op<S>(l, plan_.input_of(std::size_t(i))));
    const std::size_t size = layers_.back()->param_count();
    blocks_.push_back({"layer" + std::to_string(i) + "." + std::string(to_string(l.kind)), offset, size});
    offset += size;
  }
  for (std::size_t e = 0; e < plan_.spec.long_range_edges.size(); ++e) {
    if (!plan_.needs_adapter[e]) {
      adapters_.push_back(nullptr);
      continue;
    }
    const SkipEdge& edge = plan_.spec.long_range_edges[e];
    const int from = plan_.outputs[std::size_t(edge.from)].channels;
    const int to = plan_.outputs[std::size_t(edge.to)].channels;
    adapters_.push_back(std::make_shared<ConvOp<S>>(from, to, 1, 1));
    const std::size_t size = adapters_.back()->param_count();
    blocks_.push_back({"adapter" + std::to_string(edge.from) + "-" + std::to_string(edge.to),
                       offset, size});
    offset += size;
  }
  head_ = std::make_shared<DenseOp<S>>(plan_.final_shape.elements(), 1);
  blocks_.push_back({"head.dense", offset, head_->param_count()});
  offset += head_->param_count();
  params_ = VectorX<S>::Zero(static_cast<Eigen::Index>(offset));
}

template <typename S>
void Network<S>::check_input(const ImageT<S>& img) const {
  const Shape3& in = plan_.spec.input;
  if (in.channels != 1 || img.rows() != in.height || img.cols() != in.width)
    throw ArgumentError("input is " + std::to_string(img.rows()) + "x" +
                        std::to_string(img.cols()) + ", model expects " + to_string(in));
}

namespace {

template <typename S>
struct Pass {
  std::vector<FeatureMap<S>> outs;
  std::vector<Tape<S>> tapes;
  std::vector<Tape<S>> adapter_tapes;
  Tape<S> head_tape;
  FeatureMap<S> input;
};

}  // namespace

// Shared forward/backward walk, kept out of the header.
template <typename S>
struct NetworkRunner {
  static S forward(const Network<S>& net, const std::vector<std::shared_ptr<const Op<S>>>& layers,
                   const std::vector<std::shared_ptr<const Op<S>>>& adapters,
                   const Op<S>& head, const std::vector<ParameterBlock>& blocks,
                   const ImageT<S>& img, Pass<S>& pass, bool record) {
    const auto& spec = net.spec();
    const S* p = net.parameters().data();
    const std::size_t n = layers.size();
    pass.input = FeatureMap<S>::from_image(img);
    pass.outs.assign(n, FeatureMap<S>{});
    if (record) {
      pass.tapes.assign(n, Tape<S>{});
      pass.adapter_tapes.assign(adapters.size(), Tape<S>{});
    }
    for (std::size_t i = 0; i < n; ++i) {
      const FeatureMap<S>& in = i == 0 ? pass.input : pass.outs[i - 1];
      pass.outs[i] = layers[i]->forward(in, p + blocks[i].offset, record ? &pass.tapes[i] : nullptr);
      std::size_t b = n;
      for (std::size_t e = 0; e < spec.long_range_edges.size(); ++e) {
        const SkipEdge& edge = spec.long_range_edges[e];
        const std::size_t block = adapters[e] ? b++ : 0;
        if (std::size_t(edge.to) != i) continue;
        const FeatureMap<S>& src = pass.outs[std::size_t(edge.from)];
        if (adapters[e]) {
          pass.outs[i].data += adapters[e]
                                   ->forward(src, p + blocks[block].offset,
                                             record ? &pass.adapter_tapes[e] : nullptr)
                                   .data;
        } else {
          pass.outs[i].data += src.data;
        }
      }
    }
    const FeatureMap<S>& last = n == 0 ? pass.input : pass.outs.back();
    return head.forward(last, p + blocks.back().offset, record ? &pass.head_tape : nullptr)
        .data(0, 0);
  }

  static void backward(const Network<S>& net, const std::vector<std::shared_ptr<const Op<S>>>& layers,
                       const std::vector<std::shared_ptr<const Op<S>>>& adapters,
                       const Op<S>& head, const std::vector<ParameterBlock>& blocks,
                       const Pass<S>& pass, S dlogit, S* grads) {
    const auto& spec = net.spec();
    const S* p = net.parameters().data();
    const std::size_t n = layers.size();
    FeatureMap<S> g_head{1, 1, FeatureMatrix<S>::Constant(1, 1, dlogit)};
    FeatureMap<S> g_last = head.backward(g_head, pass.head_tape, p + blocks.back().offset,
                                         grads + blocks.back().offset);
    if (n == 0) return;
    std::vector<FeatureMap<S>> g(n);
    g[n - 1] = std::move(g_last);
    auto accumulate = [](FeatureMap<S>& dst, const FeatureMap<S>& src) {
      if (dst.data.size() == 0) {
        dst = src;
      } else {
        dst.data += src.data;
      }
    };
    std::vector<std::size_t> adapter_block(adapters.size(), 0);
    std::size_t b = n;
    for (std::size_t e = 0; e < adapters.size(); ++e)
      if (adapters[e]) adapter_block[e] = b++;
    for (std::size_t i = n; i-- > 0;) {
      if (g[i].data.size() == 0) g[i] = FeatureMap<S>::zeros(pass.outs[i].shape());
      for (std::size_t e = 0; e < spec.long_range_edges.size(); ++e) {
        const SkipEdge& edge = spec.long_range_edges[e];
        if (std::size_t(edge.to) != i) continue;
        if (adapters[e]) {
          const std::size_t blk = adapter_block[e];
          accumulate(g[std::size_t(edge.from)],
                     adapters[e]->backward(g[i], pass.adapter_tapes[e], p + blocks[blk].offset,
                                           grads + blocks[blk].offset));
        } else {
          accumulate(g[std::size_t(edge.from)], g[i]);
        }
      }
      FeatureMap<S> gin =
          layers[i]->backward(g[i], pass.tapes[i], p + blocks[i].offset, grads + blocks[i].offset);
      if (i > 0) accumulate(g[i - 1], gin);
    }
  }
};

template <typename S>
S Network<S>::logit(const ImageT<S>& img) const {
  check_input(img);
  Pass<S> pass;
  return NetworkRunner<S>::forward(*this, layers_, adapters_, *head_, blocks_, img, pass, false);
}

template <typename S>
VectorX<S> Network<S>::forward(std::span<const ImageT<S>> batch) const {
  VectorX<S> out(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) out(Eigen::Index(i)) = predict(batch[i]);
  return out;
}

template <typename S>
std::vector<Shape3> Network<S>::trace_shapes(const ImageT<S>& img) const {
  check_input(img);
  Pass<S> pass;
  NetworkRunner<S>::forward(*this, layers_, adapters_, *head_, blocks_, img, pass, false);
  std::vector<Shape3> shapes;
  for (const auto& o : pass.outs) shapes.push_back(o.shape());
  return shapes;
}

template <typename S>
S Network<S>::loss(std::span<const ImageT<S>> batch, std::span<const int> labels) const {
  const VectorX<S> probs = forward(batch);
  return bce_loss<S>(std::span<const S>(probs.data(), std::size_t(probs.size())), labels);
}

template <typename S>
S Network<S>::loss_and_gradient(std::span<const ImageT<S>> batch, std::span<const int> labels,
                                VectorX<S>& grad) const {
  if (batch.size() != labels.size())
    throw ArgumentError("loss_and_gradient: batch/label length mismatch");
  if (batch.empty()) throw ArgumentError("loss_and_gradient: empty batch");
  grad = VectorX<S>::Zero(params_.size());
  std::vector<S> probs(batch.size());
  const S inv_n = S(1) / S(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_input(batch[i]);
    Pass<S> pass;
    const S z = NetworkRunner<S>::forward(*this, layers_, adapters_, *head_, blocks_, batch[i],
                                          pass, true);
    const S prob = sigmoid(z);
    probs[i] = prob;
    // d/dz of the clipped loss: p - y inside the clip range, 0 outside.
    const bool clipped = double(prob) < kProbabilityEpsilon || double(prob) > 1.0 - kProbabilityEpsilon;
    const S dz = clipped ? S(0) : (prob - S(labels[i])) * inv_n;
    NetworkRunner<S>::backward(*this, layers_, adapters_, *head_, blocks_, pass, dz, grad.data());
  }
  return bce_loss<S>(std::span<const S>(probs), labels);
}

Model build_model(const ArchSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

// ------------------------------------------------------------------ checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'X', 'R', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError("truncated checkpoint");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const std::string spec = spec_to_json(model.spec());
  ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, spec_hash(model.spec()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.size()));
  out.write(spec.data(), static_cast<std::streamsize>(spec.size()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(model.parameter_count()));
  for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
    std::uint32_t bits;
    const float v = model.parameters()(i);
    std::memcpy(&bits, &v, 4);
    put<std::uint32_t>(out, bits);
  }
  if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("'" + path.string() + "' is not a checkpoint");
  if (get<std::uint32_t>(in) != kCheckpointVersion)
    throw IoError("unsupported checkpoint version");
  const auto hash = get<std::uint64_t>(in);
  const auto len = get<std::uint32_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw IoError("truncated checkpoint");
  const ArchSpec spec = spec_from_json(text);
  if (spec_hash(spec) != hash) throw IoError("checkpoint spec hash mismatch");
  const auto count = get<std::uint64_t>(in);
  VectorX<float> params(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const auto bits = get<std::uint32_t>(in);
    std::memcpy(&params(i), &bits, 4);
  }
  return Model(spec, std::move(params));
}

// ------------------------------------------------------------------ instantiations

#define CXR_INSTANTIATE(S)                                                                       \
  template class Network<S>;                                                                     \
  template struct PRPEWeights<S>;                                                                \
  template FeatureMap<S> conv2d<S>(const FeatureMap<S>&, const Eigen::Ref<const MatrixX<S>>&,    \
                                   const Eigen::Ref<const VectorX<S>>&, int, int);               \
  template FeatureMap<S> pointwise_conv<S>(const FeatureMap<S>&,                                 \
                                           const Eigen::Ref<const MatrixX<S>>&,                  \
                                           const Eigen::Ref<const VectorX<S>>&, int);            \
  template FeatureMap<S> depthwise_conv<S>(const FeatureMap<S>&,                                 \
                                           const Eigen::Ref<const MatrixX<S>>&,                  \
                                           const Eigen::Ref<const VectorX<S>>&, int, int, int);  \
  template FeatureMap<S> prpe_forward<S>(const PRPEBlockSpec&, const PRPEWeights<S>&,            \
                                         const FeatureMap<S>&);                                  \
  template S bce_loss<S>(std::span<const S>, std::span<const int>);

CXR_INSTANTIATE(float)
CXR_INSTANTIATE(double)

#undef CXR_INSTANTIATE

}  // namespace cxr

#include "mos/autodiff.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace mos::ad {

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::detach(Var v) { return constant(v.value()); }

Var Tape::record(Mat value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape_ != this) throw std::logic_error("autodiff: operands live on different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Mat& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.external != nullptr ? *n.external : n.value;
}

const Mat& Tape::grad(int id) const { return nodes_[id].grad; }

void Tape::accumulate(Var v, const Mat& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.tape_ != this) throw std::logic_error("autodiff: root belongs to another tape");
  const Mat& rv = value(root.id_);
  if (rv.rows() != 1 || rv.cols() != 1) throw std::invalid_argument("autodiff: backward root must be 1x1");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root.id_].requires_grad) return;
  nodes_[root.id_].grad = Mat::Ones(1, 1);
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("autodiff: matmul inner dimension mismatch");
  Mat out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("autodiff: matmul_nt inner dimension mismatch");
  Mat out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Mat out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Mat out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, -g);
  });
}

Var scale(Var a, double c) {
  Mat out = a.value() * c;
  return a.tape().record(std::move(out), {a}, [a, c](Tape& t, const Mat& g) { t.accumulate(a, g * c); });
}

Var add_row(Var x, Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw std::invalid_argument("autodiff: add_row bias shape");
  Mat out = x.value().rowwise() + bias.value().row(0);
  return x.tape().record(std::move(out), {x, bias}, [x, bias](Tape& t, const Mat& g) {
    t.accumulate(x, g);
    if (bias.requires_grad()) t.accumulate(bias, g.colwise().sum());
  });
}

Var relu(Var x) {
  Mat out = x.value().cwiseMax(0.0);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
    t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Mat& xv = x.value();
  Mat out(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
    const Mat& xv = x.value();
    Mat dx(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      dx.data()[i] = g.data()[i] * d;
    }
    t.accumulate(x, dx);
  });
}

Var normalize_rows(Var x, double eps) {
  const Mat& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm().cwiseMax(eps);
  Mat out = norms.cwiseInverse().asDiagonal() * xv;
  return x.tape().record(out, {x}, [x, out, norms, eps](Tape& t, const Mat& g) {
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (norms(r) > eps) {
        const double proj = out.row(r).dot(g.row(r));
        dx.row(r) = (g.row(r) - proj * out.row(r)) / norms(r);
      } else {
        dx.row(r) = g.row(r) / norms(r);
      }
    }
    t.accumulate(x, dx);
  });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("autodiff: concat_cols row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  const Eigen::Index cb = b.cols();
  return a.tape().record(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g.leftCols(ca));
    if (b.requires_grad()) t.accumulate(b, g.rightCols(cb));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autodiff: concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("autodiff: concat_rows column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw std::out_of_range("autodiff: slice_rows range");
  Mat out = x.value().middleRows(begin, count);
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  return x.tape().record(std::move(out), {x}, [x, begin, count, rows, cols](Tape& t, const Mat& g) {
    Mat dx = Mat::Zero(rows, cols);
    dx.middleRows(begin, count) = g;
    t.accumulate(x, dx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Mat& xv = x.value();
  const Eigen::Index n = xv.cols();
  Mat xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape().record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, n](Tape& t, const Mat& g) {
    if (gamma.requires_grad()) t.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
    if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
    if (!x.requires_grad()) return;
    Mat dxhat = g.array().rowwise() * gamma.value().row(0).array();
    Mat dx(g.rows(), n);
    const double dn = static_cast<double>(n);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double s1 = dxhat.row(r).sum();
      const double s2 = dxhat.row(r).dot(xhat.row(r));
      dx.row(r) = (inv_std(r) / dn) * (dn * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
    }
    t.accumulate(x, dx);
  });
}

Var group_norm(Var x, Var gamma, Var beta, int channels, int groups, double eps) {
  if (channels <= 0 || groups <= 0 || channels % groups != 0 || x.cols() % channels != 0) {
    throw std::invalid_argument("autodiff: group_norm shape");
  }
  if (gamma.cols() != channels || beta.cols() != channels) throw std::invalid_argument("autodiff: group_norm affine");
  const Eigen::Index spatial = x.cols() / channels;
  const Eigen::Index span = spatial * (channels / groups);  // contiguous in CHW order
  const Mat& xv = x.value();
  Mat xhat(xv.rows(), xv.cols());
  Mat inv_std(xv.rows(), groups);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    for (int gi = 0; gi < groups; ++gi) {
      const auto seg = xv.row(r).segment(gi * span, span).array();
      const double mean = seg.mean();
      const double var = (seg - mean).square().mean();
      inv_std(r, gi) = 1.0 / std::sqrt(var + eps);
      xhat.row(r).segment(gi * span, span) = (seg - mean) * inv_std(r, gi);
    }
  }
  Mat out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    for (int c = 0; c < channels; ++c) {
      out.row(r).segment(c * spatial, spatial) =
          xhat.row(r).segment(c * spatial, spatial).array() * gamma.value()(0, c) + beta.value()(0, c);
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv_std, channels, groups, spatial, span](Tape& t, const Mat& g) {
    const Eigen::Index rows = g.rows();
    Mat dgamma = Mat::Zero(1, channels);
    Mat dbeta = Mat::Zero(1, channels);
    Mat dxhat(rows, g.cols());
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (int c = 0; c < channels; ++c) {
        const auto gs = g.row(r).segment(c * spatial, spatial);
        dgamma(0, c) += gs.dot(xhat.row(r).segment(c * spatial, spatial));
        dbeta(0, c) += gs.sum();
        dxhat.row(r).segment(c * spatial, spatial) = gs * gamma.value()(0, c);
      }
    }
    if (gamma.requires_grad()) t.accumulate(gamma, dgamma);
    if (beta.requires_grad()) t.accumulate(beta, dbeta);
    if (!x.requires_grad()) return;
    Mat dx(rows, g.cols());
    const double dn = static_cast<double>(span);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (int gi = 0; gi < groups; ++gi) {
        const auto dh = dxhat.row(r).segment(gi * span, span).array();
        const auto xh = xhat.row(r).segment(gi * span, span).array();
        const double s1 = dh.sum();
        const double s2 = (dh * xh).sum();
        dx.row(r).segment(gi * span, span) = (inv_std(r, gi) / dn) * (dn * dh - s1 - xh * s2);
      }
    }
    t.accumulate(x, dx);
  });
}

Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  if (terms.empty()) throw std::invalid_argument("autodiff: weighted_sum of nothing");
  double total = 0.0;
  std::vector<Var> parents;
  for (const auto& [c, v] : terms) {
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("autodiff: weighted_sum expects scalars");
    total += c * v.scalar();
    parents.push_back(v);
  }
  Mat out(1, 1);
  out(0, 0) = total;
  return terms.front().second.tape().record(std::move(out), parents, [terms](Tape& t, const Mat& g) {
    for (const auto& [c, v] : terms) t.accumulate(v, g * c);
  });
}

Var scalar_function(const std::vector<Var>& inputs, double value, std::vector<Mat> grads) {
  if (inputs.size() != grads.size() || inputs.empty()) {
    throw std::invalid_argument("autodiff: scalar_function needs one gradient per input");
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) require_same_shape(inputs[i].value(), grads[i], "scalar_function");
  Mat out(1, 1);
  out(0, 0) = value;
  auto shared = std::make_shared<std::vector<Mat>>(std::move(grads));
  return inputs.front().tape().record(std::move(out), inputs, [inputs, shared](Tape& t, const Mat& g) {
    const double s = g(0, 0);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].requires_grad()) t.accumulate(inputs[i], (*shared)[i] * s);
    }
  });
}

Var conv2d(Var x, Var weight, Var bias, const ConvGeometry& geom) {
  const int k = geom.kernel;
  const int ckk = geom.in_channels * k * k;
  const int ho = geom.out_height();
  const int wo = geom.out_width();
  const int positions = ho * wo;
  const int in_size = geom.in_channels * geom.height * geom.width;
  if (x.cols() != in_size) throw std::invalid_argument("autodiff: conv2d input size mismatch");
  if (weight.rows() != geom.out_channels || weight.cols() != ckk) {
    throw std::invalid_argument("autodiff: conv2d weight shape mismatch");
  }
  if (bias.rows() != 1 || bias.cols() != geom.out_channels) throw std::invalid_argument("autodiff: conv2d bias shape");

  const Eigen::Index batch = x.rows();
  // Patch matrices (Cin*k*k x positions) per sample, kept for the backward pass.
  auto cols = std::make_shared<std::vector<Mat>>(batch);
  Mat out(batch, static_cast<Eigen::Index>(geom.out_channels) * positions);
  const Mat& xv = x.value();
  const Mat& wv = weight.value();
  const auto bv = bias.value().row(0).transpose();

  for (Eigen::Index b = 0; b < batch; ++b) {
    Mat& c = (*cols)[b];
    c.setZero(ckk, positions);
    const double* src = xv.row(b).data();
    for (int ch = 0; ch < geom.in_channels; ++ch) {
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          double* dst = c.row((ch * k + ki) * k + kj).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * geom.stride - geom.padding + ki;
            if (iy < 0 || iy >= geom.height) continue;
            const double* srow = src + (ch * geom.height + iy) * geom.width;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * geom.stride - geom.padding + kj;
              if (ix >= 0 && ix < geom.width) dst[oy * wo + ox] = srow[ix];
            }
          }
        }
      }
    }
    Eigen::Map<Mat> o(out.row(b).data(), geom.out_channels, positions);
    o.noalias() = wv * c;
    o.colwise() += bv;
  }

  return x.tape().record(std::move(out), {x, weight, bias}, [x, weight, bias, geom, cols, positions, ckk, in_size](Tape& t, const Mat& g) {
    const Eigen::Index batch = g.rows();
    const int k = geom.kernel;
    const int ho = geom.out_height();
    const int wo = geom.out_width();
    Mat dw = Mat::Zero(geom.out_channels, ckk);
    Mat db = Mat::Zero(1, geom.out_channels);
    Mat dx;
    if (x.requires_grad()) dx.setZero(batch, in_size);
    const Mat& wv = weight.value();
    for (Eigen::Index b = 0; b < batch; ++b) {
      Mat gb = Eigen::Map<const Mat>(g.row(b).data(), geom.out_channels, positions);
      dw.noalias() += gb * (*cols)[b].transpose();
      db += gb.rowwise().sum().transpose();
      if (!x.requires_grad()) continue;
      Mat dc = wv.transpose() * gb;
      double* dst = dx.row(b).data();
      for (int ch = 0; ch < geom.in_channels; ++ch) {
        for (int ki = 0; ki < k; ++ki) {
          for (int kj = 0; kj < k; ++kj) {
            const double* srcrow = dc.row((ch * k + ki) * k + kj).data();
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * geom.stride - geom.padding + ki;
              if (iy < 0 || iy >= geom.height) continue;
              double* drow = dst + (ch * geom.height + iy) * geom.width;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * geom.stride - geom.padding + kj;
                if (ix >= 0 && ix < geom.width) drow[ix] += srcrow[oy * wo + ox];
              }
            }
          }
        }
      }
    }
    if (weight.requires_grad()) t.accumulate(weight, dw);
    if (bias.requires_grad()) t.accumulate(bias, db);
    if (x.requires_grad()) t.accumulate(x, dx);
  });
}

Var channel_mean(Var x, int channels) {
  if (channels <= 0 || x.cols() % channels != 0) throw std::invalid_argument("autodiff: channel_mean shape");
  const Eigen::Index spatial = x.cols() / channels;
  Mat out(x.rows(), channels);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Map<const Mat> m(x.value().row(r).data(), channels, spatial);
    out.row(r) = m.rowwise().mean().transpose();
  }
  return x.tape().record(std::move(out), {x}, [x, channels, spatial](Tape& t, const Mat& g) {
    Mat dx(g.rows(), channels * spatial);
    const double inv = 1.0 / static_cast<double>(spatial);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      Eigen::Map<Mat> m(dx.row(r).data(), channels, spatial);
      m = (g.row(r).transpose() * inv).replicate(1, spatial);
    }
    t.accumulate(x, dx);
  });
}

Var add_tiled(Var x, Var table) {
  const Eigen::Index tokens = table.rows();
  if (table.cols() != x.cols() || tokens == 0 || x.rows() % tokens != 0) {
    throw std::invalid_argument("autodiff: add_tiled shape mismatch");
  }
  Mat out = x.value();
  const Eigen::Index blocks = x.rows() / tokens;
  for (Eigen::Index b = 0; b < blocks; ++b) out.middleRows(b * tokens, tokens) += table.value();
  return x.tape().record(std::move(out), {x, table}, [x, table, tokens, blocks](Tape& t, const Mat& g) {
    t.accumulate(x, g);
    if (!table.requires_grad()) return;
    Mat dt = Mat::Zero(tokens, g.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) dt += g.middleRows(b * tokens, tokens);
    t.accumulate(table, dt);
  });
}

Var token_mean(Var x, int tokens) {
  if (tokens <= 0 || x.rows() % tokens != 0) throw std::invalid_argument("autodiff: token_mean shape");
  const Eigen::Index blocks = x.rows() / tokens;
  Mat out(blocks, x.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) out.row(b) = x.value().middleRows(b * tokens, tokens).colwise().mean();
  return x.tape().record(std::move(out), {x}, [x, tokens, blocks](Tape& t, const Mat& g) {
    Mat dx(blocks * tokens, g.cols());
    const double inv = 1.0 / tokens;
    for (Eigen::Index b = 0; b < blocks; ++b) dx.middleRows(b * tokens, tokens) = (g.row(b) * inv).replicate(tokens, 1);
    t.accumulate(x, dx);
  });
}

Var self_attention(Var qkv, int tokens, int heads) {
  if (qkv.cols() % 3 != 0) throw std::invalid_argument("autodiff: self_attention expects [Q|K|V]");
  const Eigen::Index d = qkv.cols() / 3;
  if (heads <= 0 || d % heads != 0 || tokens <= 0 || qkv.rows() % tokens != 0) {
    throw std::invalid_argument("autodiff: self_attention shape");
  }
  const Eigen::Index dh = d / heads;
  const Eigen::Index blocks = qkv.rows() / tokens;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& v = qkv.value();
  auto attn = std::make_shared<std::vector<Mat>>(blocks * heads);
  Mat out(qkv.rows(), d);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = v.block(b * tokens, h * dh, tokens, dh);
      const auto k = v.block(b * tokens, d + h * dh, tokens, dh);
      const auto val = v.block(b * tokens, 2 * d + h * dh, tokens, dh);
      Mat s = (q * k.transpose()) * sc;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * tokens, h * dh, tokens, dh) = s * val;
      (*attn)[b * heads + h] = std::move(s);
    }
  }
  return qkv.tape().record(std::move(out), {qkv}, [qkv, tokens, heads, d, dh, blocks, sc, attn](Tape& t, const Mat& g) {
    const Mat& v = qkv.value();
    Mat dqkv(v.rows(), v.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Mat& a = (*attn)[b * heads + h];
        const auto q = v.block(b * tokens, h * dh, tokens, dh);
        const auto k = v.block(b * tokens, d + h * dh, tokens, dh);
        const auto val = v.block(b * tokens, 2 * d + h * dh, tokens, dh);
        const auto go = g.block(b * tokens, h * dh, tokens, dh);
        Mat da = go * val.transpose();
        Mat ds = a.array() * (da.array().colwise() - (da.array() * a.array()).rowwise().sum());
        ds *= sc;
        dqkv.block(b * tokens, h * dh, tokens, dh) = ds * k;
        dqkv.block(b * tokens, d + h * dh, tokens, dh) = ds.transpose() * q;
        dqkv.block(b * tokens, 2 * d + h * dh, tokens, dh) = a.transpose() * go;
      }
    }
    t.accumulate(qkv, dqkv);
  });
}

}  // namespace mos::ad

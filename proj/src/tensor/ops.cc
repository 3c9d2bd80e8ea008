/**
 * Copyright 2026 The ExitPipe Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "exitpipe/tensor/ops.h"

#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include "exitpipe/error.h"
#include "exitpipe/tensor/kernels.h"

namespace exitpipe::ops {
namespace {

void CheckSameShape(const Tensor &a, const Tensor &b, const char *op) {
  EXITPIPE_CHECK(a.shape() == b.shape(), ErrorKind::kShapeMismatch,
                 std::string(op) + ": " + ShapeToString(a.shape()) + " vs " + ShapeToString(b.shape()));
}

Shape WithLastDim(const Shape &shape, std::size_t last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

}  // namespace

Var Matmul(Tape &tape, Var a, Var b, bool transpose_b) {
  const Tensor &av = tape.value(a);
  const Tensor &bv = tape.value(b);
  EXITPIPE_CHECK(bv.rank() == 2 && av.rank() >= 1, ErrorKind::kShapeMismatch, "matmul expects a 2-D right operand");
  const std::size_t k = av.cols();
  const std::size_t rows = av.rows();
  const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
  const std::size_t bk = transpose_b ? bv.dim(1) : bv.dim(0);
  EXITPIPE_CHECK(k == bk, ErrorKind::kShapeMismatch,
                 "matmul: " + ShapeToString(av.shape()) + " x " + ShapeToString(bv.shape()) +
                     (transpose_b ? " (transposed)" : ""));
  std::vector<double> out(rows * n);
  kernels::Matmul(av.data(), rows, k, bv.data(), n, transpose_b, out);
  Tensor result(WithLastDim(av.shape(), n), std::move(out));
  return tape.Record(OpKind::kMatmul, {a, b}, std::move(result),
                     [a, b, rows, k, n, transpose_b](const BackwardContext &ctx) {
                       const auto g = ctx.grad_out();
                       const auto A = ctx.value(a).data();
                       const auto B = ctx.value(b).data();
                       if (auto *da = ctx.grad_in(0)) {
                         std::vector<double> tmp(rows * k);
                         // dA = G * B^T (or G * B for a transposed right operand).
                         kernels::Matmul(g, rows, n, B, k, !transpose_b, tmp);
                         for (std::size_t i = 0; i < tmp.size(); ++i) {
                           (*da)[i] += tmp[i];
                         }
                       }
                       if (auto *db = ctx.grad_in(1)) {
                         for (std::size_t i = 0; i < rows; ++i) {
                           const double *ai = A.data() + i * k;
                           const double *gi = g.data() + i * n;
                           for (std::size_t t = 0; t < k; ++t) {
                             const double at = ai[t];
                             for (std::size_t j = 0; j < n; ++j) {
                               if (transpose_b) {
                                 (*db)[j * k + t] += gi[j] * at;
                               } else {
                                 (*db)[t * n + j] += at * gi[j];
                               }
                             }
                           }
                         }
                       }
                     });
}

Var Add(Tape &tape, Var a, Var b) {
  const Tensor &av = tape.value(a);
  const Tensor &bv = tape.value(b);
  CheckSameShape(av, bv, "add");
  std::vector<double> out(av.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] + bv[i];
  }
  return tape.Record(OpKind::kAdd, {a, b}, Tensor(av.shape(), std::move(out)), [](const BackwardContext &ctx) {
    const auto g = ctx.grad_out();
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto *d = ctx.grad_in(k)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*d)[i] += g[i];
        }
      }
    }
  });
}

Var Scale(Tape &tape, Var a, double factor) {
  EXITPIPE_CHECK(std::isfinite(factor), ErrorKind::kNonFinite, "scale factor");
  const Tensor &av = tape.value(a);
  std::vector<double> out(av.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] * factor;
  }
  return tape.Record(OpKind::kScale, {a}, Tensor(av.shape(), std::move(out)), [factor](const BackwardContext &ctx) {
    const auto g = ctx.grad_out();
    if (auto *d = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        (*d)[i] += factor * g[i];
      }
    }
  });
}

Var Embedding(Tape &tape, Var table, std::span<const int> ids, const Shape &ids_shape) {
  const Tensor &tv = tape.value(table);
  EXITPIPE_CHECK(tv.rank() == 2, ErrorKind::kShapeMismatch, "embedding table must be 2-D");
  EXITPIPE_CHECK(NumElements(ids_shape) == ids.size() && !ids_shape.empty(), ErrorKind::kShapeMismatch,
                 "embedding ids do not match ids_shape " + ShapeToString(ids_shape));
  const std::size_t vocab = tv.dim(0);
  const std::size_t h = tv.dim(1);
  for (int id : ids) {
    EXITPIPE_CHECK(id >= 0 && static_cast<std::size_t>(id) < vocab, ErrorKind::kInvalidToken,
                   "id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
  }
  std::vector<double> out(ids.size() * h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const double *src = tv.data().data() + static_cast<std::size_t>(ids[r]) * h;
    std::copy(src, src + h, out.begin() + static_cast<std::ptrdiff_t>(r * h));
  }
  Shape shape = ids_shape;
  shape.push_back(h);
  std::vector<int> id_copy(ids.begin(), ids.end());
  return tape.Record(OpKind::kEmbedding, {table}, Tensor(std::move(shape), std::move(out)),
                     [id_copy = std::move(id_copy), h](const BackwardContext &ctx) {
                       auto *d = ctx.grad_in(0);
                       if (!d) {
                         return;
                       }
                       const auto g = ctx.grad_out();
                       for (std::size_t r = 0; r < id_copy.size(); ++r) {
                         const std::size_t base = static_cast<std::size_t>(id_copy[r]) * h;
                         for (std::size_t c = 0; c < h; ++c) {
                           (*d)[base + c] += g[r * h + c];
                         }
                       }
                     });
}

Var RmsNorm(Tape &tape, Var x, Var gain) {
  const Tensor &xv = tape.value(x);
  const Tensor &gv = tape.value(gain);
  const std::size_t h = xv.cols();
  EXITPIPE_CHECK(gv.numel() == h, ErrorKind::kShapeMismatch, "rmsnorm gain must have the size of the last dim");
  const std::size_t rows = xv.rows();
  std::vector<double> out(xv.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    (*inv)[r] = kernels::RmsNormRow(xv.data().subspan(r * h, h), gv.data(), std::span(out).subspan(r * h, h));
  }
  return tape.Record(OpKind::kRmsNorm, {x, gain}, Tensor(xv.shape(), std::move(out)),
                     [x, gain, inv, rows, h](const BackwardContext &ctx) {
                       const auto g = ctx.grad_out();
                       const auto X = ctx.value(x).data();
                       const auto G = ctx.value(gain).data();
                       auto *dx = ctx.grad_in(0);
                       auto *dg = ctx.grad_in(1);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double ir = (*inv)[r];
                         const double *xr = X.data() + r * h;
                         const double *gr = g.data() + r * h;
                         if (dg) {
                           for (std::size_t c = 0; c < h; ++c) {
                             (*dg)[c] += gr[c] * xr[c] * ir;
                           }
                         }
                         if (dx) {
                           double dot = 0.0;
                           for (std::size_t c = 0; c < h; ++c) {
                             dot += gr[c] * G[c] * xr[c] * ir;
                           }
                           dot /= static_cast<double>(h);
                           for (std::size_t c = 0; c < h; ++c) {
                             (*dx)[r * h + c] += ir * (gr[c] * G[c] - xr[c] * ir * dot);
                           }
                         }
                       }
                     });
}

Var Softmax(Tape &tape, Var x) {
  const Tensor &xv = tape.value(x);
  const std::size_t n = xv.cols();
  const std::size_t rows = xv.rows();
  std::vector<double> out(xv.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    kernels::SoftmaxRow(xv.data().subspan(r * n, n), std::span(out).subspan(r * n, n));
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return tape.Record(OpKind::kSoftmax, {x}, Tensor(xv.shape(), std::move(out)), [y, rows, n](const BackwardContext &ctx) {
    auto *dx = ctx.grad_in(0);
    if (!dx) {
      return;
    }
    const auto g = ctx.grad_out();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        dot += g[r * n + c] * (*y)[r * n + c];
      }
      for (std::size_t c = 0; c < n; ++c) {
        (*dx)[r * n + c] += (*y)[r * n + c] * (g[r * n + c] - dot);
      }
    }
  });
}

Var Gelu(Tape &tape, Var x) {
  const Tensor &xv = tape.value(x);
  std::vector<double> out(xv.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = kernels::Gelu(xv[i]);
  }
  return tape.Record(OpKind::kGelu, {x}, Tensor(xv.shape(), std::move(out)), [x](const BackwardContext &ctx) {
    auto *dx = ctx.grad_in(0);
    if (!dx) {
      return;
    }
    const auto g = ctx.grad_out();
    const auto X = ctx.value(x).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      (*dx)[i] += g[i] * kernels::GeluDerivative(X[i]);
    }
  });
}

Var CausalAttention(Tape &tape, Var qkv, std::size_t num_heads) {
  const Tensor &v = tape.value(qkv);
  EXITPIPE_CHECK(v.rank() == 3, ErrorKind::kShapeMismatch, "causal-attention expects [batch, seq, 3h]");
  const std::size_t batch = v.dim(0);
  const std::size_t seq = v.dim(1);
  EXITPIPE_CHECK(num_heads > 0 && v.dim(2) % (3 * num_heads) == 0, ErrorKind::kShapeMismatch,
                 "causal-attention: last dim must be 3 * heads * head_dim");
  const std::size_t h = v.dim(2) / 3;
  const std::size_t hd = h / num_heads;
  const std::size_t stride = 3 * h;
  std::vector<double> out(batch * seq * h);
  // probs[b][head][i][j] for j <= i
  auto probs = std::make_shared<std::vector<double>>(batch * num_heads * seq * seq, 0.0);
  const double *base = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double *seq_base = base + b * seq * stride;
    for (std::size_t head = 0; head < num_heads; ++head) {
      kernels::StridedRows keys{seq_base + h + head * hd, stride};
      kernels::StridedRows values{seq_base + 2 * h + head * hd, stride};
      for (std::size_t i = 0; i < seq; ++i) {
        double *p = probs->data() + ((b * num_heads + head) * seq + i) * seq;
        kernels::AttendRow(seq_base + i * stride + head * hd, keys, values, i + 1, hd, p,
                           out.data() + (b * seq + i) * h + head * hd);
      }
    }
  }
  return tape.Record(
      OpKind::kCausalAttention, {qkv}, Tensor({batch, seq, h}, std::move(out)),
      [qkv, probs, batch, seq, h, hd, num_heads, stride](const BackwardContext &ctx) {
        auto *dqkv = ctx.grad_in(0);
        if (!dqkv) {
          return;
        }
        const auto g = ctx.grad_out();
        const double *X = ctx.value(qkv).data().data();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          const double *xb = X + b * seq * stride;
          double *db = dqkv->data() + b * seq * stride;
          for (std::size_t head = 0; head < num_heads; ++head) {
            const std::size_t qo = head * hd;
            const std::size_t ko = h + head * hd;
            const std::size_t vo = 2 * h + head * hd;
            for (std::size_t i = 0; i < seq; ++i) {
              const double *p = probs->data() + ((b * num_heads + head) * seq + i) * seq;
              const double *go = g.data() + (b * seq + i) * h + head * hd;
              double sum = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double *vj = xb + j * stride + vo;
                double acc = 0.0;
                for (std::size_t t = 0; t < hd; ++t) {
                  acc += go[t] * vj[t];
                  db[j * stride + vo + t] += p[j] * go[t];
                }
                dp[j] = acc;
                sum += p[j] * acc;
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[j] * (dp[j] - sum) * scale;
                const double *kj = xb + j * stride + ko;
                const double *qi = xb + i * stride + qo;
                for (std::size_t t = 0; t < hd; ++t) {
                  db[i * stride + qo + t] += ds * kj[t];
                  db[j * stride + ko + t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

Var CrossEntropy(Tape &tape, Var logits, std::span<const int> targets) {
  const Tensor &lv = tape.value(logits);
  const std::size_t vocab = lv.cols();
  const std::size_t rows = lv.rows();
  EXITPIPE_CHECK(targets.size() == rows, ErrorKind::kShapeMismatch,
                 "cross-entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  for (int t : targets) {
    EXITPIPE_CHECK(t >= 0 && static_cast<std::size_t>(t) < vocab, ErrorKind::kInvalidToken,
                   "target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = lv.data().subspan(r * vocab, vocab);
    total += kernels::LogSumExp(row) - row[static_cast<std::size_t>(targets[r])];
  }
  const double loss = total / static_cast<double>(rows);
  std::vector<int> tcopy(targets.begin(), targets.end());
  return tape.Record(OpKind::kCrossEntropy, {logits}, Tensor::Scalar(loss),
                     [logits, tcopy = std::move(tcopy), rows, vocab](const BackwardContext &ctx) {
                       auto *d = ctx.grad_in(0);
                       if (!d) {
                         return;
                       }
                       const double g = ctx.grad_out()[0] / static_cast<double>(rows);
                       const auto L = ctx.value(logits).data();
                       std::vector<double> p(vocab);
                       for (std::size_t r = 0; r < rows; ++r) {
                         kernels::SoftmaxRow(L.subspan(r * vocab, vocab), p);
                         p[static_cast<std::size_t>(tcopy[r])] -= 1.0;
                         for (std::size_t c = 0; c < vocab; ++c) {
                           (*d)[r * vocab + c] += g * p[c];
                         }
                       }
                     });
}

Var Mul(Tape &tape, Var a, Var b) {
  const Tensor &av = tape.value(a);
  const Tensor &bv = tape.value(b);
  CheckSameShape(av, bv, "mul");
  std::vector<double> out(av.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] * bv[i];
  }
  return tape.Record(OpKind::kMul, {a, b}, Tensor(av.shape(), std::move(out)), [a, b](const BackwardContext &ctx) {
    const auto g = ctx.grad_out();
    const auto A = ctx.value(a).data();
    const auto B = ctx.value(b).data();
    if (auto *da = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        (*da)[i] += g[i] * B[i];
      }
    }
    if (auto *db = ctx.grad_in(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        (*db)[i] += g[i] * A[i];
      }
    }
  });
}

Var Sum(Tape &tape, Var a) {
  const Tensor &av = tape.value(a);
  double s = 0.0;
  for (double x : av.data()) {
    s += x;
  }
  return tape.Record(OpKind::kSum, {a}, Tensor::Scalar(s), [](const BackwardContext &ctx) {
    if (auto *d = ctx.grad_in(0)) {
      const double g = ctx.grad_out()[0];
      for (double &x : *d) {
        x += g;
      }
    }
  });
}

Var Dot(Tape &tape, Var a, Var b) {
  const Tensor &av = tape.value(a);
  const Tensor &bv = tape.value(b);
  CheckSameShape(av, bv, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) {
    s += av[i] * bv[i];
  }
  return tape.Record(OpKind::kDot, {a, b}, Tensor::Scalar(s), [a, b](const BackwardContext &ctx) {
    const double g = ctx.grad_out()[0];
    const auto A = ctx.value(a).data();
    const auto B = ctx.value(b).data();
    if (auto *da = ctx.grad_in(0)) {
      for (std::size_t i = 0; i < A.size(); ++i) {
        (*da)[i] += g * B[i];
      }
    }
    if (auto *db = ctx.grad_in(1)) {
      for (std::size_t i = 0; i < B.size(); ++i) {
        (*db)[i] += g * A[i];
      }
    }
  });
}

Var Apply(Tape &tape, OpKind kind, std::span<const Var> inputs, const OpAttrs &attrs) {
  auto need = [&](std::size_t n) {
    EXITPIPE_CHECK(inputs.size() == n, ErrorKind::kInvalidArgument,
                   std::string(OpKindName(kind)) + " expects " + std::to_string(n) + " inputs");
  };
  switch (kind) {
    case OpKind::kMatmul:
      need(2);
      return Matmul(tape, inputs[0], inputs[1], attrs.transpose_b);
    case OpKind::kAdd:
      need(2);
      return Add(tape, inputs[0], inputs[1]);
    case OpKind::kScale:
      need(1);
      return Scale(tape, inputs[0], attrs.factor);
    case OpKind::kEmbedding:
      need(1);
      return Embedding(tape, inputs[0], attrs.ids, attrs.ids_shape);
    case OpKind::kRmsNorm:
      need(2);
      return RmsNorm(tape, inputs[0], inputs[1]);
    case OpKind::kSoftmax:
      need(1);
      return Softmax(tape, inputs[0]);
    case OpKind::kGelu:
      need(1);
      return Gelu(tape, inputs[0]);
    case OpKind::kCausalAttention:
      need(1);
      return CausalAttention(tape, inputs[0], attrs.num_heads);
    case OpKind::kCrossEntropy:
      need(1);
      return CrossEntropy(tape, inputs[0], attrs.ids);
    case OpKind::kMul:
      need(2);
      return Mul(tape, inputs[0], inputs[1]);
    case OpKind::kSum:
      need(1);
      return Sum(tape, inputs[0]);
    case OpKind::kDot:
      need(2);
      return Dot(tape, inputs[0], inputs[1]);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown op kind");
}

}  // namespace exitpipe::ops

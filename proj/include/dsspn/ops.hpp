#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <span>
#include <vector>

#include "dsspn/autodiff.hpp"
#include "dsspn/kernels.hpp"
#include "dsspn/tensor.hpp"

// Differentiable operations recorded on a Tape.
namespace dsspn {

using kernels::ConvGeometry;

enum class Reduction { kMean, kSum };

namespace detail {

template <typename T>
void add_into(Tensor<T>& dst, std::span<const T> src, std::size_t offset = 0) {
  T* d = dst.ptr() + offset;
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

template <typename T>
void check_same_spatial(const std::vector<Var<T>>& xs, const char* op, bool check_batch = true) {
  if (xs.empty()) throw ShapeError(str_cat(op, ": empty input sequence"));
  const Shape& s0 = xs.front().shape();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const Shape& s = xs[i].shape();
    if (check_batch && s.n != s0.n) throw ShapeError(str_cat(op, ": batch mismatch at input ", i, ": ", s.n, " vs ", s0.n));
    if (s.h != s0.h) throw ShapeError(str_cat(op, ": height mismatch at input ", i, ": ", s.h, " vs ", s0.h));
    if (s.w != s0.w) throw ShapeError(str_cat(op, ": width mismatch at input ", i, ": ", s.w, " vs ", s0.w));
  }
}

// Writes the channel concatenation of `xs` into `out` (n, sum c, h, w).
template <typename T>
void concat_channels_into(const std::vector<const Tensor<T>*>& xs, T* out) {
  const Shape& s0 = xs.front()->shape();
  std::size_t total_c = 0;
  for (const auto* x : xs) total_c += x->shape().c;
  const std::size_t plane = s0.plane();
  for (std::size_t n = 0; n < s0.n; ++n) {
    T* dst = out + n * total_c * plane;
    for (const auto* x : xs) {
      auto src = x->sample(n);
      std::copy(src.begin(), src.end(), dst);
      dst += src.size();
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry g = {}) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (xs.c != ws.c) {
    throw ShapeError(str_cat("conv2d: input channels ", xs.c, " != weight in_channels ", ws.c));
  }
  if (bias.shape().size() != ws.n) {
    throw ShapeError(str_cat("conv2d: bias length ", bias.shape().size(), " != out_channels ", ws.n));
  }
  if (g.stride == 0 || g.dilation == 0) throw ShapeError("conv2d: stride and dilation must be positive");
  const Shape os{xs.n, ws.n, kernels::conv_out_extent(xs.h, ws.h, g), kernels::conv_out_extent(xs.w, ws.w, g)};
  if (os.h == 0 || os.w == 0) throw ShapeError("conv2d: kernel larger than padded input " + xs.str());
  Tensor<T> out(os);
  kernels::conv2d_forward(x.value().ptr(), xs, weight.value().ptr(), ws, bias.value().ptr(), out.ptr(), os, g);
  const auto xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record(std::move(out), {x, weight, bias}, [xi, wi, bi, g](Tape<T>& t, const Tensor<T>& go) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& wv = t.value(wi);
    T* gx = t.requires_grad(xi) ? t.grad_buffer(xi).ptr() : nullptr;
    T* gw = t.requires_grad(wi) ? t.grad_buffer(wi).ptr() : nullptr;
    T* gb = t.requires_grad(bi) ? t.grad_buffer(bi).ptr() : nullptr;
    kernels::conv2d_backward(xv.ptr(), xv.shape(), wv.ptr(), wv.shape(), go.ptr(), go.shape(), g, gx, gw, gb);
  });
}

// 1x1 convolution over the channel concatenation of `inputs` without keeping
// the concatenated tensor on the tape. `scratch`, when large enough, receives
// the concatenation; with `scratch_ready` the caller has already written it
// there. Backward rebuilds the concatenation from the retained inputs.
template <typename T>
Var<T> concat_conv1x1(const std::vector<Var<T>>& inputs, const Var<T>& weight, const Var<T>& bias,
                      std::span<T> scratch = {}, bool scratch_ready = false) {
  detail::check_same_spatial(inputs, "concat_conv1x1");
  const Shape s0 = inputs.front().shape();
  std::size_t total_c = 0;
  std::vector<const Tensor<T>*> vals;
  for (const auto& v : inputs) {
    total_c += v.shape().c;
    vals.push_back(&v.value());
  }
  const Shape cs{s0.n, total_c, s0.h, s0.w};
  const Shape ws = weight.shape();
  if (ws.c != total_c) throw ShapeError(str_cat("concat_conv1x1: input channels ", total_c, " != weight in_channels ", ws.c));
  if (ws.h != 1 || ws.w != 1) throw ShapeError("concat_conv1x1: weight must be 1x1");
  if (bias.shape().size() != ws.n) throw ShapeError("concat_conv1x1: bias length mismatch");
  std::vector<T> local;
  T* cat = nullptr;
  if (scratch.size() >= cs.size()) {
    cat = scratch.data();
    if (!scratch_ready) detail::concat_channels_into(vals, cat);
  } else {
    if (scratch_ready) throw ShapeError("concat_conv1x1: prepared scratch is smaller than the concatenation");
    local.resize(cs.size());
    cat = local.data();
    detail::concat_channels_into(vals, cat);
  }
  const Shape os{s0.n, ws.n, s0.h, s0.w};
  Tensor<T> out(os);
  kernels::conv2d_forward(cat, cs, weight.value().ptr(), ws, bias.value().ptr(), out.ptr(), os, ConvGeometry{});

  std::vector<std::size_t> ids;
  for (const auto& v : inputs) ids.push_back(v.id());
  const auto wi = weight.id(), bi = bias.id();
  std::vector<Var<T>> all = inputs;
  all.push_back(weight);
  all.push_back(bias);
  return weight.tape().record(std::move(out), all, [ids, wi, bi, cs](Tape<T>& t, const Tensor<T>& go) {
    std::vector<const Tensor<T>*> xs;
    for (auto id : ids) xs.push_back(&t.value(id));
    std::vector<T> cat(cs.size());
    detail::concat_channels_into(xs, cat.data());
    bool any_input = false;
    for (auto id : ids) any_input = any_input || t.requires_grad(id);
    std::vector<T> gcat(any_input ? cs.size() : 0);
    const Tensor<T>& wv = t.value(wi);
    T* gw = t.requires_grad(wi) ? t.grad_buffer(wi).ptr() : nullptr;
    T* gb = t.requires_grad(bi) ? t.grad_buffer(bi).ptr() : nullptr;
    kernels::conv2d_backward(cat.data(), cs, wv.ptr(), wv.shape(), go.ptr(), go.shape(), ConvGeometry{},
                             any_input ? gcat.data() : nullptr, gw, gb);
    if (!any_input) return;
    const std::size_t plane = cs.plane();
    std::size_t c_off = 0;
    for (auto id : ids) {
      const Shape s = t.value(id).shape();
      if (t.requires_grad(id)) {
        Tensor<T>& g = t.grad_buffer(id);
        for (std::size_t n = 0; n < cs.n; ++n) {
          const T* src = gcat.data() + (n * cs.c + c_off) * plane;
          T* dst = g.ptr() + n * s.sample();
          for (std::size_t i = 0; i < s.sample(); ++i) dst[i] += src[i];
        }
      }
      c_off += s.c;
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v < T{0} ? T{0} : v;  // NaN passes through
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi](Tape<T>& t, const Tensor<T>& go) {
    const Tensor<T>& xv = t.value(xi);
    Tensor<T>& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (xv[i] > T{0}) gx[i] += go[i];
    }
  });
}

template <typename T>
T sigmoid_scalar(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = sigmoid_scalar(v);
  const auto xi = x.id();
  Tensor<T> saved = x.tape().requires_grad(xi) ? out : Tensor<T>();
  return x.tape().record(std::move(out), {x}, [xi, s = std::move(saved)](Tape<T>& t, const Tensor<T>& go) {
    Tensor<T>& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s[i] * (T{1} - s[i]);
  });
}

// Elementwise sum of equally shaped tensors.
template <typename T>
Var<T> add(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("add: empty input sequence");
  detail::check_same_spatial(xs, "add");
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].shape().c != xs[0].shape().c) {
      throw ShapeError(str_cat("add: channel mismatch at input ", i, ": ", xs[i].shape().c, " vs ", xs[0].shape().c));
    }
  }
  Tensor<T> out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) detail::add_into(out, xs[i].value().data());
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id());
  return xs[0].tape().record(std::move(out), xs, [ids](Tape<T>& t, const Tensor<T>& go) {
    for (auto id : ids) {
      if (t.requires_grad(id)) detail::add_into(t.grad_buffer(id), go.data());
    }
  });
}

// Concatenates along channels in the given order.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  detail::check_same_spatial(xs, "concat_channels");
  const Shape s0 = xs.front().shape();
  std::size_t total_c = 0;
  std::vector<const Tensor<T>*> vals;
  for (const auto& v : xs) {
    total_c += v.shape().c;
    vals.push_back(&v.value());
  }
  Tensor<T> out(Shape{s0.n, total_c, s0.h, s0.w});
  detail::concat_channels_into(vals, out.ptr());
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id());
  return xs[0].tape().record(std::move(out), xs, [ids](Tape<T>& t, const Tensor<T>& go) {
    const Shape os = go.shape();
    std::size_t c_off = 0;
    for (auto id : ids) {
      const Shape s = t.value(id).shape();
      if (t.requires_grad(id)) {
        Tensor<T>& g = t.grad_buffer(id);
        for (std::size_t n = 0; n < os.n; ++n) {
          const T* src = go.ptr() + (n * os.c + c_off) * os.plane();
          T* dst = g.ptr() + n * s.sample();
          for (std::size_t i = 0; i < s.sample(); ++i) dst[i] += src[i];
        }
      }
      c_off += s.c;
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  if (begin + count > s.c) throw ShapeError(str_cat("slice_channels: range [", begin, ",", begin + count, ") exceeds ", s.c, " channels"));
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* src = x.value().ptr() + (n * s.c + begin) * s.plane();
    std::copy(src, src + count * s.plane(), out.ptr() + n * count * s.plane());
  }
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, begin, count, s](Tape<T>& t, const Tensor<T>& go) {
    Tensor<T>& g = t.grad_buffer(xi);
    for (std::size_t n = 0; n < s.n; ++n) {
      T* dst = g.ptr() + (n * s.c + begin) * s.plane();
      const T* src = go.ptr() + n * count * s.plane();
      for (std::size_t i = 0; i < count * s.plane(); ++i) dst[i] += src[i];
    }
  });
}

// Stacks tensors along the batch axis (gather).
template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& xs) {
  detail::check_same_spatial(xs, "concat_batch", false);
  const Shape s0 = xs.front().shape();
  std::size_t total_n = 0;
  for (const auto& v : xs) {
    if (v.shape().c != s0.c) throw ShapeError(str_cat("concat_batch: channel mismatch: ", v.shape().c, " vs ", s0.c));
    total_n += v.shape().n;
  }
  Tensor<T> out(Shape{total_n, s0.c, s0.h, s0.w});
  T* dst = out.ptr();
  for (const auto& v : xs) {
    std::copy(v.value().data().begin(), v.value().data().end(), dst);
    dst += v.value().size();
  }
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id());
  return xs[0].tape().record(std::move(out), xs, [ids](Tape<T>& t, const Tensor<T>& go) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t len = t.value(id).size();
      if (t.requires_grad(id)) detail::add_into(t.grad_buffer(id), std::span<const T>(go.ptr() + off, len));
      off += len;
    }
  });
}

// Extracts one sample along the batch axis (scatter).
template <typename T>
Var<T> slice_batch(const Var<T>& x, std::size_t index) {
  const Shape s = x.shape();
  if (index >= s.n) throw ShapeError(str_cat("slice_batch: index ", index, " out of batch extent ", s.n));
  auto src = x.value().sample(index);
  Tensor<T> out(Shape{1, s.c, s.h, s.w}, std::vector<T>(src.begin(), src.end()));
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, index, s](Tape<T>& t, const Tensor<T>& go) {
    detail::add_into(t.grad_buffer(xi), go.data(), index * s.sample());
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  const auto xi = x.id();
  return x.tape().record(Tensor<T>::scalar(acc), {x}, [xi](Tape<T>& t, const Tensor<T>& go) {
    Tensor<T>& g = t.grad_buffer(xi);
    const T gv = go[0];
    for (auto& v : g.data()) v += gv;
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  const auto xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, factor](Tape<T>& t, const Tensor<T>& go) {
    Tensor<T>& g = t.grad_buffer(xi);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += factor * go[i];
  });
}

// Binary cross-entropy on logits, in the form max(z,0) - z*t + log(1 + exp(-|z|)).
// Positions with mask 0 are skipped entirely: they contribute neither loss nor
// gradient. Mean reduction divides by max(1, number of valid positions).
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets, const Tensor<T>& mask,
                       Reduction reduction = Reduction::kMean) {
  const Shape s = logits.shape();
  if (targets.shape() != s) throw ShapeError("bce_with_logits: targets shape " + targets.shape().str() + " != logits " + s.str());
  if (mask.shape() != s) throw ShapeError("bce_with_logits: mask shape " + mask.shape().str() + " != logits " + s.str());
  const Tensor<T>& z = logits.value();
  T acc{0};
  std::size_t count = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (mask[i] == T{0}) continue;
    const T tv = targets[i];
    if (tv != T{0} && tv != T{1}) throw ValidationError(str_cat("bce_with_logits: target ", tv, " outside {0,1} at position ", i));
    const T zi = z[i];
    acc += std::max(zi, T{0}) - zi * tv + std::log1p(std::exp(-std::abs(zi)));
    ++count;
  }
  const T norm = reduction == Reduction::kMean ? T(std::max<std::size_t>(1, count)) : T{1};
  const auto li = logits.id();
  return logits.tape().record(Tensor<T>::scalar(acc / norm), {logits},
                              [li, targets, mask, norm](Tape<T>& t, const Tensor<T>& go) {
                                const Tensor<T>& zv = t.value(li);
                                Tensor<T>& g = t.grad_buffer(li);
                                const T scale_by = go[0] / norm;
                                for (std::size_t i = 0; i < zv.size(); ++i) {
                                  if (mask[i] == T{0}) continue;
                                  g[i] += scale_by * (sigmoid_scalar(zv[i]) - targets[i]);
                                }
                              });
}

// Cross-entropy of a per-pixel softmax over channels. `labels` has shape
// (n,1,h,w) with -1 for ignored pixels. Classes with a false `class_mask`
// entry are left out of the normalizer and receive no gradient.
template <typename T>
Var<T> softmax_ce(const Var<T>& logits, const Tensor<int>& labels, const std::vector<bool>& class_mask = {},
                  Reduction reduction = Reduction::kMean) {
  const Shape s = logits.shape();
  const Shape ls = labels.shape();
  if (ls.n != s.n || ls.c != 1 || ls.h != s.h || ls.w != s.w) {
    throw ShapeError("softmax_ce: labels shape " + ls.str() + " incompatible with logits " + s.str());
  }
  if (!class_mask.empty() && class_mask.size() != s.c) throw ShapeError("softmax_ce: class mask length mismatch");
  auto enabled = [&class_mask](std::size_t k) { return class_mask.empty() || class_mask[k]; };
  const Tensor<T>& z = logits.value();
  const std::size_t plane = s.plane();
  Tensor<T> probs(s);
  T acc{0};
  std::size_t count = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[n * plane + p];
      if (label == LabelMap::kIgnore) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= s.c) {
        throw ValidationError(str_cat("softmax_ce: label ", label, " outside [0, ", s.c, ")"));
      }
      if (!enabled(static_cast<std::size_t>(label))) throw ValidationError(str_cat("softmax_ce: label ", label, " is a masked class"));
      T zmax = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.c; ++k) {
        if (enabled(k)) zmax = std::max(zmax, z[(n * s.c + k) * plane + p]);
      }
      T denom{0};
      for (std::size_t k = 0; k < s.c; ++k) {
        if (enabled(k)) denom += std::exp(z[(n * s.c + k) * plane + p] - zmax);
      }
      const T log_denom = std::log(denom);
      for (std::size_t k = 0; k < s.c; ++k) {
        if (enabled(k)) probs[(n * s.c + k) * plane + p] = std::exp(z[(n * s.c + k) * plane + p] - zmax - log_denom);
      }
      acc += -(z[(n * s.c + static_cast<std::size_t>(label)) * plane + p] - zmax - log_denom);
      ++count;
    }
  }
  const T norm = reduction == Reduction::kMean ? T(std::max<std::size_t>(1, count)) : T{1};
  const auto li = logits.id();
  return logits.tape().record(Tensor<T>::scalar(acc / norm), {logits},
                              [li, labels, class_mask, probs = std::move(probs), norm, s, plane](Tape<T>& t, const Tensor<T>& go) {
                                Tensor<T>& g = t.grad_buffer(li);
                                const T scale_by = go[0] / norm;
                                for (std::size_t n = 0; n < s.n; ++n) {
                                  for (std::size_t p = 0; p < plane; ++p) {
                                    const int label = labels[n * plane + p];
                                    if (label == LabelMap::kIgnore) continue;
                                    for (std::size_t k = 0; k < s.c; ++k) {
                                      const std::size_t idx = (n * s.c + k) * plane + p;
                                      if (!class_mask.empty() && !class_mask[k]) continue;
                                      const T onehot = static_cast<int>(k) == label ? T{1} : T{0};
                                      g[idx] += scale_by * (probs[idx] - onehot);
                                    }
                                  }
                                }
                              });
}

}  // namespace dsspn

#pragma once

// Dual-stream patch + context convolutional network, trained from scratch in
// double precision. Each stream is a stack of valid convolutions with ReLU
// and optional 2x2 max-pooling; the flattened stream outputs are concatenated
// and fed to a fully connected head. The activations of one hidden head layer
// are the embedding used for mining and encoding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "deepcamp/container.hpp"
#include "deepcamp/core.hpp"
#include "deepcamp/patchgrid.hpp"

namespace deepcamp {

struct ConvLayer {
  int kernel = 3;
  int out_channels = 8;
  int stride = 1;
  bool pool = true;

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct NetArch {
  int patch_input_side = 16;
  int context_input_side = 16;
  int in_channels = 1;
  std::vector<ConvLayer> patch_stream{{3, 8, 1, true}, {3, 16, 1, true}};
  std::vector<ConvLayer> context_stream{{3, 8, 1, true}, {3, 16, 1, true}};
  // Fully connected layer widths; the last entry is the output class count.
  std::vector<int> head{64, 2};
  int embed_layer_index = 0;

  int outputs() const { return head.empty() ? 0 : head.back(); }
  int embedding_dim() const { return head.at(embed_layer_index); }

  friend bool operator==(const NetArch&, const NetArch&) = default;
};

/// Channels and side of a stream's output; throws ConfigError when the shape
/// arithmetic breaks down.
struct StreamShape {
  int channels = 0;
  int side = 0;
  int flat() const { return channels * side * side; }
};

inline StreamShape stream_shape(const std::vector<ConvLayer>& layers, int input_side, int in_channels,
                                const char* which) {
  StreamShape s{in_channels, input_side};
  if (layers.empty()) throw ConfigError(std::string("arch: ") + which + " stream has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    require_config(l.kernel >= 1 && l.out_channels >= 1 && l.stride >= 1,
                   std::string("arch: bad conv parameters in ") + which + " stream");
    if (s.side < l.kernel) {
      throw ConfigError(std::string("arch: ") + which + " stream layer " + std::to_string(i) + " kernel " +
                        std::to_string(l.kernel) + " exceeds input side " + std::to_string(s.side));
    }
    s.side = (s.side - l.kernel) / l.stride + 1;
    s.channels = l.out_channels;
    if (l.pool) {
      if (s.side < 2) {
        throw ConfigError(std::string("arch: ") + which + " stream layer " + std::to_string(i) +
                          " cannot pool a side-1 map");
      }
      s.side /= 2;
    }
  }
  return s;
}

inline void validate_arch(const NetArch& a) {
  require_config(a.patch_input_side >= 1 && a.context_input_side >= 1, "arch: input sides must be >= 1");
  require_config(a.in_channels >= 1, "arch: in_channels must be >= 1");
  stream_shape(a.patch_stream, a.patch_input_side, a.in_channels, "patch");
  stream_shape(a.context_stream, a.context_input_side, a.in_channels, "context");
  require_config(a.head.size() >= 2, "arch: head needs at least one hidden layer before the output layer");
  for (int h : a.head) require_config(h >= 1, "arch: head layer widths must be >= 1");
  require_config(a.embed_layer_index >= 0 && a.embed_layer_index + 1 < static_cast<int>(a.head.size()),
                 "arch: embed_layer_index must name a hidden head layer");
}

/// Offsets of every parameter block inside the flat weight vector.
struct ParamLayout {
  struct Conv {
    std::size_t w = 0, b = 0;
    int in_c = 0, in_side = 0, out_c = 0, out_side = 0, kernel = 0, stride = 0;
    bool pool = false;
  };
  struct Dense {
    std::size_t w = 0, b = 0;
    int in = 0, out = 0;
  };
  std::vector<Conv> patch, context;
  std::vector<Dense> head;
  int patch_flat = 0, context_flat = 0;
  std::size_t total = 0;
  // [begin, end) ranges
  std::vector<std::pair<std::size_t, std::size_t>> conv_weight_ranges, bias_ranges;
};

inline ParamLayout make_layout(const NetArch& a) {
  validate_arch(a);
  ParamLayout L;
  std::size_t off = 0;
  auto stream = [&](const std::vector<ConvLayer>& layers, int side, std::vector<ParamLayout::Conv>& out) {
    int c = a.in_channels;
    for (const auto& l : layers) {
      ParamLayout::Conv cv;
      cv.in_c = c;
      cv.in_side = side;
      cv.out_c = l.out_channels;
      cv.kernel = l.kernel;
      cv.stride = l.stride;
      cv.pool = l.pool;
      cv.out_side = (side - l.kernel) / l.stride + 1;
      cv.w = off;
      off += static_cast<std::size_t>(l.out_channels) * c * l.kernel * l.kernel;
      L.conv_weight_ranges.emplace_back(cv.w, off);
      cv.b = off;
      off += l.out_channels;
      L.bias_ranges.emplace_back(cv.b, off);
      side = l.pool ? cv.out_side / 2 : cv.out_side;
      c = l.out_channels;
      out.push_back(cv);
    }
    return c * side * side;
  };
  L.patch_flat = stream(a.patch_stream, a.patch_input_side, L.patch);
  L.context_flat = stream(a.context_stream, a.context_input_side, L.context);
  int in = L.patch_flat + L.context_flat;
  for (int width : a.head) {
    ParamLayout::Dense d;
    d.in = in;
    d.out = width;
    d.w = off;
    off += static_cast<std::size_t>(width) * in;
    d.b = off;
    off += width;
    L.bias_ranges.emplace_back(d.b, off);
    L.head.push_back(d);
    in = width;
  }
  L.total = off;
  return L;
}

inline std::size_t parameter_count(const NetArch& a) { return make_layout(a).total; }

struct EmbedNetwork {
  NetArch arch;
  ParamLayout layout;
  std::vector<double> weights;
  std::uint64_t seed = 0;

  bool all_finite() const {
    return std::all_of(weights.begin(), weights.end(), [](double w) { return std::isfinite(w); });
  }
};

/// Fan-in scaled uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases.
inline EmbedNetwork init_network(const NetArch& arch, std::uint64_t seed) {
  EmbedNetwork net;
  net.arch = arch;
  net.layout = make_layout(arch);
  net.seed = seed;
  net.weights.assign(net.layout.total, 0.0);
  Rng rng(seed);
  auto fill = [&](std::size_t begin, std::size_t end, int fan_in) {
    const double lim = std::sqrt(6.0 / fan_in);
    for (std::size_t i = begin; i < end; ++i) net.weights[i] = rng.uniform(-lim, lim);
  };
  for (const auto* stream : {&net.layout.patch, &net.layout.context})
    for (const auto& c : *stream) fill(c.w, c.b, c.in_c * c.kernel * c.kernel);
  for (const auto& d : net.layout.head) fill(d.w, d.b, d.in);
  return net;
}

// ---------------------------------------------------------------------------
// Losses and targets

enum class Loss { Softmax, PerClassCrossEntropy };

inline const char* to_string(Loss l) { return l == Loss::Softmax ? "softmax" : "per_class_cross_entropy"; }

/// Softmax uses `label`. Per-class cross-entropy uses `prob` where `mask` is
/// set; masked-out entries are never read.
struct Target {
  int label = -1;
  std::vector<double> prob;
  std::vector<std::uint8_t> mask;

  static Target of_label(int label) {
    Target t;
    t.label = label;
    return t;
  }

  /// +1 -> 1, -1 -> 0, 0 -> unspecified (filled with `fill`, masked out).
  static Target of_attributes(const std::vector<std::int8_t>& labels, double fill = 0.5) {
    Target t;
    for (auto l : labels) {
      t.prob.push_back(l > 0 ? 1.0 : (l < 0 ? 0.0 : fill));
      t.mask.push_back(l != 0 ? 1 : 0);
    }
    return t;
  }

  bool any_supervised() const {
    return std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
  }
};

/// Loss of one sample; writes dL/dlogits into grad (same length as logits).
inline double loss_and_grad(std::span<const double> logits, const Target& t, Loss loss, std::span<double> grad) {
  const std::size_t k = logits.size();
  if (loss == Loss::Softmax) {
    if (t.label < 0 || static_cast<std::size_t>(t.label) >= k) throw PreconditionError("softmax label out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(logits[i] - mx);
    const double logz = mx + std::log(z);
    for (std::size_t i = 0; i < k; ++i) grad[i] = std::exp(logits[i] - logz) - (static_cast<int>(i) == t.label ? 1.0 : 0.0);
    return logz - logits[t.label];
  }
  if (t.prob.size() != k || t.mask.size() != k) throw PreconditionError("per-class target length mismatch");
  double l = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!t.mask[i]) {
      grad[i] = 0.0;
      continue;
    }
    const double x = logits[i];
    const double y = t.prob[i];
    l += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    grad[i] = sig - y;
  }
  return l;
}

namespace detail {

struct Map {
  int c = 0, side = 0;
  std::vector<double> v;
  Map() = default;
  Map(int ch, int s) : c(ch), side(s), v(static_cast<std::size_t>(ch) * s * s, 0.0) {}
  double* plane(int ch) { return v.data() + static_cast<std::size_t>(ch) * side * side; }
  const double* plane(int ch) const { return v.data() + static_cast<std::size_t>(ch) * side * side; }
};

struct ConvTrace {
  Map input;
  Map act;  // post-ReLU conv output
  std::vector<int> argmax;
};

struct StreamTrace {
  std::vector<ConvTrace> layers;
  std::vector<double> output;  // flattened
};

struct HeadTrace {
  std::vector<std::vector<double>> inputs;  // input of each dense layer
  std::vector<std::vector<double>> pre;     // affine output of each dense layer
};

inline Map grid_to_map(const Grid& g) {
  Map m(1, g.side);
  m.v = g.px;
  return m;
}

inline void conv_forward(const std::vector<double>& W, const ParamLayout::Conv& cv, const Map& in, Map& out) {
  out = Map(cv.out_c, cv.out_side);
  const int k = cv.kernel, s = cv.stride, os = cv.out_side, is = cv.in_side;
  for (int oc = 0; oc < cv.out_c; ++oc) {
    double* o = out.plane(oc);
    const double bias = W[cv.b + oc];
    std::fill(o, o + os * os, bias);
    for (int ic = 0; ic < cv.in_c; ++ic) {
      const double* ip = in.plane(ic);
      const double* wk = &W[cv.w + (static_cast<std::size_t>(oc) * cv.in_c + ic) * k * k];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double w = wk[ky * k + kx];
          for (int oy = 0; oy < os; ++oy) {
            const double* row = ip + (oy * s + ky) * is + kx;
            double* orow = o + oy * os;
            for (int ox = 0; ox < os; ++ox) orow[ox] += w * row[ox * s];
          }
        }
    }
  }
}

// Accumulates dW, db; writes dIn when requested.
inline void conv_backward(const std::vector<double>& W, const ParamLayout::Conv& cv, const Map& in, const Map& dout,
                          std::vector<double>& grad, Map* din) {
  const int k = cv.kernel, s = cv.stride, os = cv.out_side, is = cv.in_side;
  if (din) *din = Map(cv.in_c, cv.in_side);
  for (int oc = 0; oc < cv.out_c; ++oc) {
    const double* d = dout.plane(oc);
    double db = 0.0;
    for (int i = 0; i < os * os; ++i) db += d[i];
    grad[cv.b + oc] += db;
    for (int ic = 0; ic < cv.in_c; ++ic) {
      const double* ip = in.plane(ic);
      double* dip = din ? din->plane(ic) : nullptr;
      const std::size_t wbase = cv.w + (static_cast<std::size_t>(oc) * cv.in_c + ic) * k * k;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double w = W[wbase + ky * k + kx];
          double gw = 0.0;
          for (int oy = 0; oy < os; ++oy) {
            const double* row = ip + (oy * s + ky) * is + kx;
            const double* drow = d + oy * os;
            for (int ox = 0; ox < os; ++ox) gw += drow[ox] * row[ox * s];
            if (dip) {
              double* dr = dip + (oy * s + ky) * is + kx;
              for (int ox = 0; ox < os; ++ox) dr[ox * s] += w * drow[ox];
            }
          }
          grad[wbase + ky * k + kx] += gw;
        }
    }
  }
}

inline Map pool_forward(const Map& in, std::vector<int>& argmax) {
  const int os = in.side / 2;
  Map out(in.c, os);
  argmax.assign(out.v.size(), 0);
  for (int c = 0; c < in.c; ++c) {
    const double* ip = in.plane(c);
    for (int y = 0; y < os; ++y)
      for (int x = 0; x < os; ++x) {
        int best = (2 * y) * in.side + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * y + dy) * in.side + 2 * x + dx;
            if (ip[idx] > ip[best]) best = idx;
          }
        const std::size_t o = static_cast<std::size_t>(c) * os * os + y * os + x;
        out.v[o] = ip[best];
        argmax[o] = c * in.side * in.side + best;
      }
  }
  return out;
}

inline StreamTrace stream_forward(const std::vector<double>& W, const std::vector<ParamLayout::Conv>& layers,
                                  const Grid& input) {
  StreamTrace t;
  Map cur = grid_to_map(input);
  for (const auto& cv : layers) {
    ConvTrace ct;
    ct.input = std::move(cur);
    conv_forward(W, cv, ct.input, ct.act);
    for (auto& x : ct.act.v) x = x > 0.0 ? x : 0.0;
    cur = cv.pool ? pool_forward(ct.act, ct.argmax) : ct.act;
    t.layers.push_back(std::move(ct));
  }
  t.output = std::move(cur.v);
  return t;
}

inline void stream_backward(const std::vector<double>& W, const std::vector<ParamLayout::Conv>& layers,
                            const StreamTrace& t, std::span<const double> dout_flat, std::vector<double>& grad) {
  std::vector<double> d(dout_flat.begin(), dout_flat.end());
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& cv = layers[li];
    const auto& ct = t.layers[li];
    Map dact(cv.out_c, cv.out_side);
    if (cv.pool) {
      for (std::size_t i = 0; i < d.size(); ++i) dact.v[ct.argmax[i]] += d[i];
    } else {
      dact.v = d;
    }
    for (std::size_t i = 0; i < dact.v.size(); ++i)
      if (ct.act.v[i] <= 0.0) dact.v[i] = 0.0;
    Map din;
    conv_backward(W, cv, ct.input, dact, grad, li > 0 ? &din : nullptr);
    if (li > 0) d = std::move(din.v);
  }
}

inline std::vector<double> head_forward(const std::vector<double>& W, const ParamLayout& L, std::vector<double> x,
                                        HeadTrace* trace, int embed_index, std::vector<double>* embedding) {
  for (std::size_t li = 0; li < L.head.size(); ++li) {
    const auto& d = L.head[li];
    std::vector<double> y(d.out);
    for (int o = 0; o < d.out; ++o) {
      const double* w = &W[d.w + static_cast<std::size_t>(o) * d.in];
      double s = W[d.b + o];
      for (int i = 0; i < d.in; ++i) s += w[i] * x[i];
      y[o] = s;
    }
    if (trace) {
      trace->inputs.push_back(x);
      trace->pre.push_back(y);
    }
    if (li + 1 < L.head.size()) {
      for (auto& v : y) v = v > 0.0 ? v : 0.0;
      if (embedding && static_cast<int>(li) == embed_index) *embedding = y;
    }
    x = std::move(y);
  }
  return x;
}

// Returns dL/d(head input).
inline std::vector<double> head_backward(const std::vector<double>& W, const ParamLayout& L, const HeadTrace& t,
                                         std::span<const double> dlogits, std::vector<double>& grad,
                                         bool final_layer_only) {
  std::vector<double> d(dlogits.begin(), dlogits.end());
  for (std::size_t li = L.head.size(); li-- > 0;) {
    const auto& dl = L.head[li];
    if (li + 1 < L.head.size()) {
      for (int o = 0; o < dl.out; ++o)
        if (t.pre[li][o] <= 0.0) d[o] = 0.0;
    }
    const auto& x = t.inputs[li];
    std::vector<double> dx(dl.in, 0.0);
    for (int o = 0; o < dl.out; ++o) {
      const double g = d[o];
      grad[dl.b + o] += g;
      if (g == 0.0) continue;
      double* gw = &grad[dl.w + static_cast<std::size_t>(o) * dl.in];
      const double* w = &W[dl.w + static_cast<std::size_t>(o) * dl.in];
      for (int i = 0; i < dl.in; ++i) {
        gw[i] += g * x[i];
        dx[i] += g * w[i];
      }
    }
    if (final_layer_only) return {};
    d = std::move(dx);
  }
  return d;
}

inline std::vector<double> concat(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline void check_inputs(const EmbedNetwork& net, const Grid& patch, const Grid& context) {
  if (patch.side != net.arch.patch_input_side || context.side != net.arch.context_input_side) {
    throw PreconditionError("forward: input sides (" + std::to_string(patch.side) + "," +
                            std::to_string(context.side) + ") do not match arch (" +
                            std::to_string(net.arch.patch_input_side) + "," +
                            std::to_string(net.arch.context_input_side) + ")");
  }
}

}  // namespace detail

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> embedding;
};

inline ForwardResult forward(const EmbedNetwork& net, const Grid& patch, const Grid& context) {
  detail::check_inputs(net, patch, context);
  const auto ps = detail::stream_forward(net.weights, net.layout.patch, patch);
  const auto cs = detail::stream_forward(net.weights, net.layout.context, context);
  ForwardResult r;
  r.logits = detail::head_forward(net.weights, net.layout, detail::concat(ps.output, cs.output), nullptr,
                                  net.arch.embed_layer_index, &r.embedding);
  return r;
}

/// Loss of one sample and its gradient over all parameters.
inline double sample_loss_and_gradient(const EmbedNetwork& net, const Grid& patch, const Grid& context,
                                       const Target& target, Loss loss, std::vector<double>& grad) {
  detail::check_inputs(net, patch, context);
  grad.assign(net.weights.size(), 0.0);
  const auto ps = detail::stream_forward(net.weights, net.layout.patch, patch);
  const auto cs = detail::stream_forward(net.weights, net.layout.context, context);
  detail::HeadTrace ht;
  auto logits = detail::head_forward(net.weights, net.layout, detail::concat(ps.output, cs.output), &ht, -1, nullptr);
  std::vector<double> dl(logits.size());
  const double l = loss_and_grad(logits, target, loss, dl);
  auto dx = detail::head_backward(net.weights, net.layout, ht, dl, grad, false);
  const std::span<const double> all(dx);
  detail::stream_backward(net.weights, net.layout.patch, ps, all.subspan(0, net.layout.patch_flat), grad);
  detail::stream_backward(net.weights, net.layout.context, cs, all.subspan(net.layout.patch_flat), grad);
  return l;
}

inline double sample_loss(const EmbedNetwork& net, const Grid& patch, const Grid& context, const Target& target,
                          Loss loss) {
  const auto r = forward(net, patch, context);
  std::vector<double> dl(r.logits.size());
  return loss_and_grad(r.logits, target, loss, dl);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 100;
  int epochs = 10;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Loss loss = Loss::Softmax;
  std::uint64_t shuffle_seed = 0;
  bool final_layer_only = false;

  void validate() const {
    require_config(learning_rate >= 0.0 && std::isfinite(learning_rate), "train: learning_rate must be >= 0");
    require_config(batch_size >= 1, "train: batch_size must be >= 1");
    require_config(epochs >= 0, "train: epochs must be >= 0");
    require_config(momentum >= 0.0 && momentum < 1.0, "train: momentum must be in [0,1)");
    require_config(weight_decay >= 0.0, "train: weight_decay must be >= 0");
  }
};

/// Patches that share a context (the person box they came from) reference it
/// by index, so the context stream runs once per box per minibatch.
struct TrainingSet {
  std::vector<Grid> contexts;
  std::vector<Grid> patches;
  std::vector<int> context_of;
  std::vector<Target> targets;

  std::size_t size() const { return patches.size(); }

  void add(Grid patch, int context, Target t) {
    patches.push_back(std::move(patch));
    context_of.push_back(context);
    targets.push_back(std::move(t));
  }
};

struct TrainHistory {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean minibatch loss during each epoch
  double final_loss = 0.0;
};

/// Mean per-sample loss over a set.
inline double mean_loss(const EmbedNetwork& net, const TrainingSet& set, Loss loss) {
  std::vector<std::vector<double>> ctx(set.contexts.size());
  std::vector<bool> done(set.contexts.size(), false);
  double total = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int c = set.context_of[i];
    if (!done[c]) {
      ctx[c] = detail::stream_forward(net.weights, net.layout.context, set.contexts[c]).output;
      done[c] = true;
    }
    const auto ps = detail::stream_forward(net.weights, net.layout.patch, set.patches[i]);
    auto logits = detail::head_forward(net.weights, net.layout, detail::concat(ps.output, ctx[c]), nullptr, -1, nullptr);
    std::vector<double> dl(logits.size());
    total += loss_and_grad(logits, set.targets[i], loss, dl);
  }
  return set.size() ? total / static_cast<double>(set.size()) : 0.0;
}

/// Minibatch gradient (mean over the batch) with context-stream sharing.
inline double batch_loss_and_gradient(const EmbedNetwork& net, const TrainingSet& set,
                                      std::span<const std::size_t> batch, Loss loss, bool final_layer_only,
                                      std::vector<double>& grad) {
  grad.assign(net.weights.size(), 0.0);
  const auto& L = net.layout;
  // context traces for boxes used in this batch, in first-use order
  std::vector<int> ctx_ids;
  std::vector<int> slot(set.contexts.size(), -1);
  for (auto i : batch) {
    const int c = set.context_of[i];
    if (slot[c] < 0) {
      slot[c] = static_cast<int>(ctx_ids.size());
      ctx_ids.push_back(c);
    }
  }
  std::vector<detail::StreamTrace> ctx_trace;
  ctx_trace.reserve(ctx_ids.size());
  for (int c : ctx_ids) ctx_trace.push_back(detail::stream_forward(net.weights, L.context, set.contexts[c]));
  std::vector<std::vector<double>> ctx_grad(ctx_ids.size(), std::vector<double>(L.context_flat, 0.0));

  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto i : batch) {
    const int s = slot[set.context_of[i]];
    const auto ps = detail::stream_forward(net.weights, L.patch, set.patches[i]);
    detail::HeadTrace ht;
    auto logits = detail::head_forward(net.weights, L, detail::concat(ps.output, ctx_trace[s].output), &ht, -1, nullptr);
    std::vector<double> dl(logits.size());
    total += loss_and_grad(logits, set.targets[i], loss, dl);
    for (auto& g : dl) g *= inv;
    auto dx = detail::head_backward(net.weights, L, ht, dl, grad, final_layer_only);
    if (final_layer_only) continue;
    detail::stream_backward(net.weights, L.patch, ps, std::span<const double>(dx).subspan(0, L.patch_flat), grad);
    for (int k = 0; k < L.context_flat; ++k) ctx_grad[s][k] += dx[L.patch_flat + k];
  }
  if (!final_layer_only)
    for (std::size_t s = 0; s < ctx_ids.size(); ++s)
      detail::stream_backward(net.weights, L.context, ctx_trace[s], ctx_grad[s], grad);
  return total * inv;
}

/// Minibatch SGD with momentum and weight decay (decay on weights, not
/// biases). Single-threaded and deterministic for a fixed shuffle seed.
inline TrainHistory train(EmbedNetwork& net, const TrainingSet& set, const TrainConfig& cfg) {
  cfg.validate();
  if (set.size() == 0) throw PreconditionError("train: empty training set");
  if (set.context_of.size() != set.size() || set.targets.size() != set.size())
    throw PreconditionError("train: training set columns differ in length");
  const int K = net.arch.outputs();
  bool any_supervised = cfg.loss == Loss::Softmax;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& t = set.targets[i];
    if (set.context_of[i] < 0 || static_cast<std::size_t>(set.context_of[i]) >= set.contexts.size())
      throw PreconditionError("train: context index out of range");
    if (cfg.loss == Loss::Softmax) {
      if (t.label < 0 || t.label >= K) throw PreconditionError("train: label out of range");
    } else {
      if (static_cast<int>(t.mask.size()) != K || static_cast<int>(t.prob.size()) != K)
        throw PreconditionError("train: target vector length differs from output count");
      any_supervised = any_supervised || t.any_supervised();
    }
  }
  if (!any_supervised) throw PreconditionError("train: no supervised entries (every label is unspecified)");

  std::vector<bool> decays(net.weights.size(), true);
  for (auto [b, e] : net.layout.bias_ranges)
    for (auto i = b; i < e; ++i) decays[i] = false;
  std::size_t first_trainable = 0;
  if (cfg.final_layer_only) first_trainable = net.layout.head.back().w;

  TrainHistory h;
  h.initial_loss = mean_loss(net, set, cfg.loss);
  std::vector<double> velocity(net.weights.size(), 0.0), grad;
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.shuffle_seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      const double l = batch_loss_and_gradient(net, set, std::span<const std::size_t>(order).subspan(start, n),
                                               cfg.loss, cfg.final_layer_only, grad);
      if (!std::isfinite(l)) throw DivergenceError("train: non-finite loss in epoch " + std::to_string(epoch));
      sum += l;
      ++batches;
      for (std::size_t i = first_trainable; i < net.weights.size(); ++i) {
        const double g = grad[i] + (decays[i] ? cfg.weight_decay * net.weights[i] : 0.0);
        velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * g;
        net.weights[i] += velocity[i];
      }
    }
    h.epoch_loss.push_back(sum / batches);
  }
  h.final_loss = cfg.epochs > 0 ? mean_loss(net, set, cfg.loss) : h.initial_loss;
  if (!std::isfinite(h.final_loss)) throw DivergenceError("train: non-finite loss after epoch " + std::to_string(cfg.epochs - 1));
  return h;
}

// ---------------------------------------------------------------------------
// Embeddings

/// Rows are items in input order, columns embedding dimensions.
struct FeatureMatrix {
  std::vector<std::int64_t> ids;
  int dim = 0;
  std::vector<double> data;

  std::size_t rows() const { return ids.size(); }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  std::span<double> row(std::size_t i) { return {data.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)}; }

  void append(std::int64_t id, std::span<const double> v) {
    if (ids.empty() && dim == 0) dim = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != dim) throw PreconditionError("feature row dimension mismatch");
    ids.push_back(id);
    data.insert(data.end(), v.begin(), v.end());
  }
};

/// Items to embed: patches referencing shared contexts, as in TrainingSet.
struct EmbeddingInput {
  std::vector<Grid> contexts;
  std::vector<Grid> patches;
  std::vector<int> context_of;
  std::vector<std::int64_t> ids;
};

/// Batch extraction; the context stream runs once per box.
inline FeatureMatrix extract_embeddings(const EmbedNetwork& net, const EmbeddingInput& in) {
  FeatureMatrix fm;
  fm.dim = net.arch.embedding_dim();
  fm.ids.reserve(in.patches.size());
  fm.data.reserve(in.patches.size() * fm.dim);
  std::vector<std::vector<double>> ctx(in.contexts.size());
  std::vector<bool> done(in.contexts.size(), false);
  for (std::size_t i = 0; i < in.patches.size(); ++i) {
    const int c = in.context_of[i];
    detail::check_inputs(net, in.patches[i], in.contexts.at(c));
    if (!done[c]) {
      ctx[c] = detail::stream_forward(net.weights, net.layout.context, in.contexts[c]).output;
      done[c] = true;
    }
    const auto ps = detail::stream_forward(net.weights, net.layout.patch, in.patches[i]);
    std::vector<double> emb;
    detail::head_forward(net.weights, net.layout, detail::concat(ps.output, ctx[c]), nullptr,
                         net.arch.embed_layer_index, &emb);
    fm.append(in.ids.empty() ? static_cast<std::int64_t>(i) : in.ids[i], emb);
  }
  return fm;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  int max_params = 400;  // at least 200 are sampled when the net has that many
  bool biases_only = false;
  bool flip_conv_sign = false;  // corrupt the analytic conv gradient (control experiment)
  std::uint64_t seed = 7;
  double denominator_floor = 1e-6;
};

/// Max relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
/// over a random parameter subsample, using central differences.
inline double gradient_check(const EmbedNetwork& net, const Grid& patch, const Grid& context, const Target& target,
                             Loss loss, double epsilon, const GradCheckOptions& opt = {}) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw ConfigError("gradient_check: epsilon must be in [1e-6, 1e-3]");
  std::vector<double> grad;
  sample_loss_and_gradient(net, patch, context, target, loss, grad);
  if (opt.flip_conv_sign)
    for (auto [b, e] : net.layout.conv_weight_ranges)
      for (auto i = b; i < e; ++i) grad[i] = -grad[i];

  std::vector<std::size_t> candidates;
  if (opt.biases_only) {
    for (auto [b, e] : net.layout.bias_ranges)
      for (auto i = b; i < e; ++i) candidates.push_back(i);
  } else {
    candidates.resize(net.weights.size());
    std::iota(candidates.begin(), candidates.end(), 0);
  }
  Rng rng(opt.seed);
  rng.shuffle(candidates);
  const std::size_t n = std::min<std::size_t>(candidates.size(), std::max(200, opt.max_params));
  candidates.resize(n);
  std::sort(candidates.begin(), candidates.end());

  EmbedNetwork probe = net;
  double worst = 0.0;
  for (auto i : candidates) {
    const double w = probe.weights[i];
    probe.weights[i] = w + epsilon;
    const double lp = sample_loss(probe, patch, context, target, loss);
    probe.weights[i] = w - epsilon;
    const double lm = sample_loss(probe, patch, context, target, loss);
    probe.weights[i] = w;
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), opt.denominator_floor});
    worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Initial holistic network

/// Whole-box views fed to the holistic network: the box at the patch-stream
/// side and at the context-stream side.
struct BoxViews {
  Grid patch_view;
  Grid context_view;
};

inline BoxViews box_views(const PersonSample& s, const NetArch& arch) {
  return {resize_bilinear(s.image, arch.patch_input_side), resize_bilinear(s.image, arch.context_input_side)};
}

inline Target sample_target(const PersonSample& s, Mode mode, double unspecified_fill) {
  return mode == Mode::Action ? Target::of_label(s.action_label) : Target::of_attributes(s.attribute_labels, unspecified_fill);
}

/// Trains the dual-stream architecture with both streams fed the whole box,
/// on action labels (softmax) or attribute labels (masked per-class
/// cross-entropy). The output layer is sized to the category count.
/// Trains the initial network on whole-box views. Optional `crops[i]` are
/// extra sub-images of train_samples[i] (fed to both streams) that inherit the
/// box label, the desk-scale stand-in for crop augmentation.
inline EmbedNetwork train_initial_holistic(const std::vector<const PersonSample*>& train_samples,
                                           const LabelSpec& spec, NetArch arch, TrainConfig cfg, std::uint64_t seed,
                                           double unspecified_fill = 0.5, TrainHistory* history = nullptr,
                                           const std::vector<std::vector<Grid>>& crops = {}) {
  spec.validate();
  if (train_samples.empty()) throw PreconditionError("train_initial_holistic: empty train split");
  if (!crops.empty() && crops.size() != train_samples.size())
    throw PreconditionError("train_initial_holistic: one crop list per sample expected");
  arch.head.back() = spec.count();
  cfg.loss = spec.mode == Mode::Action ? Loss::Softmax : Loss::PerClassCrossEntropy;
  TrainingSet set;
  for (std::size_t i = 0; i < train_samples.size(); ++i) {
    const auto& s = *train_samples[i];
    const auto target = sample_target(s, spec.mode, unspecified_fill);
    auto v = box_views(s, arch);
    set.contexts.push_back(std::move(v.context_view));
    set.add(std::move(v.patch_view), static_cast<int>(set.contexts.size() - 1), target);
    if (crops.empty()) continue;
    for (const auto& crop : crops[i]) {
      set.contexts.push_back(resize_bilinear(crop, arch.context_input_side));
      set.add(resize_bilinear(crop, arch.patch_input_side), static_cast<int>(set.contexts.size() - 1), target);
    }
  }
  auto net = init_network(arch, seed);
  auto h = train(net, set, cfg);
  if (history) *history = std::move(h);
  return net;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::vector<std::int64_t> encode_arch(const NetArch& a) {
  std::vector<std::int64_t> v{a.patch_input_side, a.context_input_side, a.in_channels};
  for (const auto* s : {&a.patch_stream, &a.context_stream}) {
    v.push_back(static_cast<std::int64_t>(s->size()));
    for (const auto& l : *s) v.insert(v.end(), {l.kernel, l.out_channels, l.stride, l.pool ? 1 : 0});
  }
  v.push_back(static_cast<std::int64_t>(a.head.size()));
  v.insert(v.end(), a.head.begin(), a.head.end());
  v.push_back(a.embed_layer_index);
  return v;
}

inline NetArch decode_arch(const std::vector<std::int64_t>& v) {
  std::size_t p = 0;
  auto next = [&]() -> int {
    if (p >= v.size()) throw FormatError("network: truncated architecture record");
    return static_cast<int>(v[p++]);
  };
  NetArch a;
  a.patch_input_side = next();
  a.context_input_side = next();
  a.in_channels = next();
  for (auto* s : {&a.patch_stream, &a.context_stream}) {
    s->clear();
    const int n = next();
    for (int i = 0; i < n; ++i) {
      ConvLayer l;
      l.kernel = next();
      l.out_channels = next();
      l.stride = next();
      l.pool = next() != 0;
      s->push_back(l);
    }
  }
  a.head.clear();
  const int nh = next();
  for (int i = 0; i < nh; ++i) a.head.push_back(next());
  a.embed_layer_index = next();
  return a;
}

inline void write_network(Container& c, const std::string& prefix, const EmbedNetwork& net) {
  c.put_i64(prefix + ".arch", encode_arch(net.arch));
  c.put_f64(prefix + ".weights", net.weights);
  c.put_int(prefix + ".seed", static_cast<std::int64_t>(net.seed));
}

inline EmbedNetwork read_network(const Container& c, const std::string& prefix) {
  EmbedNetwork net;
  try {
    net.arch = decode_arch(c.i64(prefix + ".arch"));
    net.layout = make_layout(net.arch);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("network: stored architecture invalid: ") + e.what());
  }
  net.weights = c.f64(prefix + ".weights");
  net.seed = static_cast<std::uint64_t>(c.integer(prefix + ".seed"));
  if (net.weights.size() != net.layout.total) throw FormatError("network: parameter count does not match architecture");
  return net;
}

inline void save_network(const EmbedNetwork& net, const std::filesystem::path& path) {
  Container c(Container::Kind::Network);
  write_network(c, "net", net);
  c.save(path);
}

inline EmbedNetwork load_network(const std::filesystem::path& path) {
  const auto c = Container::load(path);
  if (c.kind() != Container::Kind::Network) throw FormatError("container is not a network");
  return read_network(c, "net");
}

}  // namespace deepcamp

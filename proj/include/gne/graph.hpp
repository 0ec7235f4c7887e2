#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gne/errors.hpp"
#include "gne/layers.hpp"
#include "gne/matrix.hpp"
#include "gne/params.hpp"
#include "gne/rng.hpp"

namespace gne {

enum class LayerKind { EmbedGather, Affine, Tanh, Relu, Sigmoid, ResidualAdd, GaussianNoise };

inline const char* to_string(LayerKind k) {
  switch (k) {
  case LayerKind::EmbedGather: return "EmbedGather";
  case LayerKind::Affine: return "Affine";
  case LayerKind::Tanh: return "Tanh";
  case LayerKind::Relu: return "Relu";
  case LayerKind::Sigmoid: return "Sigmoid";
  case LayerKind::ResidualAdd: return "ResidualAdd";
  case LayerKind::GaussianNoise: return "GaussianNoise";
  }
  return "?";
}

inline constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

struct LayerNode {
  LayerKind kind;
  std::size_t weight = kNoIndex; // Affine W (in×out) or EmbedGather table
  std::size_t bias = kNoIndex;   // Affine b (1×out)
  double sigma = 0.0;            // GaussianNoise
  std::size_t partner = kNoIndex; // ResidualAdd: node whose output is added
};

/// Static layer list. Node k consumes the output of node k-1 (or the graph
/// input when k is the first executed node); ResidualAdd additionally adds the
/// output of its partner node.
class ModelGraph {
public:
  std::size_t add(LayerNode node) {
    nodes_.push_back(node);
    return nodes_.size() - 1;
  }

  std::size_t add_affine(ParamStore& params, const std::string& name, Matrix weight, std::size_t out) {
    LayerNode n{LayerKind::Affine};
    n.weight = params.add(name + ".W", std::move(weight));
    n.bias = params.add(name + ".b", Matrix(1, out));
    return add(n);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const LayerNode& operator[](std::size_t i) const { return nodes_.at(i); }
  LayerNode& operator[](std::size_t i) { return nodes_.at(i); }
  std::span<const LayerNode> nodes() const noexcept { return nodes_; }

  /// Kind names in execution order, e.g. for architecture comparisons.
  std::vector<std::string> layer_list() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) out.emplace_back(to_string(n.kind));
    return out;
  }

private:
  std::vector<LayerNode> nodes_;
};

/// Activations of one forward pass and the noise drawn during it.
struct Tape {
  std::size_t begin = 0;
  std::size_t node_count = 0;
  std::vector<std::size_t> ids; // set when the pass started at an EmbedGather
  Matrix input;                 // set when the pass started from a matrix
  std::vector<Matrix> outputs;  // per node; entries before `begin` stay empty
  std::vector<Matrix> noise;    // per node; empty unless a draw was made

  const Matrix& output() const { return outputs.back(); }
};

struct ForwardOptions {
  bool training = false;
  RngStream* rng = nullptr;
  /// Reuse the noise draws of an earlier tape instead of sampling.
  const Tape* replay = nullptr;
  std::size_t begin = 0;
};

namespace detail {

inline void run_nodes(const ModelGraph& graph, const ParamStore& params, Tape& tape,
                      const ForwardOptions& opt) {
  const Matrix* prev = &tape.input;
  for (std::size_t k = tape.begin; k < graph.size(); ++k) {
    const LayerNode& node = graph[k];
    Matrix out;
    switch (node.kind) {
    case LayerKind::EmbedGather:
      if (k != tape.begin) throw StateError("EmbedGather must be the first executed node");
      out = embed_gather(params.at(node.weight).value, tape.ids);
      break;
    case LayerKind::Affine:
      out = affine_forward(*prev, params.at(node.weight).value, params.at(node.bias).value);
      break;
    case LayerKind::Tanh: out = activation_forward(Activation::Tanh, *prev); break;
    case LayerKind::Relu: out = activation_forward(Activation::Relu, *prev); break;
    case LayerKind::Sigmoid: out = activation_forward(Activation::Sigmoid, *prev); break;
    case LayerKind::ResidualAdd:
      if (node.partner < tape.begin || node.partner >= k) {
        throw StateError("residual partner " + std::to_string(node.partner) +
                         " is not an executed predecessor of node " + std::to_string(k));
      }
      out = add(*prev, tape.outputs[node.partner]);
      break;
    case LayerKind::GaussianNoise:
      if (opt.replay) {
        const Matrix& draw = opt.replay->noise.at(k);
        if (draw.empty()) {
          out = *prev;
        } else {
          if (!draw.same_shape(*prev)) throw StateError("replayed noise shape mismatch");
          out = add(*prev, draw);
          tape.noise[k] = draw;
        }
      } else if (opt.training && node.sigma > 0.0) {
        if (!opt.rng) throw StateError("training-mode noise requires an rng");
        out = noise_forward(*prev, node.sigma, *opt.rng, true, &tape.noise[k]);
      } else {
        out = *prev;
      }
      break;
    }
    tape.outputs[k] = std::move(out);
    prev = &tape.outputs[k];
  }
}

inline Tape make_tape(const ModelGraph& graph, std::size_t begin) {
  if (begin >= graph.size()) throw StateError("forward begin index past end of graph");
  Tape t;
  t.begin = begin;
  t.node_count = graph.size();
  t.outputs.resize(graph.size());
  t.noise.resize(graph.size());
  return t;
}

} // namespace detail

/// Forward pass over integer ids; the first executed node must be an EmbedGather.
inline Tape forward(const ModelGraph& graph, const ParamStore& params,
                    std::span<const std::size_t> ids, const ForwardOptions& opt = {}) {
  Tape tape = detail::make_tape(graph, opt.begin);
  if (graph[opt.begin].kind != LayerKind::EmbedGather) {
    throw StateError("id input requires an EmbedGather start node");
  }
  tape.ids.assign(ids.begin(), ids.end());
  detail::run_nodes(graph, params, tape, opt);
  return tape;
}

/// Forward pass over a matrix input starting at node opt.begin.
inline Tape forward(const ModelGraph& graph, const ParamStore& params, Matrix input,
                    const ForwardOptions& opt = {}) {
  Tape tape = detail::make_tape(graph, opt.begin);
  if (graph[opt.begin].kind == LayerKind::EmbedGather) {
    throw StateError("matrix input cannot start at an EmbedGather node");
  }
  tape.input = std::move(input);
  detail::run_nodes(graph, params, tape, opt);
  return tape;
}

namespace detail {

inline Matrix backward_impl(const ModelGraph& graph, const Tape& tape, const Matrix& loss_grad,
                            const ParamStore& values, ParamStore* grads, bool want_input_grad) {
  if (tape.node_count != graph.size() || tape.outputs.size() != graph.size() ||
      tape.begin >= graph.size() || tape.outputs.back().empty()) {
    throw StateError("tape does not belong to this graph (" + std::to_string(tape.node_count) +
                     " recorded nodes, graph has " + std::to_string(graph.size()) + ")");
  }
  if (!loss_grad.same_shape(tape.output())) {
    throw ShapeError("backward: loss gradient " + loss_grad.shape() + " vs output " +
                     tape.output().shape());
  }
  std::vector<Matrix> grad_out(graph.size());
  grad_out.back() = loss_grad;
  Matrix input_grad;

  auto accumulate = [](Matrix& slot, Matrix&& g) {
    if (slot.empty()) slot = std::move(g);
    else add_inplace(slot, g);
  };

  for (std::size_t k = graph.size(); k-- > tape.begin;) {
    const LayerNode& node = graph[k];
    Matrix g = std::move(grad_out[k]);
    const bool first = k == tape.begin;
    const Matrix& x = first ? tape.input : tape.outputs[k - 1];
    const bool need_dx = !first || want_input_grad;
    Matrix dx;
    switch (node.kind) {
    case LayerKind::EmbedGather:
      if (grads) embed_gather_backward(grads->at(node.weight).grad, tape.ids, g);
      break;
    case LayerKind::Affine: {
      if (grads) {
        dx = affine_backward(x, values.at(node.weight).value, g, grads->at(node.weight).grad,
                             grads->at(node.bias).grad, need_dx);
      } else if (need_dx) {
        dx = matmul_nt(g, values.at(node.weight).value);
      }
      break;
    }
    case LayerKind::Tanh: dx = activation_backward(Activation::Tanh, x, tape.outputs[k], g); break;
    case LayerKind::Relu: dx = activation_backward(Activation::Relu, x, tape.outputs[k], g); break;
    case LayerKind::Sigmoid:
      dx = activation_backward(Activation::Sigmoid, x, tape.outputs[k], g);
      break;
    case LayerKind::ResidualAdd:
      accumulate(grad_out[node.partner], Matrix(g));
      dx = std::move(g);
      break;
    case LayerKind::GaussianNoise: dx = std::move(g); break;
    }
    if (node.kind == LayerKind::EmbedGather) continue;
    if (first) {
      if (want_input_grad) input_grad = std::move(dx);
    } else {
      accumulate(grad_out[k - 1], std::move(dx));
    }
  }
  return input_grad;
}

} // namespace detail

/// Accumulates ∂loss/∂param into params' gradient tensors (callers zero them
/// first). Returns the gradient with respect to the matrix input when the pass
/// started from one and want_input_grad is set.
inline Matrix backward(const ModelGraph& graph, const Tape& tape, const Matrix& loss_grad,
                       ParamStore& params, bool want_input_grad = true) {
  return detail::backward_impl(graph, tape, loss_grad, params, &params, want_input_grad);
}

/// Input gradient only; parameters are read, never written.
inline Matrix backward_input(const ModelGraph& graph, const Tape& tape, const Matrix& loss_grad,
                             const ParamStore& params) {
  return detail::backward_impl(graph, tape, loss_grad, params, nullptr, true);
}

} // namespace gne

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "seldist/errors.hpp"

namespace seldist {

// Row-major extents; every extent is positive.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class Tape;
class GradTable;

// Dense double-precision array with value semantics. Data is shared
// copy-on-write, so passing tensors around and saving them inside backward
// closures is cheap. A tensor optionally carries a handle (node id) into the
// tape that produced it; handles from older tapes are ignored, so parameters
// can outlive many training steps and simply be re-watched each step.
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(const Shape& s) { return Tensor(s); }
  static Tensor full(const Shape& s, double v);

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  std::size_t size() const { return data_->size(); }
  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& mutable_data();  // detaches shared storage first

  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return requires_grad_; }
  long node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }

  // Value-equal tensor sharing storage but carrying no tape handle.
  Tensor constant_view() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  long node_ = -1;
  std::uint64_t tape_id_ = 0;
  bool requires_grad_ = false;
};

// Per-node gradient buffers accumulated during one backward sweep.
class GradSink {
 public:
  // Zero-initialized buffer of length n for a node; repeated calls return the
  // same buffer so multiple consumers accumulate.
  double* acc(long node, std::size_t n);
  const std::vector<double>* find(long node) const;

 private:
  friend class Tape;
  std::unordered_map<long, std::vector<double>> bufs_;
};

using BackwardFn =
    std::function<void(const std::vector<double>& grad_out, GradSink& sink)>;

// Gradients for every watched leaf of one backward pass; leaves the loss never
// touched are present with zero values.
class GradTable {
 public:
  const Tensor& at(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;

 private:
  friend class Tape;
  std::unordered_map<long, Tensor> grads_;
  std::uint64_t tape_id_ = 0;
};

// Ordered record of primitive applications. Construction installs the tape as
// the thread-current one; destruction restores the previous. Ops record onto
// the current tape whenever at least one input is live on it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Mark t as a differentiable leaf of this tape (overwrites stale handles).
  void watch(Tensor& t);

  // Append a node; inputs are node ids of live operands (order as applied).
  long record(const char* op, const Shape& out_shape, std::vector<long> inputs,
              BackwardFn fn);

  // Bind a freshly produced tensor to a recorded node (ops layer use).
  void tag(Tensor& t, long node) {
    t.node_ = node;
    t.tape_id_ = id_;
  }

  // Reverse sweep from a scalar loss. Throws ValueError if loss is not a
  // scalar on this tape.
  GradTable backward(const Tensor& loss);

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct NodeRec {
    const char* op;
    Shape shape;
    std::vector<long> inputs;
    BackwardFn fn;  // empty for leaves
  };
  std::vector<NodeRec> nodes_;
  std::vector<long> leaves_;
  std::uint64_t id_;
  Tape* prev_ = nullptr;

  friend long tape_node(const Tensor&);
};

// Node id of t on the thread-current tape, or -1 when t is constant w.r.t. it
// (no tape, never watched, or watched on an older tape).
long tape_node(const Tensor& t);

}  // namespace seldist

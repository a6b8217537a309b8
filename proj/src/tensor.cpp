#include "seldist/tensor.hpp"

#include <atomic>
#include <cstdio>

namespace seldist {

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= std::size_t(e);
  return n;
}

static void check_shape(const Shape& s) {
  if (s.empty()) throw ShapeError("tensor: empty shape");
  for (int e : s)
    if (e <= 0)
      throw ShapeError("tensor: non-positive extent in shape " + shape_str(s));
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_ = std::make_shared<std::vector<double>>(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  check_shape(shape_);
  if (values.size() != shape_size(shape_))
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape_));
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, {v}); }

Tensor Tensor::full(const Shape& s, double v) {
  Tensor t(s);
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

std::vector<double>& Tensor::mutable_data() {
  if (data_.use_count() > 1)
    data_ = std::make_shared<std::vector<double>>(*data_);
  return *data_;
}

double Tensor::value() const {
  if (size() != 1)
    throw ValueError("value: tensor of shape " + shape_str(shape_) +
                     " is not a scalar");
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (idx.size() != shape_.size())
    throw ShapeError("at: " + std::to_string(idx.size()) +
                     " indices for shape " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t d = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape_[d])
      throw ValueError("at: index " + std::to_string(i) + " out of range for " +
                       shape_str(shape_));
    off = off * std::size_t(shape_[d]) + std::size_t(i);
    ++d;
  }
  return (*data_)[off];
}

double* GradSink::acc(long node, std::size_t n) {
  auto& buf = bufs_[node];
  if (buf.empty()) buf.assign(n, 0.0);
  return buf.data();
}

const std::vector<double>* GradSink::find(long node) const {
  auto it = bufs_.find(node);
  return it == bufs_.end() ? nullptr : &it->second;
}

const Tensor& GradTable::at(const Tensor& leaf) const {
  if (leaf.tape_id() != tape_id_ || !grads_.count(leaf.node()))
    throw ValueError("grad table: tensor was not a watched leaf of this tape");
  return grads_.at(leaf.node());
}

bool GradTable::contains(const Tensor& leaf) const {
  return leaf.tape_id() == tape_id_ && grads_.count(leaf.node()) != 0;
}

namespace {
thread_local Tape* g_current_tape = nullptr;
std::atomic<std::uint64_t> g_tape_counter{0};
}  // namespace

Tape::Tape() : id_(++g_tape_counter) {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::watch(Tensor& t) {
  nodes_.push_back(NodeRec{"leaf", t.shape_, {}, BackwardFn{}});
  t.node_ = long(nodes_.size()) - 1;
  t.tape_id_ = id_;
  t.requires_grad_ = true;
  leaves_.push_back(t.node_);
}

long Tape::record(const char* op, const Shape& out_shape,
                  std::vector<long> inputs, BackwardFn fn) {
  nodes_.push_back(NodeRec{op, out_shape, std::move(inputs), std::move(fn)});
  return long(nodes_.size()) - 1;
}

GradTable Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ValueError("backward: loss of shape " + shape_str(loss.shape()) +
                     " is not a scalar");
  if (loss.tape_id() != id_ || loss.node() < 0)
    throw ValueError("backward: loss is not on this tape");

  GradSink sink;
  sink.acc(loss.node(), 1)[0] = 1.0;
  for (long n = loss.node(); n >= 0; --n) {
    auto it = sink.bufs_.find(n);
    if (it == sink.bufs_.end()) continue;
    const NodeRec& rec = nodes_[std::size_t(n)];
    if (rec.fn) rec.fn(it->second, sink);
  }

  GradTable table;
  table.tape_id_ = id_;
  for (long leaf : leaves_) {
    auto it = sink.bufs_.find(leaf);
    if (it != sink.bufs_.end())
      table.grads_.emplace(leaf,
                           Tensor(nodes_[std::size_t(leaf)].shape,
                                  std::move(it->second)));
    else
      table.grads_.emplace(leaf, Tensor(nodes_[std::size_t(leaf)].shape));
  }
  return table;
}

long tape_node(const Tensor& t) {
  Tape* tp = Tape::current();
  if (!tp) return -1;
  if (t.tape_id() != tp->id()) return -1;
  return t.node();
}

}  // namespace seldist

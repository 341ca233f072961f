#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rnnctp::ad {

class DiffError : public std::runtime_error {
 public:
  explicit DiffError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Tensor {
  std::vector<size_t> shape;  // {} scalar, {n} vector, {r,c} matrix
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    data.assign(size_from(shape), 0.0);
  }
  static size_t size_from(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }
  static Tensor scalar(double v) {
    Tensor t{std::vector<size_t>{}};
    t.data[0] = v;
    return t;
  }
  static Tensor vector(std::vector<double> v) {
    Tensor t;
    t.shape = {v.size()};
    t.data = std::move(v);
    return t;
  }
  size_t size() const { return data.size(); }
  size_t rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 1 : shape[0]); }
  size_t cols() const { return shape.size() == 2 ? shape[1] : 1; }
  double* row_ptr(size_t r) { return data.data() + r * cols(); }
  const double* row_ptr(size_t r) const { return data.data() + r * cols(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

enum class ParamGroup : uint8_t { Prover = 0, Selector = 1 };

// Named trainable tensors with per-tensor gradient buffers. Parameters are
// registered exactly once; ids are dense and stable.
class ParameterStore {
 public:
  uint32_t add(const std::string& name, Tensor t, ParamGroup group = ParamGroup::Prover);
  uint32_t id(std::string_view name) const;
  bool has(std::string_view name) const;
  size_t count() const { return tensors_.size(); }

  Tensor& tensor(uint32_t id) { return tensors_.at(id); }
  const Tensor& tensor(uint32_t id) const { return tensors_.at(id); }
  Tensor& grad(uint32_t id) { return grads_.at(id); }
  const Tensor& grad(uint32_t id) const { return grads_.at(id); }
  const std::string& name(uint32_t id) const { return names_.at(id); }
  ParamGroup group(uint32_t id) const { return groups_.at(id); }

  void zero_grads();
  // Throws DiffError naming the first parameter whose gradient is not finite.
  void check_grads_finite() const;
  bool values_finite() const;

  // Snapshot format: version byte, little-endian u32 header length, JSON
  // header (named tensor offsets, shapes, groups, caller extras), raw
  // little-endian doubles.
  void save(const std::filesystem::path& path, const std::string& extra_json) const;
  static std::pair<ParameterStore, std::string> load(const std::filesystem::path& path);

 private:
  std::vector<Tensor> tensors_;
  std::vector<Tensor> grads_;
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
  std::unordered_map<std::string, uint32_t> index_;
};

using NodeId = uint32_t;
inline constexpr NodeId kNoNode = UINT32_MAX;
inline constexpr uint32_t kNoBound = UINT32_MAX;

// View of the ground-fact arrays the chain ops scan. The referenced arrays
// must outlive the graph.
struct FactsRef {
  const uint32_t* pred = nullptr;
  const uint32_t* subj = nullptr;
  const uint32_t* obj = nullptr;
  size_t count = 0;
};

// A batched unification of one subgoal pattern against the fact store, for a
// cohort of proof states that differ only in the constant bound to the chain
// slot. `priors[i]` is state i's score, `bindings[i]` its chain-slot
// constant. The non-chain slot is either bound to `other` (chain_max) or a
// free variable that the sweep binds (chain_join).
struct ChainArgs {
  std::span<const NodeId> priors;
  std::span<const uint32_t> bindings;
  NodeId pred = kNoNode;           // subgoal predicate vector (length k)
  uint32_t other = kNoBound;       // bound constant of the non-chain slot
  bool chain_on_subject = true;    // chain slot is the subject position
  uint32_t exclude = UINT32_MAX;   // fact index masked out, if any
  double sigma = 1.0;
};

// Chosen-pair codes: 0 prior, 1 predicate pair, 2 chain-slot pair,
// 3 other-slot pair.
struct ChainGroupOut {
  uint32_t binding;  // chain_join: constant bound to the free slot;
                     // chain_max: the input binding (same order as priors)
  uint32_t fact;     // fact index realizing the max
  uint32_t alt;      // chain_max: chain-slot constant of the chosen fact;
                     // chain_join: index into priors of the chosen state
  uint8_t slot;
};

enum class Op : uint8_t {
  Input,
  Param,
  ParamRow,
  Add,
  Sub,
  Mul,
  Scale,
  Concat,
  MatVec,
  VecMat,
  Dot,
  Sigmoid,
  Tanh,
  Log,
  Clamp,
  Softmax,
  Kernel,
  Sum,
  MinList,
  MaxList,
  SumList,
  Pick,
  LogSoftmaxPick,
  ChainMax,
  ChainJoin,
};

struct Node {
  Op op;
  uint8_t flag = 0;
  uint32_t a = kNoNode, b = kNoNode, c = kNoNode;
  uint32_t len = 0;
  uint32_t off = 0;
  uint32_t aux = 0;
  double x = 0.0, y = 0.0;
};

// Eager reverse-mode tape over double-precision values. Forward values are
// computed at node construction so the prover can branch on scores while
// building the graph.
class Graph {
 public:
  explicit Graph(ParameterStore* params = nullptr, bool check_finite = true);

  // Required before using chain ops: the fact arrays plus the parameter ids
  // of the predicate/constant embedding tables.
  void set_facts(FactsRef facts, uint32_t pred_table, uint32_t const_table);

  NodeId input(std::span<const double> v);
  NodeId input(double v);
  NodeId param(uint32_t param_id);
  NodeId param(std::string_view name);
  NodeId param_row(uint32_t param_id, size_t row);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId concat(NodeId a, NodeId b);
  NodeId matvec(NodeId w, NodeId x);  // (r x c) * (c) -> (r)
  NodeId vecmat(NodeId x, NodeId w);  // (r) * (r x c) -> (c)
  NodeId dot(NodeId a, NodeId b);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId log(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId softmax(NodeId a);
  NodeId kernel(NodeId a, NodeId b, double sigma);
  NodeId sum(NodeId a);
  NodeId min_list(std::span<const NodeId> xs);
  NodeId max_list(std::span<const NodeId> xs);
  NodeId sum_list(std::span<const NodeId> xs);
  NodeId pick(NodeId v, size_t i);
  NodeId log_softmax_pick(NodeId logits, size_t target);

  // Terminal sweep: both slots resolved. Output i continues state i.
  // Returns kNoNode when no eligible fact exists.
  NodeId chain_max(const ChainArgs& args, std::vector<ChainGroupOut>* out);
  // Binding sweep: the non-chain slot is free; outputs are grouped by the
  // constant it binds to, exactly preserving the max over all member states.
  NodeId chain_join(const ChainArgs& args, std::vector<ChainGroupOut>* out);

  std::span<const double> value(NodeId id) const;
  double value1(NodeId id) const;
  size_t length(NodeId id) const { return nodes_[id].len; }
  // MinList/MaxList: position of the argument that realized the extremum.
  uint32_t chosen(NodeId id) const { return nodes_[id].c; }

  // Reverse pass from a scalar loss. Accumulates into the parameter store's
  // gradient buffers (call store.zero_grads() to reset between steps).
  void backward(NodeId loss);

  // Convenience for tests: zeroes grads, runs backward, returns a name ->
  // gradient map and checks finiteness.
  std::map<std::string, Tensor> gradients(NodeId loss);

  size_t num_nodes() const { return nodes_.size(); }
  ParameterStore* params() const { return params_; }

 private:
  struct ChainRec {
    std::vector<NodeId> priors;
    std::vector<uint32_t> bindings;
    NodeId pred;
    uint32_t other;
    bool chain_on_subject;
    uint32_t exclude;
    double sigma;
    std::vector<ChainGroupOut> out;
  };

  NodeId push(Node n, size_t len);
  double* out_ptr(NodeId id) { return vals_.data() + nodes_[id].off; }
  const double* out_ptr(NodeId id) const { return vals_.data() + nodes_[id].off; }
  double* grad_ptr(NodeId id) { return grads_.data() + nodes_[id].off; }
  void require(bool cond, const char* what) const;
  void check_node_finite(NodeId id);
  void backward_node(NodeId id);

  const std::vector<double>& const_kernel_row(uint32_t c, double sigma);
  const std::vector<double>& pred_kernel_row(NodeId pred, double sigma);
  void chain_backward(const ChainRec& rec, size_t out_index, double out_v,
                      double gv, bool join);
  void add_pair_grad(uint32_t table, uint32_t row_a, uint32_t row_b, double v,
                     double g, double sigma);

  ParameterStore* params_;
  bool check_finite_;
  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> grads_;
  std::vector<uint32_t> extra_;
  std::vector<ChainRec> chains_;
  FactsRef facts_;
  uint32_t pred_table_ = UINT32_MAX, const_table_ = UINT32_MAX;
  std::unordered_map<uint32_t, std::vector<double>> const_row_memo_;
  std::unordered_map<NodeId, std::vector<double>> pred_row_memo_;
  std::unordered_map<uint32_t, NodeId> param_memo_;
  std::unordered_map<uint64_t, NodeId> row_memo_;
  double memo_sigma_ = 0.0;
};

// Gaussian kernel on plain values; the fused ops and utilities share it.
double gaussian_kernel_value(std::span<const double> x, std::span<const double> y,
                             double sigma);

struct GruParams {
  uint32_t wz, uz, bz;
  uint32_t wr, ur, br;
  uint32_t wh, uh, bh;
};

// Standard GRU cell composed from primitive ops:
//   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
//   hh = tanh(Wh x + Uh (r*h) + bh), h' = (1-z)*h + z*hh.
NodeId gru_cell(Graph& g, NodeId h, NodeId x, const GruParams& p);

// Adaptive-moment gradient descent over a parameter group.
class Adam {
 public:
  explicit Adam(double lr = 0.01, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& store, ParamGroup group);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<uint32_t, std::pair<Tensor, Tensor>> moments_;
  std::unordered_map<uint8_t, int64_t> steps_;
};

}  // namespace rnnctp::ad

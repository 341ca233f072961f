#include "autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace rnnctp::ad {

namespace {

bool all_finite(const double* p, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

}  // namespace

double gaussian_kernel_value(std::span<const double> x, std::span<const double> y,
                             double sigma) {
  if (x.size() != y.size()) {
    throw DiffError("gaussian kernel shape mismatch: " + std::to_string(x.size()) +
                    " vs " + std::to_string(y.size()));
  }
  if (!(sigma > 0.0)) throw DiffError("gaussian kernel requires sigma > 0");
  double d2 = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    d2 += d * d;
  }
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

uint32_t ParameterStore::add(const std::string& name, Tensor t, ParamGroup group) {
  if (index_.count(name)) throw DiffError("parameter registered twice: " + name);
  uint32_t id = static_cast<uint32_t>(tensors_.size());
  grads_.emplace_back(Tensor{t.shape});
  tensors_.push_back(std::move(t));
  names_.push_back(name);
  groups_.push_back(group);
  index_.emplace(name, id);
  return id;
}

uint32_t ParameterStore::id(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw DiffError("unknown parameter: " + std::string(name));
  return it->second;
}

bool ParameterStore::has(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

void ParameterStore::zero_grads() {
  for (auto& g : grads_) g.fill(0.0);
}

void ParameterStore::check_grads_finite() const {
  for (size_t i = 0; i < grads_.size(); ++i) {
    if (!all_finite(grads_[i].data.data(), grads_[i].size())) {
      throw DiffError("non-finite gradient for parameter " + names_[i]);
    }
  }
}

bool ParameterStore::values_finite() const {
  for (const auto& t : tensors_) {
    if (!all_finite(t.data.data(), t.size())) return false;
  }
  return true;
}

void ParameterStore::save(const std::filesystem::path& path,
                          const std::string& extra_json) const {
  nlohmann::json header;
  header["extras"] = extra_json.empty() ? nlohmann::json::object()
                                        : nlohmann::json::parse(extra_json);
  nlohmann::json tensors = nlohmann::json::object();
  uint64_t offset = 0;
  for (size_t i = 0; i < tensors_.size(); ++i) {
    tensors[names_[i]] = {{"offset", offset},
                          {"shape", tensors_[i].shape},
                          {"group", static_cast<int>(groups_[i])}};
    offset += tensors_[i].size();
  }
  header["tensors"] = tensors;
  header["order"] = names_;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DiffError("cannot open snapshot for writing: " + path.string());
  uint8_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 1);
  uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : tensors_) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DiffError("failed writing snapshot " + path.string());
}

std::pair<ParameterStore, std::string> ParameterStore::load(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DiffError("cannot open snapshot: " + path.string());
  uint8_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 1);
  if (!in || version != 1) throw DiffError("unsupported snapshot version");
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw DiffError("truncated snapshot header");
  nlohmann::json header = nlohmann::json::parse(hs);

  ParameterStore store;
  for (const auto& name : header.at("order").get<std::vector<std::string>>()) {
    const auto& meta = header.at("tensors").at(name);
    Tensor t{meta.at("shape").get<std::vector<size_t>>()};
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw DiffError("truncated snapshot tensor: " + name);
    store.add(name, std::move(t),
              static_cast<ParamGroup>(meta.at("group").get<int>()));
  }
  return {std::move(store), header.at("extras").dump()};
}

Graph::Graph(ParameterStore* params, bool check_finite)
    : params_(params), check_finite_(check_finite) {
  nodes_.reserve(1024);
  vals_.reserve(8192);
}

void Graph::set_facts(FactsRef facts, uint32_t pred_table, uint32_t const_table) {
  facts_ = facts;
  pred_table_ = pred_table;
  const_table_ = const_table;
}

void Graph::require(bool cond, const char* what) const {
  if (!cond) throw DiffError(what);
}

NodeId Graph::push(Node n, size_t len) {
  n.len = static_cast<uint32_t>(len);
  n.off = static_cast<uint32_t>(vals_.size());
  vals_.resize(vals_.size() + len, 0.0);
  nodes_.push_back(n);
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_node_finite(NodeId id) {
  if (!check_finite_) return;
  const Node& n = nodes_[id];
  if (!all_finite(out_ptr(id), n.len)) {
    throw DiffError("non-finite value in forward pass (op " +
                    std::to_string(static_cast<int>(n.op)) + ")");
  }
}

NodeId Graph::input(std::span<const double> v) {
  NodeId id = push(Node{Op::Input}, v.size());
  std::copy(v.begin(), v.end(), out_ptr(id));
  check_node_finite(id);
  return id;
}

NodeId Graph::input(double v) { return input(std::span<const double>(&v, 1)); }

NodeId Graph::param(uint32_t param_id) {
  require(params_ != nullptr, "graph has no parameter store");
  // Parameters are frozen for the graph's lifetime, so one node per tensor.
  auto it = param_memo_.find(param_id);
  if (it != param_memo_.end()) return it->second;
  const Tensor& t = params_->tensor(param_id);
  Node n{Op::Param};
  n.a = param_id;
  NodeId id = push(n, t.size());
  std::copy(t.data.begin(), t.data.end(), out_ptr(id));
  check_node_finite(id);
  param_memo_.emplace(param_id, id);
  return id;
}

NodeId Graph::param(std::string_view name) { return param(params_->id(name)); }

NodeId Graph::param_row(uint32_t param_id, size_t row) {
  require(params_ != nullptr, "graph has no parameter store");
  uint64_t key = (static_cast<uint64_t>(param_id) << 32) | row;
  auto it = row_memo_.find(key);
  if (it != row_memo_.end()) return it->second;
  const Tensor& t = params_->tensor(param_id);
  require(row < t.rows(), "parameter row out of range");
  Node n{Op::ParamRow};
  n.a = param_id;
  n.b = static_cast<uint32_t>(row);
  NodeId id = push(n, t.cols());
  const double* src = t.row_ptr(row);
  std::copy(src, src + t.cols(), out_ptr(id));
  check_node_finite(id);
  row_memo_.emplace(key, id);
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) {
  require(nodes_[a].len == nodes_[b].len, "add: shape mismatch");
  Node n{Op::Add};
  n.a = a;
  n.b = b;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  const double* pb = out_ptr(b);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = pa[i] + pb[i];
  check_node_finite(id);
  return id;
}

NodeId Graph::sub(NodeId a, NodeId b) {
  require(nodes_[a].len == nodes_[b].len, "sub: shape mismatch");
  Node n{Op::Sub};
  n.a = a;
  n.b = b;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  const double* pb = out_ptr(b);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = pa[i] - pb[i];
  check_node_finite(id);
  return id;
}

NodeId Graph::mul(NodeId a, NodeId b) {
  require(nodes_[a].len == nodes_[b].len, "mul: shape mismatch");
  Node n{Op::Mul};
  n.a = a;
  n.b = b;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  const double* pb = out_ptr(b);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = pa[i] * pb[i];
  check_node_finite(id);
  return id;
}

NodeId Graph::scale(NodeId a, double c) {
  Node n{Op::Scale};
  n.a = a;
  n.x = c;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = pa[i] * c;
  check_node_finite(id);
  return id;
}

NodeId Graph::concat(NodeId a, NodeId b) {
  Node n{Op::Concat};
  n.a = a;
  n.b = b;
  size_t la = nodes_[a].len, lb = nodes_[b].len;
  NodeId id = push(n, la + lb);
  double* po = out_ptr(id);
  std::copy(out_ptr(a), out_ptr(a) + la, po);
  std::copy(out_ptr(b), out_ptr(b) + lb, po + la);
  return id;
}

NodeId Graph::matvec(NodeId w, NodeId x) {
  size_t c = nodes_[x].len;
  require(c > 0 && nodes_[w].len % c == 0, "matvec: shape mismatch");
  size_t r = nodes_[w].len / c;
  Node n{Op::MatVec};
  n.a = w;
  n.b = x;
  NodeId id = push(n, r);
  const double* pw = out_ptr(w);
  const double* px = out_ptr(x);
  double* po = out_ptr(id);
  for (size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    const double* row = pw + i * c;
    for (size_t j = 0; j < c; ++j) acc += row[j] * px[j];
    po[i] = acc;
  }
  check_node_finite(id);
  return id;
}

NodeId Graph::vecmat(NodeId x, NodeId w) {
  size_t r = nodes_[x].len;
  require(r > 0 && nodes_[w].len % r == 0, "vecmat: shape mismatch");
  size_t c = nodes_[w].len / r;
  Node n{Op::VecMat};
  n.a = x;
  n.b = w;
  NodeId id = push(n, c);
  const double* px = out_ptr(x);
  const double* pw = out_ptr(w);
  double* po = out_ptr(id);
  for (size_t j = 0; j < c; ++j) po[j] = 0.0;
  for (size_t i = 0; i < r; ++i) {
    double xi = px[i];
    const double* row = pw + i * c;
    for (size_t j = 0; j < c; ++j) po[j] += xi * row[j];
  }
  check_node_finite(id);
  return id;
}

NodeId Graph::dot(NodeId a, NodeId b) {
  require(nodes_[a].len == nodes_[b].len, "dot: shape mismatch");
  Node n{Op::Dot};
  n.a = a;
  n.b = b;
  NodeId id = push(n, 1);
  const double* pa = out_ptr(a);
  const double* pb = out_ptr(b);
  double acc = 0.0;
  for (size_t i = 0; i < nodes_[a].len; ++i) acc += pa[i] * pb[i];
  out_ptr(id)[0] = acc;
  check_node_finite(id);
  return id;
}

NodeId Graph::sigmoid(NodeId a) {
  Node n{Op::Sigmoid};
  n.a = a;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
  check_node_finite(id);
  return id;
}

NodeId Graph::tanh(NodeId a) {
  Node n{Op::Tanh};
  n.a = a;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = std::tanh(pa[i]);
  check_node_finite(id);
  return id;
}

NodeId Graph::log(NodeId a) {
  Node n{Op::Log};
  n.a = a;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = std::log(pa[i]);
  check_node_finite(id);
  return id;
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  Node n{Op::Clamp};
  n.a = a;
  n.x = lo;
  n.y = hi;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  for (size_t i = 0; i < nodes_[id].len; ++i) po[i] = std::min(std::max(pa[i], lo), hi);
  return id;
}

NodeId Graph::softmax(NodeId a) {
  Node n{Op::Softmax};
  n.a = a;
  NodeId id = push(n, nodes_[a].len);
  const double* pa = out_ptr(a);
  double* po = out_ptr(id);
  size_t len = nodes_[id].len;
  double m = pa[0];
  for (size_t i = 1; i < len; ++i) m = std::max(m, pa[i]);
  double z = 0.0;
  for (size_t i = 0; i < len; ++i) {
    po[i] = std::exp(pa[i] - m);
    z += po[i];
  }
  for (size_t i = 0; i < len; ++i) po[i] /= z;
  check_node_finite(id);
  return id;
}

NodeId Graph::kernel(NodeId a, NodeId b, double sigma) {
  require(nodes_[a].len == nodes_[b].len, "kernel: shape mismatch");
  require(sigma > 0.0, "kernel: sigma must be positive");
  Node n{Op::Kernel};
  n.a = a;
  n.b = b;
  n.x = sigma;
  NodeId id = push(n, 1);
  out_ptr(id)[0] = gaussian_kernel_value(value(a), value(b), sigma);
  check_node_finite(id);
  return id;
}

NodeId Graph::sum(NodeId a) {
  Node n{Op::Sum};
  n.a = a;
  NodeId id = push(n, 1);
  const double* pa = out_ptr(a);
  double acc = 0.0;
  for (size_t i = 0; i < nodes_[a].len; ++i) acc += pa[i];
  out_ptr(id)[0] = acc;
  check_node_finite(id);
  return id;
}

NodeId Graph::min_list(std::span<const NodeId> xs) {
  require(!xs.empty(), "min_list: empty argument list");
  Node n{Op::MinList};
  n.aux = static_cast<uint32_t>(extra_.size());
  n.b = static_cast<uint32_t>(xs.size());
  for (NodeId x : xs) {
    require(nodes_[x].len == 1, "min_list: arguments must be scalars");
    extra_.push_back(x);
  }
  NodeId id = push(n, 1);
  double best = vals_[nodes_[xs[0]].off];
  uint32_t arg = 0;
  for (size_t i = 1; i < xs.size(); ++i) {
    double v = vals_[nodes_[xs[i]].off];
    if (v < best) {
      best = v;
      arg = static_cast<uint32_t>(i);
    }
  }
  nodes_[id].c = arg;
  out_ptr(id)[0] = best;
  return id;
}

NodeId Graph::max_list(std::span<const NodeId> xs) {
  require(!xs.empty(), "max_list: empty argument list");
  Node n{Op::MaxList};
  n.aux = static_cast<uint32_t>(extra_.size());
  n.b = static_cast<uint32_t>(xs.size());
  for (NodeId x : xs) {
    require(nodes_[x].len == 1, "max_list: arguments must be scalars");
    extra_.push_back(x);
  }
  NodeId id = push(n, 1);
  double best = vals_[nodes_[xs[0]].off];
  uint32_t arg = 0;
  for (size_t i = 1; i < xs.size(); ++i) {
    double v = vals_[nodes_[xs[i]].off];
    if (v > best) {
      best = v;
      arg = static_cast<uint32_t>(i);
    }
  }
  nodes_[id].c = arg;
  out_ptr(id)[0] = best;
  return id;
}

NodeId Graph::sum_list(std::span<const NodeId> xs) {
  require(!xs.empty(), "sum_list: empty argument list");
  Node n{Op::SumList};
  n.aux = static_cast<uint32_t>(extra_.size());
  n.b = static_cast<uint32_t>(xs.size());
  for (NodeId x : xs) {
    require(nodes_[x].len == 1, "sum_list: arguments must be scalars");
    extra_.push_back(x);
  }
  NodeId id = push(n, 1);
  double acc = 0.0;
  for (NodeId x : xs) acc += vals_[nodes_[x].off];
  out_ptr(id)[0] = acc;
  check_node_finite(id);
  return id;
}

NodeId Graph::pick(NodeId v, size_t i) {
  require(i < nodes_[v].len, "pick: index out of range");
  Node n{Op::Pick};
  n.a = v;
  n.b = static_cast<uint32_t>(i);
  NodeId id = push(n, 1);
  out_ptr(id)[0] = out_ptr(v)[i];
  return id;
}

NodeId Graph::log_softmax_pick(NodeId logits, size_t target) {
  require(target < nodes_[logits].len, "log_softmax_pick: target out of range");
  Node n{Op::LogSoftmaxPick};
  n.a = logits;
  n.b = static_cast<uint32_t>(target);
  NodeId id = push(n, 1);
  const double* pl = out_ptr(logits);
  size_t len = nodes_[logits].len;
  double m = pl[0];
  for (size_t i = 1; i < len; ++i) m = std::max(m, pl[i]);
  double z = 0.0;
  for (size_t i = 0; i < len; ++i) z += std::exp(pl[i] - m);
  out_ptr(id)[0] = pl[target] - m - std::log(z);
  check_node_finite(id);
  return id;
}

const std::vector<double>& Graph::const_kernel_row(uint32_t c, double sigma) {
  if (memo_sigma_ == 0.0) memo_sigma_ = sigma;
  require(memo_sigma_ == sigma, "chain ops must share one sigma per graph");
  auto it = const_row_memo_.find(c);
  if (it != const_row_memo_.end()) return it->second;
  const Tensor& tab = params_->tensor(const_table_);
  size_t n = tab.rows(), k = tab.cols();
  std::vector<double> row(n);
  std::span<const double> q(tab.row_ptr(c), k);
  for (size_t j = 0; j < n; ++j) {
    row[j] = gaussian_kernel_value(q, std::span<const double>(tab.row_ptr(j), k), sigma);
  }
  return const_row_memo_.emplace(c, std::move(row)).first->second;
}

const std::vector<double>& Graph::pred_kernel_row(NodeId pred, double sigma) {
  if (memo_sigma_ == 0.0) memo_sigma_ = sigma;
  require(memo_sigma_ == sigma, "chain ops must share one sigma per graph");
  auto it = pred_row_memo_.find(pred);
  if (it != pred_row_memo_.end()) return it->second;
  const Tensor& tab = params_->tensor(pred_table_);
  size_t n = tab.rows(), k = tab.cols();
  require(nodes_[pred].len == k, "chain op: predicate vector length mismatch");
  std::vector<double> row(n);
  std::span<const double> q(out_ptr(pred), k);
  for (size_t j = 0; j < n; ++j) {
    row[j] = gaussian_kernel_value(q, std::span<const double>(tab.row_ptr(j), k), sigma);
  }
  return pred_row_memo_.emplace(pred, std::move(row)).first->second;
}

// Terminal sweep. For state i with chain-slot constant z_i and fixed other
// constant o: out[i] = max over facts f of
//   min(prior_i, kp[pred_f], K[z_i, chain_f], ko[other_f]).
// The inner max is taken bucketed by the fact's chain-slot constant, which
// is exact because min is monotone in each argument.
NodeId Graph::chain_max(const ChainArgs& args, std::vector<ChainGroupOut>* out) {
  require(params_ && facts_.count > 0, "chain op without facts");
  require(args.priors.size() == args.bindings.size(), "chain_max: priors/bindings mismatch");
  require(!args.priors.empty(), "chain_max: empty cohort");
  require(args.other != kNoBound, "chain_max: other slot must be bound");

  const std::vector<double>& kp = pred_kernel_row(args.pred, args.sigma);
  const std::vector<double>& ko = const_kernel_row(args.other, args.sigma);
  const uint32_t* fact_pred = facts_.pred;
  const uint32_t* fact_chain = args.chain_on_subject ? facts_.subj : facts_.obj;
  const uint32_t* fact_other = args.chain_on_subject ? facts_.obj : facts_.subj;

  const size_t n_const = params_->tensor(const_table_).rows();
  // M[s] = max over facts with chain-slot constant s of min(kp, ko), with the
  // realizing fact index.
  std::vector<double> m_val(n_const, -1.0);
  std::vector<uint32_t> m_fact(n_const, UINT32_MAX);
  size_t eligible = 0;
  for (size_t f = 0; f < facts_.count; ++f) {
    if (static_cast<uint32_t>(f) == args.exclude) continue;
    eligible++;
    double v = std::min(kp[fact_pred[f]], ko[fact_other[f]]);
    uint32_t s = fact_chain[f];
    if (v > m_val[s]) {
      m_val[s] = v;
      m_fact[s] = static_cast<uint32_t>(f);
    }
  }
  if (eligible == 0) {
    if (out) out->clear();
    return kNoNode;
  }

  Node n{Op::ChainMax};
  n.aux = static_cast<uint32_t>(chains_.size());
  ChainRec rec;
  rec.priors.assign(args.priors.begin(), args.priors.end());
  rec.bindings.assign(args.bindings.begin(), args.bindings.end());
  rec.pred = args.pred;
  rec.other = args.other;
  rec.chain_on_subject = args.chain_on_subject;
  rec.exclude = args.exclude;
  rec.sigma = args.sigma;

  NodeId id = push(n, args.priors.size());
  double* po = out_ptr(id);
  rec.out.resize(args.priors.size());
  for (size_t i = 0; i < args.priors.size(); ++i) {
    const std::vector<double>& kz = const_kernel_row(args.bindings[i], args.sigma);
    double best = -1.0;
    uint32_t best_s = UINT32_MAX;
    for (size_t s = 0; s < n_const; ++s) {
      if (m_fact[s] == UINT32_MAX) continue;
      double v = std::min(kz[s], m_val[s]);
      if (v > best) {
        best = v;
        best_s = static_cast<uint32_t>(s);
      }
    }
    uint32_t f = m_fact[best_s];
    double prior_v = vals_[nodes_[args.priors[i]].off];
    // Decompose the realized min across the four compared pairs; ties go to
    // the lowest slot code.
    double p1 = kp[fact_pred[f]];
    double p2 = kz[best_s];
    double p3 = ko[fact_other[f]];
    double v = std::min(prior_v, best);
    uint8_t slot;
    if (prior_v <= p1 && prior_v <= p2 && prior_v <= p3) {
      slot = 0;
    } else if (p1 <= p2 && p1 <= p3) {
      slot = 1;
    } else if (p2 <= p3) {
      slot = 2;
    } else {
      slot = 3;
    }
    po[i] = v;
    rec.out[i] = ChainGroupOut{args.bindings[i], f, best_s, slot};
  }
  chains_.push_back(std::move(rec));
  if (out) *out = chains_.back().out;
  return id;
}

// Binding sweep. The non-chain slot is a free variable; facts bind it.
// out[y] = max over facts f with free-slot constant y of
//   min(P[chain_f], kp[pred_f]),  P[s] = max_i min(prior_i, K[z_i, s]).
NodeId Graph::chain_join(const ChainArgs& args, std::vector<ChainGroupOut>* out) {
  require(params_ && facts_.count > 0, "chain op without facts");
  require(args.priors.size() == args.bindings.size(), "chain_join: priors/bindings mismatch");
  require(!args.priors.empty(), "chain_join: empty cohort");

  const std::vector<double>& kp = pred_kernel_row(args.pred, args.sigma);
  const uint32_t* fact_pred = facts_.pred;
  const uint32_t* fact_chain = args.chain_on_subject ? facts_.subj : facts_.obj;
  const uint32_t* fact_free = args.chain_on_subject ? facts_.obj : facts_.subj;

  const size_t n_const = params_->tensor(const_table_).rows();
  // P[s] = max over states of min(prior, K[z, s]); remember which state.
  std::vector<double> p_val(n_const, -1.0);
  std::vector<uint32_t> p_state(n_const, UINT32_MAX);
  for (size_t i = 0; i < args.priors.size(); ++i) {
    const std::vector<double>& kz = const_kernel_row(args.bindings[i], args.sigma);
    double prior_v = vals_[nodes_[args.priors[i]].off];
    for (size_t s = 0; s < n_const; ++s) {
      double v = std::min(prior_v, kz[s]);
      if (v > p_val[s]) {
        p_val[s] = v;
        p_state[s] = static_cast<uint32_t>(i);
      }
    }
  }

  std::vector<double> g_val(n_const, -1.0);
  std::vector<uint32_t> g_fact(n_const, UINT32_MAX);
  for (size_t f = 0; f < facts_.count; ++f) {
    if (static_cast<uint32_t>(f) == args.exclude) continue;
    double v = std::min(p_val[fact_chain[f]], kp[fact_pred[f]]);
    uint32_t y = fact_free[f];
    if (v > g_val[y]) {
      g_val[y] = v;
      g_fact[y] = static_cast<uint32_t>(f);
    }
  }

  std::vector<uint32_t> groups;
  for (size_t y = 0; y < n_const; ++y) {
    if (g_fact[y] != UINT32_MAX) groups.push_back(static_cast<uint32_t>(y));
  }
  if (groups.empty()) {
    if (out) out->clear();
    return kNoNode;
  }

  Node n{Op::ChainJoin};
  n.aux = static_cast<uint32_t>(chains_.size());
  ChainRec rec;
  rec.priors.assign(args.priors.begin(), args.priors.end());
  rec.bindings.assign(args.bindings.begin(), args.bindings.end());
  rec.pred = args.pred;
  rec.other = kNoBound;
  rec.chain_on_subject = args.chain_on_subject;
  rec.exclude = args.exclude;
  rec.sigma = args.sigma;

  NodeId id = push(n, groups.size());
  double* po = out_ptr(id);
  rec.out.resize(groups.size());
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    uint32_t y = groups[gi];
    uint32_t f = g_fact[y];
    uint32_t st = p_state[fact_chain[f]];
    double prior_v = vals_[nodes_[rec.priors[st]].off];
    const std::vector<double>& kz = const_kernel_row(rec.bindings[st], args.sigma);
    double p1 = kp[fact_pred[f]];
    double p2 = kz[fact_chain[f]];
    double v = std::min(std::min(prior_v, p1), p2);
    uint8_t slot;
    if (prior_v <= p1 && prior_v <= p2) {
      slot = 0;
    } else if (p1 <= p2) {
      slot = 1;
    } else {
      slot = 2;
    }
    po[gi] = v;
    rec.out[gi] = ChainGroupOut{y, f, st, slot};
  }
  chains_.push_back(std::move(rec));
  if (out) *out = chains_.back().out;
  return id;
}

std::span<const double> Graph::value(NodeId id) const {
  const Node& n = nodes_[id];
  return {vals_.data() + n.off, n.len};
}

double Graph::value1(NodeId id) const {
  require(nodes_[id].len == 1, "value1: node is not a scalar");
  return vals_[nodes_[id].off];
}

void Graph::add_pair_grad(uint32_t table, uint32_t row_a, uint32_t row_b, double v,
                          double g, double sigma) {
  // d k(a,b) / da = k * (b - a) / sigma^2, and symmetrically for b.
  if (row_a == row_b) return;
  Tensor& tab = params_->tensor(table);
  Tensor& grad = params_->grad(table);
  size_t k = tab.cols();
  const double* a = tab.row_ptr(row_a);
  const double* b = tab.row_ptr(row_b);
  double* ga = grad.row_ptr(row_a);
  double* gb = grad.row_ptr(row_b);
  double c = g * v / (sigma * sigma);
  for (size_t i = 0; i < k; ++i) {
    double diff = b[i] - a[i];
    ga[i] += c * diff;
    gb[i] -= c * diff;
  }
}

void Graph::chain_backward(const ChainRec& rec, size_t out_index, double out_v,
                           double gv, bool join) {
  if (gv == 0.0) return;
  const ChainGroupOut& g = rec.out[out_index];
  const uint32_t* fact_pred = facts_.pred;
  const uint32_t* fact_chain = rec.chain_on_subject ? facts_.subj : facts_.obj;
  const uint32_t* fact_other = rec.chain_on_subject ? facts_.obj : facts_.subj;
  // chain_max outputs are positional with the priors; chain_join records the
  // chosen state in `alt`.
  uint32_t state = join ? g.alt : static_cast<uint32_t>(out_index);
  switch (g.slot) {
    case 0: {  // prior
      grads_[nodes_[rec.priors[state]].off] += gv;
      break;
    }
    case 1: {  // predicate pair: pred node vs E_R[pred of fact]
      Tensor& tab = params_->tensor(pred_table_);
      Tensor& grad = params_->grad(pred_table_);
      size_t k = tab.cols();
      uint32_t prow = fact_pred[g.fact];
      const double* q = out_ptr(rec.pred);
      const double* p = tab.row_ptr(prow);
      double* gq = grad_ptr(rec.pred);
      double* gp = grad.row_ptr(prow);
      double c = gv * out_v / (rec.sigma * rec.sigma);
      for (size_t i = 0; i < k; ++i) {
        double diff = p[i] - q[i];
        gq[i] += c * diff;
        gp[i] -= c * diff;
      }
      break;
    }
    case 2: {  // chain pair: E_C[z] vs E_C[chain const]
      uint32_t z = rec.bindings[state];
      uint32_t s = join ? fact_chain[g.fact] : g.alt;
      add_pair_grad(const_table_, z, s, out_v, gv, rec.sigma);
      break;
    }
    case 3: {  // other pair: E_C[other] vs E_C[other slot of fact]
      add_pair_grad(const_table_, rec.other, fact_other[g.fact], out_v, gv, rec.sigma);
      break;
    }
  }
}

void Graph::backward_node(NodeId id) {
  const Node& n = nodes_[id];
  const double* g = grads_.data() + n.off;
  bool any = false;
  for (size_t i = 0; i < n.len; ++i) {
    if (g[i] != 0.0) {
      any = true;
      break;
    }
  }
  if (!any) return;

  switch (n.op) {
    case Op::Input:
      break;
    case Op::Param: {
      Tensor& gp = params_->grad(n.a);
      for (size_t i = 0; i < n.len; ++i) gp.data[i] += g[i];
      break;
    }
    case Op::ParamRow: {
      Tensor& gp = params_->grad(n.a);
      double* row = gp.row_ptr(n.b);
      for (size_t i = 0; i < n.len; ++i) row[i] += g[i];
      break;
    }
    case Op::Add: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      for (size_t i = 0; i < n.len; ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      break;
    }
    case Op::Sub: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      for (size_t i = 0; i < n.len; ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      break;
    }
    case Op::Mul: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      const double* va = out_ptr(n.a);
      const double* vb = out_ptr(n.b);
      for (size_t i = 0; i < n.len; ++i) {
        ga[i] += g[i] * vb[i];
        gb[i] += g[i] * va[i];
      }
      break;
    }
    case Op::Scale: {
      double* ga = grad_ptr(n.a);
      for (size_t i = 0; i < n.len; ++i) ga[i] += g[i] * n.x;
      break;
    }
    case Op::Concat: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      size_t la = nodes_[n.a].len;
      for (size_t i = 0; i < la; ++i) ga[i] += g[i];
      for (size_t i = 0; i < nodes_[n.b].len; ++i) gb[i] += g[la + i];
      break;
    }
    case Op::MatVec: {
      size_t c = nodes_[n.b].len;
      size_t r = n.len;
      double* gw = grad_ptr(n.a);
      double* gx = grad_ptr(n.b);
      const double* w = out_ptr(n.a);
      const double* x = out_ptr(n.b);
      for (size_t i = 0; i < r; ++i) {
        double gi = g[i];
        if (gi == 0.0) continue;
        double* gwr = gw + i * c;
        const double* wr = w + i * c;
        for (size_t j = 0; j < c; ++j) {
          gwr[j] += gi * x[j];
          gx[j] += gi * wr[j];
        }
      }
      break;
    }
    case Op::VecMat: {
      size_t r = nodes_[n.a].len;
      size_t c = n.len;
      double* gx = grad_ptr(n.a);
      double* gw = grad_ptr(n.b);
      const double* x = out_ptr(n.a);
      const double* w = out_ptr(n.b);
      for (size_t i = 0; i < r; ++i) {
        const double* wr = w + i * c;
        double* gwr = gw + i * c;
        double acc = 0.0;
        for (size_t j = 0; j < c; ++j) {
          acc += g[j] * wr[j];
          gwr[j] += x[i] * g[j];
        }
        gx[i] += acc;
      }
      break;
    }
    case Op::Dot: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      const double* va = out_ptr(n.a);
      const double* vb = out_ptr(n.b);
      double gs = g[0];
      for (size_t i = 0; i < nodes_[n.a].len; ++i) {
        ga[i] += gs * vb[i];
        gb[i] += gs * va[i];
      }
      break;
    }
    case Op::Sigmoid: {
      double* ga = grad_ptr(n.a);
      const double* vo = out_ptr(id);
      for (size_t i = 0; i < n.len; ++i) ga[i] += g[i] * vo[i] * (1.0 - vo[i]);
      break;
    }
    case Op::Tanh: {
      double* ga = grad_ptr(n.a);
      const double* vo = out_ptr(id);
      for (size_t i = 0; i < n.len; ++i) ga[i] += g[i] * (1.0 - vo[i] * vo[i]);
      break;
    }
    case Op::Log: {
      double* ga = grad_ptr(n.a);
      const double* va = out_ptr(n.a);
      for (size_t i = 0; i < n.len; ++i) ga[i] += g[i] / va[i];
      break;
    }
    case Op::Clamp: {
      double* ga = grad_ptr(n.a);
      const double* va = out_ptr(n.a);
      for (size_t i = 0; i < n.len; ++i) {
        if (va[i] >= n.x && va[i] <= n.y) ga[i] += g[i];
      }
      break;
    }
    case Op::Softmax: {
      double* ga = grad_ptr(n.a);
      const double* s = out_ptr(id);
      double acc = 0.0;
      for (size_t i = 0; i < n.len; ++i) acc += g[i] * s[i];
      for (size_t i = 0; i < n.len; ++i) ga[i] += s[i] * (g[i] - acc);
      break;
    }
    case Op::Kernel: {
      double* ga = grad_ptr(n.a);
      double* gb = grad_ptr(n.b);
      const double* va = out_ptr(n.a);
      const double* vb = out_ptr(n.b);
      double v = out_ptr(id)[0];
      double c = g[0] * v / (n.x * n.x);
      for (size_t i = 0; i < nodes_[n.a].len; ++i) {
        double diff = vb[i] - va[i];
        ga[i] += c * diff;
        gb[i] -= c * diff;
      }
      break;
    }
    case Op::Sum: {
      double* ga = grad_ptr(n.a);
      for (size_t i = 0; i < nodes_[n.a].len; ++i) ga[i] += g[0];
      break;
    }
    case Op::MinList:
    case Op::MaxList: {
      NodeId chosen_node = extra_[n.aux + n.c];
      grads_[nodes_[chosen_node].off] += g[0];
      break;
    }
    case Op::SumList: {
      for (uint32_t i = 0; i < n.b; ++i) {
        grads_[nodes_[extra_[n.aux + i]].off] += g[0];
      }
      break;
    }
    case Op::Pick: {
      grad_ptr(n.a)[n.b] += g[0];
      break;
    }
    case Op::LogSoftmaxPick: {
      double* ga = grad_ptr(n.a);
      const double* pl = out_ptr(n.a);
      size_t len = nodes_[n.a].len;
      double m = pl[0];
      for (size_t i = 1; i < len; ++i) m = std::max(m, pl[i]);
      double z = 0.0;
      for (size_t i = 0; i < len; ++i) z += std::exp(pl[i] - m);
      for (size_t i = 0; i < len; ++i) {
        double s = std::exp(pl[i] - m) / z;
        ga[i] += g[0] * ((i == n.b ? 1.0 : 0.0) - s);
      }
      break;
    }
    case Op::ChainMax: {
      const ChainRec& rec = chains_[n.aux];
      const double* vo = out_ptr(id);
      for (size_t i = 0; i < n.len; ++i) {
        chain_backward(rec, i, vo[i], g[i], /*join=*/false);
      }
      break;
    }
    case Op::ChainJoin: {
      const ChainRec& rec = chains_[n.aux];
      const double* vo = out_ptr(id);
      for (size_t i = 0; i < n.len; ++i) {
        chain_backward(rec, i, vo[i], g[i], /*join=*/true);
      }
      break;
    }
  }
}

void Graph::backward(NodeId loss) {
  require(nodes_[loss].len == 1, "backward: loss must be scalar");
  require(params_ != nullptr, "backward: graph has no parameter store");
  grads_.assign(vals_.size(), 0.0);
  grads_[nodes_[loss].off] = 1.0;
  for (size_t i = loss + 1; i-- > 0;) {
    backward_node(static_cast<NodeId>(i));
  }
}

std::map<std::string, Tensor> Graph::gradients(NodeId loss) {
  params_->zero_grads();
  backward(loss);
  params_->check_grads_finite();
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < params_->count(); ++i) {
    out[params_->name(i)] = params_->grad(i);
  }
  return out;
}

NodeId gru_cell(Graph& g, NodeId h, NodeId x, const GruParams& p) {
  NodeId z = g.sigmoid(g.add(g.add(g.matvec(g.param(p.wz), x), g.matvec(g.param(p.uz), h)),
                             g.param(p.bz)));
  NodeId r = g.sigmoid(g.add(g.add(g.matvec(g.param(p.wr), x), g.matvec(g.param(p.ur), h)),
                             g.param(p.br)));
  NodeId hh = g.tanh(g.add(
      g.add(g.matvec(g.param(p.wh), x), g.matvec(g.param(p.uh), g.mul(r, h))),
      g.param(p.bh)));
  // (1-z)*h + z*hh
  std::vector<double> ones(g.length(h), 1.0);
  NodeId one = g.input(std::span<const double>(ones.data(), ones.size()));
  return g.add(g.mul(g.sub(one, z), h), g.mul(z, hh));
}

void Adam::step(ParameterStore& store, ParamGroup group) {
  int64_t& t = steps_[static_cast<uint8_t>(group)];
  t += 1;
  double b1t = 1.0 - std::pow(beta1_, static_cast<double>(t));
  double b2t = 1.0 - std::pow(beta2_, static_cast<double>(t));
  for (uint32_t i = 0; i < store.count(); ++i) {
    if (store.group(i) != group) continue;
    Tensor& w = store.tensor(i);
    const Tensor& g = store.grad(i);
    auto it = moments_.find(i);
    if (it == moments_.end()) {
      it = moments_.emplace(i, std::make_pair(Tensor{w.shape}, Tensor{w.shape})).first;
    }
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    for (size_t j = 0; j < w.size(); ++j) {
      double gj = g.data[j];
      m.data[j] = beta1_ * m.data[j] + (1.0 - beta1_) * gj;
      v.data[j] = beta2_ * v.data[j] + (1.0 - beta2_) * gj * gj;
      double mh = m.data[j] / b1t;
      double vh = v.data[j] / b2t;
      w.data[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

}  // namespace rnnctp::ad

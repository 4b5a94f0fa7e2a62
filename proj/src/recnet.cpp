// SPDX-License-Identifier: Apache-2.0

#include "s2meta/recnet.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace s2meta::recnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatMap as_matrix(const ad::Tensor& t) {
  return ConstMatMap(t.values.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

void check_user(const EmbeddingTable& table, Id user) {
  if (user >= table.num_users()) {
    throw std::out_of_range("user id " + std::to_string(user) + " outside embedding table of " +
                            std::to_string(table.num_users()) + " users");
  }
}

void check_item(const EmbeddingTable& table, Id item) {
  if (item >= table.num_items()) {
    throw std::out_of_range("item id " + std::to_string(item) + " outside embedding table of " +
                            std::to_string(table.num_items()) + " items");
  }
}

void check_dims(const RecommenderParams& params, const EmbeddingTable& table) {
  if (params.layout.dim != table.dim()) {
    throw std::invalid_argument("layout embedding dimension " + std::to_string(params.layout.dim) +
                                " differs from table dimension " + std::to_string(table.dim()));
  }
}

// Applies layers [first, first + 2*count) of `tensors` as (W, b) pairs.
// ReLU follows every layer except the last one when `linear_last` is set.
RowMat mlp(RowMat z, std::span<const ad::Tensor> tensors, std::size_t count, bool linear_last) {
  for (std::size_t l = 0; l < count; ++l) {
    const ad::Tensor& w = tensors[2 * l];
    const ad::Tensor& b = tensors[2 * l + 1];
    RowMat next = z * as_matrix(w).transpose();
    next.rowwise() += ConstVecMap(b.values.data(), static_cast<Eigen::Index>(b.size()));
    if (!(linear_last && l + 1 == count)) next = next.cwiseMax(0.0);
    z = std::move(next);
  }
  return z;
}

RowMat gather_rows(const ad::Tensor& matrix, std::span<const Id> ids) {
  const auto d = static_cast<Eigen::Index>(matrix.cols());
  RowMat out(static_cast<Eigen::Index>(ids.size()), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) =
        ConstVecMap(matrix.values.data() + static_cast<std::size_t>(ids[r]) * matrix.cols(), d);
  }
  return out;
}

ad::Tensor to_tensor(const RowMat& m) {
  return ad::Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                    ad::Buffer(m.data(), m.data() + m.size()));
}

// Forward on the tape. `weights_t` holds the transposed weight Vars.
ad::Var mlp_var(ad::Var z, std::span<const ad::Var> params, std::span<const ad::Var> weights_t,
                std::size_t first, std::size_t count, bool linear_last) {
  for (std::size_t l = 0; l < count; ++l) {
    z = ad::add_bias(ad::matmul(z, weights_t[first + l]), params[2 * (first + l) + 1]);
    if (!(linear_last && l + 1 == count)) z = ad::relu(z);
  }
  return z;
}

}  // namespace

const char* to_string(Architecture arch) {
  return arch == Architecture::interaction ? "interaction" : "mapping";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "interaction") return Architecture::interaction;
  if (name == "mapping") return Architecture::mapping;
  throw std::invalid_argument("unknown architecture '" + name + "' (expected interaction|mapping)");
}

std::size_t GroupSpec::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Layout Layout::halving(Architecture arch, std::size_t dim, std::size_t layers) {
  Layout layout;
  layout.arch = arch;
  layout.dim = dim;
  std::size_t width = layout.input_width();
  for (std::size_t l = 0; l < layers; ++l) {
    width = std::max<std::size_t>(1, width / 2);
    layout.hidden.push_back(width);
  }
  return layout;
}

void Layout::validate() const {
  if (dim == 0) throw std::invalid_argument("layout: embedding dimension must be positive");
  if (hidden.empty()) throw std::invalid_argument("layout: at least one hidden layer required");
  for (std::size_t w : hidden) {
    if (w == 0) throw std::invalid_argument("layout: hidden widths must be positive");
  }
}

std::vector<GroupSpec> Layout::groups() const {
  validate();
  std::vector<GroupSpec> out;
  auto stack = [&](const std::string& prefix) {
    std::size_t in = input_width();
    for (std::size_t l = 0; l < hidden.size(); ++l) {
      const std::string idx = std::to_string(l + 1);
      out.push_back({prefix + "W" + idx, {hidden[l], in}, in});
      out.push_back({prefix + "b" + idx, {hidden[l]}, in});
      in = hidden[l];
    }
  };
  if (arch == Architecture::interaction) {
    stack("");
    out.push_back({"w", {hidden.back()}, hidden.back()});
  } else {
    stack("u");
    stack("i");
  }
  return out;
}

EmbeddingTable::EmbeddingTable(ad::Tensor user_matrix, ad::Tensor item_matrix)
    : users(std::move(user_matrix)), items(std::move(item_matrix)) {
  if (users.rank() != 2 || items.rank() != 2 || users.cols() != items.cols() || users.cols() == 0) {
    throw std::invalid_argument("embedding tables must be matrices with a common positive width, got " +
                                ad::to_string(users.shape) + " and " + ad::to_string(items.shape));
  }
}

std::span<const double> EmbeddingTable::user(Id u) const {
  check_user(*this, u);
  return {users.values.data() + static_cast<std::size_t>(u) * dim(), dim()};
}

std::span<const double> EmbeddingTable::item(Id i) const {
  check_item(*this, i);
  return {items.values.data() + static_cast<std::size_t>(i) * dim(), dim()};
}

RecommenderParams RecommenderParams::zeros(const Layout& layout) {
  RecommenderParams p;
  p.layout = layout;
  for (const GroupSpec& g : layout.groups()) p.tensors.emplace_back(g.shape, 0.0);
  return p;
}

RecommenderParams RecommenderParams::random(const Layout& layout, Rng& rng) {
  RecommenderParams p;
  p.layout = layout;
  for (const GroupSpec& g : layout.groups()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(g.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    ad::Tensor t(g.shape, 0.0);
    for (double& v : t.values) v = dist(rng);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

void RecommenderParams::validate() const {
  const auto specs = layout.groups();
  if (specs.size() != tensors.size()) {
    throw std::invalid_argument("recommender params: expected " + std::to_string(specs.size()) +
                                " tensors, got " + std::to_string(tensors.size()));
  }
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (tensors[k].shape != specs[k].shape) {
      throw std::invalid_argument("recommender params: group " + specs[k].name + " has shape " +
                                  ad::to_string(tensors[k].shape) + ", expected " +
                                  ad::to_string(specs[k].shape));
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<double> score_pairs(const RecommenderParams& params, const EmbeddingTable& table,
                                std::span<const Id> users, std::span<const Id> items) {
  if (users.size() != items.size()) {
    throw std::invalid_argument("score_pairs: users and items differ in length");
  }
  check_dims(params, table);
  for (Id u : users) check_user(table, u);
  for (Id i : items) check_item(table, i);
  const std::size_t layers = params.layout.hidden.size();
  const std::span<const ad::Tensor> t(params.tensors);
  std::vector<double> out(users.size());
  if (users.empty()) return out;
  if (params.layout.arch == Architecture::interaction) {
    RowMat x(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(2 * table.dim()));
    x << gather_rows(table.users, users), gather_rows(table.items, items);
    const RowMat z = mlp(std::move(x), t, layers, false);
    const ad::Tensor& w = t[2 * layers];
    Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
        z * Eigen::Map<const Eigen::VectorXd>(w.values.data(), static_cast<Eigen::Index>(w.size()));
  } else {
    const RowMat zu = mlp(gather_rows(table.users, users), t.subspan(0, 2 * layers), layers, true);
    const RowMat zi = mlp(gather_rows(table.items, items), t.subspan(2 * layers), layers, true);
    Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) =
        zu.cwiseProduct(zi).rowwise().sum();
  }
  return out;
}

double score(const RecommenderParams& params, const EmbeddingTable& table, Id user, Id item) {
  const Id u[1] = {user};
  const Id i[1] = {item};
  return score_pairs(params, table, u, i)[0];
}

std::vector<double> score_items(const RecommenderParams& params, const EmbeddingTable& table,
                                Id user, std::span<const Id> items) {
  const std::vector<Id> users(items.size(), user);
  return score_pairs(params, table, users, items);
}

std::vector<double> user_tower(const RecommenderParams& params, const EmbeddingTable& table,
                               Id user) {
  if (params.layout.arch != Architecture::mapping) {
    throw std::invalid_argument("user_tower requires the mapping architecture");
  }
  check_dims(params, table);
  check_user(table, user);
  const Id ids[1] = {user};
  const std::size_t layers = params.layout.hidden.size();
  const RowMat z = mlp(gather_rows(table.users, ids),
                       std::span<const ad::Tensor>(params.tensors).subspan(0, 2 * layers), layers,
                       true);
  return {z.data(), z.data() + z.size()};
}

std::vector<double> item_tower(const RecommenderParams& params, const EmbeddingTable& table,
                               Id item) {
  if (params.layout.arch != Architecture::mapping) {
    throw std::invalid_argument("item_tower requires the mapping architecture");
  }
  check_dims(params, table);
  check_item(table, item);
  const Id ids[1] = {item};
  const std::size_t layers = params.layout.hidden.size();
  const RowMat z = mlp(gather_rows(table.items, ids),
                       std::span<const ad::Tensor>(params.tensors).subspan(2 * layers), layers,
                       true);
  return {z.data(), z.data() + z.size()};
}

double hinge_loss(double score_pos, double score_neg, double margin) {
  return std::max(0.0, margin - score_pos + score_neg);
}

ad::Var batch_loss(ad::Tape& tape, std::span<const ad::Var> params, const Layout& layout,
                   const EmbeddingTable& table, std::span<const TrainTriple> batch, double margin) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (layout.dim != table.dim()) {
    throw std::invalid_argument("batch_loss: layout dimension differs from embedding table");
  }
  const std::size_t layers = layout.hidden.size();
  const std::size_t groups = layout.groups().size();
  if (params.size() != groups) {
    throw std::invalid_argument("batch_loss: expected " + std::to_string(groups) +
                                " parameter tensors, got " + std::to_string(params.size()));
  }
  std::vector<Id> users, pos, neg;
  for (const TrainTriple& t : batch) {
    check_user(table, t.user);
    check_item(table, t.pos_item);
    check_item(table, t.neg_item);
    users.push_back(t.user);
    pos.push_back(t.pos_item);
    neg.push_back(t.neg_item);
  }
  const std::size_t stacks = layout.arch == Architecture::interaction ? 1 : 2;
  std::vector<ad::Var> weights_t;
  for (std::size_t l = 0; l < stacks * layers; ++l) weights_t.push_back(ad::transpose(params[2 * l]));

  ad::Var s_pos, s_neg;
  if (layout.arch == Architecture::interaction) {
    const RowMat eu = gather_rows(table.users, users);
    auto net = [&](std::span<const Id> items) {
      RowMat x(eu.rows(), static_cast<Eigen::Index>(2 * table.dim()));
      x << eu, gather_rows(table.items, items);
      const ad::Var z = mlp_var(tape.constant(to_tensor(x)), params, weights_t, 0, layers, false);
      return ad::matmul(z, params[2 * layers]);
    };
    s_pos = net(pos);
    s_neg = net(neg);
  } else {
    const ad::Var zu =
        mlp_var(tape.constant(to_tensor(gather_rows(table.users, users))), params, weights_t, 0,
                layers, true);
    const ad::Var ones = tape.constant(ad::Tensor({layout.hidden.back()}, 1.0));
    auto net = [&](std::span<const Id> items) {
      const ad::Var zi = mlp_var(tape.constant(to_tensor(gather_rows(table.items, items))), params,
                                 weights_t, layers, layers, true);
      return ad::matmul(ad::elementwise_mul(zu, zi), ones);
    };
    s_pos = net(pos);
    s_neg = net(neg);
  }
  const ad::Var gap = ad::sub(s_neg, s_pos);
  const ad::Var m = tape.constant(ad::Tensor(gap.shape(), margin));
  return ad::mean(ad::max_with_zero(ad::add(m, gap)));
}

double batch_loss_value(const RecommenderParams& params, const EmbeddingTable& table,
                        std::span<const TrainTriple> batch, double margin) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  std::vector<Id> users, pos, neg;
  users.reserve(batch.size());
  for (const TrainTriple& t : batch) {
    users.push_back(t.user);
    pos.push_back(t.pos_item);
    neg.push_back(t.neg_item);
  }
  const auto sp = score_pairs(params, table, users, pos);
  const auto sn = score_pairs(params, table, users, neg);
  double total = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) total += hinge_loss(sp[k], sn[k], margin);
  return total / static_cast<double>(batch.size());
}

std::pair<double, std::vector<ad::Tensor>> batch_loss_and_grad(
    const RecommenderParams& params, const EmbeddingTable& table,
    std::span<const TrainTriple> batch, double margin) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const ad::Tensor& t : params.tensors) vars.push_back(tape.leaf(t, true));
  const ad::Var loss = batch_loss(tape, vars, params.layout, table, batch, margin);
  const ad::Gradients grads = tape.backward(loss);
  std::vector<ad::Tensor> out;
  out.reserve(vars.size());
  for (const ad::Var& v : vars) out.push_back(grads.wrt(v));
  return {loss.value().item(), std::move(out)};
}

// ---------------------------------------------------------------------------

EmbeddingTable mf_pretrain(std::span<const std::pair<Id, Id>> interactions,
                           const MfOptions& options) {
  if (interactions.empty()) throw std::invalid_argument("mf_pretrain: no interactions");
  if (options.dim == 0) throw std::invalid_argument("mf_pretrain: dimension must be >= 1");
  std::size_t m = options.num_users;
  std::size_t n = options.num_items;
  if (m == 0 || n == 0) {
    for (const auto& [u, i] : interactions) {
      if (options.num_users == 0) m = std::max<std::size_t>(m, std::size_t{u} + 1);
      if (options.num_items == 0) n = std::max<std::size_t>(n, std::size_t{i} + 1);
    }
  }
  for (const auto& [u, i] : interactions) {
    if (u >= m || i >= n) throw std::out_of_range("mf_pretrain: interaction id outside table");
  }
  const std::size_t d = options.dim;
  Rng rng(options.seed);
  std::normal_distribution<double> init(0.0, options.init_scale);
  ad::Tensor U({m, d}, 0.0);
  ad::Tensor I({n, d}, 0.0);
  for (double& v : U.values) v = init(rng);
  for (double& v : I.values) v = init(rng);

  std::vector<std::unordered_set<Id>> positives(m);
  for (const auto& [u, i] : interactions) positives[u].insert(i);

  std::vector<std::size_t> order(interactions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uniform_int_distribution<Id> pick_item(0, static_cast<Id>(n - 1));
  std::vector<double> du(d), di(d), dj(d);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k : order) {
      const auto [u, i] = interactions[k];
      if (positives[u].size() >= n) continue;
      Id j = pick_item(rng);
      for (int attempt = 0; attempt < 100 && positives[u].count(j); ++attempt) j = pick_item(rng);
      if (positives[u].count(j)) continue;
      double* eu = U.values.data() + std::size_t{u} * d;
      double* ei = I.values.data() + std::size_t{i} * d;
      double* ej = I.values.data() + std::size_t{j} * d;
      double gap = 0.0;
      for (std::size_t c = 0; c < d; ++c) gap += eu[c] * (ei[c] - ej[c]);
      const bool active = options.margin - gap > 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        du[c] = (active ? -(ei[c] - ej[c]) : 0.0) + options.reg * eu[c];
        di[c] = (active ? -eu[c] : 0.0) + options.reg * ei[c];
        dj[c] = (active ? eu[c] : 0.0) + options.reg * ej[c];
      }
      for (std::size_t c = 0; c < d; ++c) {
        eu[c] -= options.learning_rate * du[c];
        ei[c] -= options.learning_rate * di[c];
        ej[c] -= options.learning_rate * dj[c];
      }
    }
  }
  return EmbeddingTable(std::move(U), std::move(I));
}

double mf_probe_loss(const EmbeddingTable& table, std::span<const TrainTriple> probe,
                     double margin) {
  if (probe.empty()) throw std::invalid_argument("mf_probe_loss: empty probe batch");
  double total = 0.0;
  for (const TrainTriple& t : probe) {
    const auto eu = table.user(t.user);
    const auto ei = table.item(t.pos_item);
    const auto ej = table.item(t.neg_item);
    double sp = 0.0, sn = 0.0;
    for (std::size_t c = 0; c < eu.size(); ++c) {
      sp += eu[c] * ei[c];
      sn += eu[c] * ej[c];
    }
    total += hinge_loss(sp, sn, margin);
  }
  return total / static_cast<double>(probe.size());
}

// ---------------------------------------------------------------------------

void write_embedding_matrix(const std::filesystem::path& path, const ad::Tensor& matrix) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << matrix.rows() << ' ' << matrix.cols() << '\n';
  char buf[32];
  for (std::size_t r = 0; r < matrix.rows(); ++r) {
    out << r;
    for (std::size_t c = 0; c < matrix.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", matrix.at(r, c));
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ad::Tensor read_embedding_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  std::istringstream header(line);
  std::size_t count = 0, d = 0;
  if (!(header >> count >> d) || d == 0) {
    throw std::runtime_error(path.string() + ":1: expected '<count> <d>' header");
  }
  ad::Tensor out({count, d}, 0.0);
  std::vector<bool> seen(count, false);
  std::size_t line_no = 1;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::size_t id = 0;
    if (!(row >> id) || id >= count || seen[id]) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": bad or duplicate row id");
    }
    seen[id] = true;
    for (std::size_t c = 0; c < d; ++c) {
      std::string tok;
      if (!(row >> tok)) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                                 std::to_string(d) + " values");
      }
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                 ": not a number '" + tok + "'");
      }
      out.at(id, c) = v;
    }
    std::string extra;
    if (row >> extra) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": too many values");
    }
    ++rows;
  }
  if (rows != count) {
    throw std::runtime_error(path.string() + ": header declares " + std::to_string(count) +
                             " rows, found " + std::to_string(rows));
  }
  return out;
}

void write_embeddings(const std::filesystem::path& users_path,
                      const std::filesystem::path& items_path, const EmbeddingTable& table) {
  write_embedding_matrix(users_path, table.users);
  write_embedding_matrix(items_path, table.items);
}

EmbeddingTable read_embeddings(const std::filesystem::path& users_path,
                               const std::filesystem::path& items_path) {
  return EmbeddingTable(read_embedding_matrix(users_path), read_embedding_matrix(items_path));
}

}  // namespace s2meta::recnet

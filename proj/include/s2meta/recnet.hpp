// SPDX-License-Identifier: Apache-2.0
//
// Recommender network: frozen user/item embedding lookup, a ReLU hidden
// stack and a linear output, scored pairwise with a hinge loss. Also hosts
// the matrix-factorization pretrainer that produces the embedding tables.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "s2meta/autodiff.hpp"

namespace s2meta {

using Rng = std::mt19937_64;
using Id = std::uint32_t;

namespace recnet {

enum class Architecture {
  /// [e_u, e_i] -> MLP -> w^T z
  interaction,
  /// dot(MLP_u(e_u), MLP_i(e_i))
  mapping,
};

const char* to_string(Architecture arch);
Architecture parse_architecture(const std::string& name);

/// One trainable tensor of the recommender (a weight matrix, a bias or the
/// output vector).
struct GroupSpec {
  std::string name;
  ad::Shape shape;
  /// fan-in used by the scaled uniform initializer
  std::size_t fan_in = 1;

  std::size_t size() const;
};

/// Architecture descriptor. Weight matrices are stored [out × in].
struct Layout {
  Architecture arch = Architecture::interaction;
  std::size_t dim = 16;
  /// Hidden widths per stack (per tower for `mapping`).
  std::vector<std::size_t> hidden;

  /// Three hidden layers, each half the width of the one before it, starting
  /// from the stack's input width (2d for interaction, d per tower for
  /// mapping). Widths never drop below 1.
  static Layout halving(Architecture arch, std::size_t dim, std::size_t layers = 3);

  std::size_t input_width() const { return arch == Architecture::interaction ? 2 * dim : dim; }
  /// Ordered parameter groups. Interaction: W1,b1,...,WL,bL,w.
  /// Mapping: uW1,ub1,...,uWL,ubL,iW1,ib1,...,iWL,ibL.
  std::vector<GroupSpec> groups() const;
  void validate() const;

  friend bool operator==(const Layout&, const Layout&) = default;
};

/// Frozen embedding matrices U (m×d) and I (n×d).
struct EmbeddingTable {
  ad::Tensor users;
  ad::Tensor items;

  EmbeddingTable() = default;
  EmbeddingTable(ad::Tensor user_matrix, ad::Tensor item_matrix);

  std::size_t dim() const { return users.cols(); }
  std::size_t num_users() const { return users.rows(); }
  std::size_t num_items() const { return items.rows(); }
  std::span<const double> user(Id u) const;
  std::span<const double> item(Id i) const;

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

struct RecommenderParams {
  Layout layout;
  std::vector<ad::Tensor> tensors;

  static RecommenderParams zeros(const Layout& layout);
  /// Uniform(±1/sqrt(fan_in)) for every group.
  static RecommenderParams random(const Layout& layout, Rng& rng);
  /// Throws when tensor shapes disagree with the layout.
  void validate() const;
};

struct TrainTriple {
  Id user = 0;
  Id pos_item = 0;
  Id neg_item = 0;
  friend bool operator==(const TrainTriple&, const TrainTriple&) = default;
};

/// Scores for aligned (user, item) rows; ids are bounds-checked.
std::vector<double> score_pairs(const RecommenderParams& params, const EmbeddingTable& table,
                                std::span<const Id> users, std::span<const Id> items);

double score(const RecommenderParams& params, const EmbeddingTable& table, Id user, Id item);

/// Scores one user against many items.
std::vector<double> score_items(const RecommenderParams& params, const EmbeddingTable& table,
                                Id user, std::span<const Id> items);

/// Mapping-architecture tower outputs; scores are their dot products.
std::vector<double> user_tower(const RecommenderParams& params, const EmbeddingTable& table,
                               Id user);
std::vector<double> item_tower(const RecommenderParams& params, const EmbeddingTable& table,
                               Id item);

/// max(0, margin - pos + neg)
double hinge_loss(double score_pos, double score_neg, double margin = 1.0);

/// Mean hinge loss over `batch`, differentiable w.r.t. `params` (one Var per
/// layout group, in group order).
ad::Var batch_loss(ad::Tape& tape, std::span<const ad::Var> params, const Layout& layout,
                   const EmbeddingTable& table, std::span<const TrainTriple> batch,
                   double margin = 1.0);

/// Same quantity without a tape.
double batch_loss_value(const RecommenderParams& params, const EmbeddingTable& table,
                        std::span<const TrainTriple> batch, double margin = 1.0);

/// Loss value and gradient of `batch_loss` at `params`.
std::pair<double, std::vector<ad::Tensor>> batch_loss_and_grad(
    const RecommenderParams& params, const EmbeddingTable& table,
    std::span<const TrainTriple> batch, double margin = 1.0);

// ---------------------------------------------------------------------------
// Matrix-factorization pretraining on a pairwise hinge objective.

struct MfOptions {
  std::size_t dim = 16;
  std::size_t epochs = 50;
  double learning_rate = 0.05;
  double reg = 1e-4;
  double margin = 1.0;
  std::uint64_t seed = 0;
  /// Table sizes; 0 infers max id + 1 from the interactions.
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  /// Stddev of the Gaussian initialization.
  double init_scale = 0.1;
};

EmbeddingTable mf_pretrain(std::span<const std::pair<Id, Id>> interactions,
                           const MfOptions& options);

/// Mean hinge over `probe` when the score is the plain dot product e_u·e_i.
double mf_probe_loss(const EmbeddingTable& table, std::span<const TrainTriple> probe,
                     double margin = 1.0);

// ---------------------------------------------------------------------------
// Text embedding files: "<count> <d>" then "<id> <v1> ... <vd>" per row, 17
// significant digits.

void write_embedding_matrix(const std::filesystem::path& path, const ad::Tensor& matrix);
ad::Tensor read_embedding_matrix(const std::filesystem::path& path);

void write_embeddings(const std::filesystem::path& users_path,
                      const std::filesystem::path& items_path, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& users_path,
                               const std::filesystem::path& items_path);

}  // namespace recnet
}  // namespace s2meta

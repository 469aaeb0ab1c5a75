#pragma once

#include "ulda/core.hpp"
#include "ulda/hca.hpp"

#include <span>
#include <vector>

namespace ulda {

struct RowMeta {
  std::string domain_id;
  int class_id = 0;
  bool present = true;
};

enum class StackKind { prototype, text };

// Per-domain n x d blocks stacked domain-major into (m*n) x d.
struct StackedEmbeddings {
  Mat rows;
  std::vector<RowMeta> meta;
  StackKind kind = StackKind::prototype;
};

StackedEmbeddings stack_domains(std::span<const PrototypeSet> per_domain);
StackedEmbeddings stack_domains(std::span<const TextEmbeddingSet> per_domain);

// Pairwise cosine matrix over the present rows (in stack order).
Mat gram(const StackedEmbeddings& x);

// Mean squared difference between the cosine Grams of C and T over rows
// present in both. Fewer than two common rows gives 0 with empty_support.
// g_c, if given, is (m*n) x d with zero rows outside the common set.
LossResult dcrl_loss(const StackedEmbeddings& c, const StackedEmbeddings& t, Mat* g_c = nullptr);

}  // namespace ulda

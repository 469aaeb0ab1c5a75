#include "ulda/dcrl.hpp"

#include <stdexcept>

namespace ulda {

namespace {

template <typename Block, typename RowsOf, typename PresentOf, typename IdOf>
StackedEmbeddings stack_impl(std::span<const Block> blocks, StackKind kind, RowsOf rows_of, PresentOf present_of,
                             IdOf id_of) {
  if (blocks.empty()) throw std::invalid_argument("stack_domains: no domains");
  const auto n = rows_of(blocks.front()).rows();
  const auto d = rows_of(blocks.front()).cols();
  StackedEmbeddings out;
  out.kind = kind;
  out.rows.resize(n * static_cast<Eigen::Index>(blocks.size()), d);
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    const Mat& r = rows_of(blocks[j]);
    if (r.rows() != n || r.cols() != d) throw std::invalid_argument("stack_domains: inconsistent n or d across domains");
    out.rows.middleRows(static_cast<Eigen::Index>(j) * n, n) = r;
    for (Eigen::Index k = 0; k < n; ++k) {
      out.meta.push_back(RowMeta{id_of(blocks[j]), static_cast<int>(k), present_of(blocks[j], k)});
    }
  }
  return out;
}

Mat cosine_gram(const Mat& rows) {
  Mat unit = rows;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double n = unit.row(i).norm();
    if (n == 0.0) throw std::invalid_argument("gram: zero-norm participating row");
    unit.row(i) /= n;
  }
  Mat g = unit * unit.transpose();
  g.diagonal().setOnes();
  return g;
}

}  // namespace

StackedEmbeddings stack_domains(std::span<const PrototypeSet> per_domain) {
  return stack_impl(
      per_domain, StackKind::prototype, [](const PrototypeSet& p) -> const Mat& { return p.protos; },
      [](const PrototypeSet& p, Eigen::Index k) { return static_cast<bool>(p.present[k]); },
      [](const PrototypeSet& p) { return p.domain_id; });
}

StackedEmbeddings stack_domains(std::span<const TextEmbeddingSet> per_domain) {
  return stack_impl(
      per_domain, StackKind::text, [](const TextEmbeddingSet& t) -> const Mat& { return t.class_embs; },
      [](const TextEmbeddingSet&, Eigen::Index) { return true; },
      [](const TextEmbeddingSet& t) { return t.domain_id; });
}

Mat gram(const StackedEmbeddings& x) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < x.meta.size(); ++i)
    if (x.meta[i].present) idx.push_back(static_cast<Eigen::Index>(i));
  if (idx.size() < 2) throw std::invalid_argument("gram: need at least 2 participating rows");
  Mat sub(idx.size(), x.rows.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) sub.row(i) = x.rows.row(idx[i]);
  return cosine_gram(sub);
}

LossResult dcrl_loss(const StackedEmbeddings& c, const StackedEmbeddings& t, Mat* g_c) {
  if (c.meta.size() != t.meta.size() || c.rows.rows() != t.rows.rows()) {
    throw std::invalid_argument("dcrl_loss: stacks have different row counts");
  }
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < c.meta.size(); ++i) {
    if (c.meta[i].domain_id != t.meta[i].domain_id || c.meta[i].class_id != t.meta[i].class_id) {
      throw std::invalid_argument("dcrl_loss: row metadata not aligned");
    }
    if (c.meta[i].present && t.meta[i].present) idx.push_back(static_cast<Eigen::Index>(i));
  }
  if (g_c) *g_c = Mat::Zero(c.rows.rows(), c.rows.cols());
  LossResult r;
  if (idx.size() < 2) {
    r.status = LossStatus::empty_support;
    return r;
  }
  const auto k = static_cast<Eigen::Index>(idx.size());
  Mat cs(k, c.rows.cols());
  Mat ts(k, t.rows.cols());
  for (Eigen::Index i = 0; i < k; ++i) {
    cs.row(i) = c.rows.row(idx[i]);
    ts.row(i) = t.rows.row(idx[i]);
  }
  const Mat gc = cosine_gram(cs);
  const Mat gt = cosine_gram(ts);
  const Mat diff = gc - gt;
  const double denom = static_cast<double>(k * k);
  r.value = diff.squaredNorm() / denom;
  if (g_c) {
    // dL/dG_ij = 2 diff_ij / k^2; G symmetric, so row i collects both (i,j) and (j,i).
    const Mat dg = 2.0 * diff / denom;
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::RowVectorXd ci = cs.row(i);
      const double ni = ci.norm();
      const Eigen::RowVectorXd ch = ci / ni;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(cs.cols());
      for (Eigen::Index j = 0; j < k; ++j) {
        if (j == i) continue;
        const Eigen::RowVectorXd cj = cs.row(j).normalized();
        acc += 2.0 * dg(i, j) * (cj - gc(i, j) * ch) / ni;
      }
      g_c->row(idx[i]) = acc;
    }
  }
  return r;
}

}  // namespace ulda

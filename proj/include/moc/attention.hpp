#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "moc/autodiff.hpp"
#include "moc/core.hpp"

namespace moc {

// Boolean attention mask, true = query row may attend key column.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return bits_.empty(); }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }
  bool operator==(const Mask&) const = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

enum class GainTarget { key, value };

// mask empty = attend everywhere; key_gains empty = ungated.
struct AttentionSpec {
  Mask mask;
  std::vector<double> key_gains;
  double scale = 1.0;
};

namespace detail {

inline void check_gains(std::span<const double> g) {
  for (double v : g)
    if (!(std::isfinite(v) && v > 0.0)) throw Error("attention gain must be finite and > 0");
}

// Softmax attention for one query block. keys/values already carry any gain.
// Writes probabilities into p when non-null. Masked logits are -inf before softmax.
inline void attend_block(const Eigen::Ref<const MatRM>& q, const Eigen::Ref<const MatRM>& k,
                         const Eigen::Ref<const MatRM>& v, const Mask* mask, std::size_t row0,
                         double scale, Eigen::Ref<MatRM> out, MatRM* p) {
  MatRM s = (q * k.transpose()) * scale;
  const Eigen::Index nq = s.rows(), nk = s.cols();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < nq; ++r) {
    double mx = kNegInf;
    for (Eigen::Index c = 0; c < nk; ++c) {
      if (mask && !(*mask)(row0 + static_cast<std::size_t>(r), static_cast<std::size_t>(c))) s(r, c) = kNegInf;
      else if (std::isnan(s(r, c))) throw Error("non-finite attention logits");
      mx = std::max(mx, s(r, c));
    }
    if (mx == kNegInf) throw Error("empty attention context");
    if (!std::isfinite(mx)) throw Error("non-finite attention logits");
    double total = 0.0;
    for (Eigen::Index c = 0; c < nk; ++c) {
      const double e = s(r, c) == kNegInf ? 0.0 : std::exp(s(r, c) - mx);
      s(r, c) = e;
      total += e;
    }
    s.row(r) /= total;
  }
  out.noalias() = s * v;
  if (p) *p = std::move(s);
}

// Full attention with query blocking when probabilities are not retained.
inline void attend(const MatRM& q, const MatRM& k, const MatRM& v, const Mask* mask, double scale,
                   Eigen::Ref<MatRM> out, MatRM* p) {
  constexpr Eigen::Index kBlock = 256;
  if (p || q.rows() <= kBlock) {
    attend_block(q, k, v, mask, 0, scale, out, p);
    return;
  }
  for (Eigen::Index r0 = 0; r0 < q.rows(); r0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, q.rows() - r0);
    attend_block(q.middleRows(r0, n), k, v, mask, static_cast<std::size_t>(r0), scale,
                 out.middleRows(r0, n), nullptr);
  }
}

}  // namespace detail

// softmax(scale * Q (g .* K)^T) V with masked logits set to -inf.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec) {
  require(q.cols() == k.cols(), "attention: query/key width mismatch");
  require(k.rows() == v.rows(), "attention: key/value count mismatch");
  q.check_finite("attention queries");
  k.check_finite("attention keys");
  v.check_finite("attention values");
  const std::size_t nq = q.rows(), nk = k.rows();
  if (!spec.mask.empty())
    require(spec.mask.rows() == nq && spec.mask.cols() == nk, "attention: mask shape mismatch");
  MatRM keys = k.mat();
  if (!spec.key_gains.empty()) {
    require(spec.key_gains.size() == nk, "attention: gain count mismatch");
    detail::check_gains(spec.key_gains);
    for (std::size_t j = 0; j < nk; ++j) keys.row(static_cast<Eigen::Index>(j)) *= spec.key_gains[j];
  }
  MatRM qm = q.mat(), vm = v.mat();
  Tensor out = Tensor::matrix(nq, v.cols());
  detail::attend(qm, keys, vm, spec.mask.empty() ? nullptr : &spec.mask, spec.scale, out.mat(), nullptr);
  return out;
}

// One (head, query set, key set) attention problem inside a batched call.
struct AttentionGroup {
  std::size_t head = 0;
  std::vector<std::size_t> query_rows;
  std::vector<std::size_t> key_rows;
  // Per key: flat index into the gains tensor, or -1 for an ungated key.
  // Empty means every key is ungated.
  std::vector<std::ptrdiff_t> gain_index;
  std::shared_ptr<const Mask> mask;
};

struct AttentionPlan {
  std::size_t heads = 1;
  double scale = 1.0;
  GainTarget target = GainTarget::key;
  std::vector<AttentionGroup> groups;
};

namespace detail {

inline MatRM gather_block(const Tensor& src, const std::vector<std::size_t>& rows, std::size_t c0,
                          std::size_t w) {
  MatRM m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(w));
  const std::size_t stride = src.cols();
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(src.data() + rows[r] * stride + c0, w, m.data() + r * w);
  return m;
}

inline std::vector<double> group_gains(const AttentionGroup& g, const Tensor* gains) {
  std::vector<double> out(g.key_rows.size(), 1.0);
  if (g.gain_index.empty()) return out;
  require(gains != nullptr, "attention plan references gains but none were given");
  require(g.gain_index.size() == g.key_rows.size(), "attention plan: gain index count mismatch");
  for (std::size_t j = 0; j < out.size(); ++j)
    if (g.gain_index[j] >= 0) out[j] = (*gains)[static_cast<std::size_t>(g.gain_index[j])];
  check_gains(out);
  return out;
}

}  // namespace detail

// Batched multi-head attention over gathered row sets. Each group reads its
// query rows from q and its key/value rows from k and v in the columns of its
// head, optionally scales keys (or values) by per-key gains, and writes the
// result to the same query rows of the output. Rows no group writes stay zero.
inline Var grouped_attention(const Var& q, const Var& k, const Var& v,
                             std::shared_ptr<const AttentionPlan> plan,
                             std::optional<Var> gains = std::nullopt) {
  const std::size_t width = q.cols();
  require(k.cols() == width && v.cols() == width, "grouped_attention: width mismatch");
  require(k.rows() == v.rows(), "grouped_attention: key/value count mismatch");
  require(plan->heads >= 1 && width % plan->heads == 0, "grouped_attention: width not divisible by heads");
  const std::size_t dh = width / plan->heads;
  Tape& tape = q.tape();
  const bool record = tape.recording();
  const Tensor* gv = gains ? &gains->value() : nullptr;

  Tensor out = Tensor::matrix(q.rows(), width);
  auto probs = std::make_shared<std::vector<MatRM>>();
  if (record) probs->resize(plan->groups.size());
  for (std::size_t gi = 0; gi < plan->groups.size(); ++gi) {
    const AttentionGroup& g = plan->groups[gi];
    require(g.head < plan->heads, "grouped_attention: head out of range");
    require(!g.key_rows.empty() || g.query_rows.empty(), "empty attention context");
    if (g.mask) require(g.mask->rows() == g.query_rows.size() && g.mask->cols() == g.key_rows.size(),
                        "grouped_attention: mask shape mismatch");
    const std::size_t c0 = g.head * dh;
    MatRM qg = detail::gather_block(q.value(), g.query_rows, c0, dh);
    MatRM kg = detail::gather_block(k.value(), g.key_rows, c0, dh);
    MatRM vg = detail::gather_block(v.value(), g.key_rows, c0, dh);
    const auto gain = detail::group_gains(g, gv);
    MatRM& gated = plan->target == GainTarget::key ? kg : vg;
    if (!g.gain_index.empty())
      for (std::size_t j = 0; j < gain.size(); ++j) gated.row(static_cast<Eigen::Index>(j)) *= gain[j];
    MatRM og(qg.rows(), static_cast<Eigen::Index>(dh));
    detail::attend(qg, kg, vg, g.mask.get(), plan->scale, og, record ? &(*probs)[gi] : nullptr);
    for (std::size_t r = 0; r < g.query_rows.size(); ++r)
      std::copy_n(og.data() + r * dh, dh, out.data() + g.query_rows[r] * width + c0);
  }

  const bool ng = q.needs_grad() || k.needs_grad() || v.needs_grad() || (gains && gains->needs_grad());
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const std::optional<std::size_t> ig = gains ? std::optional<std::size_t>(gains->id()) : std::nullopt;
  return tape.push(std::move(out), ng, [=](Tape& tp, std::size_t, const Tensor& gout) {
    const Tensor& qv = tp.value(iq);
    const Tensor& kv = tp.value(ik);
    const Tensor& vv = tp.value(iv);
    const Tensor* gvals = ig ? &tp.value(*ig) : nullptr;
    const bool gq = tp.needs_grad(iq), gk = tp.needs_grad(ik), gvn = tp.needs_grad(iv);
    const bool gg = ig && tp.needs_grad(*ig);
    for (std::size_t gi = 0; gi < plan->groups.size(); ++gi) {
      const AttentionGroup& g = plan->groups[gi];
      if (g.query_rows.empty()) continue;
      const std::size_t c0 = g.head * dh;
      const MatRM& p = (*probs)[gi];
      MatRM qg = detail::gather_block(qv, g.query_rows, c0, dh);
      MatRM kg = detail::gather_block(kv, g.key_rows, c0, dh);
      MatRM vg = detail::gather_block(vv, g.key_rows, c0, dh);
      MatRM dout = detail::gather_block(gout, g.query_rows, c0, dh);
      const auto gain = detail::group_gains(g, gvals);
      const bool gated = !g.gain_index.empty();
      const bool on_keys = plan->target == GainTarget::key;
      MatRM k_eff = kg, v_eff = vg;
      if (gated)
        for (std::size_t j = 0; j < gain.size(); ++j) {
          if (on_keys) k_eff.row(static_cast<Eigen::Index>(j)) *= gain[j];
          else v_eff.row(static_cast<Eigen::Index>(j)) *= gain[j];
        }
      MatRM dv_eff = p.transpose() * dout;
      MatRM dp = dout * v_eff.transpose();
      Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
      MatRM ds = p.cwiseProduct(dp.colwise() - rowdot) * plan->scale;
      MatRM dq = ds * k_eff;
      MatRM dk_eff = ds.transpose() * qg;
      std::vector<double> dgain(gain.size(), 0.0);
      MatRM dk = dk_eff, dvv = dv_eff;
      if (gated)
        for (std::size_t j = 0; j < gain.size(); ++j) {
          const auto jj = static_cast<Eigen::Index>(j);
          if (on_keys) {
            dgain[j] = dk_eff.row(jj).dot(kg.row(jj));
            dk.row(jj) *= gain[j];
          } else {
            dgain[j] = dv_eff.row(jj).dot(vg.row(jj));
            dvv.row(jj) *= gain[j];
          }
        }
      const std::size_t w = qv.cols();
      if (gq) {
        Tensor& d = tp.grad(iq);
        for (std::size_t r = 0; r < g.query_rows.size(); ++r)
          for (std::size_t c = 0; c < dh; ++c) d[g.query_rows[r] * w + c0 + c] += dq(r, c);
      }
      if (gk) {
        Tensor& d = tp.grad(ik);
        for (std::size_t r = 0; r < g.key_rows.size(); ++r)
          for (std::size_t c = 0; c < dh; ++c) d[g.key_rows[r] * w + c0 + c] += dk(r, c);
      }
      if (gvn) {
        Tensor& d = tp.grad(iv);
        for (std::size_t r = 0; r < g.key_rows.size(); ++r)
          for (std::size_t c = 0; c < dh; ++c) d[g.key_rows[r] * w + c0 + c] += dvv(r, c);
      }
      if (gg && gated) {
        Tensor& d = tp.grad(*ig);
        for (std::size_t j = 0; j < gain.size(); ++j)
          if (g.gain_index[j] >= 0) d[static_cast<std::size_t>(g.gain_index[j])] += dgain[j];
      }
    }
  });
}

// Differentiable single-head attention; gains (nk x 1) optional.
inline Var attention(const Var& q, const Var& k, const Var& v, const Mask& mask, double scale,
                     std::optional<Var> gains = std::nullopt, GainTarget target = GainTarget::key) {
  require(q.cols() == k.cols() && k.cols() == v.cols(), "attention: width mismatch");
  auto plan = std::make_shared<AttentionPlan>();
  plan->heads = 1;
  plan->scale = scale;
  plan->target = target;
  AttentionGroup g;
  g.query_rows.resize(q.rows());
  std::iota(g.query_rows.begin(), g.query_rows.end(), std::size_t{0});
  g.key_rows.resize(k.rows());
  std::iota(g.key_rows.begin(), g.key_rows.end(), std::size_t{0});
  if (gains) {
    require(gains->value().size() == k.rows(), "attention: gain count mismatch");
    g.gain_index.resize(k.rows());
    std::iota(g.gain_index.begin(), g.gain_index.end(), std::ptrdiff_t{0});
  }
  if (!mask.empty()) g.mask = std::make_shared<Mask>(mask);
  plan->groups.push_back(std::move(g));
  return grouped_attention(q, k, v, std::move(plan), gains);
}

}  // namespace moc

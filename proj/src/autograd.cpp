#include "err/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace err::ag {

namespace {
constexpr double kZeroNormEps = 1e-12;
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::check(Var v) const {
  if (!v.valid() || v.i >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("invalid tape handle");
  return v;
}

const Mat& Tape::val(Var v) const { return node_val(check(v).i); }

double Tape::scalar_val(Var v) const {
  const Mat& m = val(v);
  if (m.rows() != 1 || m.cols() != 1) throw std::invalid_argument("not a scalar node");
  return m(0, 0);
}

void Tape::add_grad(int i, const Mat& g) {
  Node& n = nodes_[i];
  if (!n.requires_grad) return;
  const Mat& v = node_val(i);
  if (g.rows() != v.rows() || g.cols() != v.cols())
    throw std::logic_error("gradient shape mismatch");
  if (!n.grad_touched) {
    n.grad = g;
    n.grad_touched = true;
  } else {
    n.grad += g;
  }
}

Var Tape::constant(Mat v) {
  Node n;
  n.val = std::move(v);
  return push(std::move(n));
}

Var Tape::scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::param(Tensor& t) {
  Node n;
  n.ext = &t.value;
  n.requires_grad = true;
  Tensor* tp = &t;
  n.back = [tp](Tape& tape) {
    // self index is the last captured position; resolved via closure below
  };
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [tp, self](Tape& tape) { tp->grad += tape.nodes_[self].grad; };
  return v;
}

Var Tape::gather_rows(Tensor& table, const std::vector<int>& ids) {
  const long cols = table.value.cols();
  Mat out(static_cast<long>(ids.size()), cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= table.value.rows()) throw std::out_of_range("token id out of vocabulary");
    out.row(static_cast<long>(i)) = table.value.row(id);
  }
  Node n;
  n.val = std::move(out);
  n.requires_grad = true;
  Var v = push(std::move(n));
  int self = v.i;
  Tensor* tp = &table;
  std::vector<int> ids_copy = ids;
  nodes_[self].back = [tp, self, ids_copy](Tape& tape) {
    const Mat& g = tape.nodes_[self].grad;
    for (size_t i = 0; i < ids_copy.size(); ++i)
      tp->grad.row(ids_copy[i]) += g.row(static_cast<long>(i));
  };
  return v;
}

Var Tape::matmul(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.cols() != B.rows()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A * B;
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[a.i].requires_grad) t.add_grad(a.i, g * t.node_val(b.i).transpose());
    if (t.nodes_[b.i].requires_grad) t.add_grad(b.i, t.node_val(a.i).transpose() * g);
  };
  return v;
}

Var Tape::matmul_nt(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.cols() != B.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A * B.transpose();
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[a.i].requires_grad) t.add_grad(a.i, g * t.node_val(b.i));
    if (t.nodes_[b.i].requires_grad) t.add_grad(b.i, g.transpose() * t.node_val(a.i));
  };
  return v;
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A + B;
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    t.add_grad(a.i, g);
    t.add_grad(b.i, g);
  };
  return v;
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A - B;
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    t.add_grad(a.i, g);
    t.add_grad(b.i, -g);
  };
  return v;
}

Var Tape::add_rowvec(Var a, Var row) {
  check(a);
  check(row);
  const Mat& A = node_val(a.i);
  const Mat& R = node_val(row.i);
  if (R.rows() != 1 || R.cols() != A.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A.rowwise() + R.row(0);
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[row.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, row, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    t.add_grad(a.i, g);
    t.add_grad(row.i, g.colwise().sum());
  };
  return v;
}

Var Tape::mul_elem(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A.cwiseProduct(B);
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[a.i].requires_grad) t.add_grad(a.i, g.cwiseProduct(t.node_val(b.i)));
    if (t.nodes_[b.i].requires_grad) t.add_grad(b.i, g.cwiseProduct(t.node_val(a.i)));
  };
  return v;
}

Var Tape::cmul(Var a, double c) {
  check(a);
  Node n;
  n.val = node_val(a.i) * c;
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, c, self](Tape& t) { t.add_grad(a.i, t.nodes_[self].grad * c); };
  return v;
}

Var Tape::relu(Var a) {
  check(a);
  Node n;
  n.val = node_val(a.i).cwiseMax(0.0);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    Mat m = (t.node_val(a.i).array() > 0.0).cast<double>();
    t.add_grad(a.i, g.cwiseProduct(m));
  };
  return v;
}

Var Tape::slice_rows(Var a, long r0, long n_rows) {
  check(a);
  const Mat& A = node_val(a.i);
  if (r0 < 0 || r0 + n_rows > A.rows()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A.middleRows(r0, n_rows);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, r0, n_rows, self](Tape& t) {
    const Mat& A = t.node_val(a.i);
    Mat g = Mat::Zero(A.rows(), A.cols());
    g.middleRows(r0, n_rows) = t.nodes_[self].grad;
    t.add_grad(a.i, g);
  };
  return v;
}

Var Tape::slice_cols(Var a, long c0, long n_cols) {
  check(a);
  const Mat& A = node_val(a.i);
  if (c0 < 0 || c0 + n_cols > A.cols()) throw std::invalid_argument("dimension mismatch");
  Node n;
  n.val = A.middleCols(c0, n_cols);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, c0, n_cols, self](Tape& t) {
    const Mat& A = t.node_val(a.i);
    Mat g = Mat::Zero(A.rows(), A.cols());
    g.middleCols(c0, n_cols) = t.nodes_[self].grad;
    t.add_grad(a.i, g);
  };
  return v;
}

Var Tape::concat_cols(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.rows() != B.rows()) throw std::invalid_argument("dimension mismatch");
  Mat out(A.rows(), A.cols() + B.cols());
  out << A, B;
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    long ac = t.node_val(a.i).cols();
    t.add_grad(a.i, g.leftCols(ac));
    t.add_grad(b.i, g.rightCols(g.cols() - ac));
  };
  return v;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  long cols = node_val(check(parts[0]).i).cols();
  long rows = 0;
  for (Var p : parts) {
    check(p);
    if (node_val(p.i).cols() != cols) throw std::invalid_argument("dimension mismatch");
    rows += node_val(p.i).rows();
  }
  Mat out(rows, cols);
  long r = 0;
  bool rg = false;
  for (Var p : parts) {
    const Mat& P = node_val(p.i);
    out.middleRows(r, P.rows()) = P;
    r += P.rows();
    rg = rg || nodes_[p.i].requires_grad;
  }
  Node n;
  n.val = std::move(out);
  n.requires_grad = rg;
  Var v = push(std::move(n));
  int self = v.i;
  std::vector<Var> ps = parts;
  nodes_[self].back = [ps, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    long r = 0;
    for (Var p : ps) {
      long pr = t.node_val(p.i).rows();
      t.add_grad(p.i, g.middleRows(r, pr));
      r += pr;
    }
  };
  return v;
}

Var Tape::softmax_rows_masked(Var a, const std::vector<int>& col_mask) {
  check(a);
  const Mat& A = node_val(a.i);
  if (static_cast<long>(col_mask.size()) != A.cols()) throw std::invalid_argument("dimension mismatch");
  long n_valid = 0;
  for (int m : col_mask) n_valid += (m != 0);
  if (n_valid == 0) throw std::invalid_argument("softmax over fully masked row");
  Mat out = Mat::Zero(A.rows(), A.cols());
  for (long r = 0; r < A.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < A.cols(); ++c)
      if (col_mask[c]) mx = std::max(mx, A(r, c));
    double denom = 0.0;
    for (long c = 0; c < A.cols(); ++c)
      if (col_mask[c]) {
        out(r, c) = std::exp(A(r, c) - mx);
        denom += out(r, c);
      }
    for (long c = 0; c < A.cols(); ++c)
      if (col_mask[c]) out(r, c) /= denom;
  }
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  std::vector<int> mask = col_mask;
  nodes_[self].back = [a, mask, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& p = t.nodes_[self].val;
    Mat dz = Mat::Zero(p.rows(), p.cols());
    for (long r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (long c = 0; c < p.cols(); ++c)
        if (mask[c]) dot += g(r, c) * p(r, c);
      for (long c = 0; c < p.cols(); ++c)
        if (mask[c]) dz(r, c) = p(r, c) * (g(r, c) - dot);
    }
    t.add_grad(a.i, dz);
  };
  return v;
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check(x);
  check(gamma);
  check(beta);
  const Mat& X = node_val(x.i);
  const Mat& G = node_val(gamma.i);
  const Mat& B = node_val(beta.i);
  if (G.rows() != 1 || B.rows() != 1 || G.cols() != X.cols() || B.cols() != X.cols())
    throw std::invalid_argument("dimension mismatch");
  const long n = X.cols();
  Mat xhat(X.rows(), n);
  Vec inv_std(X.rows());
  for (long r = 0; r < X.rows(); ++r) {
    double mean = X.row(r).mean();
    double var = (X.row(r).array() - mean).square().sum() / static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (X.row(r).array() - mean) * is;
  }
  Mat out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  Node nd;
  nd.val = std::move(out);
  nd.requires_grad =
      nodes_[x.i].requires_grad || nodes_[gamma.i].requires_grad || nodes_[beta.i].requires_grad;
  Var v = push(std::move(nd));
  int self = v.i;
  nodes_[self].back = [x, gamma, beta, xhat, inv_std, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& G = t.node_val(gamma.i);
    const long n = xhat.cols();
    if (t.nodes_[gamma.i].requires_grad)
      t.add_grad(gamma.i, (g.cwiseProduct(xhat)).colwise().sum());
    if (t.nodes_[beta.i].requires_grad) t.add_grad(beta.i, g.colwise().sum());
    if (t.nodes_[x.i].requires_grad) {
      Mat dx(xhat.rows(), n);
      for (long r = 0; r < xhat.rows(); ++r) {
        Eigen::RowVectorXd gg = g.row(r).cwiseProduct(G.row(0));
        double s1 = gg.sum();
        double s2 = gg.cwiseProduct(xhat.row(r)).sum();
        dx.row(r) =
            (gg.array() - s1 / static_cast<double>(n) -
             xhat.row(r).array() * (s2 / static_cast<double>(n))) *
            inv_std(r);
      }
      t.add_grad(x.i, dx);
    }
  };
  return v;
}

Var Tape::rows_l2_normalize(Var a) {
  check(a);
  const Mat& A = node_val(a.i);
  Vec norms(A.rows());
  Mat out(A.rows(), A.cols());
  for (long r = 0; r < A.rows(); ++r) {
    double nn = A.row(r).norm();
    if (nn < kZeroNormEps) throw std::invalid_argument("zero-norm embedding");
    norms(r) = nn;
    out.row(r) = A.row(r) / nn;
  }
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, norms, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& y = t.nodes_[self].val;
    Mat dx(y.rows(), y.cols());
    for (long r = 0; r < y.rows(); ++r) {
      double dot = y.row(r).dot(g.row(r));
      dx.row(r) = (g.row(r) - y.row(r) * dot) / norms(r);
    }
    t.add_grad(a.i, dx);
  };
  return v;
}

Var Tape::dropout(Var a, double p, Rng& rng) {
  check(a);
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout rate out of range");
  if (p == 0.0) return a;
  const Mat& A = node_val(a.i);
  const double scale = 1.0 / (1.0 - p);
  Mat mask(A.rows(), A.cols());
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (long r = 0; r < A.rows(); ++r)
    for (long c = 0; c < A.cols(); ++c) mask(r, c) = dist(rng) < p ? 0.0 : scale;
  Node n;
  n.val = A.cwiseProduct(mask);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, mask, self](Tape& t) {
    t.add_grad(a.i, t.nodes_[self].grad.cwiseProduct(mask));
  };
  return v;
}

Var Tape::cosine(Var a, Var b) {
  check(a);
  check(b);
  const Mat& A = node_val(a.i);
  const Mat& B = node_val(b.i);
  if (A.rows() != 1 || B.rows() != 1 || A.cols() != B.cols())
    throw std::invalid_argument("dimension mismatch");
  double na = A.row(0).norm();
  double nb = B.row(0).norm();
  if (na < kZeroNormEps || nb < kZeroNormEps) throw std::invalid_argument("zero-norm embedding");
  double c = A.row(0).dot(B.row(0)) / (na * nb);
  Mat out(1, 1);
  out(0, 0) = c;
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, b, na, nb, c, self](Tape& t) {
    double g = t.nodes_[self].grad(0, 0);
    const Mat& A = t.node_val(a.i);
    const Mat& B = t.node_val(b.i);
    if (t.nodes_[a.i].requires_grad)
      t.add_grad(a.i, g * (B / (na * nb) - c * A / (na * na)));
    if (t.nodes_[b.i].requires_grad)
      t.add_grad(b.i, g * (A / (na * nb) - c * B / (nb * nb)));
  };
  return v;
}

Var Tape::sum_all(Var a) {
  check(a);
  Mat out(1, 1);
  out(0, 0) = node_val(a.i).sum();
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, self](Tape& t) {
    const Mat& A = t.node_val(a.i);
    t.add_grad(a.i, Mat::Constant(A.rows(), A.cols(), t.nodes_[self].grad(0, 0)));
  };
  return v;
}

Var Tape::mean_all(Var a) {
  check(a);
  const Mat& A = node_val(a.i);
  return cmul(sum_all(a), 1.0 / static_cast<double>(A.size()));
}

Var Tape::logsumexp_rows(Var a) {
  check(a);
  const Mat& A = node_val(a.i);
  Mat out(A.rows(), 1);
  Mat soft(A.rows(), A.cols());
  for (long r = 0; r < A.rows(); ++r) {
    double mx = A.row(r).maxCoeff();
    Eigen::ArrayXd e = (A.row(r).array() - mx).exp();
    double s = e.sum();
    out(r, 0) = mx + std::log(s);
    soft.row(r) = (e / s).matrix();
  }
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, soft, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;  // Nx1
    Mat dx = soft.array().colwise() * g.col(0).array();
    t.add_grad(a.i, dx);
  };
  return v;
}

Var Tape::take_diag(Var a) {
  check(a);
  const Mat& A = node_val(a.i);
  if (A.rows() != A.cols()) throw std::invalid_argument("dimension mismatch");
  Mat out = A.diagonal();
  Node n;
  n.val = std::move(out);
  n.requires_grad = nodes_[a.i].requires_grad;
  Var v = push(std::move(n));
  int self = v.i;
  nodes_[self].back = [a, self](Tape& t) {
    const Mat& g = t.nodes_[self].grad;  // Nx1
    const Mat& A = t.node_val(a.i);
    Mat dx = Mat::Zero(A.rows(), A.cols());
    dx.diagonal() = g.col(0);
    t.add_grad(a.i, dx);
  };
  return v;
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw std::runtime_error("no recorded computation");
  check(loss);
  const Mat& lv = node_val(loss.i);
  if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("loss must be a scalar");
  add_grad(loss.i, Mat::Ones(1, 1));
  for (int i = loss.i; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.grad_touched && n.back) n.back(*this);
  }
}

}  // namespace err::ag

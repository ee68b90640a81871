// Copyright 2026 The munchlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "munchlab/error.hpp"

namespace munchlab::seqmodel::detail {
namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename S>
using MapC = Eigen::Map<const Mat<S>>;
template <typename S>
using MapM = Eigen::Map<Mat<S>>;
template <typename S>
using MapRowC = Eigen::Map<const RowVec<S>>;
template <typename S>
using MapRow = Eigen::Map<RowVec<S>>;

template <typename S>
S gelu(S x) {
  constexpr S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<S>(0.5) * x * (S(1) + std::tanh(k * (x + static_cast<S>(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  constexpr S k = static_cast<S>(0.7978845608028654);
  const S t = std::tanh(k * (x + static_cast<S>(0.044715) * x * x * x));
  return static_cast<S>(0.5) * (S(1) + t) +
         static_cast<S>(0.5) * x * (S(1) - t * t) * k * (S(1) + static_cast<S>(3 * 0.044715) * x * x);
}

template <typename S>
struct NormCache {
  Mat<S> xhat;
  std::vector<S> rstd;
};

template <typename S>
void layer_norm(const Mat<S>& x, const S* gamma, const S* beta, Mat<S>& y, NormCache<S>* cache) {
  const Eigen::Index n = x.rows(), e = x.cols();
  y.resize(n, e);
  if (cache) {
    cache->xhat.resize(n, e);
    cache->rstd.resize(static_cast<std::size_t>(n));
  }
  const MapRowC<S> g(gamma, e), b(beta, e);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    RowVec<S> xhat = (x.row(r).array() - mean) * rstd;
    y.row(r) = xhat.cwiseProduct(g) + b;
    if (cache) {
      cache->xhat.row(r) = xhat;
      cache->rstd[static_cast<std::size_t>(r)] = rstd;
    }
  }
}

template <typename S>
void layer_norm_backward(const Mat<S>& dy, const NormCache<S>& cache, const S* gamma, S* dgamma,
                         S* dbeta, Mat<S>& dx_accum) {
  const Eigen::Index n = dy.rows(), e = dy.cols();
  const MapRowC<S> g(gamma, e);
  MapRow<S> dg(dgamma, e), db(dbeta, e);
  for (Eigen::Index r = 0; r < n; ++r) {
    dg += dy.row(r).cwiseProduct(cache.xhat.row(r));
    db += dy.row(r);
    const RowVec<S> dxhat = dy.row(r).cwiseProduct(g);
    const S m1 = dxhat.mean();
    const S m2 = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
    dx_accum.row(r).array() +=
        cache.rstd[static_cast<std::size_t>(r)] * (dxhat.array() - m1 - cache.xhat.row(r).array() * m2);
  }
}

template <typename S>
void add_row_bias(Mat<S>& m, const S* bias) {
  m.rowwise() += MapRowC<S>(bias, m.cols());
}

struct Packed {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> seq_offset, seq_len;  // rows per sequence
  std::vector<std::size_t> seq_index;             // example index per packed sequence
  std::vector<std::size_t> target_row;
  std::vector<TokenId> target_label;
  std::vector<std::size_t> target_seq;  // example index per target
};

Packed pack(const Arch& arch, const std::vector<Example>& batch) {
  Packed p;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto& ex = batch[j];
    if (ex.target.empty()) continue;
    if (ex.prompt.empty()) throw Error("seqmodel.empty_prompt", "prompt must contain at least one token");
    const std::size_t n = ex.prompt.size() + ex.target.size() - 1;
    if (n > arch.context)
      throw Error("seqmodel.context_overflow",
                  "sequence of " + std::to_string(n) + " input positions exceeds context " +
                      std::to_string(arch.context));
    const std::size_t off = p.tokens.size();
    p.seq_offset.push_back(off);
    p.seq_len.push_back(n);
    p.seq_index.push_back(j);
    for (std::size_t i = 0; i < n; ++i) {
      const TokenId t = i < ex.prompt.size() ? ex.prompt[i] : ex.target[i - ex.prompt.size()];
      if (t < 0 || static_cast<std::size_t>(t) >= arch.vocab_size)
        throw Error("seqmodel.bad_token", "token id " + std::to_string(t) + " outside vocabulary");
      p.tokens.push_back(t);
      p.positions.push_back(i);
    }
    for (std::size_t k = 0; k < ex.target.size(); ++k) {
      const TokenId t = ex.target[k];
      if (t < 0 || static_cast<std::size_t>(t) >= arch.vocab_size)
        throw Error("seqmodel.bad_token", "token id " + std::to_string(t) + " outside vocabulary");
      p.target_row.push_back(off + ex.prompt.size() - 1 + k);
      p.target_label.push_back(t);
      p.target_seq.push_back(j);
    }
  }
  return p;
}

template <typename S>
struct LayerCache {
  Mat<S> x_in;
  NormCache<S> ln1;
  Mat<S> h1, qkv, attn;
  std::vector<Mat<S>> probs;  // [sequence * heads]
  Mat<S> x_mid;
  NormCache<S> ln2;
  Mat<S> h2, u, g;
};

}  // namespace

Layout make_layout(const Arch& a) {
  Layout l;
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const std::size_t o = off;
    off += n;
    return o;
  };
  const std::size_t V = a.vocab_size, E = a.embed_dim, H = a.hidden_dim, C = a.context;
  l.tok = take(V * E);
  l.pos = take(C * E);
  for (std::size_t i = 0; i < a.layers; ++i) {
    LayerOffsets lo{};
    lo.ln1_g = take(E);
    lo.ln1_b = take(E);
    lo.wqkv = take(E * 3 * E);
    lo.bqkv = take(3 * E);
    lo.wo = take(E * E);
    lo.bo = take(E);
    lo.ln2_g = take(E);
    lo.ln2_b = take(E);
    lo.w1 = take(E * H);
    lo.b1 = take(H);
    lo.w2 = take(H * E);
    lo.b2 = take(E);
    l.layers.push_back(lo);
  }
  l.lnf_g = take(E);
  l.lnf_b = take(E);
  l.unembed = take(E * V);
  l.total = off;
  return l;
}

template <typename S>
std::vector<double> run_batch(const Arch& arch, const S* P, const std::vector<Example>& batch,
                              const Objective* objective, S* grad, double* loss) {
  const Layout L = make_layout(arch);
  const Packed pk = pack(arch, batch);
  const auto E = static_cast<Eigen::Index>(arch.embed_dim);
  const auto H = static_cast<Eigen::Index>(arch.hidden_dim);
  const auto V = static_cast<Eigen::Index>(arch.vocab_size);
  const auto NH = static_cast<Eigen::Index>(arch.heads);
  const Eigen::Index dh = E / NH;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const auto N = static_cast<Eigen::Index>(pk.tokens.size());
  const auto K = static_cast<Eigen::Index>(pk.target_row.size());
  const std::size_t n_seq = pk.seq_offset.size();

  std::vector<double> logp(batch.size(), 0.0);
  if (N == 0) {
    if (grad && objective) {
      std::vector<double> dlogp(batch.size(), 0.0);
      const double v = (*objective)(logp, dlogp);
      if (loss) *loss = v;
    }
    return logp;
  }

  const MapC<S> tok(P + L.tok, V, E), pos(P + L.pos, static_cast<Eigen::Index>(arch.context), E);
  Mat<S> x(N, E);
  for (Eigen::Index r = 0; r < N; ++r)
    x.row(r) = tok.row(pk.tokens[static_cast<std::size_t>(r)]) + pos.row(static_cast<Eigen::Index>(pk.positions[static_cast<std::size_t>(r)]));

  std::vector<LayerCache<S>> caches(arch.layers);
  for (std::size_t li = 0; li < arch.layers; ++li) {
    const LayerOffsets& o = L.layers[li];
    LayerCache<S>& c = caches[li];
    c.x_in = x;
    layer_norm<S>(x, P + o.ln1_g, P + o.ln1_b, c.h1, &c.ln1);
    c.qkv.noalias() = c.h1 * MapC<S>(P + o.wqkv, E, 3 * E);
    add_row_bias<S>(c.qkv, P + o.bqkv);
    c.attn.setZero(N, E);
    c.probs.assign(n_seq * static_cast<std::size_t>(NH), Mat<S>());
    for (std::size_t sq = 0; sq < n_seq; ++sq) {
      const auto off = static_cast<Eigen::Index>(pk.seq_offset[sq]);
      const auto n = static_cast<Eigen::Index>(pk.seq_len[sq]);
      for (Eigen::Index h = 0; h < NH; ++h) {
        const auto Q = c.qkv.block(off, h * dh, n, dh);
        const auto Kt = c.qkv.block(off, E + h * dh, n, dh);
        const auto Vv = c.qkv.block(off, 2 * E + h * dh, n, dh);
        Mat<S>& pr = c.probs[sq * static_cast<std::size_t>(NH) + static_cast<std::size_t>(h)];
        pr.noalias() = (Q * Kt.transpose()) * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
          const S mx = pr.row(i).head(i + 1).maxCoeff();
          S sum = 0;
          for (Eigen::Index jx = 0; jx <= i; ++jx) {
            const S e = std::exp(pr(i, jx) - mx);
            pr(i, jx) = e;
            sum += e;
          }
          pr.row(i).head(i + 1) /= sum;
          if (i + 1 < n) pr.row(i).tail(n - i - 1).setZero();
        }
        c.attn.block(off, h * dh, n, dh).noalias() = pr * Vv;
      }
    }
    c.x_mid = x;
    c.x_mid.noalias() += c.attn * MapC<S>(P + o.wo, E, E);
    add_row_bias<S>(c.x_mid, P + o.bo);
    layer_norm<S>(c.x_mid, P + o.ln2_g, P + o.ln2_b, c.h2, &c.ln2);
    c.u.noalias() = c.h2 * MapC<S>(P + o.w1, E, H);
    add_row_bias<S>(c.u, P + o.b1);
    c.g = c.u.unaryExpr([](S v) { return gelu(v); });
    x = c.x_mid;
    x.noalias() += c.g * MapC<S>(P + o.w2, H, E);
    add_row_bias<S>(x, P + o.b2);
  }

  Mat<S> hf;
  NormCache<S> lnf;
  layer_norm<S>(x, P + L.lnf_g, P + L.lnf_b, hf, &lnf);
  Mat<S> ht(K, E);
  for (Eigen::Index k = 0; k < K; ++k) ht.row(k) = hf.row(static_cast<Eigen::Index>(pk.target_row[static_cast<std::size_t>(k)]));
  const MapC<S> wout(P + L.unembed, E, V);
  Mat<S> probs = ht * wout;  // logits, then softmax in place
  for (Eigen::Index k = 0; k < K; ++k) {
    const S mx = probs.row(k).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index v = 0; v < V; ++v) sum += std::exp(static_cast<double>(probs(k, v) - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    const auto label = static_cast<Eigen::Index>(pk.target_label[static_cast<std::size_t>(k)]);
    logp[pk.target_seq[static_cast<std::size_t>(k)]] += static_cast<double>(probs(k, label)) - lse;
    for (Eigen::Index v = 0; v < V; ++v)
      probs(k, v) = static_cast<S>(std::exp(static_cast<double>(probs(k, v)) - lse));
  }
  if (!grad) return logp;

  std::vector<double> dlogp(batch.size(), 0.0);
  const double value = (*objective)(logp, dlogp);
  if (loss) *loss = value;

  // d value / d logits = c_j * (onehot - softmax)
  Mat<S> dz = -probs;
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto label = static_cast<Eigen::Index>(pk.target_label[static_cast<std::size_t>(k)]);
    dz(k, label) += S(1);
    dz.row(k) *= static_cast<S>(dlogp[pk.target_seq[static_cast<std::size_t>(k)]]);
  }
  MapM<S>(grad + L.unembed, E, V).noalias() += ht.transpose() * dz;
  const Mat<S> dht = dz * wout.transpose();
  Mat<S> dhf = Mat<S>::Zero(N, E);
  for (Eigen::Index k = 0; k < K; ++k) dhf.row(static_cast<Eigen::Index>(pk.target_row[static_cast<std::size_t>(k)])) += dht.row(k);
  Mat<S> dx = Mat<S>::Zero(N, E);
  layer_norm_backward<S>(dhf, lnf, P + L.lnf_g, grad + L.lnf_g, grad + L.lnf_b, dx);

  for (std::size_t li = arch.layers; li-- > 0;) {
    const LayerOffsets& o = L.layers[li];
    const LayerCache<S>& c = caches[li];
    // MLP branch
    MapM<S>(grad + o.w2, H, E).noalias() += c.g.transpose() * dx;
    MapRow<S>(grad + o.b2, E) += dx.colwise().sum();
    Mat<S> du = dx * MapC<S>(P + o.w2, H, E).transpose();
    du.array() *= c.u.unaryExpr([](S v) { return gelu_grad(v); }).array();
    MapM<S>(grad + o.w1, E, H).noalias() += c.h2.transpose() * du;
    MapRow<S>(grad + o.b1, H) += du.colwise().sum();
    const Mat<S> dh2 = du * MapC<S>(P + o.w1, E, H).transpose();
    Mat<S> dmid = dx;
    layer_norm_backward<S>(dh2, c.ln2, P + o.ln2_g, grad + o.ln2_g, grad + o.ln2_b, dmid);
    // attention branch
    MapM<S>(grad + o.wo, E, E).noalias() += c.attn.transpose() * dmid;
    MapRow<S>(grad + o.bo, E) += dmid.colwise().sum();
    const Mat<S> dattn = dmid * MapC<S>(P + o.wo, E, E).transpose();
    Mat<S> dqkv = Mat<S>::Zero(N, 3 * E);
    for (std::size_t sq = 0; sq < n_seq; ++sq) {
      const auto off = static_cast<Eigen::Index>(pk.seq_offset[sq]);
      const auto n = static_cast<Eigen::Index>(pk.seq_len[sq]);
      for (Eigen::Index h = 0; h < NH; ++h) {
        const Mat<S>& pr = c.probs[sq * static_cast<std::size_t>(NH) + static_cast<std::size_t>(h)];
        const auto Q = c.qkv.block(off, h * dh, n, dh);
        const auto Kt = c.qkv.block(off, E + h * dh, n, dh);
        const auto Vv = c.qkv.block(off, 2 * E + h * dh, n, dh);
        const auto dA = dattn.block(off, h * dh, n, dh);
        Mat<S> dp = dA * Vv.transpose();
        dqkv.block(off, 2 * E + h * dh, n, dh).noalias() += pr.transpose() * dA;
        for (Eigen::Index i = 0; i < n; ++i) {
          const S dot = dp.row(i).dot(pr.row(i));
          dp.row(i) = pr.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        dp *= scale;
        dqkv.block(off, h * dh, n, dh).noalias() += dp * Kt;
        dqkv.block(off, E + h * dh, n, dh).noalias() += dp.transpose() * Q;
      }
    }
    MapM<S>(grad + o.wqkv, E, 3 * E).noalias() += c.h1.transpose() * dqkv;
    MapRow<S>(grad + o.bqkv, 3 * E) += dqkv.colwise().sum();
    const Mat<S> dh1 = dqkv * MapC<S>(P + o.wqkv, E, 3 * E).transpose();
    dx = dmid;
    layer_norm_backward<S>(dh1, c.ln1, P + o.ln1_g, grad + o.ln1_g, grad + o.ln1_b, dx);
  }

  MapM<S> dtok(grad + L.tok, V, E);
  MapM<S> dpos(grad + L.pos, static_cast<Eigen::Index>(arch.context), E);
  for (Eigen::Index r = 0; r < N; ++r) {
    dtok.row(pk.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
    dpos.row(static_cast<Eigen::Index>(pk.positions[static_cast<std::size_t>(r)])) += dx.row(r);
  }
  return logp;
}

template <typename S>
Decoder<S>::Decoder(const Arch& arch, const S* params) : arch_(arch), p_(params), layout_(make_layout(arch)) {
  const auto C = static_cast<Eigen::Index>(arch.context), E = static_cast<Eigen::Index>(arch.embed_dim);
  keys_.assign(arch.layers, Mat<S>(C, E));
  values_.assign(arch.layers, Mat<S>(C, E));
}

template <typename S>
const std::vector<double>& Decoder<S>::push(TokenId token) {
  if (length_ >= arch_.context)
    throw Error("seqmodel.context_overflow",
                "prefix longer than context " + std::to_string(arch_.context));
  if (token < 0 || static_cast<std::size_t>(token) >= arch_.vocab_size)
    throw Error("seqmodel.bad_token", "token id " + std::to_string(token) + " outside vocabulary");
  const auto E = static_cast<Eigen::Index>(arch_.embed_dim);
  const auto H = static_cast<Eigen::Index>(arch_.hidden_dim);
  const auto V = static_cast<Eigen::Index>(arch_.vocab_size);
  const auto NH = static_cast<Eigen::Index>(arch_.heads);
  const Eigen::Index dh = E / NH;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const auto t = static_cast<Eigen::Index>(length_);

  Mat<S> x = MapC<S>(p_ + layout_.tok, V, E).row(token) +
             MapC<S>(p_ + layout_.pos, static_cast<Eigen::Index>(arch_.context), E).row(t);
  Mat<S> h;
  for (std::size_t li = 0; li < arch_.layers; ++li) {
    const LayerOffsets& o = layout_.layers[li];
    layer_norm<S>(x, p_ + o.ln1_g, p_ + o.ln1_b, h, nullptr);
    Mat<S> qkv = h * MapC<S>(p_ + o.wqkv, E, 3 * E);
    add_row_bias<S>(qkv, p_ + o.bqkv);
    keys_[li].row(t) = qkv.block(0, E, 1, E);
    values_[li].row(t) = qkv.block(0, 2 * E, 1, E);
    Mat<S> attn(1, E);
    for (Eigen::Index hd = 0; hd < NH; ++hd) {
      RowVec<S> s = (qkv.block(0, hd * dh, 1, dh) * keys_[li].block(0, hd * dh, t + 1, dh).transpose()) * scale;
      const S mx = s.maxCoeff();
      s = (s.array() - mx).exp();
      s /= s.sum();
      attn.block(0, hd * dh, 1, dh).noalias() = s * values_[li].block(0, hd * dh, t + 1, dh);
    }
    x.noalias() += attn * MapC<S>(p_ + o.wo, E, E);
    add_row_bias<S>(x, p_ + o.bo);
    layer_norm<S>(x, p_ + o.ln2_g, p_ + o.ln2_b, h, nullptr);
    Mat<S> u = h * MapC<S>(p_ + o.w1, E, H);
    add_row_bias<S>(u, p_ + o.b1);
    u = u.unaryExpr([](S v) { return gelu(v); });
    x.noalias() += u * MapC<S>(p_ + o.w2, H, E);
    add_row_bias<S>(x, p_ + o.b2);
  }
  layer_norm<S>(x, p_ + layout_.lnf_g, p_ + layout_.lnf_b, h, nullptr);
  const Mat<S> logits = h * MapC<S>(p_ + layout_.unembed, E, V);
  const S mx = logits.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index v = 0; v < V; ++v) sum += std::exp(static_cast<double>(logits(0, v) - mx));
  const double lse = static_cast<double>(mx) + std::log(sum);
  logprobs_.resize(static_cast<std::size_t>(V));
  for (Eigen::Index v = 0; v < V; ++v) logprobs_[static_cast<std::size_t>(v)] = static_cast<double>(logits(0, v)) - lse;
  ++length_;
  return logprobs_;
}

template std::vector<double> run_batch<float>(const Arch&, const float*, const std::vector<Example>&,
                                              const Objective*, float*, double*);
template std::vector<double> run_batch<double>(const Arch&, const double*, const std::vector<Example>&,
                                               const Objective*, double*, double*);
template class Decoder<float>;
template class Decoder<double>;

}  // namespace munchlab::seqmodel::detail

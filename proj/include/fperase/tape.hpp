#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "fperase/errors.hpp"
#include "fperase/tensor.hpp"

namespace fperase {

// Reverse-mode autodiff tape over float32 tensors.
//
// Nodes are appended in execution order, so walking the tape backwards visits
// them in reverse topological order exactly once. Scalar-producing ops
// (cross_entropy, target_logprob_sum) keep their forward value in double so
// finite-difference checks are not limited by float32 rounding.
class Tape {
public:
    using NodeId = std::int32_t;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    NodeId leaf(Tensor value, bool needs_grad) {
        return push(std::move(value), needs_grad, {});
    }

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }
    double scalar(NodeId id) const {
        const Node& n = nodes_[check(id)];
        if (!n.is_scalar) throw StateError("tape: node is not a scalar result");
        return n.scalar_value;
    }

    // ---- differentiable ops -------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        Tensor C = fperase::matmul(A, B);
        NodeId out = push(std::move(C), needs(a) || needs(b), [this, a, b](NodeId self) {
            const Tensor& dC = nodes_[self].grad;
            const Tensor& A = nodes_[a].value;
            const Tensor& B = nodes_[b].value;
            const std::int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
            if (needs(a)) {
                Tensor& dA = nodes_[a].grad;
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j)
                            acc += static_cast<double>(dC.data[std::size_t(i * n + j)]) *
                                   static_cast<double>(B.data[std::size_t(p * n + j)]);
                        dA.data[std::size_t(i * k + p)] += static_cast<float>(acc);
                    }
                touch(a);
            }
            if (needs(b)) {
                Tensor& dB = nodes_[b].grad;
                for (std::int64_t p = 0; p < k; ++p)
                    for (std::int64_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < m; ++i)
                            acc += static_cast<double>(A.data[std::size_t(i * k + p)]) *
                                   static_cast<double>(dC.data[std::size_t(i * n + j)]);
                        dB.data[std::size_t(p * n + j)] += static_cast<float>(acc);
                    }
                touch(b);
            }
        });
        return out;
    }

    NodeId add(NodeId a, NodeId b) {
        Tensor C = fperase::add(value(a), value(b));
        return push(std::move(C), needs(a) || needs(b), [this, a, b](NodeId self) {
            const Tensor& dC = nodes_[self].grad;
            if (needs(a)) {
                Tensor& dA = nodes_[a].grad;
                for (std::size_t i = 0; i < dC.data.size(); ++i) dA.data[i] += dC.data[i];
                touch(a);
            }
            if (needs(b)) {
                Tensor& dB = nodes_[b].grad;
                for (std::size_t i = 0; i < dC.data.size(); ++i) dB.data[i] += dC.data[i];
                touch(b);
            }
        });
    }

    NodeId scale(NodeId a, float s) {
        Tensor C = fperase::scale(value(a), s);
        return push(std::move(C), needs(a), [this, a, s](NodeId self) {
            if (!needs(a)) return;
            const Tensor& dC = nodes_[self].grad;
            Tensor& dA = nodes_[a].grad;
            for (std::size_t i = 0; i < dC.data.size(); ++i) dA.data[i] += s * dC.data[i];
            touch(a);
        });
    }

    NodeId relu(NodeId a) {
        Tensor C = value(a);
        for (auto& v : C.data) v = v > 0.0f ? v : 0.0f;
        return push(std::move(C), needs(a), [this, a](NodeId self) {
            if (!needs(a)) return;
            const Tensor& dC = nodes_[self].grad;
            const Tensor& A = nodes_[a].value;
            Tensor& dA = nodes_[a].grad;
            for (std::size_t i = 0; i < dC.data.size(); ++i)
                if (A.data[i] > 0.0f) dA.data[i] += dC.data[i];
            touch(a);
        });
    }

    // Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps). No learned scale.
    NodeId rmsnorm_rows(NodeId a, float eps = 1e-5f) {
        const Tensor& A = value(a);
        if (A.rank() != 2) throw DimError("rmsnorm_rows: input is not 2-D");
        const std::int64_t m = A.shape[0], d = A.shape[1];
        Tensor C = Tensor::zeros({m, d});
        std::vector<float> inv_rms(static_cast<std::size_t>(m));
        for (std::int64_t i = 0; i < m; ++i) {
            double ms = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double v = A.data[std::size_t(i * d + j)];
                ms += v * v;
            }
            ms = ms / static_cast<double>(d) + eps;
            const float r = static_cast<float>(1.0 / std::sqrt(ms));
            inv_rms[std::size_t(i)] = r;
            for (std::int64_t j = 0; j < d; ++j)
                C.data[std::size_t(i * d + j)] = A.data[std::size_t(i * d + j)] * r;
        }
        return push(std::move(C), needs(a), [this, a, inv_rms = std::move(inv_rms)](NodeId self) {
            if (!needs(a)) return;
            const Tensor& dC = nodes_[self].grad;
            const Tensor& A = nodes_[a].value;
            Tensor& dA = nodes_[a].grad;
            const std::int64_t m = A.shape[0], d = A.shape[1];
            for (std::int64_t i = 0; i < m; ++i) {
                const double r = inv_rms[std::size_t(i)];
                double dot = 0.0;
                for (std::int64_t j = 0; j < d; ++j)
                    dot += static_cast<double>(dC.data[std::size_t(i * d + j)]) *
                           static_cast<double>(A.data[std::size_t(i * d + j)]);
                const double coef = r * r * r * dot / static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j)
                    dA.data[std::size_t(i * d + j)] += static_cast<float>(
                        r * dC.data[std::size_t(i * d + j)] - coef * A.data[std::size_t(i * d + j)]);
            }
            touch(a);
        });
    }

    // out[i] = wte[tokens[i]] + wpe[i]. Gradient scatters back into both tables.
    NodeId embed(NodeId wte, NodeId wpe, std::vector<int> tokens) {
        const Tensor& E = value(wte);
        const Tensor& P = value(wpe);
        if (E.rank() != 2 || P.rank() != 2 || E.shape[1] != P.shape[1])
            throw DimError("embed: tables must be 2-D with equal widths");
        const std::int64_t T = static_cast<std::int64_t>(tokens.size());
        if (T > P.shape[0]) throw CapacityError("embed: sequence longer than position table");
        const std::int64_t d = E.shape[1];
        Tensor C = Tensor::zeros({T, d});
        for (std::int64_t i = 0; i < T; ++i) {
            const int tok = tokens[std::size_t(i)];
            if (tok < 0 || tok >= E.shape[0]) throw IndexError("embed: token id out of range");
            for (std::int64_t j = 0; j < d; ++j)
                C.data[std::size_t(i * d + j)] =
                    E.data[std::size_t(tok * d + j)] + P.data[std::size_t(i * d + j)];
        }
        return push(std::move(C), needs(wte) || needs(wpe),
                    [this, wte, wpe, tokens = std::move(tokens)](NodeId self) {
                        const Tensor& dC = nodes_[self].grad;
                        const std::int64_t T = static_cast<std::int64_t>(tokens.size());
                        const std::int64_t d = dC.shape[1];
                        if (needs(wte)) {
                            Tensor& dE = nodes_[wte].grad;
                            for (std::int64_t i = 0; i < T; ++i) {
                                const int tok = tokens[std::size_t(i)];
                                for (std::int64_t j = 0; j < d; ++j)
                                    dE.data[std::size_t(tok * d + j)] += dC.data[std::size_t(i * d + j)];
                            }
                            touch(wte);
                        }
                        if (needs(wpe)) {
                            Tensor& dP = nodes_[wpe].grad;
                            for (std::int64_t i = 0; i < T; ++i)
                                for (std::int64_t j = 0; j < d; ++j)
                                    dP.data[std::size_t(i * d + j)] += dC.data[std::size_t(i * d + j)];
                            touch(wpe);
                        }
                    });
    }

    // Multi-head causal self-attention over already-projected Q, K, V [T x D].
    NodeId causal_attention(NodeId q, NodeId k, NodeId v, std::int64_t n_heads) {
        const Tensor& Q = value(q);
        const Tensor& K = value(k);
        const Tensor& V = value(v);
        if (Q.rank() != 2 || !Q.same_shape(K) || !Q.same_shape(V))
            throw DimError("causal_attention: Q/K/V must share a 2-D shape");
        const std::int64_t T = Q.shape[0], D = Q.shape[1];
        if (n_heads < 1 || D % n_heads != 0)
            throw DimError("causal_attention: head count must divide model width");
        const std::int64_t hd = D / n_heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

        Tensor O = Tensor::zeros({T, D});
        // probs[h*T*T + i*T + j] with j <= i; zero above the diagonal.
        std::vector<float> probs(std::size_t(n_heads * T * T), 0.0f);
        std::vector<double> row(static_cast<std::size_t>(T));
        for (std::int64_t h = 0; h < n_heads; ++h) {
            const std::int64_t off = h * hd;
            for (std::int64_t i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::int64_t c = 0; c < hd; ++c)
                        s += static_cast<double>(Q.data[std::size_t(i * D + off + c)]) *
                             static_cast<double>(K.data[std::size_t(j * D + off + c)]);
                    s *= inv_sqrt;
                    row[std::size_t(j)] = s;
                    if (s > mx) mx = s;
                }
                double denom = 0.0;
                for (std::int64_t j = 0; j <= i; ++j) {
                    row[std::size_t(j)] = std::exp(row[std::size_t(j)] - mx);
                    denom += row[std::size_t(j)];
                }
                for (std::int64_t j = 0; j <= i; ++j) {
                    const float p = static_cast<float>(row[std::size_t(j)] / denom);
                    probs[std::size_t(h * T * T + i * T + j)] = p;
                    for (std::int64_t c = 0; c < hd; ++c)
                        O.data[std::size_t(i * D + off + c)] +=
                            p * V.data[std::size_t(j * D + off + c)];
                }
            }
        }
        return push(std::move(O), needs(q) || needs(k) || needs(v),
                    [this, q, k, v, n_heads, probs = std::move(probs)](NodeId self) {
                        const Tensor& dO = nodes_[self].grad;
                        const Tensor& Q = nodes_[q].value;
                        const Tensor& K = nodes_[k].value;
                        const Tensor& V = nodes_[v].value;
                        const std::int64_t T = Q.shape[0], D = Q.shape[1];
                        const std::int64_t hd = D / n_heads;
                        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
                        std::vector<double> dP(static_cast<std::size_t>(T));
                        std::vector<double> dS(static_cast<std::size_t>(T));
                        for (std::int64_t h = 0; h < n_heads; ++h) {
                            const std::int64_t off = h * hd;
                            for (std::int64_t i = 0; i < T; ++i) {
                                // dP over keys j<=i, then softmax backward to dS.
                                double inner = 0.0;
                                for (std::int64_t j = 0; j <= i; ++j) {
                                    double acc = 0.0;
                                    for (std::int64_t c = 0; c < hd; ++c)
                                        acc += static_cast<double>(dO.data[std::size_t(i * D + off + c)]) *
                                               static_cast<double>(V.data[std::size_t(j * D + off + c)]);
                                    dP[std::size_t(j)] = acc;
                                    inner += acc * probs[std::size_t(h * T * T + i * T + j)];
                                }
                                for (std::int64_t j = 0; j <= i; ++j) {
                                    const double p = probs[std::size_t(h * T * T + i * T + j)];
                                    dS[std::size_t(j)] = p * (dP[std::size_t(j)] - inner) * inv_sqrt;
                                }
                                for (std::int64_t j = 0; j <= i; ++j) {
                                    const double ds = dS[std::size_t(j)];
                                    const double p = probs[std::size_t(h * T * T + i * T + j)];
                                    for (std::int64_t c = 0; c < hd; ++c) {
                                        if (needs(q))
                                            nodes_[q].grad.data[std::size_t(i * D + off + c)] +=
                                                static_cast<float>(ds * K.data[std::size_t(j * D + off + c)]);
                                        if (needs(k))
                                            nodes_[k].grad.data[std::size_t(j * D + off + c)] +=
                                                static_cast<float>(ds * Q.data[std::size_t(i * D + off + c)]);
                                        if (needs(v))
                                            nodes_[v].grad.data[std::size_t(j * D + off + c)] +=
                                                static_cast<float>(p * dO.data[std::size_t(i * D + off + c)]);
                                    }
                                }
                            }
                        }
                        if (needs(q)) touch(q);
                        if (needs(k)) touch(k);
                        if (needs(v)) touch(v);
                    });
    }

    NodeId gather_rows(NodeId a, std::vector<std::int64_t> rows) {
        const Tensor& A = value(a);
        if (A.rank() != 2) throw DimError("gather_rows: input is not 2-D");
        const std::int64_t d = A.shape[1];
        Tensor C = Tensor::zeros({static_cast<std::int64_t>(rows.size()), d});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] < 0 || rows[r] >= A.shape[0]) throw IndexError("gather_rows: row out of range");
            for (std::int64_t j = 0; j < d; ++j)
                C.data[r * std::size_t(d) + std::size_t(j)] =
                    A.data[std::size_t(rows[r] * d + j)];
        }
        return push(std::move(C), needs(a), [this, a, rows = std::move(rows)](NodeId self) {
            if (!needs(a)) return;
            const Tensor& dC = nodes_[self].grad;
            Tensor& dA = nodes_[a].grad;
            const std::int64_t d = dC.shape[1];
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (std::int64_t j = 0; j < d; ++j)
                    dA.data[std::size_t(rows[r] * d + j)] += dC.data[r * std::size_t(d) + std::size_t(j)];
            touch(a);
        });
    }

    // Mean over the batch of -log softmax(logits)[target]. Softmax uses
    // max-subtraction; the loss itself is carried in double.
    NodeId cross_entropy(NodeId logits, const std::vector<int>& targets) {
        std::vector<double> probs;
        const double loss = softmax_nll(value(logits), targets, probs);
        const std::int64_t B = static_cast<std::int64_t>(targets.size());
        return push_scalar(loss, needs(logits),
                           [this, logits, targets, probs = std::move(probs), B](NodeId self) {
                               if (!needs(logits)) return;
                               const double up = nodes_[self].grad.data[0];
                               Tensor& dL = nodes_[logits].grad;
                               const std::int64_t V = nodes_[logits].value.shape[1];
                               const double inv_b = 1.0 / static_cast<double>(B);
                               for (std::int64_t i = 0; i < B; ++i)
                                   for (std::int64_t j = 0; j < V; ++j) {
                                       double g = probs[std::size_t(i * V + j)];
                                       if (j == targets[std::size_t(i)]) g -= 1.0;
                                       dL.data[std::size_t(i * V + j)] += static_cast<float>(up * g * inv_b);
                                   }
                               touch(logits);
                           });
    }

    // Sum over rows of log softmax(logits)[target]; the NTK feature map
    // scalarizes model outputs with this.
    NodeId target_logprob_sum(NodeId logits, const std::vector<int>& targets) {
        std::vector<double> probs;
        const double nll = softmax_nll(value(logits), targets, probs);
        const std::int64_t B = static_cast<std::int64_t>(targets.size());
        const double total = -nll * static_cast<double>(B);
        return push_scalar(total, needs(logits),
                           [this, logits, targets, probs = std::move(probs), B](NodeId self) {
                               if (!needs(logits)) return;
                               const double up = nodes_[self].grad.data[0];
                               Tensor& dL = nodes_[logits].grad;
                               const std::int64_t V = nodes_[logits].value.shape[1];
                               for (std::int64_t i = 0; i < B; ++i)
                                   for (std::int64_t j = 0; j < V; ++j) {
                                       double g = -probs[std::size_t(i * V + j)];
                                       if (j == targets[std::size_t(i)]) g += 1.0;
                                       dL.data[std::size_t(i * V + j)] += static_cast<float>(up * g);
                                   }
                               touch(logits);
                           });
    }

    // Double-precision weighted sum of all entries; handy for scalarizing a
    // tensor output when checking gradients.
    NodeId weighted_sum(NodeId a, std::vector<float> weights) {
        const Tensor& A = value(a);
        if (static_cast<std::int64_t>(weights.size()) != A.numel())
            throw DimError("weighted_sum: weight count must match tensor size");
        double s = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i)
            s += static_cast<double>(A.data[i]) * static_cast<double>(weights[i]);
        return push_scalar(s, needs(a), [this, a, weights = std::move(weights)](NodeId self) {
            if (!needs(a)) return;
            const double up = nodes_[self].grad.data[0];
            Tensor& dA = nodes_[a].grad;
            for (std::size_t i = 0; i < weights.size(); ++i)
                dA.data[i] += static_cast<float>(up * weights[i]);
            touch(a);
        });
    }

    // ---- backward -----------------------------------------------------------

    void backward(NodeId from, double seed = 1.0) {
        Node& start = nodes_[check(from)];
        if (start.value.numel() != 1)
            throw StateError("backward: can only seed a scalar node");
        start.grad.data[0] += static_cast<float>(seed);
        start.touched = true;
        for (NodeId i = from; i >= 0; --i) {
            Node& n = nodes_[std::size_t(i)];
            if (n.touched && n.back) n.back(i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        bool touched = false;
        bool is_scalar = false;
        double scalar_value = 0.0;
        std::function<void(NodeId)> back;
    };

    std::vector<Node> nodes_;

    bool needs(NodeId id) const { return nodes_[std::size_t(id)].needs_grad; }
    void touch(NodeId id) { nodes_[std::size_t(id)].touched = true; }

    std::size_t check(NodeId id) const {
        if (id < 0 || std::size_t(id) >= nodes_.size()) throw IndexError("tape: bad node id");
        return std::size_t(id);
    }

    NodeId push(Tensor value, bool needs_grad, std::function<void(NodeId)> back) {
        Node n;
        n.grad = Tensor::zeros(value.shape);
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.back = needs_grad ? std::move(back) : std::function<void(NodeId)>{};
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId push_scalar(double v, bool needs_grad, std::function<void(NodeId)> back) {
        NodeId id = push(Tensor({1}, {static_cast<float>(v)}), needs_grad, std::move(back));
        nodes_[std::size_t(id)].is_scalar = true;
        nodes_[std::size_t(id)].scalar_value = v;
        return id;
    }

    // Shared softmax + NLL kernel, double precision. Fills probs (B x V).
    static double softmax_nll(const Tensor& logits, const std::vector<int>& targets,
                              std::vector<double>& probs) {
        if (logits.rank() != 2) throw DimError("cross_entropy: logits must be 2-D");
        const std::int64_t B = logits.shape[0], V = logits.shape[1];
        if (static_cast<std::int64_t>(targets.size()) != B)
            throw DimError("cross_entropy: one target per logits row required");
        probs.assign(std::size_t(B * V), 0.0);
        double total = 0.0;
        for (std::int64_t i = 0; i < B; ++i) {
            const int t = targets[std::size_t(i)];
            if (t < 0 || t >= V) throw IndexError("cross_entropy: target id out of range");
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < V; ++j)
                mx = std::max(mx, static_cast<double>(logits.data[std::size_t(i * V + j)]));
            double denom = 0.0;
            for (std::int64_t j = 0; j < V; ++j) {
                const double e = std::exp(static_cast<double>(logits.data[std::size_t(i * V + j)]) - mx);
                probs[std::size_t(i * V + j)] = e;
                denom += e;
            }
            for (std::int64_t j = 0; j < V; ++j) probs[std::size_t(i * V + j)] /= denom;
            total += -(std::log(probs[std::size_t(i * V + t)]));
        }
        return total / static_cast<double>(B);
    }
};

}  // namespace fperase

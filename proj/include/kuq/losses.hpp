#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kuq/array.hpp"
#include "kuq/errors.hpp"
#include "kuq/model.hpp"
#include "kuq/reduce.hpp"
#include "kuq/tape.hpp"

namespace kuq {

/// Data-space distance used by the objectives: squared L2 or L1.
enum class Norm { sq_l2, l1 };

/// Per-term values of an evaluated objective.
///
/// For the variance regime the component fields hold member means and
/// total = pred + ae + lin + alpha*orth + lambda*var.
/// For the CRPS-proxy regime the components hold member sums and
/// total = pred + ae + lin + alpha*orth + lambda*abs_dev.
struct LossBreakdown {
    double pred = 0.0;
    double ae = 0.0;
    double lin = 0.0;
    double orth = 0.0;
    double var = 0.0;
    double abs_dev = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double lambda = 0.0;
};

/// A contiguous slab of normalized series: B x (T+1) x n, anchored at t = 0.
struct TrainingBatch {
    std::size_t series_count = 0;  // B
    std::size_t horizon = 0;       // T
    std::size_t channels = 0;      // n
    std::vector<double> values;    // B x (T+1) x n

    double at(std::size_t b, std::size_t t, std::size_t c) const {
        return values[(b * (horizon + 1) + t) * channels + c];
    }

    void validate() const {
        if (series_count < 1 || horizon < 1 || channels < 1) {
            throw ContractError("batch: needs B >= 1, T >= 1, n >= 1");
        }
        if (values.size() != series_count * (horizon + 1) * channels) {
            throw ShapeError("batch: value count does not match B x (T+1) x n");
        }
        for (double v : values)
            if (!std::isfinite(v)) throw NumericError("batch: non-finite value");
    }
};

namespace graph {

/// Model parameters registered on a tape, in visit_params order.
struct ModelLeaves {
    std::vector<NodeRef> enc_w, enc_b, dec_w, dec_b;
    NodeRef transition;
};

inline ModelLeaves add_model_params(Tape& tape, const KoopmanAutoencoder& model,
                                    const std::string& prefix) {
    ModelLeaves leaves;
    for (std::size_t l = 0; l < model.encoder.weights.size(); ++l) {
        leaves.enc_w.push_back(
            tape.param(prefix + "enc.w" + std::to_string(l), model.encoder.weights[l]));
        leaves.enc_b.push_back(
            tape.param(prefix + "enc.b" + std::to_string(l), model.encoder.biases[l]));
    }
    for (std::size_t l = 0; l < model.decoder.weights.size(); ++l) {
        leaves.dec_w.push_back(
            tape.param(prefix + "dec.w" + std::to_string(l), model.decoder.weights[l]));
        leaves.dec_b.push_back(
            tape.param(prefix + "dec.b" + std::to_string(l), model.decoder.biases[l]));
    }
    leaves.transition = tape.param(prefix + "K", model.transition);
    return leaves;
}

inline NodeRef build_mlp(Tape& tape, std::span<const NodeRef> ws, std::span<const NodeRef> bs,
                         Activation act, NodeRef x) {
    NodeRef cur = x;
    for (std::size_t l = 0; l < ws.size(); ++l) {
        cur = tape.affine(ws[l], cur, bs[l]);
        if (act == Activation::tanh && l + 1 < ws.size()) cur = tape.tanh(cur);
    }
    return cur;
}

/// Batch states as one (n x B) input node per time step. Shared between the
/// member graphs of an ensemble objective.
struct BatchInputs {
    std::size_t series_count = 0, horizon = 0, channels = 0;
    std::vector<NodeRef> x;  // x[t]: n x B, t = 0..T
};

inline BatchInputs add_batch_inputs(Tape& tape, const TrainingBatch& batch) {
    batch.validate();
    BatchInputs in;
    in.series_count = batch.series_count;
    in.horizon = batch.horizon;
    in.channels = batch.channels;
    for (std::size_t t = 0; t <= batch.horizon; ++t) {
        RealArray m = RealArray::zeros({batch.channels, batch.series_count});
        for (std::size_t c = 0; c < batch.channels; ++c)
            for (std::size_t b = 0; b < batch.series_count; ++b)
                m.data[c * batch.series_count + b] = batch.at(b, t, c);
        in.x.push_back(tape.input("x" + std::to_string(t), m));
    }
    return in;
}

inline NodeRef distance(Tape& tape, NodeRef a, NodeRef b, Norm norm) {
    NodeRef diff = tape.sub(a, b);
    return tape.sum(norm == Norm::sq_l2 ? tape.square(diff) : tape.abs(diff));
}

/// One member's objective terms over a batch. `rollout_decoded[tau-1]` is the
/// decoded latent rollout at horizon tau (n x B); these nodes feed both the
/// prediction term and any ensemble coupling term.
struct MemberGraph {
    ModelLeaves leaves;
    NodeRef pred, ae, lin, orth;
    NodeRef total;  // pred + ae + lin + alpha * orth
    std::vector<NodeRef> rollout_decoded;
};

inline MemberGraph build_member_graph(Tape& tape, const KoopmanAutoencoder& model,
                                      const BatchInputs& in, Norm norm, double alpha,
                                      const std::string& prefix) {
    if (alpha < 0.0) throw ContractError("loss: alpha must be >= 0");
    model.validate();
    if (static_cast<std::size_t>(model.state_dim) != in.channels) {
        throw ShapeError("loss: batch channels " + std::to_string(in.channels) +
                         " != model state_dim " + std::to_string(model.state_dim));
    }
    MemberGraph g;
    g.leaves = add_model_params(tape, model, prefix);
    const std::size_t T = in.horizon;

    // Encode every observed state (shared by auto-encoding and linearity).
    std::vector<NodeRef> encoded;
    encoded.reserve(T + 1);
    for (std::size_t t = 0; t <= T; ++t) {
        encoded.push_back(build_mlp(tape, g.leaves.enc_w, g.leaves.enc_b,
                                    model.encoder.activation, in.x[t]));
    }

    // Latent rollout from the anchor state, one transition per step.
    std::vector<NodeRef> rolled;
    rolled.reserve(T);
    NodeRef cur = encoded[0];
    for (std::size_t tau = 1; tau <= T; ++tau) {
        cur = tape.matmul(g.leaves.transition, cur);
        rolled.push_back(cur);
    }

    std::vector<NodeRef> pred_terms, ae_terms, lin_terms;
    g.rollout_decoded.reserve(T);
    for (std::size_t tau = 1; tau <= T; ++tau) {
        NodeRef decoded = build_mlp(tape, g.leaves.dec_w, g.leaves.dec_b,
                                    model.decoder.activation, rolled[tau - 1]);
        g.rollout_decoded.push_back(decoded);
        pred_terms.push_back(distance(tape, in.x[tau], decoded, norm));
        lin_terms.push_back(distance(tape, encoded[tau], rolled[tau - 1], norm));
    }
    for (std::size_t t = 0; t <= T; ++t) {
        NodeRef reconstructed = build_mlp(tape, g.leaves.dec_w, g.leaves.dec_b,
                                          model.decoder.activation, encoded[t]);
        ae_terms.push_back(distance(tape, in.x[t], reconstructed, norm));
    }

    const std::vector<double> ones_t(T, 1.0), ones_t1(T + 1, 1.0);
    g.pred = tape.combine(pred_terms, ones_t);
    g.ae = tape.combine(ae_terms, ones_t1);
    g.lin = tape.combine(lin_terms, ones_t);

    // ||K K^T - I||_F^2 stays squared-Frobenius in both norm variants.
    NodeRef kkt = tape.matmul(g.leaves.transition, tape.transpose(g.leaves.transition));
    NodeRef dev = tape.sub(kkt, tape.constant(RealArray::identity(
                                    static_cast<std::size_t>(model.latent_dim))));
    g.orth = tape.sum(tape.square(dev));

    const NodeRef parts[] = {g.pred, g.ae, g.lin, g.orth};
    const double weights[] = {1.0, 1.0, 1.0, alpha};
    g.total = tape.combine(parts, weights);
    return g;
}

/// Diversity term over per-member prediction nodes (member_preds[j] holds one
/// node per horizon step). Squared flavor is the negative inter-member
/// variance with biased divisor M; absolute flavor is the negative halved
/// mean absolute deviation, the CRPS pairwise-term proxy.
inline NodeRef build_deviation_term(Tape& tape,
                                    std::span<const std::vector<NodeRef>> member_preds,
                                    bool absolute) {
    const std::size_t m_count = member_preds.size();
    if (m_count == 0) throw ContractError("deviation term: no members");
    const std::size_t steps = member_preds[0].size();
    const double weight = (absolute ? -0.5 : -1.0) / static_cast<double>(m_count);
    std::vector<NodeRef> terms;
    std::vector<double> weights;
    std::vector<NodeRef> stack(m_count);
    for (std::size_t tau = 0; tau < steps; ++tau) {
        for (std::size_t j = 0; j < m_count; ++j) stack[j] = member_preds[j][tau];
        NodeRef mean = tape.mean(stack);
        for (std::size_t j = 0; j < m_count; ++j) {
            NodeRef dev = tape.sub(stack[j], mean);
            terms.push_back(tape.sum(absolute ? tape.abs(dev) : tape.square(dev)));
            weights.push_back(weight);
        }
    }
    return tape.combine(terms, weights);
}

/// Full ensemble objective on one tape. Gradients couple all members through
/// the mean prediction whenever lambda > 0.
struct EnsembleGraph {
    std::vector<MemberGraph> members;
    NodeRef coupling;  // invalid when lambda == 0
    NodeRef total;
    double alpha = 0.0;
    double lambda = 0.0;
    Regime regime = Regime::independent;

    LossBreakdown read(const Tape& tape) const {
        LossBreakdown out;
        out.alpha = alpha;
        out.lambda = lambda;
        const double m_count = static_cast<double>(members.size());
        const double member_weight = regime == Regime::crps_proxy ? 1.0 : 1.0 / m_count;
        for (const MemberGraph& g : members) {
            out.pred += member_weight * tape.scalar_value(g.pred);
            out.ae += member_weight * tape.scalar_value(g.ae);
            out.lin += member_weight * tape.scalar_value(g.lin);
            out.orth += member_weight * tape.scalar_value(g.orth);
        }
        if (coupling.valid()) {
            if (regime == Regime::crps_proxy)
                out.abs_dev = tape.scalar_value(coupling);
            else
                out.var = tape.scalar_value(coupling);
        }
        out.total = tape.scalar_value(total);
        return out;
    }

    /// Positive inter-member prediction variance (biased divisor M), for
    /// logging in every regime. CPU-side so the lambda = 0 tape is untouched.
    double prediction_variance(const Tape& tape) const {
        const std::size_t m_count = members.size();
        if (m_count == 0) return 0.0;
        const std::size_t T = members[0].rollout_decoded.size();
        std::vector<double> stack(m_count), sq(m_count), scratch;
        std::vector<double> cells;
        for (std::size_t tau = 0; tau < T; ++tau) {
            const std::size_t numel = tape.value(members[0].rollout_decoded[tau]).numel();
            for (std::size_t e = 0; e < numel; ++e) {
                for (std::size_t j = 0; j < m_count; ++j) {
                    stack[j] = tape.value(members[j].rollout_decoded[tau]).data[e];
                }
                const double mu = detail::canonical_mean(stack, scratch);
                for (std::size_t j = 0; j < m_count; ++j) {
                    const double d = stack[j] - mu;
                    sq[j] = d * d;
                }
                cells.push_back(detail::canonical_sum(sq, scratch) / static_cast<double>(m_count));
            }
        }
        return detail::canonical_sum(cells, scratch);
    }
};

inline EnsembleGraph build_ensemble_graph(Tape& tape, const Ensemble& ensemble,
                                          const TrainingBatch& batch, double alpha, double lambda,
                                          Regime regime) {
    if (ensemble.members.empty()) throw ContractError("ensemble loss: empty ensemble");
    EnsembleGraph eg;
    eg.alpha = alpha;
    eg.lambda = lambda;
    eg.regime = regime;
    const Norm norm = regime == Regime::crps_proxy ? Norm::l1 : Norm::sq_l2;
    BatchInputs in = add_batch_inputs(tape, batch);
    const std::size_t m_count = ensemble.members.size();
    for (std::size_t j = 0; j < m_count; ++j) {
        eg.members.push_back(build_member_graph(tape, ensemble.members[j], in, norm, alpha,
                                                "m" + std::to_string(j) + "."));
    }
    std::vector<NodeRef> parts;
    std::vector<double> weights;
    const double member_weight = regime == Regime::crps_proxy ? 1.0 : 1.0 / static_cast<double>(m_count);
    for (const MemberGraph& g : eg.members) {
        parts.push_back(g.total);
        weights.push_back(member_weight);
    }
    if (lambda != 0.0) {
        std::vector<std::vector<NodeRef>> member_preds;
        member_preds.reserve(m_count);
        for (const MemberGraph& g : eg.members) member_preds.push_back(g.rollout_decoded);
        eg.coupling = build_deviation_term(tape, member_preds, regime == Regime::crps_proxy);
        parts.push_back(eg.coupling);
        weights.push_back(lambda);
    }
    eg.total = tape.combine(parts, weights);
    return eg;
}

}  // namespace graph

namespace detail {

inline double eval_member_scalar(const KoopmanAutoencoder& model, const TrainingBatch& batch,
                                 Norm norm, double alpha,
                                 NodeRef graph::MemberGraph::* term) {
    Tape tape;
    graph::BatchInputs in = graph::add_batch_inputs(tape, batch);
    graph::MemberGraph g = graph::build_member_graph(tape, model, in, norm, alpha, "");
    tape.forward();
    return tape.scalar_value(g.*term);
}

}  // namespace detail

/// Sum_i sum_{tau=1..T} dist(x_{i,tau}, decode(K^tau encode(x_{i,0}))).
inline double pred_loss(const KoopmanAutoencoder& model, const TrainingBatch& batch, Norm norm) {
    return detail::eval_member_scalar(model, batch, norm, 0.0, &graph::MemberGraph::pred);
}

/// Sum_i sum_{t=0..T} dist(x_{i,t}, decode(encode(x_{i,t}))).
inline double ae_loss(const KoopmanAutoencoder& model, const TrainingBatch& batch, Norm norm) {
    return detail::eval_member_scalar(model, batch, norm, 0.0, &graph::MemberGraph::ae);
}

/// Sum_i sum_{tau=1..T} dist(encode(x_{i,tau}), K^tau encode(x_{i,0})).
inline double lin_loss(const KoopmanAutoencoder& model, const TrainingBatch& batch, Norm norm) {
    return detail::eval_member_scalar(model, batch, norm, 0.0, &graph::MemberGraph::lin);
}

/// ||K K^T - I||_F^2.
inline double orth_loss(const RealArray& k) {
    if (k.rank() != 2 || k.shape[0] != k.shape[1]) {
        throw ShapeError("orth_loss: K must be square, got " + shape_str(k.shape));
    }
    const std::size_t d = k.shape[0];
    std::vector<double> cells(d * d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < d; ++l) s += k.data[i * d + l] * k.data[j * d + l];
            if (i == j) s -= 1.0;
            cells[i * d + j] = s * s;
        }
    }
    return detail::canonical_sum(cells);
}

/// Combined single-model objective: pred + ae + lin + alpha * orth.
inline LossBreakdown single_model_loss(const KoopmanAutoencoder& model, const TrainingBatch& batch,
                                       double alpha, Norm norm) {
    if (alpha < 0.0) throw ContractError("single_model_loss: alpha must be >= 0");
    Tape tape;
    graph::BatchInputs in = graph::add_batch_inputs(tape, batch);
    graph::MemberGraph g = graph::build_member_graph(tape, model, in, norm, alpha, "");
    tape.forward();
    LossBreakdown out;
    out.alpha = alpha;
    out.pred = tape.scalar_value(g.pred);
    out.ae = tape.scalar_value(g.ae);
    out.lin = tape.scalar_value(g.lin);
    out.orth = tape.scalar_value(g.orth);
    out.total = tape.scalar_value(g.total);
    return out;
}

/// Variance-promoting term of the ensemble objective:
/// -(1/M) sum_j ||p_j - p_mean||^2, summed over every scalar slot. Always <= 0,
/// and exactly 0 when the members coincide. Biased divisor M: with it, the
/// stable range of the weight lambda is [0, 1] regardless of M.
inline double variance_loss(const RealArray& member_predictions) {
    if (member_predictions.rank() < 2) {
        throw ContractError("variance_loss: expected rank >= 2 with members as leading extent");
    }
    const std::size_t m_count = member_predictions.shape[0];
    if (m_count < 1) throw ContractError("variance_loss: needs M >= 1");
    const std::size_t scalars = member_predictions.numel() / m_count;
    std::vector<double> stack(m_count), sq(m_count), scratch, cells;
    cells.reserve(scalars);
    for (std::size_t s = 0; s < scalars; ++s) {
        for (std::size_t j = 0; j < m_count; ++j) {
            stack[j] = member_predictions.data[j * scalars + s];
        }
        const double mu = detail::canonical_mean(stack, scratch);
        for (std::size_t j = 0; j < m_count; ++j) {
            const double d = stack[j] - mu;
            sq[j] = d * d;
        }
        cells.push_back(detail::canonical_sum(sq, scratch));
    }
    return -detail::canonical_sum(cells, scratch) / static_cast<double>(m_count);
}

/// Mean-absolute-deviation proxy for the CRPS pairwise term:
/// -(1/2)(1/M) sum_j |p_j - p_mean|, summed over every scalar slot. <= 0, and
/// 0 exactly when the members coincide.
inline double abs_deviation_loss(const RealArray& member_predictions) {
    if (member_predictions.rank() < 2) {
        throw ContractError("abs_deviation_loss: expected rank >= 2 with members as leading extent");
    }
    const std::size_t m_count = member_predictions.shape[0];
    if (m_count < 1) throw ContractError("abs_deviation_loss: needs M >= 1");
    const std::size_t scalars = member_predictions.numel() / m_count;
    std::vector<double> stack(m_count), ad(m_count), scratch, cells;
    cells.reserve(scalars);
    for (std::size_t s = 0; s < scalars; ++s) {
        for (std::size_t j = 0; j < m_count; ++j) {
            stack[j] = member_predictions.data[j * scalars + s];
        }
        const double mu = detail::canonical_mean(stack, scratch);
        for (std::size_t j = 0; j < m_count; ++j) ad[j] = std::fabs(stack[j] - mu);
        cells.push_back(detail::canonical_sum(ad, scratch));
    }
    return -0.5 * detail::canonical_sum(cells, scratch) / static_cast<double>(m_count);
}

namespace detail {

inline void check_lambda_var(double lambda, bool allow_divergent) {
    if (lambda < 0.0) throw ContractError("ensemble loss: lambda must be >= 0");
    if (lambda > 1.0 && !allow_divergent) {
        throw ContractError(
            "ensemble loss: lambda > 1 makes the objective unbounded below and the training "
            "procedure will diverge; pass allow_divergent to override");
    }
}

}  // namespace detail

/// (1/M) sum_j L(theta_j) + lambda * L_var. lambda = 0 is exactly independent
/// training of the members.
inline LossBreakdown ensemble_loss_var(const Ensemble& ensemble, const TrainingBatch& batch,
                                       double alpha, double lambda, bool allow_divergent = false) {
    detail::check_lambda_var(lambda, allow_divergent);
    if (alpha < 0.0) throw ContractError("ensemble loss: alpha must be >= 0");
    Tape tape;
    graph::EnsembleGraph eg =
        graph::build_ensemble_graph(tape, ensemble, batch, alpha, lambda, Regime::variance);
    tape.forward();
    return eg.read(tape);
}

/// sum_j L1(theta_j) + lambda * L_abs, the diversity-promoting CRPS proxy.
/// The member objectives use L1 data-space distances; lambda defaults to 1.
inline LossBreakdown ensemble_loss_crps_proxy(const Ensemble& ensemble, const TrainingBatch& batch,
                                              double alpha, double lambda = 1.0) {
    if (lambda < 0.0) throw ContractError("ensemble loss: lambda must be >= 0");
    if (alpha < 0.0) throw ContractError("ensemble loss: alpha must be >= 0");
    Tape tape;
    graph::EnsembleGraph eg =
        graph::build_ensemble_graph(tape, ensemble, batch, alpha, lambda, Regime::crps_proxy);
    tape.forward();
    return eg.read(tape);
}

}  // namespace kuq

// SPDX-License-Identifier: Apache-2.0
#include "ptml/moe.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace ptml {

void MoEConfig::validate() const {
    if (num_experts < 1 || top_k < 1 || top_k > num_experts) {
        throw ShapeError(fmt::format("moe: top_k {} outside [1, {}]", top_k, num_experts));
    }
    if (expert_hidden < 1) throw ShapeError("moe: expert_hidden must be positive");
    if (load_balance_coeff < 0) throw ShapeError("moe: load_balance_coeff must be >= 0");
}

RoutingDecision route(const Tensor& router_logits, int64_t k) {
    if (router_logits.rank() != 2) throw ShapeError("route: rank-2 logits expected");
    router_logits.check_finite("route");
    const int64_t tokens = router_logits.dim(0), E = router_logits.dim(1);
    if (k < 1 || k > E) throw ShapeError(fmt::format("route: k {} outside [1, {}]", k, E));

    RoutingDecision d;
    d.tokens = tokens;
    d.num_experts = E;
    d.top_k = k;
    d.expert_tokens.resize(static_cast<size_t>(E));
    d.token_experts.resize(static_cast<size_t>(tokens));
    d.token_gates.resize(static_cast<size_t>(tokens));

    std::vector<int64_t> order(static_cast<size_t>(E));
    for (int64_t tok = 0; tok < tokens; ++tok) {
        for (int64_t e = 0; e < E; ++e) order[static_cast<size_t>(e)] = e;
        // stable sort keeps the lower expert index first on equal logits
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return router_logits.at2(tok, a) > router_logits.at2(tok, b);
        });
        auto& experts = d.token_experts[static_cast<size_t>(tok)];
        experts.assign(order.begin(), order.begin() + k);

        double mx = router_logits.at2(tok, experts[0]);
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, router_logits.at2(tok, experts[static_cast<size_t>(j)]));
        double z = 0.0;
        auto& gates = d.token_gates[static_cast<size_t>(tok)];
        gates.resize(static_cast<size_t>(k));
        for (int64_t j = 0; j < k; ++j) {
            gates[static_cast<size_t>(j)] = std::exp(router_logits.at2(tok, experts[static_cast<size_t>(j)]) - mx);
            z += gates[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < k; ++j) gates[static_cast<size_t>(j)] /= z;

        for (int64_t j = 0; j < k; ++j) {
            d.expert_tokens[static_cast<size_t>(experts[static_cast<size_t>(j)])].push_back(tok);
        }
    }
    return d;
}

Value moe_forward(Tape& t, Value x, Value router_logits, std::span<const ExpertParams> experts,
                  int64_t k, RoutingDecision* decision_out) {
    const Tensor& xv = t.value(x);
    const int64_t tokens = xv.dim(0);
    const int64_t E = static_cast<int64_t>(experts.size());
    if (t.value(router_logits).dim(0) != tokens || t.value(router_logits).dim(1) != E) {
        throw ShapeError("moe_forward: router logits shape mismatch");
    }
    RoutingDecision decision = route(t.value(router_logits), k);

    // differentiable gates: softmax over each token's selected logits
    std::vector<int64_t> sel_flat;
    sel_flat.reserve(static_cast<size_t>(tokens * k));
    for (int64_t tok = 0; tok < tokens; ++tok) {
        for (int64_t j = 0; j < k; ++j) {
            sel_flat.push_back(tok * E + decision.token_experts[static_cast<size_t>(tok)][static_cast<size_t>(j)]);
        }
    }
    Value gates = t.softmax(t.reshape(t.gather_flat(router_logits, sel_flat), {tokens, k}), 1);

    Value total = t.constant(Tensor::zeros(xv.shape(), xv.dtype()));
    for (int64_t e = 0; e < E; ++e) {
        const auto& toks = decision.expert_tokens[static_cast<size_t>(e)];
        if (toks.empty()) continue;
        Value xg = t.gather_rows(x, toks);
        Value h = t.mul(t.silu(t.matmul(xg, t.transpose(experts[static_cast<size_t>(e)].w_gate))),
                        t.matmul(xg, t.transpose(experts[static_cast<size_t>(e)].w_in)));
        Value out_e = t.matmul(h, t.transpose(experts[static_cast<size_t>(e)].w_out));

        std::vector<int64_t> gate_idx;
        gate_idx.reserve(toks.size());
        for (int64_t tok : toks) {
            const auto& te = decision.token_experts[static_cast<size_t>(tok)];
            const auto it = std::find(te.begin(), te.end(), e);
            gate_idx.push_back(tok * k + (it - te.begin()));
        }
        Value scaled = t.scale_rows(out_e, t.gather_flat(gates, gate_idx));
        total = t.add(total, t.scatter_rows_sum(scaled, toks, tokens));
    }
    if (decision_out) *decision_out = std::move(decision);
    return total;
}

double load_balance_loss(const RoutingDecision& d, const Tensor& router_probs) {
    if (router_probs.dim(0) != d.tokens || router_probs.dim(1) != d.num_experts) {
        throw ShapeError("load_balance_loss: probs shape mismatch");
    }
    double loss = 0.0;
    for (int64_t e = 0; e < d.num_experts; ++e) {
        const double frac = static_cast<double>(d.expert_tokens[static_cast<size_t>(e)].size()) /
                            static_cast<double>(d.top_k * d.tokens);
        double mean_p = 0.0;
        for (int64_t tok = 0; tok < d.tokens; ++tok) mean_p += router_probs.at2(tok, e);
        mean_p /= static_cast<double>(d.tokens);
        loss += frac * mean_p;
    }
    return static_cast<double>(d.num_experts) * loss;
}

Value load_balance_value(Tape& t, Value router_logits, const RoutingDecision& d) {
    const Tensor& lv = t.value(router_logits);
    if (lv.dim(0) != d.tokens || lv.dim(1) != d.num_experts) {
        throw ShapeError("load_balance_value: logits shape mismatch");
    }
    Tensor fracs({d.tokens, d.num_experts}, lv.dtype());
    for (int64_t e = 0; e < d.num_experts; ++e) {
        const double frac = static_cast<double>(d.expert_tokens[static_cast<size_t>(e)].size()) /
                            static_cast<double>(d.top_k * d.tokens);
        for (int64_t tok = 0; tok < d.tokens; ++tok) fracs.set2(tok, e, frac);
    }
    Value probs = t.softmax(router_logits, 1);
    Value weighted = t.mul(probs, t.constant(std::move(fracs)));
    return t.mul_scalar(t.sum(weighted),
                        static_cast<double>(d.num_experts) / static_cast<double>(d.tokens));
}

}  // namespace ptml

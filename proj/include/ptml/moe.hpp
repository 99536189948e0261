// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ptml/tape.hpp"

namespace ptml {

struct MoEConfig {
    int64_t num_experts = 8;
    int64_t top_k = 2;
    int64_t expert_hidden = 32;
    bool every_other_layer = true;
    double load_balance_coeff = 0.0;
    void validate() const;
};

// Discrete routing output. Gate values here are plain numbers; the
// differentiable gate path is rebuilt on the tape inside moe_forward.
struct RoutingDecision {
    int64_t tokens = 0;
    int64_t num_experts = 0;
    int64_t top_k = 0;
    std::vector<std::vector<int64_t>> expert_tokens;  // per expert, ascending token ids
    std::vector<std::vector<int64_t>> token_experts;  // per token, k experts (logit desc, ties → lower index)
    std::vector<std::vector<double>> token_gates;     // per token, softmax over its k selected logits
};

RoutingDecision route(const Tensor& router_logits, int64_t k);

// Gated feed-forward expert: y = (silu(x·Wgᵀ) ⊙ (x·Wiᵀ))·Woᵀ
struct ExpertParams {
    Value w_gate, w_in, w_out;
};

// Drop-free top-k forward. Experts run as batched matmuls over gathered token
// groups; gates flow through the tape so router weights receive gradients.
Value moe_forward(Tape& t, Value x, Value router_logits, std::span<const ExpertParams> experts,
                  int64_t k, RoutingDecision* decision_out = nullptr);

// E × Σ_e fraction_tokens_e × mean_prob_e; 1.0 under perfectly uniform routing.
double load_balance_loss(const RoutingDecision& decision, const Tensor& router_probs);

// Same quantity with the probability factor on the tape, for use as an
// auxiliary training loss. Token fractions enter as constants.
Value load_balance_value(Tape& t, Value router_logits, const RoutingDecision& decision);

}  // namespace ptml

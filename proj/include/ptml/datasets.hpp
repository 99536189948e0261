// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptml/rng.hpp"
#include "ptml/tensor.hpp"

namespace ptml {

// Synthetic next-token corpora. Everything derives from the caller's RNG, so
// a seed pins the dataset bytes exactly.
struct TokenDataset {
    int64_t vocab = 0;
    std::vector<std::vector<int64_t>> samples;
};

// [payload..., SEP, payload...]; SEP is the top token id, payload ids below it
TokenDataset make_copy_task(int64_t vocab, int64_t payload_len, int64_t count, Rng& rng);

// repeated (a, b, (a+b) mod m) triples over vocab = modulus
TokenDataset make_modular_add(int64_t modulus, int64_t triples, int64_t count, Rng& rng);

// +/-1 walk clamped to [0, vocab)
TokenDataset make_random_walk(int64_t vocab, int64_t seq_len, int64_t count, Rng& rng);

// name dispatch: copy | modular_add | random_walk
TokenDataset make_dataset(const std::string& name, int64_t vocab, int64_t seq_len, int64_t count,
                          Rng& rng);

// Linear regression with geometrically decaying input scales: column j of x
// carries scale 2^(-j/2), so the target map has a fast-falling spectrum and
// low-rank corrections can recover most of a lossy weight's damage.
struct RegressionToy {
    Tensor x;       // [n x d_in]
    Tensor y;       // [n x d_out]
    Tensor w_true;  // [d_out x d_in]

    static RegressionToy make(int64_t n, int64_t d_in, int64_t d_out, uint64_t seed,
                              double noise = 0.01);
    double loss_for(const Tensor& w) const;  // mean squared error of x * w^T vs y
};

}  // namespace ptml

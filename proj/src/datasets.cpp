// SPDX-License-Identifier: Apache-2.0
#include "ptml/datasets.hpp"

#include <cmath>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml {

TokenDataset make_copy_task(int64_t vocab, int64_t payload_len, int64_t count, Rng& rng) {
    if (vocab < 3) throw ShapeError("copy task needs vocab >= 3");
    if (payload_len < 1 || count < 1) throw ShapeError("copy task: empty payload or count");
    TokenDataset d;
    d.vocab = vocab;
    const int64_t sep = vocab - 1;
    for (int64_t s = 0; s < count; ++s) {
        std::vector<int64_t> sample;
        sample.reserve(static_cast<size_t>(2 * payload_len + 1));
        for (int64_t i = 0; i < payload_len; ++i) {
            sample.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(sep))));
        }
        sample.push_back(sep);
        sample.insert(sample.end(), sample.begin(), sample.begin() + payload_len);
        d.samples.push_back(std::move(sample));
    }
    return d;
}

TokenDataset make_modular_add(int64_t modulus, int64_t triples, int64_t count, Rng& rng) {
    if (modulus < 2) throw ShapeError("modular task needs modulus >= 2");
    if (triples < 1 || count < 1) throw ShapeError("modular task: empty triples or count");
    TokenDataset d;
    d.vocab = modulus;
    for (int64_t s = 0; s < count; ++s) {
        std::vector<int64_t> sample;
        sample.reserve(static_cast<size_t>(3 * triples));
        for (int64_t tri = 0; tri < triples; ++tri) {
            const auto a = static_cast<int64_t>(rng.below(static_cast<uint64_t>(modulus)));
            const auto b = static_cast<int64_t>(rng.below(static_cast<uint64_t>(modulus)));
            sample.push_back(a);
            sample.push_back(b);
            sample.push_back((a + b) % modulus);
        }
        d.samples.push_back(std::move(sample));
    }
    return d;
}

TokenDataset make_random_walk(int64_t vocab, int64_t seq_len, int64_t count, Rng& rng) {
    if (vocab < 2) throw ShapeError("random walk needs vocab >= 2");
    if (seq_len < 2 || count < 1) throw ShapeError("random walk: sequence too short");
    TokenDataset d;
    d.vocab = vocab;
    for (int64_t s = 0; s < count; ++s) {
        std::vector<int64_t> sample;
        sample.reserve(static_cast<size_t>(seq_len));
        int64_t pos = static_cast<int64_t>(rng.below(static_cast<uint64_t>(vocab)));
        sample.push_back(pos);
        for (int64_t i = 1; i < seq_len; ++i) {
            pos += rng.below(2) == 0 ? -1 : 1;
            pos = std::max<int64_t>(0, std::min(vocab - 1, pos));
            sample.push_back(pos);
        }
        d.samples.push_back(std::move(sample));
    }
    return d;
}

TokenDataset make_dataset(const std::string& name, int64_t vocab, int64_t seq_len, int64_t count,
                          Rng& rng) {
    if (name == "copy") {
        const int64_t payload = std::max<int64_t>(1, (seq_len - 1) / 2);
        return make_copy_task(vocab, payload, count, rng);
    }
    if (name == "modular_add") {
        const int64_t triples = std::max<int64_t>(1, seq_len / 3);
        return make_modular_add(vocab, triples, count, rng);
    }
    if (name == "random_walk") return make_random_walk(vocab, seq_len, count, rng);
    throw UsageError(fmt::format("unknown dataset `{}`", name));
}

RegressionToy RegressionToy::make(int64_t n, int64_t d_in, int64_t d_out, uint64_t seed,
                                  double noise) {
    if (n < 1 || d_in < 1 || d_out < 1) throw ShapeError("regression toy: empty dimensions");
    Rng rng(seed);
    RegressionToy toy;
    toy.x = Tensor({n, d_in}, DType::f32);
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t c = 0; c < d_in; ++c) {
            const double scale = std::pow(2.0, -0.5 * static_cast<double>(c));
            toy.x.set2(r, c, scale * rng.gauss());
        }
    }
    toy.w_true = Tensor::gaussian({d_out, d_in}, rng);
    Tensor clean = ops::matmul(toy.x, ops::transpose(toy.w_true));
    toy.y = clean;
    for (int64_t i = 0; i < toy.y.numel(); ++i) {
        toy.y.set(i, toy.y.get(i) + noise * rng.gauss());
    }
    return toy;
}

double RegressionToy::loss_for(const Tensor& w) const {
    Tensor pred = ops::matmul(x, ops::transpose(w));
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.get(i) - y.get(i);
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

}  // namespace ptml

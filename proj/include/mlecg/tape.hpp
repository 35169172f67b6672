#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mlecg/rng.hpp"
#include "mlecg/tensor.hpp"

namespace mlecg::num {

using ValueId = int;

// Result of reverse-mode accumulation: gradients for every leaf that was
// created with requires_grad. Leaves not on a path to the loss come back as
// zeros of the leaf's shape.
struct Gradients {
    std::unordered_map<ValueId, Tensor> by_id;

    const Tensor& at(ValueId id) const;
    bool has(ValueId id) const { return by_id.count(id) != 0; }
};

// Dynamic computation tape. Every operation appends its output value and,
// when gradients are enabled and some input requires them, a backward
// closure. Node order equals execution order, so the reverse sweep is a
// plain reverse iteration. Single-threaded by contract; values are immutable
// once created.
class Tape {
public:
    ValueId leaf(Tensor t);
    const Tensor& val(ValueId id) const { return values_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return values_.size(); }

    // When disabled, ops still compute values but record no backward nodes.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    // Elementwise / reductions.
    ValueId add(ValueId a, ValueId b);
    ValueId sub(ValueId a, ValueId b);
    ValueId mul(ValueId a, ValueId b);
    ValueId scale(ValueId a, double c);
    ValueId relu(ValueId a);
    ValueId tanh(ValueId a);
    ValueId sigmoid(ValueId a);
    ValueId sum(ValueId a);
    ValueId mean(ValueId a);

    // Shape ops.
    ValueId reshape(ValueId a, std::vector<int> shape);
    ValueId concat1(ValueId a, ValueId b);              // rank-1 ++ rank-1
    ValueId slice1(ValueId a, int start, int len);      // rank-1 window
    ValueId row(ValueId a, int r);                      // [n,D] -> [D]
    ValueId stack_rows(const std::vector<ValueId>& rows);  // k x [D] -> [k,D]
    ValueId slice_rows(ValueId a, int start, int count);   // leading-dim slice

    // Neural-net primitives.
    ValueId dense(ValueId x, ValueId w, ValueId b = -1);
    ValueId conv1d(ValueId x, ValueId kernel, ValueId bias,
                   int stride, int pad_left, int pad_right);
    ValueId batchnorm(ValueId x, ValueId gamma, ValueId beta,
                      std::span<double> running_mean, std::span<double> running_var,
                      bool train, double momentum, double eps);
    ValueId dropout(ValueId x, double rate, bool train, Rng& rng);
    ValueId softmax(ValueId x);        // rank-1, max-subtracted
    ValueId softmax_rows(ValueId x);   // [B,n] along each row
    ValueId weighted_sum(ValueId feats, ValueId w);          // [n,D],[n] -> [D]
    ValueId weighted_sum_batched(ValueId feats, ValueId w);  // [B,n,D],[B,n] -> [B,D]
    ValueId bce_with_logits_mean(ValueId logits, Tensor targets);

    // Reverse sweep from a scalar loss. Deterministic: identical tapes give
    // bit-identical gradients.
    Gradients backward(ValueId loss_id) const;

private:
    using BackFn = std::function<void(const Tape&, std::vector<Tensor>&)>;

    ValueId push(Tensor value, bool needs, BackFn back);
    bool need(ValueId a) const { return needs_grad_[static_cast<std::size_t>(a)] != 0; }
    const Tensor& check_id(ValueId id) const;

    std::vector<Tensor> values_;
    std::vector<char> needs_grad_;
    std::vector<char> is_leaf_;
    std::vector<BackFn> nodes_;  // parallel to values_; empty fn for leaves
    bool grad_enabled_ = true;
};

// One LSTM cell step built from tape primitives. Gate layout in w [D+H,4H]
// and b [4H] is [input | forget | candidate | output].
struct LstmCellParams {
    ValueId w = -1;
    ValueId b = -1;
    int input_dim = 0;
    int hidden = 0;
};

struct LstmState {
    ValueId h = -1;
    ValueId c = -1;
};

LstmState lstm_step(Tape& t, ValueId x, LstmState prev, const LstmCellParams& p);

}  // namespace mlecg::num

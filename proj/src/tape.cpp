#include "mlecg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mlecg::num {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Gradient slot accessor: allocates zeros of the value's shape on first use.
Tensor& slot(std::vector<Tensor>& grads, const Tape& t, ValueId id) {
    Tensor& g = grads[static_cast<std::size_t>(id)];
    if (g.data.empty()) g = Tensor(t.val(id).shape);
    return g;
}

int conv_out_len(int padded, int k, int stride) {
    return (padded - k) / stride + 1;
}

}  // namespace

const Tensor& Gradients::at(ValueId id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ContractError("no gradient recorded for value id " + std::to_string(id));
    return it->second;
}

const Tensor& Tape::check_id(ValueId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= values_.size())
        throw ContractError("invalid tape value id " + std::to_string(id));
    return values_[static_cast<std::size_t>(id)];
}

ValueId Tape::push(Tensor value, bool needs, BackFn back) {
    values_.push_back(std::move(value));
    needs_grad_.push_back(needs ? 1 : 0);
    is_leaf_.push_back(back ? 0 : 1);
    nodes_.push_back(needs ? std::move(back) : BackFn{});
    return static_cast<ValueId>(values_.size() - 1);
}

ValueId Tape::leaf(Tensor t) {
    const bool needs = t.requires_grad && grad_enabled_;
    ValueId id = push(std::move(t), needs, BackFn{});
    is_leaf_.back() = 1;
    return id;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

ValueId Tape::add(ValueId a, ValueId b) {
    const Tensor& ta = check_id(a);
    const Tensor& tb = check_id(b);
    if (!same_shape(ta, tb)) throw DimensionError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    const bool needs = grad_enabled_ && (need(a) || need(b));
    return push(std::move(out), needs, [a, b, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        Tensor& gb = slot(g, t, b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] += go.data[i];
        }
    });
}

ValueId Tape::sub(ValueId a, ValueId b) {
    const Tensor& ta = check_id(a);
    const Tensor& tb = check_id(b);
    if (!same_shape(ta, tb)) throw DimensionError("sub: shape mismatch");
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
    const bool needs = grad_enabled_ && (need(a) || need(b));
    return push(std::move(out), needs, [a, b, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        Tensor& gb = slot(g, t, b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] -= go.data[i];
        }
    });
}

ValueId Tape::mul(ValueId a, ValueId b) {
    const Tensor& ta = check_id(a);
    const Tensor& tb = check_id(b);
    if (!same_shape(ta, tb)) throw DimensionError("mul: shape mismatch");
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
    const bool needs = grad_enabled_ && (need(a) || need(b));
    return push(std::move(out), needs, [a, b, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& va = t.val(a);
        const Tensor& vb = t.val(b);
        Tensor& ga = slot(g, t, a);
        Tensor& gb = slot(g, t, b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i] * vb.data[i];
            gb.data[i] += go.data[i] * va.data[i];
        }
    });
}

ValueId Tape::scale(ValueId a, double c) {
    const Tensor& ta = check_id(a);
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = c * ta.data[i];
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, c, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += c * go.data[i];
    });
}

ValueId Tape::relu(ValueId a) {
    const Tensor& ta = check_id(a);
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] > 0.0 ? ta.data[i] : 0.0;
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& va = t.val(a);
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            if (va.data[i] > 0.0) ga.data[i] += go.data[i];
    });
}

ValueId Tape::tanh(ValueId a) {
    const Tensor& ta = check_id(a);
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::tanh(ta.data[i]);
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& y = t.val(out_id);
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[i] += go.data[i] * (1.0 - y.data[i] * y.data[i]);
    });
}

ValueId Tape::sigmoid(ValueId a) {
    const Tensor& ta = check_id(a);
    Tensor out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = stable_sigmoid(ta.data[i]);
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& y = t.val(out_id);
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[i] += go.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
}

ValueId Tape::sum(ValueId a) {
    const Tensor& ta = check_id(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    const bool needs = grad_enabled_ && need(a);
    return push(Tensor::scalar(s), needs, [a, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const double go = g[static_cast<std::size_t>(out_id)].data[0];
        Tensor& ga = slot(g, t, a);
        for (double& v : ga.data) v += go;
    });
}

ValueId Tape::mean(ValueId a) {
    const Tensor& ta = check_id(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    const double n = static_cast<double>(ta.numel());
    const bool needs = grad_enabled_ && need(a);
    return push(Tensor::scalar(s / n), needs, [a, n, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const double go = g[static_cast<std::size_t>(out_id)].data[0] / n;
        Tensor& ga = slot(g, t, a);
        for (double& v : ga.data) v += go;
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

ValueId Tape::reshape(ValueId a, std::vector<int> shape) {
    const Tensor& ta = check_id(a);
    if (Tensor::numel_of(shape) != ta.numel())
        throw DimensionError("reshape: element count mismatch");
    Tensor out(std::move(shape), ta.data);
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
    });
}

ValueId Tape::concat1(ValueId a, ValueId b) {
    const Tensor& ta = check_id(a);
    const Tensor& tb = check_id(b);
    if (ta.ndim() != 1 || tb.ndim() != 1) throw DimensionError("concat1 expects rank-1 inputs");
    Tensor out({ta.dim(0) + tb.dim(0)});
    std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
    std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.dim(0));
    const bool needs = grad_enabled_ && (need(a) || need(b));
    const int na = ta.dim(0);
    return push(std::move(out), needs, [a, b, na, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        Tensor& gb = slot(g, t, b);
        for (int i = 0; i < na; ++i) ga.data[static_cast<std::size_t>(i)] += go.data[static_cast<std::size_t>(i)];
        for (std::size_t i = static_cast<std::size_t>(na); i < go.data.size(); ++i)
            gb.data[i - static_cast<std::size_t>(na)] += go.data[i];
    });
}

ValueId Tape::slice1(ValueId a, int start, int len) {
    const Tensor& ta = check_id(a);
    if (ta.ndim() != 1) throw DimensionError("slice1 expects a rank-1 input");
    if (start < 0 || len <= 0 || start + len > ta.dim(0)) throw DimensionError("slice1: window out of range");
    Tensor out({len});
    std::copy(ta.data.begin() + start, ta.data.begin() + start + len, out.data.begin());
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, start, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[static_cast<std::size_t>(start) + i] += go.data[i];
    });
}

ValueId Tape::row(ValueId a, int r) {
    const Tensor& ta = check_id(a);
    if (ta.ndim() != 2) throw DimensionError("row expects a rank-2 input");
    if (r < 0 || r >= ta.dim(0)) throw DimensionError("row index out of range");
    const int d = ta.dim(1);
    Tensor out({d});
    std::copy(ta.data.begin() + static_cast<std::size_t>(r) * d,
              ta.data.begin() + static_cast<std::size_t>(r + 1) * d, out.data.begin());
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, r, d, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        for (int i = 0; i < d; ++i)
            ga.data[static_cast<std::size_t>(r) * d + i] += go.data[static_cast<std::size_t>(i)];
    });
}

ValueId Tape::stack_rows(const std::vector<ValueId>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no inputs");
    const int d = check_id(rows[0]).dim(0);
    bool needs = false;
    for (ValueId id : rows) {
        const Tensor& tr = check_id(id);
        if (tr.ndim() != 1 || tr.dim(0) != d) throw DimensionError("stack_rows: inputs must be rank-1 of equal length");
        needs = needs || need(id);
    }
    const int k = static_cast<int>(rows.size());
    Tensor out({k, d});
    for (int i = 0; i < k; ++i) {
        const Tensor& tr = val(rows[static_cast<std::size_t>(i)]);
        std::copy(tr.data.begin(), tr.data.end(), out.data.begin() + static_cast<std::size_t>(i) * d);
    }
    needs = needs && grad_enabled_;
    return push(std::move(out), needs,
                [ids = rows, d, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                        Tensor& gi = slot(g, t, ids[i]);
                        for (int j = 0; j < d; ++j)
                            gi.data[static_cast<std::size_t>(j)] += go.data[i * d + static_cast<std::size_t>(j)];
                    }
                });
}

ValueId Tape::slice_rows(ValueId a, int start, int count) {
    const Tensor& ta = check_id(a);
    if (ta.ndim() < 2) throw DimensionError("slice_rows expects rank >= 2");
    if (start < 0 || count <= 0 || start + count > ta.dim(0)) throw DimensionError("slice_rows: range out of bounds");
    const long long rsz = ta.numel() / ta.dim(0);
    std::vector<int> shp = ta.shape;
    shp[0] = count;
    Tensor out(shp);
    std::copy(ta.data.begin() + start * rsz, ta.data.begin() + (start + count) * rsz, out.data.begin());
    const bool needs = grad_enabled_ && need(a);
    return push(std::move(out), needs, [a, start, rsz, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        Tensor& ga = slot(g, t, a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[static_cast<std::size_t>(start) * static_cast<std::size_t>(rsz) + i] += go.data[i];
    });
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

ValueId Tape::dense(ValueId x, ValueId w, ValueId b) {
    const Tensor& tx = check_id(x);
    const Tensor& tw = check_id(w);
    if (tw.ndim() != 2) throw DimensionError("dense: weight must be rank-2");
    const int din = tw.dim(0);
    const int dout = tw.dim(1);
    if (tx.ndim() < 1 || tx.shape.back() != din)
        throw DimensionError("dense: input trailing dim " + tx.shape_str() + " does not match weight " + tw.shape_str());
    const long long rows = tx.numel() / din;
    const double* bias = nullptr;
    if (b >= 0) {
        const Tensor& tb = check_id(b);
        if (tb.numel() != dout) throw DimensionError("dense: bias length mismatch");
        bias = tb.data.data();
    }

    std::vector<int> shp = tx.shape;
    shp.back() = dout;
    Tensor out(shp);
    const double* xp = tx.data.data();
    const double* wp = tw.data.data();
    double* op = out.data.data();
    for (long long r = 0; r < rows; ++r) {
        double* orow = op + r * dout;
        if (bias) {
            std::memcpy(orow, bias, sizeof(double) * static_cast<std::size_t>(dout));
        } else {
            std::memset(orow, 0, sizeof(double) * static_cast<std::size_t>(dout));
        }
        const double* xrow = xp + r * din;
        for (int i = 0; i < din; ++i) {
            const double v = xrow[i];
            const double* wrow = wp + static_cast<std::size_t>(i) * dout;
            for (int o = 0; o < dout; ++o) orow[o] += v * wrow[o];
        }
    }

    const bool needs = grad_enabled_ && (need(x) || need(w) || (b >= 0 && need(b)));
    return push(std::move(out), needs,
                [x, w, b, rows, din, dout, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    const Tensor& tx2 = t.val(x);
                    const Tensor& tw2 = t.val(w);
                    Tensor& gx = slot(g, t, x);
                    Tensor& gw = slot(g, t, w);
                    double* gb = nullptr;
                    if (b >= 0) gb = slot(g, t, b).data.data();
                    const double* gp = go.data.data();
                    const double* xp2 = tx2.data.data();
                    const double* wp2 = tw2.data.data();
                    double* gxp = gx.data.data();
                    double* gwp = gw.data.data();
                    for (long long r = 0; r < rows; ++r) {
                        const double* grow = gp + r * dout;
                        if (gb)
                            for (int o = 0; o < dout; ++o) gb[o] += grow[o];
                        const double* xrow = xp2 + r * din;
                        double* gxrow = gxp + r * din;
                        for (int i = 0; i < din; ++i) {
                            const double v = xrow[i];
                            const double* wrow = wp2 + static_cast<std::size_t>(i) * dout;
                            double* gwrow = gwp + static_cast<std::size_t>(i) * dout;
                            double acc = 0.0;
                            for (int o = 0; o < dout; ++o) {
                                acc += grow[o] * wrow[o];
                                gwrow[o] += v * grow[o];
                            }
                            gxrow[i] += acc;
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

ValueId Tape::conv1d(ValueId x, ValueId kernel, ValueId bias, int stride, int pad_left, int pad_right) {
    const Tensor& tx = check_id(x);
    const Tensor& tk = check_id(kernel);
    const Tensor& tb = check_id(bias);
    if (tk.ndim() != 3) throw DimensionError("conv1d: kernel must be [K,Cin,Cout]");
    const bool batched = tx.ndim() == 3;
    if (!batched && tx.ndim() != 2) throw DimensionError("conv1d: input must be [L,C] or [B,L,C]");
    if (stride < 1) throw DimensionError("conv1d: stride must be >= 1");
    if (pad_left < 0 || pad_right < 0) throw DimensionError("conv1d: negative padding");

    const int B = batched ? tx.dim(0) : 1;
    const int L = batched ? tx.dim(1) : tx.dim(0);
    const int Cin = batched ? tx.dim(2) : tx.dim(1);
    const int K = tk.dim(0);
    const int Cout = tk.dim(2);
    if (tk.dim(1) != Cin)
        throw DimensionError("conv1d: kernel channels " + tk.shape_str() + " do not match input " + tx.shape_str());
    if (tb.numel() != Cout) throw DimensionError("conv1d: bias length mismatch");
    const int padded = L + pad_left + pad_right;
    if (K > padded) throw DimensionError("conv1d: kernel longer than padded input");
    const int Lout = conv_out_len(padded, K, stride);

    Tensor out(batched ? std::vector<int>{B, Lout, Cout} : std::vector<int>{Lout, Cout});
    const double* xp = tx.data.data();
    const double* kp = tk.data.data();
    const double* bp = tb.data.data();
    double* op = out.data.data();
    for (int bb = 0; bb < B; ++bb) {
        const double* xb = xp + static_cast<std::size_t>(bb) * L * Cin;
        double* ob = op + static_cast<std::size_t>(bb) * Lout * Cout;
        for (int to = 0; to < Lout; ++to) {
            double* orow = ob + static_cast<std::size_t>(to) * Cout;
            std::memcpy(orow, bp, sizeof(double) * static_cast<std::size_t>(Cout));
            const int t0 = to * stride - pad_left;
            for (int kk = 0; kk < K; ++kk) {
                const int ti = t0 + kk;
                if (ti < 0 || ti >= L) continue;
                const double* xrow = xb + static_cast<std::size_t>(ti) * Cin;
                const double* krow = kp + static_cast<std::size_t>(kk) * Cin * Cout;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double v = xrow[ci];
                    const double* kr = krow + static_cast<std::size_t>(ci) * Cout;
                    for (int co = 0; co < Cout; ++co) orow[co] += v * kr[co];
                }
            }
        }
    }

    const bool needs = grad_enabled_ && (need(x) || need(kernel) || need(bias));
    return push(std::move(out), needs,
                [x, kernel, bias, stride, pad_left, B, L, Cin, K, Cout, Lout,
                 out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    const Tensor& tx2 = t.val(x);
                    const Tensor& tk2 = t.val(kernel);
                    Tensor& gx = slot(g, t, x);
                    Tensor& gk = slot(g, t, kernel);
                    Tensor& gb = slot(g, t, bias);
                    const double* gp = go.data.data();
                    const double* xp2 = tx2.data.data();
                    const double* kp2 = tk2.data.data();
                    double* gxp = gx.data.data();
                    double* gkp = gk.data.data();
                    double* gbp = gb.data.data();
                    for (int bb = 0; bb < B; ++bb) {
                        const double* xb = xp2 + static_cast<std::size_t>(bb) * L * Cin;
                        double* gxb = gxp + static_cast<std::size_t>(bb) * L * Cin;
                        const double* gob = gp + static_cast<std::size_t>(bb) * Lout * Cout;
                        for (int to = 0; to < Lout; ++to) {
                            const double* grow = gob + static_cast<std::size_t>(to) * Cout;
                            for (int co = 0; co < Cout; ++co) gbp[co] += grow[co];
                            const int t0 = to * stride - pad_left;
                            for (int kk = 0; kk < K; ++kk) {
                                const int ti = t0 + kk;
                                if (ti < 0 || ti >= L) continue;
                                const double* xrow = xb + static_cast<std::size_t>(ti) * Cin;
                                double* gxrow = gxb + static_cast<std::size_t>(ti) * Cin;
                                const double* krow = kp2 + static_cast<std::size_t>(kk) * Cin * Cout;
                                double* gkrow = gkp + static_cast<std::size_t>(kk) * Cin * Cout;
                                for (int ci = 0; ci < Cin; ++ci) {
                                    const double v = xrow[ci];
                                    const double* kr = krow + static_cast<std::size_t>(ci) * Cout;
                                    double* gkr = gkrow + static_cast<std::size_t>(ci) * Cout;
                                    double acc = 0.0;
                                    for (int co = 0; co < Cout; ++co) {
                                        acc += grow[co] * kr[co];
                                        gkr[co] += v * grow[co];
                                    }
                                    gxrow[ci] += acc;
                                }
                            }
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

ValueId Tape::batchnorm(ValueId x, ValueId gamma, ValueId beta,
                        std::span<double> running_mean, std::span<double> running_var,
                        bool train, double momentum, double eps) {
    const Tensor& tx = check_id(x);
    const Tensor& tg = check_id(gamma);
    const Tensor& tb = check_id(beta);
    if (tx.ndim() != 3) throw DimensionError("batchnorm: input must be [B,L,C]");
    if (eps <= 0.0) throw ConfigError("batchnorm: eps must be > 0");
    const int B = tx.dim(0), L = tx.dim(1), C = tx.dim(2);
    if (tg.numel() != C || tb.numel() != C) throw DimensionError("batchnorm: gamma/beta length mismatch");
    if (running_mean.size() != static_cast<std::size_t>(C) || running_var.size() != static_cast<std::size_t>(C))
        throw DimensionError("batchnorm: running stats length mismatch");

    const long long R = static_cast<long long>(B) * L;
    std::vector<double> mu(static_cast<std::size_t>(C), 0.0);
    std::vector<double> inv(static_cast<std::size_t>(C), 0.0);

    const double* xp = tx.data.data();
    if (train) {
        std::vector<double> var(static_cast<std::size_t>(C), 0.0);
        for (long long r = 0; r < R; ++r) {
            const double* xrow = xp + r * C;
            for (int c = 0; c < C; ++c) mu[static_cast<std::size_t>(c)] += xrow[c];
        }
        for (int c = 0; c < C; ++c) mu[static_cast<std::size_t>(c)] /= static_cast<double>(R);
        for (long long r = 0; r < R; ++r) {
            const double* xrow = xp + r * C;
            for (int c = 0; c < C; ++c) {
                const double d = xrow[c] - mu[static_cast<std::size_t>(c)];
                var[static_cast<std::size_t>(c)] += d * d;
            }
        }
        for (int c = 0; c < C; ++c) {
            var[static_cast<std::size_t>(c)] /= static_cast<double>(R);
            inv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
            // exponential moving average toward the batch statistics
            running_mean[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean[static_cast<std::size_t>(c)] + momentum * mu[static_cast<std::size_t>(c)];
            running_var[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var[static_cast<std::size_t>(c)] + momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        for (int c = 0; c < C; ++c) {
            if (running_var[static_cast<std::size_t>(c)] < 0.0)
                throw InputError("batchnorm: negative running variance in eval mode");
            mu[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
            inv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(running_var[static_cast<std::size_t>(c)] + eps);
        }
    }

    Tensor out(tx.shape);
    const double* gp = tg.data.data();
    const double* bp = tb.data.data();
    double* op = out.data.data();
    for (long long r = 0; r < R; ++r) {
        const double* xrow = xp + r * C;
        double* orow = op + r * C;
        for (int c = 0; c < C; ++c)
            orow[c] = gp[c] * (xrow[c] - mu[static_cast<std::size_t>(c)]) * inv[static_cast<std::size_t>(c)] + bp[c];
    }

    const bool needs = grad_enabled_ && (need(x) || need(gamma) || need(beta));
    return push(std::move(out), needs,
                [x, gamma, beta, train, R, C, mu = std::move(mu), inv = std::move(inv),
                 out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    const Tensor& tx2 = t.val(x);
                    const Tensor& tg2 = t.val(gamma);
                    Tensor& gx = slot(g, t, x);
                    Tensor& gg = slot(g, t, gamma);
                    Tensor& gb = slot(g, t, beta);
                    const double* gop = go.data.data();
                    const double* xp2 = tx2.data.data();
                    const double* gmp = tg2.data.data();
                    // per-channel sums of g and g*xhat
                    std::vector<double> sg(static_cast<std::size_t>(C), 0.0);
                    std::vector<double> sgx(static_cast<std::size_t>(C), 0.0);
                    for (long long r = 0; r < R; ++r) {
                        const double* grow = gop + r * C;
                        const double* xrow = xp2 + r * C;
                        for (int c = 0; c < C; ++c) {
                            const double xhat = (xrow[c] - mu[static_cast<std::size_t>(c)]) * inv[static_cast<std::size_t>(c)];
                            sg[static_cast<std::size_t>(c)] += grow[c];
                            sgx[static_cast<std::size_t>(c)] += grow[c] * xhat;
                        }
                    }
                    for (int c = 0; c < C; ++c) {
                        gg.data[static_cast<std::size_t>(c)] += sgx[static_cast<std::size_t>(c)];
                        gb.data[static_cast<std::size_t>(c)] += sg[static_cast<std::size_t>(c)];
                    }
                    double* gxp = gx.data.data();
                    if (train) {
                        // gradient through the batch statistics
                        const double rn = static_cast<double>(R);
                        for (long long r = 0; r < R; ++r) {
                            const double* grow = gop + r * C;
                            const double* xrow = xp2 + r * C;
                            double* gxrow = gxp + r * C;
                            for (int c = 0; c < C; ++c) {
                                const std::size_t cc = static_cast<std::size_t>(c);
                                const double xhat = (xrow[c] - mu[cc]) * inv[cc];
                                gxrow[c] += gmp[c] * inv[cc] * (grow[c] - sg[cc] / rn - xhat * sgx[cc] / rn);
                            }
                        }
                    } else {
                        for (long long r = 0; r < R; ++r) {
                            const double* grow = gop + r * C;
                            double* gxrow = gxp + r * C;
                            for (int c = 0; c < C; ++c)
                                gxrow[c] += grow[c] * gmp[c] * inv[static_cast<std::size_t>(c)];
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// dropout / softmax / attention helpers
// ---------------------------------------------------------------------------

ValueId Tape::dropout(ValueId x, double rate, bool train, Rng& rng) {
    const Tensor& tx = check_id(x);
    if (rate < 0.0 || rate >= 1.0) throw InputError("dropout: rate must be in [0,1)");
    if (!train || rate == 0.0) return x;  // identity, inverted-dropout convention

    std::vector<double> mask(tx.data.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask) m = (rng.uniform01() >= rate) ? keep_scale : 0.0;

    Tensor out(tx.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = tx.data[i] * mask[i];
    const bool needs = grad_enabled_ && need(x);
    return push(std::move(out), needs,
                [x, mask = std::move(mask), out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    Tensor& gx = slot(g, t, x);
                    for (std::size_t i = 0; i < go.data.size(); ++i) gx.data[i] += go.data[i] * mask[i];
                });
}

namespace {

void softmax_row(const double* x, double* y, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        s += y[i];
    }
    for (int i = 0; i < n; ++i) y[i] /= s;
}

void softmax_row_back(const double* y, const double* go, double* gx, int n) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += go[i] * y[i];
    for (int i = 0; i < n; ++i) gx[i] += y[i] * (go[i] - dot);
}

}  // namespace

ValueId Tape::softmax(ValueId x) {
    const Tensor& tx = check_id(x);
    if (tx.ndim() != 1) throw DimensionError("softmax expects a rank-1 input");
    Tensor out(tx.shape);
    softmax_row(tx.data.data(), out.data.data(), tx.dim(0));
    const bool needs = grad_enabled_ && need(x);
    const int n = tx.dim(0);
    return push(std::move(out), needs, [x, n, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& y = t.val(out_id);
        Tensor& gx = slot(g, t, x);
        softmax_row_back(y.data.data(), go.data.data(), gx.data.data(), n);
    });
}

ValueId Tape::softmax_rows(ValueId x) {
    const Tensor& tx = check_id(x);
    if (tx.ndim() != 2) throw DimensionError("softmax_rows expects a rank-2 input");
    const int B = tx.dim(0), n = tx.dim(1);
    Tensor out(tx.shape);
    for (int b = 0; b < B; ++b)
        softmax_row(tx.data.data() + static_cast<std::size_t>(b) * n, out.data.data() + static_cast<std::size_t>(b) * n, n);
    const bool needs = grad_enabled_ && need(x);
    return push(std::move(out), needs, [x, B, n, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
        const Tensor& go = g[static_cast<std::size_t>(out_id)];
        const Tensor& y = t.val(out_id);
        Tensor& gx = slot(g, t, x);
        for (int b = 0; b < B; ++b)
            softmax_row_back(y.data.data() + static_cast<std::size_t>(b) * n,
                             go.data.data() + static_cast<std::size_t>(b) * n,
                             gx.data.data() + static_cast<std::size_t>(b) * n, n);
    });
}

ValueId Tape::weighted_sum(ValueId feats, ValueId w) {
    const Tensor& tf = check_id(feats);
    const Tensor& tw = check_id(w);
    if (tf.ndim() != 2 || tw.ndim() != 1 || tf.dim(0) != tw.dim(0))
        throw DimensionError("weighted_sum: expected [n,D] and [n]");
    const int n = tf.dim(0), d = tf.dim(1);
    Tensor out({d});
    for (int i = 0; i < n; ++i) {
        const double wi = tw.data[static_cast<std::size_t>(i)];
        const double* frow = tf.data.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) out.data[static_cast<std::size_t>(j)] += wi * frow[j];
    }
    const bool needs = grad_enabled_ && (need(feats) || need(w));
    return push(std::move(out), needs,
                [feats, w, n, d, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    const Tensor& tf2 = t.val(feats);
                    const Tensor& tw2 = t.val(w);
                    Tensor& gf = slot(g, t, feats);
                    Tensor& gw = slot(g, t, w);
                    for (int i = 0; i < n; ++i) {
                        const double wi = tw2.data[static_cast<std::size_t>(i)];
                        const double* frow = tf2.data.data() + static_cast<std::size_t>(i) * d;
                        double* gfrow = gf.data.data() + static_cast<std::size_t>(i) * d;
                        double acc = 0.0;
                        for (int j = 0; j < d; ++j) {
                            acc += go.data[static_cast<std::size_t>(j)] * frow[j];
                            gfrow[j] += wi * go.data[static_cast<std::size_t>(j)];
                        }
                        gw.data[static_cast<std::size_t>(i)] += acc;
                    }
                });
}

ValueId Tape::weighted_sum_batched(ValueId feats, ValueId w) {
    const Tensor& tf = check_id(feats);
    const Tensor& tw = check_id(w);
    if (tf.ndim() != 3 || tw.ndim() != 2 || tf.dim(0) != tw.dim(0) || tf.dim(1) != tw.dim(1))
        throw DimensionError("weighted_sum_batched: expected [B,n,D] and [B,n]");
    const int B = tf.dim(0), n = tf.dim(1), d = tf.dim(2);
    Tensor out({B, d});
    for (int b = 0; b < B; ++b) {
        const double* wrow = tw.data.data() + static_cast<std::size_t>(b) * n;
        const double* fb = tf.data.data() + static_cast<std::size_t>(b) * n * d;
        double* orow = out.data.data() + static_cast<std::size_t>(b) * d;
        for (int i = 0; i < n; ++i) {
            const double wi = wrow[i];
            const double* frow = fb + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) orow[j] += wi * frow[j];
        }
    }
    const bool needs = grad_enabled_ && (need(feats) || need(w));
    return push(std::move(out), needs,
                [feats, w, B, n, d, out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const Tensor& go = g[static_cast<std::size_t>(out_id)];
                    const Tensor& tf2 = t.val(feats);
                    const Tensor& tw2 = t.val(w);
                    Tensor& gf = slot(g, t, feats);
                    Tensor& gw = slot(g, t, w);
                    for (int b = 0; b < B; ++b) {
                        const double* grow = go.data.data() + static_cast<std::size_t>(b) * d;
                        const double* wrow = tw2.data.data() + static_cast<std::size_t>(b) * n;
                        const double* fb = tf2.data.data() + static_cast<std::size_t>(b) * n * d;
                        double* gfb = gf.data.data() + static_cast<std::size_t>(b) * n * d;
                        double* gwrow = gw.data.data() + static_cast<std::size_t>(b) * n;
                        for (int i = 0; i < n; ++i) {
                            const double wi = wrow[i];
                            const double* frow = fb + static_cast<std::size_t>(i) * d;
                            double* gfrow = gfb + static_cast<std::size_t>(i) * d;
                            double acc = 0.0;
                            for (int j = 0; j < d; ++j) {
                                acc += grow[j] * frow[j];
                                gfrow[j] += wi * grow[j];
                            }
                            gwrow[i] += acc;
                        }
                    }
                });
}

ValueId Tape::bce_with_logits_mean(ValueId logits, Tensor targets) {
    const Tensor& tz = check_id(logits);
    if (!same_shape(tz, targets)) throw DimensionError("bce: logits/targets shape mismatch");
    for (double y : targets.data)
        if (y != 0.0 && y != 1.0) throw InputError("bce: targets must be exactly 0 or 1");

    const double n = static_cast<double>(tz.numel());
    double loss = 0.0;
    for (std::size_t i = 0; i < tz.data.size(); ++i) {
        const double z = tz.data[i];
        const double y = targets.data[i];
        // max(z,0) - z*y + log(1 + exp(-|z|)): stable for large |z|
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= n;
    const bool needs = grad_enabled_ && need(logits);
    return push(Tensor::scalar(loss), needs,
                [logits, n, tgt = std::move(targets), out_id = static_cast<ValueId>(values_.size())](const Tape& t, std::vector<Tensor>& g) {
                    const double go = g[static_cast<std::size_t>(out_id)].data[0];
                    const Tensor& tz2 = t.val(logits);
                    Tensor& gz = slot(g, t, logits);
                    for (std::size_t i = 0; i < tz2.data.size(); ++i)
                        gz.data[i] += go * (stable_sigmoid(tz2.data[i]) - tgt.data[i]) / n;
                });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

Gradients Tape::backward(ValueId loss_id) const {
    const Tensor& loss = check_id(loss_id);
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");

    std::vector<Tensor> grads(values_.size());
    grads[static_cast<std::size_t>(loss_id)] = Tensor(loss.shape, std::vector<double>(loss.data.size(), 1.0));

    for (ValueId id = loss_id; id >= 0; --id) {
        const auto& fn = nodes_[static_cast<std::size_t>(id)];
        if (!fn) continue;
        if (grads[static_cast<std::size_t>(id)].data.empty()) continue;  // no influence on the loss
        fn(*this, grads);
    }

    Gradients out;
    for (std::size_t id = 0; id < values_.size(); ++id) {
        if (!is_leaf_[id] || !needs_grad_[id]) continue;
        if (grads[id].data.empty())
            out.by_id.emplace(static_cast<ValueId>(id), Tensor(values_[id].shape));
        else
            out.by_id.emplace(static_cast<ValueId>(id), std::move(grads[id]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

LstmState lstm_step(Tape& t, ValueId x, LstmState prev, const LstmCellParams& p) {
    const int H = p.hidden;
    if (t.val(x).numel() != p.input_dim) throw DimensionError("lstm_step: input size mismatch");
    if (t.val(p.w).ndim() != 2 || t.val(p.w).dim(0) != p.input_dim + H || t.val(p.w).dim(1) != 4 * H)
        throw DimensionError("lstm_step: gate weight shape mismatch");

    ValueId xh = t.concat1(x, prev.h);
    ValueId z = t.dense(xh, p.w, p.b);
    ValueId gi = t.sigmoid(t.slice1(z, 0, H));
    ValueId gf = t.sigmoid(t.slice1(z, H, H));
    ValueId gg = t.tanh(t.slice1(z, 2 * H, H));
    ValueId go = t.sigmoid(t.slice1(z, 3 * H, H));
    ValueId c = t.add(t.mul(gf, prev.c), t.mul(gi, gg));
    ValueId h = t.mul(go, t.tanh(c));
    return {h, c};
}

}  // namespace mlecg::num

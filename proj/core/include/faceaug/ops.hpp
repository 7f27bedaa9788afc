#pragma once

#include <utility>
#include <vector>

#include "faceaug/autodiff.hpp"
#include "faceaug/rng.hpp"

namespace faceaug {

// Whether batch-norm style layers use batch statistics (Train) or running
// statistics (Eval).
enum class Mode { Train, Eval };

// Forward-pass context threaded through network forwards. update_stats
// controls running-statistic side effects so finite-difference probes can
// re-run a training-mode forward without mutating state.
struct Fwd {
    Mode mode = Mode::Eval;
    bool update_stats = false;

    static Fwd train(bool update = true) { return Fwd{Mode::Train, update}; }
    static Fwd eval() { return Fwd{Mode::Eval, false}; }
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var add_scalar(Var a, float s);
Var relu(Var x);
Var tanh_act(Var x);
Var sigmoid_act(Var x);
Var clamp(Var x, float lo, float hi);
// (N,H,W,C) * (N,H,W,1), mask broadcast across channels.
Var mul_mask(Var x, Var mask);

// ---- convolution ----
// x: (N,H,W,Cin); w: (Cout,K,K,Cin); b: (Cout) or invalid Var for no bias.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
// x: (N,H,W,Cin); w: (Cin,K,K,Cout); output (N,(H-1)s-2p+K+op, ..., Cout).
Var conv2d_transpose(Var x, Var w, Var b, int stride, int pad, int output_pad);

// ---- batch normalization ----
// Running statistics; persisted in checkpoints.
struct BnBuffers {
    Tensor running_mean;  // (C)
    Tensor running_var;   // (C)
    void init(int channels) {
        running_mean = Tensor({channels});
        running_var = Tensor({channels}, 1.0f);
    }
};
Var batch_norm(Var x, Var gamma, Var beta, BnBuffers& buffers, const Fwd& fwd,
               float momentum = 0.1f, float eps = 1e-5f);

// ---- spectral normalization ----
// Persistent block power-iteration state; persisted in checkpoints.
struct SnState {
    Tensor basis;  // (rows, block), orthonormal columns
    void init(int rows, int block, Rng& rng);
    bool initialized() const { return !basis.empty(); }
};

// Estimate of the top singular value of a (rows x cols) matrix using block
// power iteration warm-started from (and updating) `state`. A rank-1 power
// iteration cannot reliably reach percent-level accuracy in few steps on
// weights whose top singular values are clustered; a block of 32 can.
// Returns {sigma, u1 (rows), v1 (cols)} with sigma = u1^T W v1.
struct SigmaEstimate {
    float sigma;
    Tensor u;
    Tensor v;
};
SigmaEstimate spectral_sigma(const Tensor& w_matrix, SnState& state, int steps);

// w: (Cout,K,K,Cin) viewed as (Cout, K*K*Cin). Returns w / sigma with
// gradients flowing through both the numerator and sigma = u^T W v
// (u, v treated as constants, the standard estimator). With update=false the
// persistent basis is left untouched, keeping the forward pure.
Var spectral_normalize(Var w, SnState& state, int steps, bool update = true);

// ---- dense / pooling / normalization ----
Var global_avg_pool(Var x);                       // (N,H,W,C) -> (N,C)
Var dense(Var x, Var w, Var b);                   // x:(N,Din), w:(Dout,Din), b:(Dout)
Var l2_normalize_rows(Var x, float eps = 1e-12f); // (N,D) row-wise

// ---- reductions / losses ----
Var sum_all(Var x);                 // scalar
Var mse_loss(Var a, Var b);         // mean((a-b)^2), scalar
Var frobenius_norm(Var x);          // sqrt(sum(x^2)), scalar
Var mean_row_sqdist(Var a, Var b);  // mean_i ||a_i - b_i||^2 over rows, scalar

struct TripletIndex {
    int anchor;
    int positive;
    int negative;
};
// mean over triples of max(0, d(a,p)^2 - d(a,n)^2 + margin); emb (N,D).
Var triplet_hinge(Var embeddings, const std::vector<TripletIndex>& triples, float margin);

}  // namespace faceaug

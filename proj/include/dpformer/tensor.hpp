#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dpformer/error.hpp"

namespace dpformer {

// Dense 64-bit float tensor with an optional gradient buffer.
//
// Tensor is a handle with shared-pointer semantics: copies alias the same
// storage, which is what lets backward closures accumulate gradients into
// the tensors the caller still holds. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::int64_t> shape, bool requires_grad = false);

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::int64_t>& shape() const;
    std::int64_t ndim() const;
    std::int64_t numel() const;

    // 2-D accessors; rows()/cols() throw DimensionError unless ndim()==2.
    std::int64_t rows() const;
    std::int64_t cols() const;

    double* data();
    const double* data() const;
    double& at(std::int64_t i);
    double at(std::int64_t i) const;
    double& at(std::int64_t r, std::int64_t c);
    double at(std::int64_t r, std::int64_t c) const;
    double scalar_value() const;  // numel()==1 or ContractError

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    // Gradient buffer. Absent means semantically zero.
    bool has_grad() const;
    void ensure_grad();          // allocate zero-filled if absent
    void zero_grad();            // zero if present, no-op otherwise
    void drop_grad();            // release the buffer
    double* grad_data();         // nullptr if absent
    const double* grad_data() const;
    double grad_at(std::int64_t i) const;  // 0.0 if absent
    void accumulate_grad(const double* g);

    Tensor clone() const;        // deep copy (gradient buffer not copied)
    void copy_data_from(const Tensor& src);  // same shape required

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    bool all_finite() const;

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    Impl& impl();
    const Impl& impl() const;
};

// Reverse-mode tape. Operations append a backward closure; backward() replays
// them in strict reverse order. Single-writer: one tape per training step.
class Tape {
public:
    Tape() = default;
    explicit Tape(bool recording) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(std::function<void()> backward_fn);
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss)=1 and replays all recorded closures in reverse.
    // loss must be scalar (ContractError otherwise).
    void backward(const Tensor& loss);
    void clear();

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Primitive operations. Each registers a backward closure on the tape when
// the tape is recording and an input requires grad. Gradients accumulate.
// ---------------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);      // [m,k]·[k,n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);   // [m,k]·[n,k]^T
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);         // elementwise
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias);  // [M,n]+[1,n]
Tensor gelu(Tape& tape, const Tensor& x);                         // exact erf form
Tensor log_clamp(Tape& tape, const Tensor& x, double eps);        // log(clamp(x,eps,1-eps))
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor sum_all(Tape& tape, const Tensor& x);                      // -> [1,1]
Tensor row_sum(Tape& tape, const Tensor& x);                      // [M,n] -> [M,1]
Tensor div_colvec(Tape& tape, const Tensor& x, const Tensor& s);  // [M,n]/[M,1]
Tensor col_slice(Tape& tape, const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Mean over each group of `rows_per_group` consecutive rows: [G*R,D] -> [G,D].
Tensor pool_rows(Tape& tape, const Tensor& x, std::int64_t groups, std::int64_t rows_per_group);

// Per sample b: row0 = first[b], row1 = second (shared), then the sample's
// `rows_per_group` rows of rest. [B,D],[1,D],[B*R,D] -> [B*(R+2),D].
Tensor concat_prompt(Tape& tape, const Tensor& first, const Tensor& second, const Tensor& rest,
                     std::int64_t batch, std::int64_t rows_per_group);

// Gather rows out of a pool of [1,D] tensors; backward scatters into the
// selected tensors only.
Tensor gather_rows_from(Tape& tape, const std::vector<Tensor>& pool, const std::vector<int>& idx);
// [B, P] matrix of cosine similarities between each query row and each pool entry.
Tensor cosine_scores(Tape& tape, const Tensor& queries, const std::vector<Tensor>& pool);

// (sum of pool)/pool.size(); every member receives grad/|pool| on backward.
Tensor average_of(Tape& tape, const std::vector<Tensor>& pool);

// im2col over a token grid that itself carries gradient (stage-2 tokenizer).
// x is [B*H1*W1, D]; output [B*H2*W2, D*patch*patch] with symmetric zero
// padding and H2 = ceil(H1/stride).
Tensor gather_patch_rows(Tape& tape, const Tensor& x, std::int64_t batch, std::int64_t h1,
                         std::int64_t w1, std::int64_t patch, std::int64_t stride);

// Dense multi-head attention core over per-sample blocks of `tokens` rows.
// q,k,v: [B*tokens, D]; per-head scaling 1/sqrt(D/heads); rows of every
// attention matrix are probability vectors.
Tensor msa_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                std::int64_t batch, std::int64_t tokens);

// Dilated neighborhood attention core. Each query attends to the ksize^2 keys
// at dilation `dil` centered on it, with the window shifted inward at borders
// so every query has exactly ksize^2 neighbors.
Tensor dina_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::int64_t batch, std::int64_t hp, std::int64_t wp, int ksize, int dil);

// Neighbor table used by dina_core: for each query position the ksize^2
// flattened key positions, row-major over (hp, wp).
std::vector<std::int32_t> dina_neighbor_table(std::int64_t hp, std::int64_t wp, int ksize, int dil);

}  // namespace dpformer

#pragma once

// Strided row-major double gemm kernels behind the tensor ops. Backed by
// Eigen when available, plain loops otherwise. All variants are
// single-threaded with a fixed accumulation order, so results are
// reproducible run to run.

#include <cstdint>

#ifdef DPFORMER_WITH_EIGEN
#include <Eigen/Core>
#endif

namespace dpformer::detail {

using i64 = std::int64_t;

#ifdef DPFORMER_WITH_EIGEN

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using CMap = Eigen::Map<const RowMat, Eigen::Unaligned, Stride>;
using MMap = Eigen::Map<RowMat, Eigen::Unaligned, Stride>;

// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    CMap A(a, m, k, Stride(lda));
    CMap B(b, k, n, Stride(ldb));
    MMap C(c, m, n, Stride(ldc));
    if (acc) {
        C.noalias() += A * B;
    } else {
        C.noalias() = A * B;
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    CMap A(a, m, k, Stride(lda));
    CMap B(b, n, k, Stride(ldb));
    MMap C(c, m, n, Stride(ldc));
    if (acc) {
        C.noalias() += A * B.transpose();
    } else {
        C.noalias() = A * B.transpose();
    }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    CMap A(a, k, m, Stride(lda));
    CMap B(b, k, n, Stride(ldb));
    MMap C(c, m, n, Stride(ldc));
    if (acc) {
        C.noalias() += A.transpose() * B;
    } else {
        C.noalias() = A.transpose() * B;
    }
}

#else

inline void gemm_nn(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    for (i64 i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        if (!acc) {
            for (i64 j = 0; j < n; ++j) crow[j] = 0.0;
        }
        const double* arow = a + i * lda;
        for (i64 p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * ldb;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void gemm_nt(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    for (i64 i = 0; i < m; ++i) {
        const double* arow = a + i * lda;
        double* crow = c + i * ldc;
        for (i64 j = 0; j < n; ++j) {
            const double* brow = b + j * ldb;
            double s = 0.0;
            for (i64 p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

inline void gemm_tn(const double* a, i64 lda, const double* b, i64 ldb, double* c, i64 ldc,
                    i64 m, i64 k, i64 n, bool acc) {
    if (!acc) {
        for (i64 i = 0; i < m; ++i) {
            double* crow = c + i * ldc;
            for (i64 j = 0; j < n; ++j) crow[j] = 0.0;
        }
    }
    for (i64 p = 0; p < k; ++p) {
        const double* arow = a + p * lda;
        const double* brow = b + p * ldb;
        for (i64 i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * ldc;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

#endif

}  // namespace dpformer::detail

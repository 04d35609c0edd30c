#include "mbgmn/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace mbgmn {

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols,
                           std::vector<std::size_t> row_offsets,
                           std::vector<std::size_t> col_indices,
                           std::vector<double> values)
    : rows_(rows), cols_(cols),
      row_offsets_(std::move(row_offsets)),
      col_indices_(std::move(col_indices)),
      values_(std::move(values)) {
    if (row_offsets_.size() != rows_ + 1)
        throw std::invalid_argument("row offsets must have length rows+1");
    if (col_indices_.size() != values_.size())
        throw std::invalid_argument("column index / value length mismatch");
    for (std::size_t r = 0; r < rows_; ++r)
        if (row_offsets_[r] > row_offsets_[r + 1])
            throw std::invalid_argument("row offsets must be non-decreasing");
    for (auto c : col_indices_)
        if (c >= cols_) throw std::invalid_argument("column index out of range");
}

SparseMatrix SparseMatrix::from_coo(std::size_t rows, std::size_t cols,
                                    const std::vector<std::size_t>& r,
                                    const std::vector<std::size_t>& c,
                                    const std::vector<double>& v) {
    if (r.size() != c.size() || r.size() != v.size())
        throw std::invalid_argument("coo arrays must have equal length");
    std::vector<std::size_t> order(r.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return r[a] != r[b] ? r[a] < r[b] : c[a] < c[b];
    });
    std::vector<std::size_t> offsets(rows + 1, 0), cols_idx;
    std::vector<double> vals;
    cols_idx.reserve(r.size());
    vals.reserve(r.size());
    for (std::size_t n = 0; n < order.size(); ++n) {
        std::size_t i = order[n];
        if (r[i] >= rows || c[i] >= cols)
            throw std::invalid_argument("coo entry out of range");
        if (n > 0) {
            std::size_t p = order[n - 1];
            if (r[p] == r[i] && c[p] == c[i])
                throw std::invalid_argument("duplicate (row, col) entry");
        }
        offsets[r[i] + 1]++;
        cols_idx.push_back(c[i]);
        vals.push_back(v[i]);
    }
    for (std::size_t i = 0; i < rows; ++i) offsets[i + 1] += offsets[i];
    return SparseMatrix(rows, cols, std::move(offsets), std::move(cols_idx), std::move(vals));
}

SparseMatrix SparseMatrix::identity(std::size_t n) {
    std::vector<std::size_t> offsets(n + 1), cols_idx(n);
    std::vector<double> vals(n, 1.0);
    for (std::size_t i = 0; i <= n; ++i) offsets[i] = i;
    for (std::size_t i = 0; i < n; ++i) cols_idx[i] = i;
    return SparseMatrix(n, n, std::move(offsets), std::move(cols_idx), std::move(vals));
}

SparseMatrix SparseMatrix::transposed() const {
    std::vector<std::size_t> offsets(cols_ + 1, 0);
    for (auto c : col_indices_) offsets[c + 1]++;
    for (std::size_t i = 0; i < cols_; ++i) offsets[i + 1] += offsets[i];
    std::vector<std::size_t> fill(offsets.begin(), offsets.end() - 1);
    std::vector<std::size_t> cols_idx(nnz());
    std::vector<double> vals(nnz());
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t p = row_offsets_[r]; p < row_offsets_[r + 1]; ++p) {
            std::size_t dst = fill[col_indices_[p]]++;
            cols_idx[dst] = r;
            vals[dst] = values_[p];
        }
    }
    return SparseMatrix(cols_, rows_, std::move(offsets), std::move(cols_idx), std::move(vals));
}

Tensor SparseMatrix::densify() const {
    Tensor d({rows_, cols_});
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t p = row_offsets_[r]; p < row_offsets_[r + 1]; ++p)
            d.at(r, col_indices_[p]) = values_[p];
    return d;
}

void SparseMatrix::multiply(const Tensor& x, Tensor& y) const {
    const std::size_t p = x.cols();
    if (x.rows() != cols_)
        throw std::invalid_argument("spmm dimension mismatch: sparse " +
                                    std::to_string(rows_) + "x" + std::to_string(cols_) +
                                    " vs dense " + Tensor::shape_str(x.shape()));
    y = Tensor({rows_, p});
    for (std::size_t r = 0; r < rows_; ++r) {
        double* out = y.data() + r * p;
        for (std::size_t e = row_offsets_[r]; e < row_offsets_[r + 1]; ++e) {
            const double w = values_[e];
            const double* in = x.data() + col_indices_[e] * p;
            for (std::size_t c = 0; c < p; ++c) out[c] += w * in[c];
        }
    }
}

}  // namespace mbgmn

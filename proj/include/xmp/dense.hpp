#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>
#include <vector>

namespace xmp {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using RowVecD = RowVec<double>;
using RowVecF = RowVec<float>;

/// A named view on one parameter tensor of a model. Every parameter is stored
/// as a dense matrix; vectors are 1 x n.
template <typename Scalar>
using NamedTensor = std::pair<std::string, Mat<Scalar>*>;

template <typename Scalar>
using TensorList = std::vector<NamedTensor<Scalar>>;

/// Element-wise copy between two structurally identical parameter lists,
/// converting the scalar type.
template <typename To, typename From>
void copy_tensors(const TensorList<From>& src, const TensorList<To>& dst)
{
    for (std::size_t i = 0; i < src.size(); ++i)
        *dst[i].second = src[i].second->template cast<To>();
}

template <typename Scalar>
void zero_tensors(const TensorList<Scalar>& list)
{
    for (auto& [name, t] : list)
        t->setZero();
}

template <typename Scalar>
bool all_finite(const TensorList<Scalar>& list)
{
    for (auto& [name, t] : list)
        if (!t->allFinite())
            return false;
    return true;
}

template <typename Scalar>
std::size_t parameter_count(const TensorList<Scalar>& list)
{
    std::size_t n = 0;
    for (auto& [name, t] : list)
        n += static_cast<std::size_t>(t->size());
    return n;
}

}  // namespace xmp

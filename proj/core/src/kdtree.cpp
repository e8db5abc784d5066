#include "boxcal/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace boxcal {

KdTree::KdTree(const std::vector<Eigen::Vector3d>& points) : points_(points) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    if (!points_.empty()) root_ = build(0, static_cast<int>(points_.size()));
}

int KdTree::build(int begin, int end) {
    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin <= kLeafSize) {
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }

    Eigen::Vector3d lo = points_[static_cast<size_t>(order_[static_cast<size_t>(begin)])];
    Eigen::Vector3d hi = lo;
    for (int i = begin + 1; i < end; ++i) {
        const auto& p = points_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                         return points_[static_cast<size_t>(a)][axis] <
                                points_[static_cast<size_t>(b)][axis];
                     });
    node.axis = axis;
    node.split = points_[static_cast<size_t>(order_[static_cast<size_t>(mid)])][axis];

    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[static_cast<size_t>(self)].left = left;
    nodes_[static_cast<size_t>(self)].right = right;
    return self;
}

void KdTree::search(int ni, const Eigen::Vector3d& query, Hit& best) const {
    const Node& node = nodes_[static_cast<size_t>(ni)];
    if (node.left < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int pi = order_[static_cast<size_t>(i)];
            const double d2 = (points_[static_cast<size_t>(pi)] - query).squaredNorm();
            if (d2 < best.squared_dist) {
                best.squared_dist = d2;
                best.index = pi;
            }
        }
        return;
    }
    const double delta = query[node.axis] - node.split;
    const int first = delta < 0.0 ? node.left : node.right;
    const int second = delta < 0.0 ? node.right : node.left;
    search(first, query, best);
    if (delta * delta < best.squared_dist) search(second, query, best);
}

KdTree::Hit KdTree::nearest(const Eigen::Vector3d& query, double max_dist) const {
    Hit best;
    if (root_ < 0) return best;
    best.squared_dist = max_dist * max_dist;
    best.index = -1;
    search(root_, query, best);
    if (best.index < 0) best.squared_dist = std::numeric_limits<double>::infinity();
    return best;
}

void KdTree::search_knn(int ni, const Eigen::Vector3d& query, int k,
                        std::vector<std::pair<double, int>>& heap) const {
    const Node& node = nodes_[static_cast<size_t>(ni)];
    if (node.left < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int pi = order_[static_cast<size_t>(i)];
            const double d2 = (points_[static_cast<size_t>(pi)] - query).squaredNorm();
            if (static_cast<int>(heap.size()) < k) {
                heap.emplace_back(d2, pi);
                std::push_heap(heap.begin(), heap.end());
            } else if (d2 < heap.front().first) {
                std::pop_heap(heap.begin(), heap.end());
                heap.back() = {d2, pi};
                std::push_heap(heap.begin(), heap.end());
            }
        }
        return;
    }
    const double delta = query[node.axis] - node.split;
    const int first = delta < 0.0 ? node.left : node.right;
    const int second = delta < 0.0 ? node.right : node.left;
    search_knn(first, query, k, heap);
    if (static_cast<int>(heap.size()) < k || delta * delta < heap.front().first)
        search_knn(second, query, k, heap);
}

std::vector<int> KdTree::knn(const Eigen::Vector3d& query, int k) const {
    std::vector<std::pair<double, int>> heap;
    if (root_ >= 0 && k > 0) {
        heap.reserve(static_cast<size_t>(k) + 1);
        search_knn(root_, query, k, heap);
    }
    std::sort_heap(heap.begin(), heap.end());
    std::vector<int> out;
    out.reserve(heap.size());
    for (const auto& [d2, i] : heap) out.push_back(i);
    return out;
}

}  // namespace boxcal

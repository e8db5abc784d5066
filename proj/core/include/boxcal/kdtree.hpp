#pragma once

#include <Eigen/Dense>
#include <limits>
#include <vector>

namespace boxcal {

/// Exact nearest-neighbor search over a fixed set of 3D points.
/// Results match exhaustive search (verified in tests); the tree is just
/// the index.
class KdTree {
public:
    KdTree() = default;
    explicit KdTree(const std::vector<Eigen::Vector3d>& points);

    size_t size() const { return points_.size(); }
    const Eigen::Vector3d& point(int i) const { return points_[static_cast<size_t>(i)]; }

    struct Hit {
        int index = -1;
        double squared_dist = std::numeric_limits<double>::infinity();
        bool found() const { return index >= 0; }
    };

    /// Nearest point within max_dist (Euclidean); misses return an empty Hit.
    Hit nearest(const Eigen::Vector3d& query,
                double max_dist = std::numeric_limits<double>::infinity()) const;

    /// Indices of the k nearest points (including an exact match),
    /// closest first.
    std::vector<int> knn(const Eigen::Vector3d& query, int k) const;

private:
    struct Node {
        int left = -1;
        int right = -1;
        int begin = 0;   // leaf range into order_
        int end = 0;
        int axis = 0;
        double split = 0.0;
    };

    int build(int begin, int end);
    void search(int node, const Eigen::Vector3d& query, Hit& best) const;
    void search_knn(int node, const Eigen::Vector3d& query, int k,
                    std::vector<std::pair<double, int>>& heap) const;

    std::vector<Eigen::Vector3d> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
    static constexpr int kLeafSize = 16;
};

}  // namespace boxcal

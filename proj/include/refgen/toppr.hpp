#pragma once

// Topological precision/recall: Gaussian KDE supports thresholded by a
// bootstrap confidence band, then fidelity, diversity and their harmonic mean.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "refgen/error.hpp"

namespace refgen::eval {

// M points of equal dimension, stored row-major.
class PointSet {
   public:
    PointSet() = default;
    PointSet(std::size_t dim, std::vector<double> data) : dim_(dim), data_(std::move(data)) {
        require(dim_ > 0 && data_.size() % dim_ == 0, "point set: data is not a whole number of points");
    }

    template <class T>
    static PointSet from_rows(const std::vector<std::vector<T>>& rows) {
        require(!rows.empty(), "point set: no points");
        const std::size_t d = rows.front().size();
        std::vector<double> data;
        data.reserve(rows.size() * d);
        for (const auto& r : rows) {
            require(r.size() == d, "point set: rows differ in dimension");
            data.insert(data.end(), r.begin(), r.end());
        }
        return {d, std::move(data)};
    }

    std::size_t size() const { return dim_ ? data_.size() / dim_ : 0; }
    std::size_t dim() const { return dim_; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

    // Points in lexicographic order, so results never depend on input order.
    PointSet canonical() const {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            const auto ra = row(a), rb = row(b);
            return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
        });
        std::vector<double> out;
        out.reserve(data_.size());
        for (auto i : idx) out.insert(out.end(), row(i).begin(), row(i).end());
        return {dim_, std::move(out)};
    }

    bool all_identical() const {
        for (std::size_t i = 1; i < size(); ++i)
            if (!std::equal(row(i).begin(), row(i).end(), row(0).begin())) return false;
        return true;
    }

   private:
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// Median over all pairs i < j of the Euclidean distance.
inline double median_pairwise_distance(const PointSet& p) {
    std::vector<double> d;
    d.reserve(p.size() * (p.size() - 1) / 2);
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j) d.push_back(std::sqrt(sq_dist(p.row(i), p.row(j))));
    require(!d.empty(), "median distance needs at least two points");
    const auto mid = d.begin() + static_cast<long>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return *mid;
}

struct KdeConfig {
    std::size_t bootstrap_iters = 100;
    double alpha = 0.1;
    double bandwidth = 0.0;  // 0: median pairwise distance
    std::uint64_t seed = 0;
    // Threshold floor: the density of a single kernel this many bandwidths away.
    double floor_radius = 3.0;
};

inline nlohmann::json config_json(const KdeConfig& c) {
    return {{"kernel", "gaussian"},
            {"bandwidth", c.bandwidth == 0.0 ? nlohmann::json("median_pairwise") : nlohmann::json(c.bandwidth)},
            {"bootstrap_iters", c.bootstrap_iters},
            {"alpha", c.alpha},
            {"seed", c.seed},
            {"floor_radius", c.floor_radius}};
}

// s(v) = [KDE(v) > c_alpha], KDE(v) = mean_i exp(-|v - x_i|^2 / 2h^2).
class Support {
   public:
    static Support estimate(const PointSet& points, const KdeConfig& cfg) {
        require(points.size() >= 2, "support estimation needs at least two points");
        require(cfg.bootstrap_iters >= 1 && cfg.alpha > 0.0 && cfg.alpha < 1.0, "bad KDE bootstrap settings");
        if (points.all_identical()) throw DegenerateSetError("support estimation: all points are identical");
        Support s;
        s.points_ = points.canonical();
        const std::size_t m = s.points_.size();
        s.h_ = cfg.bandwidth > 0.0 ? cfg.bandwidth : median_pairwise_distance(s.points_);
        if (!(s.h_ > 0.0)) throw DegenerateSetError("support estimation: zero bandwidth");

        std::vector<double> k(m * m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = i; j < m; ++j)
                k[i * m + j] = k[j * m + i] = s.kernel(sq_dist(s.points_.row(i), s.points_.row(j)));
        std::vector<double> full(m, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < m; ++i) full[j] += k[j * m + i];
            full[j] /= static_cast<double>(m);
        }

        std::mt19937_64 rng(cfg.seed);
        std::uniform_int_distribution<std::size_t> pick(0, m - 1);
        std::vector<double> sups(cfg.bootstrap_iters);
        std::vector<double> counts(m);
        for (auto& sup : sups) {
            std::fill(counts.begin(), counts.end(), 0.0);
            for (std::size_t i = 0; i < m; ++i) counts[pick(rng)] += 1.0;
            sup = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                double v = 0.0;
                for (std::size_t i = 0; i < m; ++i) v += counts[i] * k[j * m + i];
                sup = std::max(sup, std::abs(v / static_cast<double>(m) - full[j]));
            }
        }
        std::sort(sups.begin(), sups.end());
        const auto q = static_cast<std::size_t>(std::ceil((1.0 - cfg.alpha) * static_cast<double>(sups.size()))) - 1;
        const double floor = std::exp(-0.5 * cfg.floor_radius * cfg.floor_radius) / static_cast<double>(m);
        s.threshold_ = std::max(sups[std::min(q, sups.size() - 1)], floor);
        return s;
    }

    // Support concentrated on one point (a fully collapsed set).
    static Support point_mass(std::span<const double> p) {
        Support s;
        s.points_ = PointSet(p.size(), std::vector<double>(p.begin(), p.end()));
        s.point_mass_ = true;
        return s;
    }

    double density(std::span<const double> v) const {
        double s = 0.0;
        for (std::size_t i = 0; i < points_.size(); ++i) s += kernel(sq_dist(v, points_.row(i)));
        return s / static_cast<double>(points_.size());
    }

    bool contains(std::span<const double> v) const {
        require(v.size() == points_.dim(), "support query dimension mismatch");
        if (point_mass_) return std::equal(v.begin(), v.end(), points_.row(0).begin());
        return density(v) > threshold_;
    }

    double bandwidth() const { return h_; }
    double threshold() const { return threshold_; }
    bool is_point_mass() const { return point_mass_; }

   private:
    double kernel(double d2) const { return std::exp(-d2 / (2.0 * h_ * h_)); }

    PointSet points_;
    double h_ = 0.0, threshold_ = 0.0;
    bool point_mass_ = false;
};

inline Support kde_support(const PointSet& points, const KdeConfig& cfg) { return Support::estimate(points, cfg); }

struct TopPR {
    double fidelity = 0, diversity = 0, top_f1 = 0;
};

inline double harmonic_f1(double f, double d) { return f > 0.0 && d > 0.0 ? 2.0 * f * d / (f + d) : 0.0; }

// fidelity: share of the fake points inside their own support that also lie in
// the real support; diversity symmetrically for real points. A fake set with a
// single distinct point is a point mass; a degenerate real set is an error.
inline TopPR toppr(const PointSet& real, const PointSet& fake, const KdeConfig& cfg) {
    require(real.size() > 0 && fake.size() > 0, "toppr: empty point set");
    require(real.dim() == fake.dim(), "toppr: feature dimensions differ");
    const Support sr = kde_support(real, cfg);
    const Support sf = fake.all_identical() ? Support::point_mass(fake.row(0)) : kde_support(fake, cfg);

    auto share = [](const PointSet& p, const Support& own, const Support& other) {
        std::size_t in_own = 0, in_both = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!own.contains(p.row(i))) continue;
            ++in_own;
            in_both += other.contains(p.row(i));
        }
        return in_own ? static_cast<double>(in_both) / static_cast<double>(in_own) : 0.0;
    };
    TopPR r;
    r.fidelity = share(fake, sf, sr);
    r.diversity = share(real, sr, sf);
    r.top_f1 = harmonic_f1(r.fidelity, r.diversity);
    return r;
}

}  // namespace refgen::eval

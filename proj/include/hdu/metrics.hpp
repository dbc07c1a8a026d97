#pragma once

// Segmentation metrics over binary masks on an x-fastest grid, with distances
// in millimetres. Undefined values are std::nullopt, never zero.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "hdu/io/volume.hpp"

namespace hdu::metrics {

using io::Extents;
using io::Vec3;

struct Mask {
    Extents extents{0, 0, 0};
    std::vector<std::uint8_t> v;  // 0 or 1, x fastest

    static Mask empty(Extents e) { return {e, std::vector<std::uint8_t>(e[0] * e[1] * e[2], 0)}; }
    std::size_t size() const { return v.size(); }
    std::size_t count() const { return std::size_t(std::count(v.begin(), v.end(), std::uint8_t(1))); }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + extents[0] * (y + extents[1] * z); }
};

/// Voxels whose label satisfies `pred`.
template <class Pred>
Mask mask_where(const io::Volume& labels, Pred pred) {
    Mask m{labels.extents, std::vector<std::uint8_t>(labels.values.size())};
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = pred(labels.values[i]) ? 1 : 0;
    return m;
}

/// Liver region (liver or tumor) and tumor masks from a {0,1,2} label volume.
inline Mask liver_mask(const io::Volume& labels) { return mask_where(labels, [](float l) { return l >= 1.0f; }); }
inline Mask tumor_mask(const io::Volume& labels) { return mask_where(labels, [](float l) { return l == 2.0f; }); }

inline void require_same_grid(const Mask& a, const Mask& b, const char* what) {
    if (a.extents != b.extents || a.v.size() != b.v.size())
        throw std::invalid_argument(std::string(what) + ": masks have different extents");
}

struct Overlap {
    std::size_t a = 0, b = 0, both = 0;
};

inline Overlap overlap(const Mask& a, const Mask& b) {
    require_same_grid(a, b, "overlap");
    Overlap o;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        o.a += a.v[i];
        o.b += b.v[i];
        o.both += a.v[i] & b.v[i];
    }
    return o;
}

inline double dice_from(const Overlap& o) {
    if (o.a + o.b == 0) return 1.0;
    return 2.0 * double(o.both) / double(o.a + o.b);
}

/// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const Mask& a, const Mask& b) { return dice_from(overlap(a, b)); }

/// 1 - |A n B| / |A u B|; two empty masks score 0.
inline double voe(const Mask& a, const Mask& b) {
    const Overlap o = overlap(a, b);
    const std::size_t uni = o.a + o.b - o.both;
    return uni == 0 ? 0.0 : 1.0 - double(o.both) / double(uni);
}

/// (|B| - |A|) / |A| with A the reference; undefined when A is empty.
inline std::optional<double> rvd(const Mask& truth, const Mask& pred) {
    const Overlap o = overlap(truth, pred);
    if (o.a == 0) return std::nullopt;
    return (double(o.b) - double(o.a)) / double(o.a);
}

/// Mask voxels with at least one 6-neighbour outside the mask or outside the grid.
inline Mask surface_voxels(const Mask& m) {
    Mask s = Mask::empty(m.extents);
    const auto [X, Y, Z] = m.extents;
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) {
                const std::size_t i = m.index(x, y, z);
                if (!m.v[i]) continue;
                const bool border = x == 0 || y == 0 || z == 0 || x + 1 == X || y + 1 == Y || z + 1 == Z;
                if (border || !m.v[i - 1] || !m.v[i + 1] || !m.v[i - X] || !m.v[i + X] || !m.v[i - X * Y] ||
                    !m.v[i + X * Y])
                    s.v[i] = 1;
            }
    return s;
}

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher) on points
// q*step: out[p] = min_q (step*(p-q))^2 + f[q].
inline void edt_1d(const double* f, double* out, std::size_t n, double step, std::vector<std::size_t>& v,
                   std::vector<double>& zb) {
    v.resize(n);
    zb.resize(n + 1);
    std::size_t k = 0;
    bool any = false;
    auto intersect = [&](std::size_t q, std::size_t r) {
        const double xq = double(q) * step, xr = double(r) * step;
        return ((f[q] + xq * xq) - (f[r] + xr * xr)) / (2.0 * (xq - xr));
    };
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (!any) {
            v[0] = q;
            zb[0] = -kInf;
            zb[1] = kInf;
            any = true;
            continue;
        }
        double s = intersect(q, v[k]);
        while (s <= zb[k]) s = intersect(q, v[--k]);  // zb[0] = -inf stops the loop
        ++k;
        v[k] = q;
        zb[k] = s;
        zb[k + 1] = kInf;
    }
    if (!any) {
        for (std::size_t p = 0; p < n; ++p) out[p] = kInf;
        return;
    }
    k = 0;
    for (std::size_t p = 0; p < n; ++p) {
        const double xp = double(p) * step;
        while (zb[k + 1] < xp) ++k;
        const double d = xp - double(v[k]) * step;
        out[p] = d * d + f[v[k]];
    }
}

}  // namespace detail

/// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel of `features`.
inline std::vector<double> squared_edt(const Mask& features, const Vec3& spacing) {
    const auto [X, Y, Z] = features.extents;
    std::vector<double> d(features.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = features.v[i] ? 0.0 : detail::kInf;
    std::vector<double> line_in, line_out;
    std::vector<std::size_t> v;
    std::vector<double> zb;
    const std::size_t ext[3] = {X, Y, Z};
    const std::size_t stride[3] = {1, X, X * Y};
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t n = ext[axis], st = stride[axis];
        line_in.resize(n);
        line_out.resize(n);
        const int a1 = axis == 0 ? 1 : 0, a2 = axis == 2 ? 1 : 2;
        for (std::size_t j = 0; j < ext[a2]; ++j)
            for (std::size_t i = 0; i < ext[a1]; ++i) {
                const std::size_t base = i * stride[a1] + j * stride[a2];
                for (std::size_t p = 0; p < n; ++p) line_in[p] = d[base + p * st];
                detail::edt_1d(line_in.data(), line_out.data(), n, spacing[axis], v, zb);
                for (std::size_t p = 0; p < n; ++p) d[base + p * st] = line_out[p];
            }
    }
    return d;
}

struct SurfaceDistances {
    double asd_mm = 0;
    double rmsd_mm = 0;
};

/// Mean and root-mean-square of the symmetric nearest-surface distances;
/// undefined when either mask is empty.
inline std::optional<SurfaceDistances> surface_distances(const Mask& a, const Mask& b, const Vec3& spacing) {
    require_same_grid(a, b, "surface_distances");
    const Mask sa = surface_voxels(a), sb = surface_voxels(b);
    const std::size_t na = sa.count(), nb = sb.count();
    if (na == 0 || nb == 0) return std::nullopt;
    const auto da = squared_edt(sa, spacing), db = squared_edt(sb, spacing);
    double sum = 0, sum_sq = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa.v[i]) {
            sum += std::sqrt(db[i]);
            sum_sq += db[i];
        }
        if (sb.v[i]) {
            sum += std::sqrt(da[i]);
            sum_sq += da[i];
        }
    }
    const double n = double(na + nb);
    return SurfaceDistances{sum / n, std::sqrt(sum_sq / n)};
}

/// Tumor volume over liver volume (liver region includes tumor); undefined without liver.
inline std::optional<double> tumor_burden(const Mask& liver_region, const Mask& tumor) {
    const std::size_t l = liver_region.count();
    if (l == 0) return std::nullopt;
    return double(tumor.count()) / double(l);
}

struct BurdenPair {
    std::string case_id;
    std::optional<double> predicted, truth;
};

struct BurdenRmse {
    std::optional<double> rmse;  // undefined when no case qualifies
    std::vector<std::string> excluded;
};

/// RMSE of per-case burden differences; cases lacking a liver on either side are excluded.
inline BurdenRmse tumor_burden_rmse(const std::vector<BurdenPair>& cases) {
    BurdenRmse r;
    double acc = 0;
    std::size_t n = 0;
    for (auto& c : cases) {
        if (!c.predicted || !c.truth) {
            r.excluded.push_back(c.case_id);
            continue;
        }
        const double d = *c.predicted - *c.truth;
        acc += d * d;
        ++n;
    }
    if (n > 0) r.rmse = std::sqrt(acc / double(n));
    return r;
}

struct DiceAggregate {
    double dice_per_case_mean = 0;
    double dice_global = 0;
};

/// Per-case mean of Dice and Dice on the pooled counts of all cases.
inline DiceAggregate dice_aggregate(const std::vector<Overlap>& cases) {
    if (cases.empty()) throw std::invalid_argument("dice_aggregate: no cases");
    DiceAggregate d;
    Overlap pooled;
    for (auto& o : cases) {
        d.dice_per_case_mean += dice_from(o);
        pooled.a += o.a;
        pooled.b += o.b;
        pooled.both += o.both;
    }
    d.dice_per_case_mean /= double(cases.size());
    d.dice_global = dice_from(pooled);
    return d;
}

// ---- report ---------------------------------------------------------------

struct StructureRecord {
    std::string structure;  // "liver" or "tumor"
    double dice = 0;
    double voe = 0;
    std::optional<double> rvd;
    std::optional<double> asd_mm;
    std::optional<double> rmsd_mm;
    Overlap counts;
};

struct CaseRecord {
    std::string case_id;
    std::vector<StructureRecord> structures;
    std::optional<double> tumor_burden_pred;
    std::optional<double> tumor_burden_true;
};

inline StructureRecord evaluate_structure(const std::string& name, const Mask& truth, const Mask& pred,
                                          const Vec3& spacing) {
    StructureRecord r;
    r.structure = name;
    r.counts = overlap(truth, pred);
    r.dice = dice_from(r.counts);
    r.voe = voe(truth, pred);
    r.rvd = rvd(truth, pred);
    if (auto sd = surface_distances(truth, pred, spacing)) {
        r.asd_mm = sd->asd_mm;
        r.rmsd_mm = sd->rmsd_mm;
    }
    return r;
}

/// All metrics of one case from {0,1,2} label volumes on the same grid.
inline CaseRecord evaluate_case(const std::string& id, const io::Volume& truth, const io::Volume& pred) {
    if (truth.extents != pred.extents)
        throw std::invalid_argument("case " + id + ": prediction and truth extents differ");
    CaseRecord c;
    c.case_id = id;
    const Mask tl = liver_mask(truth), pl = liver_mask(pred), tt = tumor_mask(truth), pt = tumor_mask(pred);
    c.structures.push_back(evaluate_structure("liver", tl, pl, truth.spacing));
    c.structures.push_back(evaluate_structure("tumor", tt, pt, truth.spacing));
    c.tumor_burden_pred = tumor_burden(pl, pt);
    c.tumor_burden_true = tumor_burden(tl, tt);
    return c;
}

struct CaseError {
    std::string case_id;
    std::string message;
};

struct MetricsReport {
    std::vector<CaseRecord> cases;
    std::vector<CaseError> errors;

    nlohmann::json to_json() const {
        using nlohmann::json;
        auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
        json rows = json::array();
        std::vector<BurdenPair> burdens;
        std::map<std::string, std::vector<Overlap>> per_structure;
        for (auto& c : cases) {
            for (auto& s : c.structures) {
                json undefined = json::array();
                if (!s.rvd) undefined.push_back("rvd");
                if (!s.asd_mm) undefined.push_back("asd_mm");
                if (!s.rmsd_mm) undefined.push_back("rmsd_mm");
                if (!c.tumor_burden_pred) undefined.push_back("tumor_burden_pred");
                if (!c.tumor_burden_true) undefined.push_back("tumor_burden_true");
                rows.push_back({{"case_id", c.case_id},
                                {"structure", s.structure},
                                {"dice", s.dice},
                                {"voe", s.voe},
                                {"rvd", opt(s.rvd)},
                                {"asd_mm", opt(s.asd_mm)},
                                {"rmsd_mm", opt(s.rmsd_mm)},
                                {"tumor_burden_pred", opt(c.tumor_burden_pred)},
                                {"tumor_burden_true", opt(c.tumor_burden_true)},
                                {"undefined", undefined}});
                per_structure[s.structure].push_back(s.counts);
            }
            burdens.push_back({c.case_id, c.tumor_burden_pred, c.tumor_burden_true});
        }
        json global = json::object();
        for (auto& [name, counts] : per_structure) {
            const auto agg = dice_aggregate(counts);
            global[name] = {{"dice_global", agg.dice_global}, {"dice_per_case_mean", agg.dice_per_case_mean}};
        }
        const auto br = tumor_burden_rmse(burdens);
        global["tumor_burden_rmse"] = opt(br.rmse);
        global["tumor_burden_excluded"] = br.excluded;
        json errs = json::array();
        for (auto& e : errors) errs.push_back({{"case_id", e.case_id}, {"message", e.message}});
        return {{"cases", rows}, {"global", global}, {"errors", errs}};
    }
};

}  // namespace hdu::metrics

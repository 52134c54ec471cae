#include "gmcn/inputfit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gmcn/gm.hpp"
#include "gmcn/rng.hpp"

namespace gmcn::infit {

namespace {
constexpr double kCovFloorEig = 1e-4;

void floor_covariance(int k, double* packed) {
    const double lam = la::min_eigenvalue(k, packed);
    if (lam < kCovFloorEig)
        for (int d = 0; d < k; ++d)
            packed[la::packed_index(d, d)] += kCovFloorEig - lam;
}
}  // namespace

std::vector<double> weighted_kmeans(const WeightedPointSet& pts, int n, uint64_t seed,
                                    int iters) {
    const int k = pts.dims;
    const int m = pts.size();
    if (m < n) throw std::invalid_argument("weighted_kmeans: fewer points than clusters");
    (void)seed;  // seeding is deterministic; the seed is kept for interface stability

    auto dist2 = [&](const double* a, const double* b) {
        double s = 0;
        for (int d = 0; d < k; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
        return s;
    };

    // farthest-point seeding from the heaviest point
    std::vector<int> seeds;
    int first = 0;
    for (int i = 1; i < m; ++i)
        if (pts.mass[i] > pts.mass[first]) first = i;
    seeds.push_back(first);
    std::vector<double> mind(m);
    for (int i = 0; i < m; ++i) mind[i] = dist2(pts.p(i), pts.p(first));
    while (static_cast<int>(seeds.size()) < n) {
        int next = -1;
        for (int i = 0; i < m; ++i)
            if (next < 0 || mind[i] > mind[next]) next = i;
        seeds.push_back(next);
        for (int i = 0; i < m; ++i) mind[i] = std::min(mind[i], dist2(pts.p(i), pts.p(next)));
    }

    std::vector<double> centroid(static_cast<size_t>(n) * k);
    for (int c = 0; c < n; ++c)
        for (int d = 0; d < k; ++d) centroid[c * k + d] = pts.p(seeds[c])[d];

    std::vector<int> assign(m, -1), prev(m, -2);
    for (int iter = 0; iter < iters && assign != prev; ++iter) {
        prev = assign;
        for (int i = 0; i < m; ++i) {
            int best = 0;
            double bd = dist2(pts.p(i), centroid.data());
            for (int c = 1; c < n; ++c) {
                const double d = dist2(pts.p(i), centroid.data() + static_cast<size_t>(c) * k);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        std::vector<double> sum(static_cast<size_t>(n) * k, 0.0), wsum(n, 0.0);
        for (int i = 0; i < m; ++i) {
            wsum[assign[i]] += pts.mass[i];
            for (int d = 0; d < k; ++d) sum[static_cast<size_t>(assign[i]) * k + d] +=
                pts.mass[i] * pts.p(i)[d];
        }
        for (int c = 0; c < n; ++c) {
            if (wsum[c] > 0) {
                for (int d = 0; d < k; ++d) centroid[c * k + d] = sum[static_cast<size_t>(c) * k + d] / wsum[c];
            } else {
                // reseed the empty cluster at the point farthest from its centroid
                int far = 0;
                double fd = -1;
                for (int i = 0; i < m; ++i) {
                    const double d =
                        dist2(pts.p(i), centroid.data() + static_cast<size_t>(assign[i]) * k);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                for (int d = 0; d < k; ++d) centroid[c * k + d] = pts.p(far)[d];
                prev.assign(m, -2);  // force another iteration
            }
        }
    }
    return centroid;
}

Mixture weighted_em_step(const WeightedPointSet& pts, const Mixture& mix) {
    const int k = mix.dims;
    const int m = pts.size();
    const int n = mix.size();
    std::vector<gm::GaussPrep> gp;
    gm::prep_span(mix.span(), gp);

    Mixture out(k, n);
    std::vector<double> nc(n, 0.0);
    std::vector<double> musum(static_cast<size_t>(n) * k, 0.0);
    std::vector<double> resp(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        double norm = 0;
        double* row = resp.data() + static_cast<size_t>(i) * n;
        for (int c = 0; c < n; ++c) {
            row[c] = std::max(0.0, gp[c].weight) * gm::eval_prepped_unit(k, gp[c], pts.p(i));
            norm += row[c];
        }
        if (norm <= 0) {
            for (int c = 0; c < n; ++c) row[c] = 1.0 / n;
        } else {
            for (int c = 0; c < n; ++c) row[c] /= norm;
        }
        for (int c = 0; c < n; ++c) {
            const double w = pts.mass[i] * row[c];
            nc[c] += w;
            for (int d = 0; d < k; ++d) musum[static_cast<size_t>(c) * k + d] += w * pts.p(i)[d];
        }
    }
    for (int c = 0; c < n; ++c) {
        double* g = out.g(c);
        if (!(nc[c] > 0)) {  // component collapse keeps previous parameters
            std::memcpy(g, mix.g(c), sizeof(double) * gaussian_stride(k));
            continue;
        }
        g[0] = nc[c];
        for (int d = 0; d < k; ++d) g[1 + d] = musum[static_cast<size_t>(c) * k + d] / nc[c];
    }
    // covariance pass
    std::vector<double> cov(static_cast<size_t>(n) * la::packed_size(k), 0.0);
    for (int i = 0; i < m; ++i) {
        const double* row = resp.data() + static_cast<size_t>(i) * n;
        for (int c = 0; c < n; ++c) {
            if (!(nc[c] > 0)) continue;
            const double w = pts.mass[i] * row[c];
            if (w == 0.0) continue;
            const double* mu = out.g(c) + 1;
            for (int r = 0; r < k; ++r)
                for (int cc = 0; cc <= r; ++cc)
                    cov[static_cast<size_t>(c) * la::packed_size(k) + la::packed_index(r, cc)] +=
                        w * (pts.p(i)[r] - mu[r]) * (pts.p(i)[cc] - mu[cc]);
        }
    }
    for (int c = 0; c < n; ++c) {
        if (!(nc[c] > 0)) continue;
        double* g = out.g(c);
        for (int d = 0; d < la::packed_size(k); ++d)
            g[1 + k + d] = cov[static_cast<size_t>(c) * la::packed_size(k) + d] / nc[c];
        floor_covariance(k, g + 1 + k);
    }
    return out;
}

double weighted_log_likelihood(const WeightedPointSet& pts, const Mixture& mix) {
    const int k = mix.dims;
    std::vector<gm::GaussPrep> gp;
    gm::prep_span(mix.span(), gp);
    double wtot = 0;
    for (int c = 0; c < mix.size(); ++c) wtot += std::max(0.0, mix.g(c)[0]);
    if (!(wtot > 0)) throw degenerate_domain_error("log_likelihood: zero-mass mixture");
    double ll = 0;
    for (int i = 0; i < pts.size(); ++i) {
        double p = 0;
        for (int c = 0; c < mix.size(); ++c)
            p += std::max(0.0, gp[c].weight) / wtot * gm::eval_prepped_unit(k, gp[c], pts.p(i));
        ll += pts.mass[i] * std::log(std::max(p, 1e-300));
    }
    return ll;
}

namespace {

Mixture mixture_from_kmeans(const WeightedPointSet& pts, const std::vector<double>& centroid,
                            int n) {
    const int k = pts.dims;
    // hard assignment -> cluster masses and a shared isotropic start
    std::vector<double> massc(n, 0.0);
    double sse = 0, mtot = 0;
    for (int i = 0; i < pts.size(); ++i) {
        int best = 0;
        double bd = 1e300;
        for (int c = 0; c < n; ++c) {
            double d = 0;
            for (int dd = 0; dd < k; ++dd) {
                const double diff = pts.p(i)[dd] - centroid[static_cast<size_t>(c) * k + dd];
                d += diff * diff;
            }
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        massc[best] += pts.mass[i];
        sse += pts.mass[i] * bd;
        mtot += pts.mass[i];
    }
    const double var = std::max(kCovFloorEig, sse / (mtot * k));
    Mixture mix(k, n);
    for (int c = 0; c < n; ++c) {
        double* g = mix.g(c);
        g[0] = massc[c];
        for (int d = 0; d < k; ++d) g[1 + d] = centroid[static_cast<size_t>(c) * k + d];
        for (int d = 0; d < k; ++d) g[1 + k + la::packed_index(d, d)] = var;
    }
    return mix;
}

Mixture em_to_convergence(const WeightedPointSet& pts, Mixture mix) {
    double prev = weighted_log_likelihood(pts, mix);
    for (int iter = 0; iter < 100; ++iter) {
        mix = weighted_em_step(pts, mix);
        const double ll = weighted_log_likelihood(pts, mix);
        if (std::fabs(ll - prev) < 1e-6) break;
        prev = ll;
    }
    return mix;
}

}  // namespace

Mixture fit_image_mixture(const std::vector<double>& image, int h, int w, int n, uint64_t seed) {
    double mx = 0;
    for (double v : image) mx = std::max(mx, v);
    if (!(mx > 0)) throw degenerate_domain_error("fit_image_mixture: blank image");
    WeightedPointSet pts;
    pts.dims = 2;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double v = image[static_cast<size_t>(r) * w + c];
            if (v < 1e-3 * mx) continue;
            pts.pos.push_back(c + 0.5);
            pts.pos.push_back(r + 0.5);
            pts.mass.push_back(v);
        }
    if (pts.size() < n) {
        // tiny images: duplicate the heaviest points so k-means stays valid
        std::vector<int> idx(pts.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        std::sort(idx.begin(), idx.end(),
                  [&](int a, int b) { return pts.mass[a] > pts.mass[b]; });
        int add = 0;
        while (pts.size() < n) {
            const int src = idx[add++ % idx.size()];
            pts.pos.push_back(pts.pos[static_cast<size_t>(src) * 2]);
            pts.pos.push_back(pts.pos[static_cast<size_t>(src) * 2 + 1]);
            pts.mass.push_back(pts.mass[src]);
        }
    }
    const std::vector<double> centroid = weighted_kmeans(pts, n, seed);
    return weighted_em_step(pts, mixture_from_kmeans(pts, centroid, n));
}

Mixture fit_pointcloud_mixture(const WeightedPointSet& pts, int n, PcFitMethod method,
                               uint64_t seed) {
    if (pts.size() < n) throw std::invalid_argument("fit_pointcloud_mixture: too few points");
    if (method == PcFitMethod::RandEm) {
        Rng rng(seed);
        std::vector<int> idx(pts.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        rng.shuffle(idx);
        std::vector<double> centroid(static_cast<size_t>(n) * pts.dims);
        for (int c = 0; c < n; ++c)
            for (int d = 0; d < pts.dims; ++d)
                centroid[static_cast<size_t>(c) * pts.dims + d] = pts.p(idx[c])[d];
        return em_to_convergence(pts, mixture_from_kmeans(pts, centroid, n));
    }
    const std::vector<double> centroid = weighted_kmeans(pts, n, seed);
    Mixture init = mixture_from_kmeans(pts, centroid, n);
    if (method == PcFitMethod::KMeans) return weighted_em_step(pts, init);
    return em_to_convergence(pts, std::move(init));
}

DatasetNorm normalize_dataset(std::vector<Mixture>& mixtures) {
    if (mixtures.empty()) throw std::invalid_argument("normalize_dataset: empty set");
    double mean_integral = 0;
    for (Mixture& m : mixtures) {
        GaussSpan s = m.span();
        ConstGaussSpan cs = s;
        const double tbar = gm::mean_cov_trace(&cs, 1);
        if (!(tbar > 0)) throw degenerate_domain_error("normalize_dataset: degenerate mixture");
        gm::rescale_apply(s, std::sqrt(m.dims / tbar));
        mean_integral += gm::span_integral(s);
    }
    mean_integral /= mixtures.size();
    if (mean_integral == 0) throw degenerate_domain_error("normalize_dataset: zero mean integral");
    DatasetNorm norm{1.0 / mean_integral};
    for (Mixture& m : mixtures)
        for (int i = 0; i < m.size(); ++i) m.g(i)[0] *= norm.weight_scale;
    return norm;
}

void apply_dataset_norm(std::vector<Mixture>& mixtures, const DatasetNorm& norm) {
    for (Mixture& m : mixtures) {
        GaussSpan s = m.span();
        ConstGaussSpan cs = s;
        const double tbar = gm::mean_cov_trace(&cs, 1);
        if (!(tbar > 0)) throw degenerate_domain_error("apply_dataset_norm: degenerate mixture");
        gm::rescale_apply(s, std::sqrt(m.dims / tbar));
        for (int i = 0; i < m.size(); ++i) m.g(i)[0] *= norm.weight_scale;
    }
}

// ------------------------------------------------------------------- IO

namespace {
uint32_t read_be32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw io_error(std::string("truncated ") + what);
    return static_cast<uint32_t>(b[0]) << 24 | static_cast<uint32_t>(b[1]) << 16 |
           static_cast<uint32_t>(b[2]) << 8 | static_cast<uint32_t>(b[3]);
}
}  // namespace

IdxImages read_idx_images(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    if (read_be32(is, "IDX magic") != 0x00000803u) throw io_error("not an IDX image file");
    IdxImages out;
    out.count = static_cast<int>(read_be32(is, "IDX count"));
    out.rows = static_cast<int>(read_be32(is, "IDX rows"));
    out.cols = static_cast<int>(read_be32(is, "IDX cols"));
    out.pixels.resize(static_cast<size_t>(out.count) * out.rows * out.cols);
    if (!is.read(reinterpret_cast<char*>(out.pixels.data()), out.pixels.size()))
        throw io_error("truncated IDX pixel data");
    return out;
}

std::vector<double> IdxImages::image(int i) const {
    std::vector<double> img(static_cast<size_t>(rows) * cols);
    const uint8_t* src = pixels.data() + static_cast<size_t>(i) * rows * cols;
    for (size_t p = 0; p < img.size(); ++p) img[p] = src[p] / 255.0;
    return img;
}

std::vector<uint8_t> read_idx_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    if (read_be32(is, "IDX magic") != 0x00000801u) throw io_error("not an IDX label file");
    const uint32_t count = read_be32(is, "IDX count");
    std::vector<uint8_t> labels(count);
    if (!is.read(reinterpret_cast<char*>(labels.data()), labels.size()))
        throw io_error("truncated IDX label data");
    return labels;
}

WeightedPointSet read_xyz_text(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open: " + path);
    WeightedPointSet pts;
    pts.dims = 3;
    double x, y, z;
    while (is >> x >> y >> z) {
        pts.pos.insert(pts.pos.end(), {x, y, z});
        pts.mass.push_back(1.0);
    }
    if (pts.size() == 0) throw io_error("no points in: " + path);
    return pts;
}

WeightedPointSet read_off_vertices(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open: " + path);
    std::string header;
    is >> header;
    long nv = 0, nf = 0, ne = 0;
    if (header == "OFF") {
        is >> nv >> nf >> ne;
    } else if (header.rfind("OFF", 0) == 0) {
        // counts glued to the header line, e.g. "OFF123 456 0"
        std::istringstream ss(header.substr(3));
        ss >> nv;
        is >> nf >> ne;
    } else {
        throw io_error("not an OFF file: " + path);
    }
    if (nv <= 0) throw io_error("OFF file without vertices: " + path);
    WeightedPointSet pts;
    pts.dims = 3;
    for (long i = 0; i < nv; ++i) {
        double x, y, z;
        if (!(is >> x >> y >> z)) throw io_error("truncated OFF vertex list: " + path);
        pts.pos.insert(pts.pos.end(), {x, y, z});
        pts.mass.push_back(1.0);
    }
    return pts;
}

}  // namespace gmcn::infit

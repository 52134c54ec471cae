#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmcn/types.hpp"

namespace gmcn::infit {

struct WeightedPointSet {
    int dims = 2;
    std::vector<double> pos;   // M x k row major
    std::vector<double> mass;  // M, non-negative

    int size() const { return static_cast<int>(mass.size()); }
    const double* p(int i) const { return pos.data() + static_cast<size_t>(i) * dims; }
};

// Mass-weighted Lloyd iterations from farthest-point seeding; empty
// clusters are reseeded at the point farthest from its centroid.
// Returns n centroids (n x k).
std::vector<double> weighted_kmeans(const WeightedPointSet& pts, int n, uint64_t seed,
                                    int iters = 25);

// One EM step of a weighted Gaussian mixture: responsibilities, then
// weight/mean/covariance updates with a 1e-4 eigenvalue floor. Components
// with zero responsibility mass keep their previous parameters.
Mixture weighted_em_step(const WeightedPointSet& pts, const Mixture& mix);

double weighted_log_likelihood(const WeightedPointSet& pts, const Mixture& mix);

// Pixels become points at pixel centers weighted by intensity (mass below
// 1e-3 of the maximum is dropped); k-means + one EM step.
Mixture fit_image_mixture(const std::vector<double>& image, int h, int w, int n, uint64_t seed);

enum class PcFitMethod { KMeans, KMeansEm, RandEm };

Mixture fit_pointcloud_mixture(const WeightedPointSet& pts, int n, PcFitMethod method,
                               uint64_t seed);

// Domain rescaling per mixture, then one global weight scale bringing the
// dataset-mean integral to one. The same constant must be applied to
// validation and test mixtures.
struct DatasetNorm {
    double weight_scale = 1.0;
};
DatasetNorm normalize_dataset(std::vector<Mixture>& mixtures);
void apply_dataset_norm(std::vector<Mixture>& mixtures, const DatasetNorm& norm);

// ---- readers ----

struct IdxImages {
    int count = 0, rows = 0, cols = 0;
    std::vector<uint8_t> pixels;  // count * rows * cols

    std::vector<double> image(int i) const;  // intensities in [0, 1]
};
IdxImages read_idx_images(const std::string& path);
std::vector<uint8_t> read_idx_labels(const std::string& path);

WeightedPointSet read_xyz_text(const std::string& path);
WeightedPointSet read_off_vertices(const std::string& path);

}  // namespace gmcn::infit

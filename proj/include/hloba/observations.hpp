#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "hloba/dynamics.hpp"

namespace hloba {

using Rng = std::mt19937_64;

/// Fixed point-observation network. noise_std is aligned with observed_indices.
struct ObservationNetwork {
  int n_x = 0;
  std::vector<int> observed_indices;
  std::vector<double> noise_std;

  /// Every `stride`-th point starting at `offset`; noise is noise_level * clim_std at each point.
  static ObservationNetwork every_kth(int n_x, int stride, int offset, const Eigen::VectorXd& clim_std,
                                      double noise_level);
  static ObservationNetwork from_indices(int n_x, std::vector<int> indices, const Eigen::VectorXd& clim_std,
                                         double noise_level);

  std::size_t size() const { return observed_indices.size(); }
  void validate() const;
};

/// Observations at one time. Entries are aligned with network.observed_indices; a point is
/// active when its mask entry is positive, and inactive points always carry value 0.
struct ObservationSet {
  ObservationNetwork network;
  Eigen::VectorXd values;
  /// Quality mask on the full grid: 0 off the network and at rejected points, (0, 1] elsewhere.
  Eigen::VectorXd mask;
  long cycle_time = 0;

  std::size_t active_count() const;
  bool active(std::size_t k) const { return mask[network.observed_indices[k]] > 0.0; }
  /// Observation image on the model grid: values scattered onto n_x points, zeros elsewhere.
  Eigen::VectorXd dense_values() const;
  /// Throws ContractError if the mask/value invariants are broken.
  void check_consistency() const;
};

namespace observations {

/// Gathers the state at the observed indices.
Eigen::VectorXd apply_H(const StateVector& state, const ObservationNetwork& network);

/// Perturbs H(truth) with independent Gaussian noise of the network's standard deviations.
ObservationSet synthesize(const StateVector& truth, const ObservationNetwork& network, Rng& rng,
                          long cycle_time = 0);

/// Rejects points whose departure from `reference` exceeds the per-coordinate threshold.
ObservationSet qc_filter(const ObservationSet& obs, const StateVector& reference,
                         const Eigen::VectorXd& thresholds);

/// Withholds lround(fraction * active) active points, chosen uniformly at random.
std::pair<ObservationSet, ObservationSet> split_withheld(const ObservationSet& obs, double fraction, Rng& rng);

void write_csv_header(std::ostream& out);
/// One row per network point: active assimilated points have withheld=0, active withheld points 1.
void write_csv_rows(std::ostream& out, const ObservationSet& assimilated, const ObservationSet& withheld);
/// Inverse of write_csv_rows, keyed by cycle_time.
std::map<long, std::pair<ObservationSet, ObservationSet>> read_csv(std::istream& in,
                                                                    const ObservationNetwork& network);

}  // namespace observations
}  // namespace hloba

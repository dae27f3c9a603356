#include "hloba/observations.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "hloba/error.hpp"

namespace hloba {

ObservationNetwork ObservationNetwork::every_kth(int n_x, int stride, int offset, const Eigen::VectorXd& clim_std,
                                                 double noise_level) {
  if (stride < 1) throw ConfigurationError("observation stride must be at least 1");
  std::vector<int> indices;
  for (int i = ((offset % stride) + stride) % stride; i < n_x; i += stride) indices.push_back(i);
  return from_indices(n_x, std::move(indices), clim_std, noise_level);
}

ObservationNetwork ObservationNetwork::from_indices(int n_x, std::vector<int> indices,
                                                    const Eigen::VectorXd& clim_std, double noise_level) {
  if (clim_std.size() != n_x) throw ConfigurationError("climatological std has wrong length");
  if (noise_level < 0.0) throw ConfigurationError("noise level must be non-negative");
  ObservationNetwork net;
  net.n_x = n_x;
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  net.observed_indices = std::move(indices);
  for (int i : net.observed_indices) {
    if (i < 0 || i >= n_x) throw ConfigurationError("observed index " + std::to_string(i) + " outside the grid");
    net.noise_std.push_back(noise_level * clim_std[i]);
  }
  net.validate();
  return net;
}

void ObservationNetwork::validate() const {
  if (n_x < 1) throw ConfigurationError("observation network needs a positive grid size");
  if (noise_std.size() != observed_indices.size()) throw ConfigurationError("noise_std not aligned with indices");
  for (std::size_t k = 0; k < observed_indices.size(); ++k) {
    const int i = observed_indices[k];
    if (i < 0 || i >= n_x) throw ConfigurationError("observed index " + std::to_string(i) + " outside the grid");
    if (k > 0 && i <= observed_indices[k - 1]) throw ConfigurationError("observed indices must be sorted and unique");
    if (!(noise_std[k] >= 0.0)) throw ConfigurationError("noise std must be non-negative");
  }
}

std::size_t ObservationSet::active_count() const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < network.size(); ++k) n += active(k) ? 1 : 0;
  return n;
}

Eigen::VectorXd ObservationSet::dense_values() const {
  Eigen::VectorXd image = Eigen::VectorXd::Zero(network.n_x);
  for (std::size_t k = 0; k < network.size(); ++k) image[network.observed_indices[k]] = values[static_cast<Eigen::Index>(k)];
  return image;
}

void ObservationSet::check_consistency() const {
  if (values.size() != static_cast<Eigen::Index>(network.size())) throw ContractError("observation values misaligned");
  if (mask.size() != network.n_x) throw ContractError("quality mask must span the grid");
  if (!values.allFinite()) throw ContractError("observation values must be finite");
  std::vector<bool> on_network(static_cast<std::size_t>(network.n_x), false);
  for (std::size_t k = 0; k < network.size(); ++k) {
    const int i = network.observed_indices[k];
    on_network[static_cast<std::size_t>(i)] = true;
    if (mask[i] < 0.0 || mask[i] > 1.0) throw ContractError("quality mask outside [0, 1]");
    if (mask[i] == 0.0 && values[static_cast<Eigen::Index>(k)] != 0.0) {
      throw ContractError("nonzero value at masked point " + std::to_string(i));
    }
  }
  for (int i = 0; i < network.n_x; ++i) {
    if (!on_network[static_cast<std::size_t>(i)] && mask[i] != 0.0) throw ContractError("mask nonzero off the network");
  }
}

namespace observations {

Eigen::VectorXd apply_H(const StateVector& state, const ObservationNetwork& network) {
  if (state.size() != network.n_x) throw ConfigurationError("state length does not match the observation grid");
  Eigen::VectorXd out(static_cast<Eigen::Index>(network.size()));
  for (std::size_t k = 0; k < network.size(); ++k) {
    const int i = network.observed_indices[k];
    if (i < 0 || i >= state.size()) throw ConfigurationError("observed index out of range");
    out[static_cast<Eigen::Index>(k)] = state[i];
  }
  return out;
}

ObservationSet synthesize(const StateVector& truth, const ObservationNetwork& network, Rng& rng, long cycle_time) {
  ObservationSet obs;
  obs.network = network;
  obs.cycle_time = cycle_time;
  obs.values = apply_H(truth, network);
  obs.mask = Eigen::VectorXd::Zero(network.n_x);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < network.size(); ++k) {
    obs.values[static_cast<Eigen::Index>(k)] += network.noise_std[k] * normal(rng);
    obs.mask[network.observed_indices[k]] = 1.0;
  }
  return obs;
}

ObservationSet qc_filter(const ObservationSet& obs, const StateVector& reference, const Eigen::VectorXd& thresholds) {
  if (reference.size() != obs.network.n_x || thresholds.size() != obs.network.n_x) {
    throw ConfigurationError("QC reference and thresholds must span the grid");
  }
  ObservationSet out = obs;
  for (std::size_t k = 0; k < obs.network.size(); ++k) {
    const int i = obs.network.observed_indices[k];
    const auto kk = static_cast<Eigen::Index>(k);
    if (std::abs(obs.values[kk] - reference[i]) > thresholds[i] || thresholds[i] <= 0.0) {
      out.values[kk] = 0.0;
      out.mask[i] = 0.0;
    }
  }
  return out;
}

std::pair<ObservationSet, ObservationSet> split_withheld(const ObservationSet& obs, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ContractError("withheld fraction must lie in [0, 1)");
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < obs.network.size(); ++k)
    if (obs.active(k)) active.push_back(k);
  const auto n_withheld = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(active.size())));
  // Partial Fisher-Yates: the first n_withheld entries are the sample.
  for (std::size_t j = 0; j < n_withheld; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, active.size() - 1);
    std::swap(active[j], active[pick(rng)]);
  }
  ObservationSet assimilated = obs;
  ObservationSet withheld = obs;
  withheld.values.setZero();
  withheld.mask.setZero();
  for (std::size_t j = 0; j < n_withheld; ++j) {
    const std::size_t k = active[j];
    const int i = obs.network.observed_indices[k];
    withheld.values[static_cast<Eigen::Index>(k)] = obs.values[static_cast<Eigen::Index>(k)];
    withheld.mask[i] = obs.mask[i];
    assimilated.values[static_cast<Eigen::Index>(k)] = 0.0;
    assimilated.mask[i] = 0.0;
  }
  return {std::move(assimilated), std::move(withheld)};
}

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_csv_header(std::ostream& out) { out << "cycle_time,index,value,mask,withheld\n"; }

void write_csv_rows(std::ostream& out, const ObservationSet& assimilated, const ObservationSet& withheld) {
  if (assimilated.network.observed_indices != withheld.network.observed_indices) {
    throw ContractError("assimilated and withheld sets must share a network");
  }
  for (std::size_t k = 0; k < assimilated.network.size(); ++k) {
    const int i = assimilated.network.observed_indices[k];
    const bool is_withheld = withheld.active(k);
    const ObservationSet& src = is_withheld ? withheld : assimilated;
    out << assimilated.cycle_time << ',' << i << ',' << format_number(src.values[static_cast<Eigen::Index>(k)]) << ','
        << format_number(src.mask[i]) << ',' << (is_withheld ? 1 : 0) << '\n';
  }
}

std::map<long, std::pair<ObservationSet, ObservationSet>> read_csv(std::istream& in,
                                                                    const ObservationNetwork& network) {
  std::map<long, std::pair<ObservationSet, ObservationSet>> out;
  std::string line;
  if (!std::getline(in, line) || line != "cycle_time,index,value,mask,withheld") {
    throw ContractError("observation CSV has an unexpected header");
  }
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell[5];
    for (auto& c : cell)
      if (!std::getline(row, c, ',')) throw ContractError("short row at line " + std::to_string(line_no));
    const long t = std::stol(cell[0]);
    const int i = std::stoi(cell[1]);
    const auto it = std::lower_bound(network.observed_indices.begin(), network.observed_indices.end(), i);
    if (it == network.observed_indices.end() || *it != i) {
      throw ContractError("index " + std::to_string(i) + " not on the network (line " + std::to_string(line_no) + ")");
    }
    const auto k = static_cast<Eigen::Index>(it - network.observed_indices.begin());
    auto [slot, inserted] = out.try_emplace(t);
    if (inserted) {
      for (ObservationSet* s : {&slot->second.first, &slot->second.second}) {
        s->network = network;
        s->cycle_time = t;
        s->values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(network.size()));
        s->mask = Eigen::VectorXd::Zero(network.n_x);
      }
    }
    ObservationSet& target = cell[4] == "1" ? slot->second.second : slot->second.first;
    target.values[k] = std::stod(cell[2]);
    target.mask[i] = std::stod(cell[3]);
  }
  for (auto& [t, pair] : out) {
    pair.first.check_consistency();
    pair.second.check_consistency();
  }
  return out;
}

}  // namespace observations
}  // namespace hloba

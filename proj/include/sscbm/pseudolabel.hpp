#pragma once

// Soft pseudo-concept labels for unlabeled examples: reciprocal-distance
// weighted KNN over labeled examples in the cosine space of a frozen
// reference encoder.

#include "sscbm/backbone.hpp"
#include "sscbm/dataset.hpp"

#include <nlohmann/json.hpp>

#include <iostream>
#include <map>

namespace sscbm {

struct ReferenceFeature {
  std::string id;
  Vec<double> vec;
};

struct LabeledReference {
  ReferenceFeature feature;
  ConceptVector concepts;
};

struct PseudoLabel {
  std::string id;
  std::vector<double> c_img;
  std::vector<std::string> neighbor_ids;
  std::vector<double> weights;

  bool operator==(const PseudoLabel&) const = default;
};

using PseudoLabelMap = std::map<std::string, PseudoLabel>;

/// A randomly initialized backbone that is never trained; its pooled
/// features define the neighborhood structure.
class ReferenceEncoder {
 public:
  ReferenceEncoder(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    params_ = BackboneParams<double>::init(cfg_, rng);
  }

  int dim() const { return cfg_.latent_dim(); }

  ReferenceFeature encode(const std::string& id, const Image& input) const {
    const auto cache = backbone_forward(cfg_, params_, input);
    ReferenceFeature f{id, latent_pool(cfg_, cache.features(), cache.out_size.back())};
    if (!(f.vec.norm() > 0.0)) {
      std::cerr << "warning: reference feature of " << id << " has zero norm; using a unit basis vector\n";
      f.vec.setZero();
      f.vec(0) = 1.0;
    }
    return f;
  }

 private:
  BackboneConfig cfg_;
  BackboneParams<double> params_;
};

/// 1 - cos(u, v); both vectors need non-zero norm.
inline double cosine_distance(const Vec<double>& u, const Vec<double>& v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine distance of vectors with different dimensions");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) {
    throw Error("cosine distance of a zero-norm vector");
  }
  return 1.0 - u.dot(v) / (nu * nv);
}

/// Nearest k_nn labeled items (ties broken by id), weighted by normalized
/// reciprocal distance floored at kDistanceFloor.
inline PseudoLabel knn_pseudo_label(const ReferenceFeature& target, std::span<const LabeledReference> labeled,
                                    int k_nn) {
  if (k_nn < 1) {
    throw ConfigError("k_nn must be at least 1");
  }
  if (labeled.size() < static_cast<std::size_t>(k_nn)) {
    throw ConfigError("need at least k_nn=" + std::to_string(k_nn) + " labeled examples, have " +
                      std::to_string(labeled.size()));
  }
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(labeled.size());
  for (std::size_t j = 0; j < labeled.size(); ++j) {
    dist.emplace_back(cosine_distance(target.vec, labeled[j].feature.vec), j);
  }
  auto closer = [&](const auto& a, const auto& b) {
    if (a.first != b.first) {
      return a.first < b.first;
    }
    return labeled[a.second].feature.id < labeled[b.second].feature.id;
  };
  std::partial_sort(dist.begin(), dist.begin() + k_nn, dist.end(), closer);

  PseudoLabel pl;
  pl.id = target.id;
  const std::size_t k = labeled[dist[0].second].concepts.size();
  pl.c_img.assign(k, 0.0);
  double total = 0.0;
  for (int n = 0; n < k_nn; ++n) {
    const double w = 1.0 / std::max(dist[n].first, kDistanceFloor);
    pl.weights.push_back(w);
    total += w;
  }
  for (int n = 0; n < k_nn; ++n) {
    pl.weights[n] /= total;
    const auto& nb = labeled[dist[n].second];
    pl.neighbor_ids.push_back(nb.feature.id);
    if (nb.concepts.size() != k) {
      throw ShapeError("labeled neighbors disagree on concept count");
    }
    for (std::size_t i = 0; i < k; ++i) {
      pl.c_img[i] += pl.weights[n] * nb.concepts[i];
    }
  }
  return pl;
}

inline PseudoLabelMap build_pseudo_labels(std::span<const LabeledReference> labeled,
                                          std::span<const ReferenceFeature> unlabeled, int k_nn) {
  PseudoLabelMap out;
  for (const auto& u : unlabeled) {
    out.emplace(u.id, knn_pseudo_label(u, labeled, k_nn));
  }
  return out;
}

/// Encodes both subsets with the reference encoder, then labels D_U.
inline PseudoLabelMap build_pseudo_labels(const ReferenceEncoder& enc, std::span<const Example> labeled,
                                          std::span<const Example> unlabeled, int k_nn) {
  std::vector<LabeledReference> refs;
  refs.reserve(labeled.size());
  for (const auto& e : labeled) {
    if (!e.concepts) {
      throw SchemaError("labeled example " + e.id + " has no concepts");
    }
    refs.push_back({enc.encode(e.id, e.input), *e.concepts});
  }
  std::vector<ReferenceFeature> targets;
  targets.reserve(unlabeled.size());
  for (const auto& e : unlabeled) {
    targets.push_back(enc.encode(e.id, e.input));
  }
  return build_pseudo_labels(refs, targets, k_nn);
}

inline void write_pseudo_labels(const std::filesystem::path& path, const PseudoLabelMap& labels,
                                std::span<const std::string> order) {
  std::ostringstream out;
  for (const auto& id : order) {
    const auto& pl = labels.at(id);
    out << nlohmann::json{{"id", pl.id}, {"c_img", pl.c_img}, {"neighbors", pl.neighbor_ids},
                          {"weights", pl.weights}}
               .dump()
        << "\n";
  }
  detail::write_text(path, out.str());
}

inline PseudoLabelMap read_pseudo_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  PseudoLabelMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      PseudoLabel pl;
      pl.id = j.at("id").get<std::string>();
      pl.c_img = j.at("c_img").get<std::vector<double>>();
      pl.neighbor_ids = j.at("neighbors").get<std::vector<std::string>>();
      pl.weights = j.at("weights").get<std::vector<double>>();
      out.emplace(pl.id, std::move(pl));
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed pseudo label: ") + e.what(), lineno);
    }
  }
  return out;
}

/// Reads user-supplied reference features: JSON Lines {"id", "vec"}.
inline std::map<std::string, ReferenceFeature> read_reference_features(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::map<std::string, ReferenceFeature> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      const auto v = j.at("vec").get<std::vector<double>>();
      ReferenceFeature f{j.at("id").get<std::string>(), Eigen::Map<const Vec<double>>(v.data(), v.size())};
      out.emplace(f.id, std::move(f));
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed feature record: ") + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace sscbm

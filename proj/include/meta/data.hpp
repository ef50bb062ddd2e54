#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "meta/binio.hpp"
#include "meta/losses.hpp"
#include "meta/tensor.hpp"

namespace meta {

enum class Split : std::uint8_t { train = 0, query = 1, gallery = 2 };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

/// Per-domain style: x = scale (.) prototype + shift + N(0, noise^2), applied per channel.
struct DomainSpec {
  std::size_t domain_id = 0;
  std::vector<double> style_scale;
  std::vector<double> style_shift;
  double noise_sigma = 0.0;
  std::size_t identity_begin = 0;  // half-open [begin, end) in the union label space
  std::size_t identity_end = 0;
};

struct Sample {
  std::size_t identity = 0;
  std::size_t domain = 0;
  std::vector<double> pixels;  // (C,H,W)

  bool operator==(const Sample&) const = default;
};

struct SyntheticDataset {
  Split split = Split::train;
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<Sample> samples;

  std::size_t sample_size() const noexcept { return channels * height * width; }

  std::vector<std::size_t> identities() const {
    std::set<std::size_t> ids;
    for (const auto& s : samples) ids.insert(s.identity);
    return {ids.begin(), ids.end()};
  }

  std::set<std::size_t> domains() const {
    std::set<std::size_t> d;
    for (const auto& s : samples) d.insert(s.domain);
    return d;
  }

  /// Stacks the selected samples into (N,C,H,W).
  Tensor images(std::span<const std::size_t> index) const {
    Tensor t({index.size(), channels, height, width});
    const std::size_t sz = sample_size();
    for (std::size_t i = 0; i < index.size(); ++i)
      std::copy(samples.at(index[i]).pixels.begin(), samples[index[i]].pixels.end(),
                t.data.begin() + static_cast<std::ptrdiff_t>(i * sz));
    return t;
  }

  Tensor all_images() const {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return images(idx);
  }

  bool operator==(const SyntheticDataset&) const = default;
};

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t domains = 4;
  std::size_t ids_per_domain = 32;
  std::size_t samples_per_id = 8;
  std::size_t query_per_id = 4;
  std::size_t gallery_per_id = 4;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double separation = 2.0;
  double noise_sigma = 1.0;

  void validate() const {
    require(domains >= 1 && ids_per_domain >= 1 && samples_per_id >= 1 && channels >= 1 && height >= 1 && width >= 1,
            ErrorKind::invalid_argument, "generator dimensions must be positive");
    require(separation >= 0.0 && noise_sigma >= 0.0, ErrorKind::invalid_argument, "separation and noise must be non-negative");
  }
};

struct DomainData {
  DomainSpec spec;
  SyntheticDataset train, query, gallery;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream: one engine per (seed, stream, index) key.
inline std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index));
}

}  // namespace detail

/// Domain styles: along every channel the K domains take distinct shift
/// levels spaced by `separation` (random order, +-0.2*separation jitter) and
/// log-scales within +-0.15*separation.
inline std::vector<DomainSpec> make_domain_specs(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t K = cfg.domains, C = cfg.channels;
  std::vector<DomainSpec> specs(K);
  for (std::size_t d = 0; d < K; ++d) {
    specs[d].domain_id = d;
    specs[d].style_scale.assign(C, 1.0);
    specs[d].style_shift.assign(C, 0.0);
    specs[d].noise_sigma = cfg.noise_sigma;
    specs[d].identity_begin = d * cfg.ids_per_domain;
    specs[d].identity_end = (d + 1) * cfg.ids_per_domain;
  }
  const double centre = (static_cast<double>(K) - 1.0) / 2.0;
  for (std::size_t c = 0; c < C; ++c) {
    auto rng = detail::keyed_rng(cfg.seed, 2, c);
    std::vector<std::size_t> pos(K);
    for (std::size_t d = 0; d < K; ++d) pos[d] = d;
    for (std::size_t i = K; i > 1; --i) std::swap(pos[i - 1], pos[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
    std::uniform_real_distribution<double> jitter(-0.2, 0.2), logscale(-0.15, 0.15);
    for (std::size_t d = 0; d < K; ++d) {
      specs[d].style_shift[c] = cfg.separation * (static_cast<double>(pos[d]) - centre + jitter(rng));
      specs[d].style_scale[c] = std::exp(cfg.separation * logscale(rng));
    }
  }
  return specs;
}

/// Deterministic multi-domain identity data. Identities of domain d occupy
/// [d*ids, (d+1)*ids); each identity has one prototype ~ N(0,1)^(C,H,W) and
/// every sample is its domain-styled copy plus Gaussian noise.
inline std::vector<DomainData> generate(const GenConfig& cfg) {
  const auto specs = make_domain_specs(cfg);
  const std::size_t sz = cfg.channels * cfg.height * cfg.width, hw = cfg.height * cfg.width;
  const std::size_t per_id_max = std::max({cfg.samples_per_id, cfg.query_per_id, cfg.gallery_per_id});
  std::vector<DomainData> out(cfg.domains);
  for (std::size_t d = 0; d < cfg.domains; ++d) {
    const DomainSpec& spec = specs[d];
    out[d].spec = spec;
    SyntheticDataset* splits[3] = {&out[d].train, &out[d].query, &out[d].gallery};
    const std::size_t counts[3] = {cfg.samples_per_id, cfg.query_per_id, cfg.gallery_per_id};
    for (int s = 0; s < 3; ++s) {
      splits[s]->split = static_cast<Split>(s);
      splits[s]->channels = cfg.channels;
      splits[s]->height = cfg.height;
      splits[s]->width = cfg.width;
    }
    for (std::size_t id = spec.identity_begin; id < spec.identity_end; ++id) {
      auto prng = detail::keyed_rng(cfg.seed, 1, id);
      std::normal_distribution<double> unit(0.0, 1.0);
      std::vector<double> proto(sz);
      for (double& v : proto) v = unit(prng);
      for (int s = 0; s < 3; ++s) {
        for (std::size_t j = 0; j < counts[s]; ++j) {
          const std::uint64_t key = (id * 3 + static_cast<std::uint64_t>(s)) * per_id_max + j;
          auto srng = detail::keyed_rng(cfg.seed, 3, key);
          std::normal_distribution<double> noise(0.0, 1.0);
          Sample smp{id, d, std::vector<double>(sz)};
          for (std::size_t c = 0; c < cfg.channels; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t p = c * hw + i;
              const double eps = noise(srng);
              smp.pixels[p] = spec.style_scale[c] * proto[p] + spec.style_shift[c] + spec.noise_sigma * eps;
            }
          splits[s]->samples.push_back(std::move(smp));
        }
      }
    }
  }
  return out;
}

// ------------------------------------------------------------- PK sampling

struct PKBatch {
  Tensor images;  // (P*Q, C, H, W)
  BatchLabels labels;
};

/// P distinct identities, Q samples each, from a single-domain dataset.
/// Samples are drawn without replacement unless an identity has fewer than Q.
template <class Rng>
PKBatch sample_pk_batch(const SyntheticDataset& ds, std::size_t P, std::size_t Q, Rng& rng) {
  require(P >= 1 && Q >= 1, ErrorKind::invalid_argument, "PK sampling needs P >= 1 and Q >= 1");
  const auto doms = ds.domains();
  require(doms.size() == 1, ErrorKind::data,
          "PK sampling needs a single-domain dataset, found " + std::to_string(doms.size()) + " domains");
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_id[ds.samples[i].identity].push_back(i);
  require(by_id.size() >= P, ErrorKind::data,
          "PK sampling needs " + std::to_string(P) + " identities, dataset has " + std::to_string(by_id.size()));
  std::vector<std::size_t> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  for (std::size_t i = 0; i < P; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, ids.size() - 1)(rng);
    std::swap(ids[i], ids[j]);
  }
  std::vector<std::size_t> index;
  PKBatch batch;
  batch.labels.domain = *doms.begin();
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<std::size_t> pool = by_id[ids[p]];
    for (std::size_t q = 0; q < Q; ++q) {
      std::size_t pick;
      if (pool.size() >= Q) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(q, pool.size() - 1)(rng);
        std::swap(pool[q], pool[j]);
        pick = pool[q];
      } else {
        pick = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
      index.push_back(pick);
      batch.labels.identity.push_back(ids[p]);
    }
  }
  batch.images = ds.images(index);
  return batch;
}

// ----------------------------------------------------------- METAD1 format
//   magic[6] version:u32 count:u32 C:u32 H:u32 W:u32
//   per sample: identity:u32 domain:u16 split:u8 payload:f64*(C*H*W)

inline constexpr std::string_view kDatasetMagic = "METAD1";
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 6 + 4 * 5;

inline std::size_t dataset_file_size(const SyntheticDataset& ds) {
  return kDatasetHeaderBytes + ds.samples.size() * (4 + 2 + 1 + 8 * ds.sample_size());
}

inline binio::Writer encode_dataset(const SyntheticDataset& ds) {
  binio::Writer w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  for (const auto& s : ds.samples) {
    require(s.pixels.size() == ds.sample_size(), ErrorKind::data, "sample payload does not match dataset dimensions");
    w.u32(static_cast<std::uint32_t>(s.identity));
    w.u16(static_cast<std::uint16_t>(s.domain));
    w.u8(static_cast<std::uint8_t>(ds.split));
    for (double v : s.pixels) w.f64(v);
  }
  return w;
}

inline SyntheticDataset decode_dataset(binio::Reader& r) {
  if (r.bytes(kDatasetMagic.size()) != kDatasetMagic) r.fail_here("bad magic (expected METAD1)");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) r.fail_here("unsupported dataset version " + std::to_string(version));
  SyntheticDataset ds;
  const std::uint32_t count = r.u32();
  ds.channels = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0) r.fail_here("zero image dimension");
  const std::size_t sz = ds.sample_size();
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.identity = r.u32();
    s.domain = r.u16();
    const std::uint8_t split = r.u8();
    if (split > 2) r.fail_here("invalid split tag " + std::to_string(split));
    if (i == 0)
      ds.split = static_cast<Split>(split);
    else if (static_cast<Split>(split) != ds.split)
      r.fail_here("mixed split tags in one dataset file");
    if (r.remaining() / 8 < sz) r.fail_here("truncated payload for sample " + std::to_string(i));
    s.pixels.resize(sz);
    for (double& v : s.pixels) v = r.f64();
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail_here("trailing bytes after last sample");
  return ds;
}

inline void save_dataset(const SyntheticDataset& ds, const std::string& path) { encode_dataset(ds).write_file(path); }

inline SyntheticDataset load_dataset(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return decode_dataset(r);
}

}  // namespace meta

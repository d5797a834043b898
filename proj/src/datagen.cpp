#include "dmue/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "dmue/format.hpp"

namespace dmue {

namespace {

void fail(const std::string& what) { throw std::invalid_argument(what); }

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (feature_dim < 2) fail("feature_dim must be >= 2");
  const auto c = static_cast<std::size_t>(num_classes);
  const auto d = static_cast<std::size_t>(feature_dim);
  if (class_centers.size() != c) fail("class_centers must have one center per class");
  for (const auto& center : class_centers) {
    if (center.size() != d) fail("class center dimension does not match feature_dim");
    for (double v : center) {
      if (!std::isfinite(v)) fail("class center has a non-finite coordinate");
    }
  }
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = a + 1; b < c; ++b) {
      if (class_centers[a] == class_centers[b]) {
        fail("class centers " + std::to_string(a) + " and " + std::to_string(b) + " coincide");
      }
    }
  }
  if (spread.size() != c) fail("spread must have one entry per class");
  for (double s : spread) {
    if (!(s > 0.0) || !std::isfinite(s)) fail("spread must be positive and finite");
  }
  if (samples_per_class == 0) fail("samples_per_class must be positive");
}

void place_centers(SyntheticSpec& spec, const CenterLayout& layout) {
  const auto c = static_cast<std::size_t>(spec.num_classes);
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  if (spec.num_classes < 2 || spec.feature_dim < 2) fail("place_centers: need C >= 2 and d >= 2");
  // Two basis vectors e_a, e_b are separation apart after scaling by 1/sqrt(2).
  const double radius = layout.separation / std::sqrt(2.0);
  std::vector<std::vector<double>> dirs(c, std::vector<double>(d, 0.0));
  if (d >= c) {
    for (std::size_t k = 0; k < c; ++k) dirs[k][k] = 1.0;
  } else {
    Rng rng(Rng::derive(spec.seed, 0xC3A7));
    for (auto& dir : dirs) {
      double norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : dir) v /= norm;
    }
  }
  spec.class_centers.assign(c, std::vector<double>(d, 0.0));
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < d; ++i) spec.class_centers[k][i] = radius * dirs[k][i];
  }
  for (auto [a, b] : layout.confusable_pairs) {
    if (a < 0 || b < 0 || a >= spec.num_classes || b >= spec.num_classes || a == b) {
      fail("invalid confusable pair");
    }
    auto& ca = spec.class_centers[static_cast<std::size_t>(a)];
    auto& cb = spec.class_centers[static_cast<std::size_t>(b)];
    const double dist = std::sqrt(sq_dist(ca, cb));
    const double t = layout.confusable_distance / dist;
    for (std::size_t i = 0; i < d; ++i) cb[i] = ca[i] + t * (cb[i] - ca[i]);
  }
}

SyntheticSpec reference_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.feature_dim = 16;
  spec.samples_per_class = 400;
  spec.test_per_class = 100;
  spec.seed = seed;
  spec.spread.assign(4, 1.0);
  CenterLayout layout;
  layout.confusable_pairs = {{0, 1}, {2, 3}};
  place_centers(spec, layout);
  return spec;
}

std::vector<int> Batch::annotations() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.annotation);
  return out;
}

std::vector<double> class_posterior(const SyntheticSpec& spec, const std::vector<double>& x) {
  const auto c = static_cast<std::size_t>(spec.num_classes);
  const double d = static_cast<double>(spec.feature_dim);
  std::vector<double> logp(c);
  for (std::size_t k = 0; k < c; ++k) {
    const double s = spec.spread[k];
    logp[k] = -d * std::log(s) - sq_dist(x, spec.class_centers[k]) / (2.0 * s * s);
  }
  const double mx = *std::max_element(logp.begin(), logp.end());
  double z = 0.0;
  for (auto& v : logp) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : logp) v /= z;
  return logp;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset data;
  data.num_classes = spec.num_classes;
  data.feature_dim = spec.feature_dim;
  data.seed = spec.seed;
  Rng rng(Rng::derive(spec.seed, 0xDA7A));
  const auto d = static_cast<std::size_t>(spec.feature_dim);
  auto draw = [&](std::vector<Sample>& out, std::size_t per_class) {
    for (int k = 0; k < spec.num_classes; ++k) {
      const auto& center = spec.class_centers[static_cast<std::size_t>(k)];
      const double s = spec.spread[static_cast<std::size_t>(k)];
      for (std::size_t n = 0; n < per_class; ++n) {
        Sample smp;
        smp.features.resize(d);
        for (std::size_t i = 0; i < d; ++i) smp.features[i] = center[i] + s * rng.normal();
        smp.annotation = k;
        smp.true_class = k;
        smp.true_posterior = class_posterior(spec, smp.features);
        out.push_back(std::move(smp));
      }
    }
  };
  draw(data.train, spec.samples_per_class);
  draw(data.test, spec.test_per_class);
  return data;
}

Dataset inject_noise(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail("noise ratio must lie in [0, 1]");
  Dataset out = data;
  const std::size_t n = out.train.size();
  const auto flips = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  if (flips == 0) return out;
  if (out.num_classes < 2) fail("label flipping needs at least two classes");
  Rng rng(Rng::derive(seed, 0x7015E));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t k = 0; k < flips; ++k) {
    Sample& s = out.train[order[k]];
    // Uniform over the C-1 classes other than the true one.
    int label = static_cast<int>(rng.index(static_cast<std::size_t>(out.num_classes - 1)));
    if (label >= s.true_class) ++label;
    s.annotation = label;
    s.flipped = true;
  }
  return out;
}

Batch make_batch(std::vector<Sample> samples, int num_classes) {
  Batch batch;
  batch.samples = std::move(samples);
  batch.class_index_sets.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const int y = batch.samples[i].annotation;
    if (y < 0 || y >= num_classes) fail("annotation out of range");
    batch.class_index_sets[static_cast<std::size_t>(y)].push_back(i);
  }
  return batch;
}

Batch sample_batch(const Dataset& data, std::size_t batch_size, Rng& rng) {
  const auto c = static_cast<std::size_t>(data.num_classes);
  if (batch_size < c) fail("batch size must be at least the number of classes");
  if (batch_size > data.train.size()) fail("batch size exceeds the training set");
  std::vector<std::vector<std::size_t>> pools(c);
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    pools[static_cast<std::size_t>(data.train[i].annotation)].push_back(i);
  }
  std::vector<char> taken(data.train.size(), 0);
  std::vector<std::size_t> chosen;
  chosen.reserve(batch_size);
  for (std::size_t k = 0; k < c; ++k) {
    if (pools[k].empty()) fail("class " + std::to_string(k) + " has no annotated samples");
    const std::size_t pick = pools[k][rng.index(pools[k].size())];
    taken[pick] = 1;
    chosen.push_back(pick);
  }
  std::vector<std::size_t> rest;
  rest.reserve(data.train.size());
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    if (!taken[i]) rest.push_back(i);
  }
  // Partial Fisher-Yates: the first (batch_size - C) entries are a uniform draw.
  const std::size_t extra = batch_size - c;
  for (std::size_t k = 0; k < extra; ++k) {
    const std::size_t j = k + rng.index(rest.size() - k);
    std::swap(rest[k], rest[j]);
    chosen.push_back(rest[k]);
  }
  rng.shuffle(std::span<std::size_t>(chosen));
  std::vector<Sample> samples;
  samples.reserve(batch_size);
  for (std::size_t i : chosen) samples.push_back(data.train[i]);
  return make_batch(std::move(samples), data.num_classes);
}

Batch sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed) {
  Rng rng(seed);
  return sample_batch(data, batch_size, rng);
}

OracleLatent oracle_latent(const Sample& sample) {
  const std::size_t c = sample.true_posterior.size();
  if (c < 2) fail("oracle_latent needs a posterior over at least two classes");
  const auto own = static_cast<std::size_t>(sample.annotation);
  if (own >= c) fail("annotation out of range");
  OracleLatent out;
  out.latent.owner_class = sample.annotation;
  double rest = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    if (k != own) rest += sample.true_posterior[k];
  }
  out.latent.probs.reserve(c - 1);
  if (!(rest > 0.0)) {
    out.degenerate = true;
    out.latent.probs.assign(c - 1, 1.0 / static_cast<double>(c - 1));
    return out;
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (k != own) out.latent.probs.push_back(sample.true_posterior[k] / rest);
  }
  return out;
}

// Text format -----------------------------------------------------------------

void write_dataset(std::ostream& out, const Dataset& data) {
  out << "dmue-dataset 1 classes=" << data.num_classes << " dim=" << data.feature_dim
      << " train=" << data.train.size() << " test=" << data.test.size() << " seed=" << data.seed << '\n';
  auto line = [&](const Sample& s) {
    std::string text;
    for (double v : s.features) {
      text += format_double(v);
      text += ' ';
    }
    text += std::to_string(s.annotation) + ' ' + std::to_string(s.true_class);
    for (double p : s.true_posterior) {
      text += ' ';
      text += format_double(p);
    }
    text += s.flipped ? " 1\n" : " 0\n";
    out << text;
  };
  for (const auto& s : data.train) line(s);
  for (const auto& s : data.test) line(s);
}

namespace {

std::string header_value(const std::string& token, const std::string& key) {
  if (token.rfind(key + "=", 0) != 0) {
    throw std::runtime_error("dataset header: expected '" + key + "=', got '" + token + "'");
  }
  return token.substr(key.size() + 1);
}

}  // namespace

Dataset read_dataset(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("dataset file is empty");
  std::istringstream hs(header);
  std::string magic, version, tc, td, ttrain, ttest, tseed;
  hs >> magic >> version >> tc >> td >> ttrain >> ttest >> tseed;
  if (magic != "dmue-dataset") throw std::runtime_error("not a dataset file (bad magic)");
  if (version != "1") throw std::runtime_error("unsupported dataset version " + version);
  Dataset data;
  data.num_classes = static_cast<int>(parse_int(header_value(tc, "classes")));
  data.feature_dim = static_cast<int>(parse_int(header_value(td, "dim")));
  const auto n_train = static_cast<std::size_t>(parse_int(header_value(ttrain, "train")));
  const auto n_test = static_cast<std::size_t>(parse_int(header_value(ttest, "test")));
  data.seed = static_cast<std::uint64_t>(parse_int(header_value(tseed, "seed")));
  if (data.num_classes < 2 || data.feature_dim < 1) throw std::runtime_error("dataset header: bad sizes");

  const auto d = static_cast<std::size_t>(data.feature_dim);
  const auto c = static_cast<std::size_t>(data.num_classes);
  const std::size_t expected = d + 2 + c + 1;
  std::string line;
  auto read_one = [&](std::size_t lineno) {
    if (!std::getline(in, line)) throw std::runtime_error("dataset file truncated at sample " + std::to_string(lineno));
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.size() != expected) {
      throw std::runtime_error("dataset line " + std::to_string(lineno + 2) + ": expected " +
                               std::to_string(expected) + " fields, got " + std::to_string(tok.size()));
    }
    Sample s;
    for (std::size_t i = 0; i < d; ++i) s.features.push_back(parse_double(tok[i]));
    s.annotation = static_cast<int>(parse_int(tok[d]));
    s.true_class = static_cast<int>(parse_int(tok[d + 1]));
    for (std::size_t k = 0; k < c; ++k) s.true_posterior.push_back(parse_double(tok[d + 2 + k]));
    const long long flag = parse_int(tok[d + 2 + c]);
    if (flag != 0 && flag != 1) throw std::runtime_error("dataset: flipped flag must be 0 or 1");
    s.flipped = flag == 1;
    if (s.annotation < 0 || s.annotation >= data.num_classes || s.true_class < 0 ||
        s.true_class >= data.num_classes) {
      throw std::runtime_error("dataset line " + std::to_string(lineno + 2) + ": class index out of range");
    }
    return s;
  };
  for (std::size_t i = 0; i < n_train; ++i) data.train.push_back(read_one(i));
  for (std::size_t i = 0; i < n_test; ++i) data.test.push_back(read_one(n_train + i));
  return data;
}

void save_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_dataset(out, data);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_dataset(in);
}

}  // namespace dmue

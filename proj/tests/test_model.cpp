#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmue/checkpoint.hpp"
#include "dmue/model.hpp"
#include "oracles.hpp"

using namespace dmue;

namespace {

const ModelConfig kConfig{4, 16, 32, 16};

Tensor random_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor({n, d}, rng, -3.0, 3.0, false);
}

std::string bytes_of(const Checkpoint& c) {
  std::ostringstream out;
  write_checkpoint(out, c);
  return out.str();
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dmue_test_model_" + name);
}

}  // namespace

TEST(Model, ZeroTrunkGivesZeroFeatures) {
  Rng rng(1);
  BranchSet b = BranchSet::create(kConfig, rng);
  auto params = b.parameters();
  for (auto& p : params) {
    if (p.name.rfind("trunk.", 0) == 0) {
      for (auto& v : p.value.mutable_values()) v = 0.0;
    }
  }
  Tensor shared = b.trunk_forward(random_inputs(5, 16, 2));
  for (double v : shared.values()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ShapesFollowTheConfig) {
  Rng rng(1);
  const BranchSet b = BranchSet::create(kConfig, rng);
  Tensor shared = b.trunk_forward(random_inputs(7, 16, 3));
  EXPECT_EQ(shared.shape(), (Shape{7, 32}));
  auto t = b.target_forward(shared);
  EXPECT_EQ(t.logits.shape(), (Shape{7, 4}));
  EXPECT_EQ(t.features.shape(), (Shape{7, 16}));
  for (int k = 0; k < 4; ++k) {
    auto a = b.aux_forward(k, shared);
    EXPECT_EQ(a.logits.shape(), (Shape{7, 3}));
    EXPECT_EQ(a.features.shape(), (Shape{7, 16}));
  }
  EXPECT_THROW(b.trunk_forward(random_inputs(2, 15, 1)), std::invalid_argument);
}

TEST(Model, IdenticalInputsGiveIdenticalRows) {
  Rng rng(4);
  const BranchSet b = BranchSet::create(kConfig, rng);
  Tensor x = random_inputs(1, 16, 9);
  std::vector<double> twice(x.values().begin(), x.values().end());
  twice.insert(twice.end(), x.values().begin(), x.values().end());
  Tensor shared = b.trunk_forward(Tensor::from({2, 16}, twice));
  for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(shared.at(0, c), shared.at(1, c));
}

TEST(Model, GlorotInitIsWithinBoundsAndBiasesZero) {
  Rng rng(7);
  const BranchSet b = BranchSet::create(kConfig, rng);
  for (const auto& p : b.parameters()) {
    const Shape s = p.value.shape();
    if (p.name.find("bias") != std::string::npos) {
      for (double v : p.value.values()) EXPECT_EQ(v, 0.0) << p.name;
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
      for (double v : p.value.values()) EXPECT_LE(std::abs(v), limit) << p.name;
    }
  }
}

// Class indices are 0-based, so the first class is 0.
TEST(ClassIndexMap, SkipsTheExcludedClassInOrder) {
  const ClassIndexMap m(7, 2);
  EXPECT_EQ(m.classes(), (std::vector<int>{0, 1, 3, 4, 5, 6}));
  EXPECT_EQ(m.class_at(2), 3);
  EXPECT_EQ(m.position_of(3), 2u);
  EXPECT_THROW(m.position_of(2), std::invalid_argument);
  Rng rng(1);
  const BranchSet b = BranchSet::create(ModelConfig{7, 4, 8, 4}, rng);
  EXPECT_EQ(b.index_map(0).width(), 7u);
  EXPECT_EQ(b.index_map(3).width(), 6u);
}

TEST(ClassIndexMapProperty, IsABijection) {
  for (int c = 2; c <= 8; ++c) {
    for (int j = 0; j < c; ++j) {
      const ClassIndexMap m(c, j);
      for (std::size_t p = 0; p < m.width(); ++p) EXPECT_EQ(m.position_of(m.class_at(p)), p);
    }
  }
}

TEST(Latent, ZeroLogitsGiveUniform) {
  // C=3, annotation 2 (0-based): latent over classes {0, 1}.
  std::vector<Tensor> logits(3, Tensor::zeros({1, 2}));
  const std::vector<int> labels = {2};
  const auto l = latent_from_logits(logits, labels);
  EXPECT_EQ(l[0].owner_class, 2);
  EXPECT_DOUBLE_EQ(l[0].probs[0], 0.5);
  EXPECT_DOUBLE_EQ(l[0].probs[1], 0.5);
}

TEST(Latent, LogitsTwoAndZero) {
  std::vector<Tensor> logits(3, Tensor::row({2.0, 0.0}));
  const std::vector<int> labels = {0};
  const auto l = latent_from_logits(logits, labels);
  EXPECT_NEAR(l[0].probs[0], 0.880797, 1e-6);
  EXPECT_NEAR(l[0].probs[1], 0.119203, 1e-6);
}

TEST(LatentProperty, DistributionsSumToOneAndIgnoreBatchOrder) {
  Rng rng(10);
  const BranchSet b = BranchSet::create(kConfig, rng);
  const Dataset d = inject_noise(generate(reference_spec(3)), 0.3, 3);
  std::vector<Sample> samples(d.train.begin(), d.train.begin() + 40);
  const auto base = predict_latent_distribution(b, samples);
  for (const auto& l : base) {
    double s = 0.0;
    for (double p : l.probs) s += p;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  std::vector<std::size_t> perm(samples.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::span<std::size_t> ps(perm);
  rng.shuffle(ps);
  std::vector<Sample> shuffled;
  for (std::size_t i : perm) shuffled.push_back(samples[i]);
  const auto moved = predict_latent_distribution(b, shuffled);
  for (std::size_t k = 0; k < perm.size(); ++k) EXPECT_EQ(moved[k].probs, base[perm[k]].probs);
}

TEST(Confidence, MeanCosineAndColdStart) {
  // f_a = e1. Class 1 members at cosine 0.6 and 0.2; class 0 is the anchor itself.
  const double s6 = std::sqrt(1.0 - 0.36), s2 = std::sqrt(1.0 - 0.04);
  Tensor f = Tensor::from({3, 2}, {1.0, 0.0, 0.6, s6, 0.2, s2});
  const std::vector<int> labels = {0, 1, 1};
  Tensor s = class_similarity(f, labels, 2);
  EXPECT_NEAR(s.at(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(s.at(0, 1), 0.4, 1e-12);

  Tensor g = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 3.0});
  const std::vector<int> lg = {0, 1};
  Tensor sg = class_similarity(g, lg, 2);
  EXPECT_NEAR(sg.at(0, 1), 0.0, 1e-15);

  const UncertaintyModule zero = UncertaintyModule::zeros(2);
  Tensor alpha = estimate_confidence(f, labels, zero);
  for (double a : alpha.values()) EXPECT_DOUBLE_EQ(a, 0.5);
}

TEST(Confidence, MissingClassRejected) {
  Tensor f = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const std::vector<int> labels = {0, 0};
  EXPECT_THROW(class_similarity(f, labels, 2), std::invalid_argument);
}

TEST(ConfidenceProperty, AlphaInUnitIntervalAndPermutationEquivariant) {
  Rng rng(21);
  const UncertaintyModule m = UncertaintyModule::create(4, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 8;
    Tensor f = oracle::random_tensor({n, 6}, rng, -2.0, 2.0, false);
    std::vector<int> labels = {0, 1, 2, 3};
    while (labels.size() < n) labels.push_back(static_cast<int>(rng.index(4)));
    Tensor a = estimate_confidence(f, labels, m);
    for (double v : a.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::span<std::size_t> ps(perm);
    rng.shuffle(ps);
    std::vector<int> pl;
    for (std::size_t i : perm) pl.push_back(labels[i]);
    Tensor pf = select_rows(f, perm);
    Tensor pa = estimate_confidence(pf, pl, m);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(pa.at(k, 0), a.at(perm[k], 0), 1e-12);
  }
}

TEST(Deploy, StrippedMatchesFullBitwise) {
  const DmueModel full = DmueModel::create(kConfig, 5);
  const TargetModel stripped = strip_for_deployment(full.branches);
  Tensor x = random_inputs(100, 16, 6);
  NoGradScope ng;
  Tensor a = full.branches.target_forward(full.branches.trunk_forward(x)).logits;
  Tensor b = stripped.logits(x);
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
}

TEST(Deploy, StrippedIsSmallerAndHasNoAuxHeads) {
  const DmueModel full = DmueModel::create(kConfig, 5);
  const TargetModel stripped = strip_for_deployment(full.branches);
  EXPECT_LT(bytes_of(to_checkpoint(stripped)).size(), bytes_of(to_checkpoint(full)).size());
  Tensor shared = full.branches.trunk_forward(random_inputs(2, 16, 1));
  EXPECT_THROW(stripped.aux_forward(0, shared), MissingHeadsError);
}

TEST(Deploy, StrippedCopyIsIndependent) {
  DmueModel full = DmueModel::create(kConfig, 5);
  const TargetModel stripped = strip_for_deployment(full.branches);
  Tensor x = random_inputs(3, 16, 2);
  Tensor before = stripped.logits(x);
  for (auto& p : full.parameters()) {
    for (auto& v : p.value.mutable_values()) v += 1.0;
  }
  Tensor after = stripped.logits(x);
  for (std::size_t i = 0; i < before.values().size(); ++i) EXPECT_EQ(before.values()[i], after.values()[i]);
}

TEST(Argmax, TiesGoToLowestIndex) {
  Tensor z = Tensor::from({2, 3}, {1.0, 1.0, 0.0, 0.0, 2.0, 2.0});
  EXPECT_EQ(argmax_rows(z), (std::vector<int>{0, 1}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const DmueModel m = DmueModel::create(kConfig, 12);
  const std::string first = bytes_of(to_checkpoint(m));
  std::istringstream in(first);
  const DmueModel back = model_from_checkpoint(read_checkpoint(in));
  EXPECT_EQ(bytes_of(to_checkpoint(back)), first);
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    for (std::size_t k = 0; k < pa[i].value.values().size(); ++k) {
      EXPECT_EQ(pa[i].value.values()[k], pb[i].value.values()[k]);
    }
  }
}

TEST(Checkpoint, SaveLoadSaveFilesAreIdentical) {
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(p1.string(), DmueModel::create(kConfig, 3));
  save_checkpoint(p2.string(), load_full_model(p1.string()));
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(Checkpoint, CorruptMagicRejected) {
  std::string bytes = bytes_of(to_checkpoint(DmueModel::create(kConfig, 1)));
  bytes[0] = 'X';
  std::istringstream in(bytes);
  EXPECT_THROW(read_checkpoint(in), CheckpointFormatError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  std::string bytes = bytes_of(to_checkpoint(DmueModel::create(kConfig, 1)));
  bytes[8] = 9;  // version field follows the 8-byte magic
  std::istringstream in(bytes);
  EXPECT_THROW(read_checkpoint(in), CheckpointFormatError);
}

TEST(Checkpoint, TruncationRejected) {
  const std::string bytes = bytes_of(to_checkpoint(DmueModel::create(kConfig, 1)));
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::istringstream in(bytes.substr(0, cut));
    EXPECT_THROW(read_checkpoint(in), CheckpointFormatError) << cut;
  }
}

TEST(Checkpoint, ShapeMismatchAgainstConfigRejected) {
  Checkpoint c = to_checkpoint(DmueModel::create(kConfig, 1));
  c.config.trunk_width = 31;
  EXPECT_THROW(model_from_checkpoint(c), std::runtime_error);
}

TEST(Checkpoint, StrippedFileCannotFeedFullTrainer) {
  const auto p = temp_path("s.ckpt");
  save_checkpoint(p.string(), strip_for_deployment(DmueModel::create(kConfig, 2).branches));
  EXPECT_THROW(load_full_model(p.string()), MissingHeadsError);
  EXPECT_NO_THROW(load_target_model(p.string()));
  std::filesystem::remove(p);
}

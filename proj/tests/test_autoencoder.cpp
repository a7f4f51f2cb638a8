#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "symadit/autoencoder.hpp"
#include "symadit/error.hpp"
#include "symadit/synth.hpp"

using namespace symadit;
using nn::Graph;
using nn::Tensor;
using nn::Var;

namespace {

const SymmetryCatalog& cat() { return default_catalog(); }

AEConfig tiny() {
  AEConfig c;
  c.encoder = {16, 2, 1, 2};
  c.decoder = {16, 2, 1, 2};
  c.latent_dim = 4;
  c.seed = 7;
  c.batch_size = 8;
  return c;
}

CrystalASU nacl() {
  CrystalASU asu;
  asu.group = 225;
  asu.sites = {{11, 'a', {0, 0, 0}}, {17, 'b', {0.5, 0.5, 0.5}}};
  asu.lattice = {5.65, 5.65, 5.65, 90, 90, 90};
  asu.id = "NaCl";
  return asu;
}

std::vector<CrystalASU> corpus(int n, std::uint64_t seed) {
  SynthOptions o;
  o.max_sites = 3;
  o.max_atoms = 24;
  return synthetic_dataset(cat(), n, seed, o);
}

Tensor random_latents(int n, int d, std::uint64_t seed, double scale = 2.0) {
  std::mt19937_64 rng(seed);
  return nn::normal_tensor(n, d, scale, rng);
}

// Makes the decoder's Wyckoff head prefer global positions in `order`.
void bias_wyckoff(Autoencoder& ae, const std::vector<std::pair<int, double>>& bias) {
  auto& b = ae.store().at("dec.wyckoff.b").value;
  for (auto [col, v] : bias) b(0, col) = v;
}

}  // namespace

TEST_CASE("saturation golden values") {
  CHECK(nn::saturate(0.0) == 0.0);
  CHECK(nn::saturate(5.0) == doctest::Approx(5.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(nn::saturate(5.0) == doctest::Approx(3.53553).epsilon(1e-6));
  CHECK(nn::saturate(1e300) < 5.0);
  CHECK(nn::saturate(1e12) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(nn::saturate(-7.0) == -nn::saturate(7.0));
}

TEST_CASE("encoder latents are bounded, even with blown-up weights") {
  Autoencoder ae(tiny(), cat());
  const auto data = corpus(6, 3);
  ae.fit_lattice_stats(data);
  for (const auto& c : data) {
    const LatentBatch z = ae.encode(c);
    CHECK(z.group == c.group);
    CHECK(z.orbit_count() == c.orbit_count());
    CHECK(z.z.allFinite());
    CHECK(z.z.cwiseAbs().maxCoeff() < 5.0);
  }
  ae.store().at("enc.to_latent.w").value *= 1e6;
  for (const auto& c : data) CHECK(ae.encode(c).z.cwiseAbs().maxCoeff() < 5.0);
}

TEST_CASE("unknown Wyckoff key is a hard failure") {
  Autoencoder ae(tiny(), cat());
  CrystalASU bad = nacl();
  bad.sites[0].wyckoff = 'z';
  CHECK_THROWS_AS(ae.encode(bad), ValidationError);
}

namespace {
// An untrained lattice head can emit angles with no valid metric, which
// decode reports as InvalidCell; damp it so every draw yields a cell.
void damp_lattice_head(Autoencoder& ae) { ae.store().at("dec.lattice.fc2.w").value *= 0.02; }
}  // namespace

TEST_CASE("decode obeys the group for arbitrary latents") {
  Autoencoder ae(tiny(), cat());
  ae.fit_lattice_stats(corpus(8, 1));
  damp_lattice_head(ae);
  std::mt19937_64 rng(11);
  for (int group : {1, 14, 62, 139, 166, 191, 194, 225, 227, 230}) {
    for (int trial = 0; trial < 5; ++trial) {
      LatentBatch z{random_latents(1 + trial, 4, 100 * group + trial), group, {}};
      for (DecodeMode mode : {DecodeMode::Argmax, DecodeMode::Sample}) {
        const DecodeResult r = ae.decode(z, mode, &rng);
        INFO(r.message);
        REQUIRE(r.ok());
        CHECK(asu_is_valid(r.asu, cat()));
        const SpaceGroup& sg = cat().group(group);
        for (const auto& s : r.asu.sites) {
          const WyckoffPos& w = cat().wyckoff(group, s.wyckoff);
          const Vec3 again = symmetrize_site(w, s.frac);
          for (int k = 0; k < 3; ++k) CHECK(std::abs(again[k] - s.frac[k]) <= 1e-12);
        }
        const auto proj = symmetrize_lattice(sg.lattice, r.asu.lattice);
        CHECK(proj.value == r.asu.lattice);
      }
    }
  }
}

TEST_CASE("cubic decode gives a=b=c and right angles") {
  Autoencoder ae(tiny(), cat());
  damp_lattice_head(ae);
  ae.fit_lattice_stats(corpus(8, 1));
  const DecodeResult r = ae.decode({random_latents(3, 4, 5), 221, {}});
  REQUIRE(r.ok());
  CHECK(r.asu.lattice[0] == r.asu.lattice[1]);
  CHECK(r.asu.lattice[1] == r.asu.lattice[2]);
  for (int k = 3; k < 6; ++k) CHECK(r.asu.lattice[k] == 90.0);
}

TEST_CASE("225 4a decodes to the origin regardless of the frac head") {
  Autoencoder ae(tiny(), cat());
  damp_lattice_head(ae);
  const int a = cat().wyckoff(225, 'a').global_index;
  bias_wyckoff(ae, {{a, 1e3}});
  ae.store().at("dec.frac.fc2.b").value << 0.37, -2.1, 9.4;
  const DecodeResult r = ae.decode({random_latents(1, 4, 9), 225, {}});
  REQUIRE(r.ok());
  REQUIRE(r.asu.sites.size() == 1);
  CHECK(r.asu.sites[0].wyckoff == 'a');
  CHECK(r.asu.sites[0].frac == Vec3{0, 0, 0});
}

TEST_CASE("masked Wyckoff probability is exactly zero outside the group") {
  Autoencoder ae(tiny(), cat());
  const DecodeResult r = ae.decode({random_latents(4, 4, 3), 225, {}});
  const auto mask = cat().wyckoff_mask(225);
  Graph g;
  const Tensor p = nn::softmax_rows(g.constant(r.outputs.wyckoff_logits)).value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double inside = 0;
    for (int c = 0; c < SymmetryCatalog::kWyckoffCount; ++c) {
      if (mask[static_cast<std::size_t>(c)])
        inside += p(i, c);
      else
        CHECK(p(i, c) == 0.0);
    }
    CHECK(inside == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("zero-DOF positions are not chosen twice") {
  Autoencoder ae(tiny(), cat());
  damp_lattice_head(ae);
  const SpaceGroup& sg = cat().group(225);
  // Strongly prefer a, then b, then the general position.
  bias_wyckoff(ae, {{sg.find('a')->global_index, 300.0},
                    {sg.find('b')->global_index, 200.0},
                    {sg.general_position().global_index, 100.0}});
  const DecodeResult r = ae.decode({random_latents(4, 4, 2, 0.1), 225, {}});
  REQUIRE(r.ok());
  std::string letters;
  for (const auto& s : r.asu.sites) letters += s.wyckoff;
  CHECK(letters == std::string{'a', 'b', sg.general_position().letter, sg.general_position().letter});
}

TEST_CASE("sampling is reproducible for a fixed seed") {
  Autoencoder ae(tiny(), cat());
  damp_lattice_head(ae);
  const LatentBatch z{random_latents(3, 4, 8), 62, {}};
  std::mt19937_64 r1(5), r2(5);
  const auto a = ae.decode(z, DecodeMode::Sample, &r1);
  const auto b = ae.decode(z, DecodeMode::Sample, &r2);
  REQUIRE(a.ok());
  CHECK(a.asu.sites == b.asu.sites);
  CHECK_THROWS_AS(ae.decode(z, DecodeMode::Sample, nullptr), Error);
}

TEST_CASE("padded latent rows are ignored") {
  Autoencoder ae(tiny(), cat());
  damp_lattice_head(ae);
  Tensor z = random_latents(3, 4, 4);
  const auto full = ae.decode({z, 14, {}});
  Tensor padded = Tensor::Zero(5, 4);
  padded.topRows(3) = z;
  const auto r = ae.decode({padded, 14, {1, 1, 1, 0, 0}});
  REQUIRE(r.ok());
  CHECK(r.asu.sites.size() == 3);
  CHECK(r.asu.sites == full.asu.sites);
}

TEST_CASE("reconstruction loss terms") {
  Autoencoder ae(tiny(), cat());
  CrystalASU c;
  c.group = 123;  // 'r' is x,x,z: slots 0 and 2 free, 1 tied
  c.sites = {{8, 'a', {0, 0, 0}}, {26, 'r', {0.2, 0.2, 0.7}}};
  c.lattice = {4.0, 4.0, 6.0, 90, 90, 90};
  ae.fit_lattice_stats({c});
  const AsuBatch batch = ae.make_batch({&c});
  CHECK(batch.frac_free(1, 0) == 1.0);
  CHECK(batch.frac_free(1, 1) == 0.0);
  CHECK(batch.frac_free(1, 2) == 1.0);

  const int width = static_cast<int>(batch.wyckoff_columns[0].size());
  auto heads_for = [&](Graph& g, const Tensor& frac, const Tensor& lattice) {
    Tensor wy = Tensor::Zero(2, width), at = Tensor::Zero(2, 100);
    for (int i = 0; i < 2; ++i) {
      wy(i, batch.wyckoff_local[static_cast<std::size_t>(i)]) = 1000;
      at(i, batch.elements[static_cast<std::size_t>(i)]) = 1000;
    }
    return Autoencoder::HeadVars{g.constant(wy), g.constant(at), g.constant(frac), g.constant(lattice)};
  };

  SUBCASE("perfect prediction scores zero") {
    Graph g;
    LossBreakdown lb;
    Var total = ae.loss(batch, heads_for(g, batch.frac, batch.lattice_target), &lb);
    CHECK(total.item() == 0.0);
    CHECK(lb.atom == 0.0);
    CHECK(lb.frac == 0.0);
  }
  SUBCASE("periodic term: half a cell costs 2, a whole cell costs 0") {
    Tensor shifted = batch.frac;
    shifted(1, 0) += 0.5;
    shifted(1, 2) += 0.5;
    Graph g;
    LossBreakdown lb;
    ae.loss(batch, heads_for(g, shifted, batch.lattice_target), &lb);
    CHECK(lb.frac == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(lb.total == doctest::Approx(5.0 * 2.0).epsilon(1e-14));
    shifted = batch.frac;
    shifted(1, 0) += 1.0;
    Graph g2;
    ae.loss(batch, heads_for(g2, shifted, batch.lattice_target), &lb);
    CHECK(lb.frac == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("zero-DOF site and tied slots do not contribute") {
    Tensor junk = batch.frac;
    junk.row(0) << 0.31, 0.77, 0.12;
    junk(1, 1) = 0.9;
    Graph g;
    LossBreakdown lb;
    ae.loss(batch, heads_for(g, junk, batch.lattice_target), &lb);
    CHECK(lb.frac == 0.0);
  }
  SUBCASE("constrained lattice slots do not contribute") {
    Tensor lat = batch.lattice_target;
    lat(0, 1) += 3.0;  // b tied to a
    lat(0, 4) -= 1.0;  // beta fixed
    Graph g;
    LossBreakdown lb;
    ae.loss(batch, heads_for(g, batch.frac, lat), &lb);
    CHECK(lb.lattice == 0.0);
    lat(0, 2) += 0.5;  // c is free: two free slots, so mean is 0.125
    Graph g2;
    ae.loss(batch, heads_for(g2, batch.frac, lat), &lb);
    CHECK(lb.lattice == doctest::Approx(0.125).epsilon(1e-14));
  }
  SUBCASE("frac gradient is exactly zero on constrained slots") {
    nn::Parameter pred;
    std::mt19937_64 rng(1);
    pred.value = nn::normal_tensor(2, 3, 0.3, rng);
    pred.grad = Tensor::Zero(2, 3);
    auto eval = [&](bool back) {
      Graph g;
      auto h = heads_for(g, batch.frac, batch.lattice_target);
      h.frac = g.param(pred);
      Var l = ae.loss(batch, h);
      if (back) g.backward(l);
      return l.item();
    };
    eval(true);
    const double step = 1e-6;
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 3; ++k) {
        const double x0 = pred.value(i, k);
        pred.value(i, k) = x0 + step;
        const double up = eval(false);
        pred.value(i, k) = x0 - step;
        const double down = eval(false);
        pred.value(i, k) = x0;
        const double numeric = (up - down) / (2 * step);
        if (batch.frac_free(i, k) == 0.0) {
          CHECK(pred.grad(i, k) == 0.0);
          CHECK(numeric == 0.0);
        } else {
          CHECK(pred.grad(i, k) == doctest::Approx(numeric).epsilon(1e-6));
          CHECK(pred.grad(i, k) != 0.0);
        }
      }
  }
}

TEST_CASE("site permutation permutes latents and decoded orbits") {
  Autoencoder ae(tiny(), cat());
  const auto data = corpus(10, 21);
  ae.fit_lattice_stats(data);
  std::mt19937_64 rng(4);
  for (const auto& c : data) {
    if (c.orbit_count() < 2) continue;
    std::vector<int> perm(static_cast<std::size_t>(c.orbit_count()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CrystalASU p = c;
    for (std::size_t i = 0; i < perm.size(); ++i) p.sites[i] = c.sites[static_cast<std::size_t>(perm[i])];
    const LatentBatch z = ae.encode(c), zp = ae.encode(p);
    for (std::size_t i = 0; i < perm.size(); ++i)
      CHECK((zp.z.row(static_cast<Eigen::Index>(i)).array() == z.z.row(perm[i]).array()).all());
    const DecodeResult r = ae.decode(z), rp = ae.decode(zp);
    CHECK(r.status == rp.status);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      CHECK((rp.outputs.atom_logits.row(static_cast<Eigen::Index>(i)).array() ==
             r.outputs.atom_logits.row(perm[i]).array()).all());
      CHECK((rp.outputs.frac_pred.row(static_cast<Eigen::Index>(i)).array() ==
             r.outputs.frac_pred.row(perm[i]).array()).all());
    }
    for (int k = 0; k < 6; ++k)
      CHECK(rp.outputs.lattice_pred[k] == doctest::Approx(r.outputs.lattice_pred[k]).epsilon(1e-12));
  }
}

TEST_CASE("augmentation touches only free parameters") {
  std::mt19937_64 rng(17);
  SUBCASE("zero sigma is the identity") {
    for (const auto& c : corpus(10, 5)) {
      const CrystalASU out = augment(c, {0, 0, 0}, cat(), rng);
      CHECK(out.sites == c.sites);
      CHECK(out.lattice == c.lattice);
    }
  }
  SUBCASE("cubic: only a moves and b, c follow") {
    const CrystalASU out = augment(nacl(), {}, cat(), rng);
    CHECK(out.lattice[0] != 5.65);
    CHECK(out.lattice[1] == out.lattice[0]);
    CHECK(out.lattice[2] == out.lattice[0]);
    for (int k = 3; k < 6; ++k) CHECK(out.lattice[k] == 90.0);
    CHECK(out.sites == nacl().sites);
  }
  SUBCASE("random crystals stay valid, 0-DOF sites unchanged") {
    for (const auto& c : corpus(30, 9)) {
      const CrystalASU out = augment(c, {0.05, 0.05, 3.0}, cat(), rng);
      CHECK(asu_is_valid(out, cat()));
      for (std::size_t i = 0; i < c.sites.size(); ++i) {
        const WyckoffPos& w = cat().wyckoff(c.group, c.sites[i].wyckoff);
        if (w.dof == 0) CHECK(out.sites[i].frac == c.sites[i].frac);
        for (int k = 0; k < 3; ++k)
          if (w.dof_mask[k]) CHECK(out.sites[i].frac[k] != c.sites[i].frac[k]);
      }
      const auto& lc = cat().group(c.group).lattice;
      for (int k = 0; k < 6; ++k)
        if (!lc.free_mask[k] && lc.tie_rules.empty()) CHECK(out.lattice[k] == c.lattice[k]);
    }
  }
  CHECK_THROWS_AS(augment(nacl(), {-1, 0, 0}, cat(), rng), ValidationError);
}

TEST_CASE("reconstruction gate") {
  CHECK(reconstruction_gate(nacl(), cat()));
  CrystalASU single;
  single.group = 221;
  single.sites = {{29, 'a', {0, 0, 0}}};
  single.lattice = {5, 5, 5, 90, 90, 90};
  CHECK(reconstruction_gate(single, cat()));
  CrystalASU close;
  close.group = 1;
  close.sites = {{6, 'a', {0.1, 0.1, 0.1}}, {6, 'a', {0.11, 0.1, 0.1}}};
  close.lattice = {5, 5, 5, 90, 90, 90};
  CHECK_FALSE(reconstruction_gate(close, cat()));
}

TEST_CASE("config JSON round trip and validation") {
  AEConfig c = AEConfig::paper();
  c.seed = 99;
  c.weights.frac = 3.0;
  c.use_augmentation = false;
  nlohmann::json j = c;
  const AEConfig back = j.get<AEConfig>();
  CHECK(back.encoder.model_dim == 512);
  CHECK(back.decoder.layers == 8);
  CHECK(back.latent_dim == 32);
  CHECK(back.seed == 99);
  CHECK(back.weights.frac == 3.0);
  CHECK_FALSE(back.use_augmentation);
  CHECK(nlohmann::json(back) == j);

  const AEConfig d = AEConfig::desk();
  CHECK(d.encoder.model_dim == 128);
  CHECK(d.encoder.layers == 2);
  CHECK(d.encoder.heads == 4);
  CHECK(d.latent_dim == 16);
  CHECK(d.weights.atom == 1.0);
  CHECK(d.weights.wyckoff == 1.0);
  CHECK(d.weights.frac == 5.0);
  CHECK(d.weights.lattice == 1.0);

  nlohmann::json bad = {{"loss_weights", {{"frac", -1.0}}}};
  AEConfig e;
  CHECK_THROWS_AS(from_json(bad, e), ValidationError);
}

TEST_CASE("training is resumable and reproducible") {
  const auto data = corpus(12, 31);
  const auto dir = std::filesystem::temp_directory_path() / "symadit_ae_test";
  std::filesystem::create_directories(dir);

  std::vector<double> straight;
  {
    Autoencoder ae(tiny(), cat());
    train_autoencoder(ae, data, 6, [&](const AETrainRow& r) {
      straight.push_back(r.loss.total);
      return true;
    });
    CHECK(ae.store().step == 6);
  }
  std::vector<double> resumed;
  {
    Autoencoder ae(tiny(), cat());
    train_autoencoder(ae, data, 3, [&](const AETrainRow& r) {
      resumed.push_back(r.loss.total);
      return true;
    });
    nn::save_checkpoint(ae.store(), dir / "ae.ckpt");
  }
  {
    Autoencoder ae(tiny(), cat());
    nn::load_checkpoint_into(ae.store(), dir / "ae.ckpt");
    CHECK(ae.store().step == 3);
    train_autoencoder(ae, data, 6, [&](const AETrainRow& r) {
      resumed.push_back(r.loss.total);
      return true;
    });
  }
  REQUIRE(resumed.size() == straight.size());
  for (std::size_t i = 0; i < straight.size(); ++i) CHECK(resumed[i] == straight[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("step-0 loss matches a recomputation from the initial state") {
  const auto data = corpus(8, 41);
  Autoencoder ae(tiny(), cat());
  ae.fit_lattice_stats(data);
  const LossBreakdown before = autoencoder_step_loss(ae, data, 0);
  double logged = -1;
  train_autoencoder(ae, data, 1, [&](const AETrainRow& r) {
    logged = r.loss.total;
    return true;
  });
  CHECK(logged == before.total);
}

TEST_CASE("a small model overfits a handful of crystals") {
  const auto data = corpus(4, 51);
  AEConfig cfg = tiny();
  cfg.encoder = {32, 4, 1, 2};
  cfg.decoder = {32, 4, 1, 2};
  cfg.latent_dim = 8;
  cfg.use_augmentation = false;
  cfg.optimizer.lr = 3e-3;
  cfg.optimizer.warmup_steps = 10;
  Autoencoder ae(cfg, cat());
  double first = 0, last = 0;
  train_autoencoder(ae, data, 300, [&](const AETrainRow& r) {
    if (r.step == 0) first = r.loss.total;
    last = r.loss.total;
    return true;
  });
  CHECK(last < 0.1 * first);
  const ReconstructionMetrics m = ae.evaluate(data);
  CHECK(m.atom_accuracy == 1.0);
  CHECK(m.wyckoff_accuracy == 1.0);
}

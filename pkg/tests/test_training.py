import math

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import tiny_model_config
from gaitdis import autodiff as ad
from gaitdis.mocap import SynthConfig, synth_generate
from gaitdis.model import (Forward, ModelConfig, cross_reconstruct, decode, encode_affect, encode_subject,
                           init_params, reconstruct)
from gaitdis.preprocessing import preprocess_pipeline
from gaitdis.training import (COMPONENTS, CrossBatch, CrossSampler, LossWeights, TrainingDiverged,
                              TrainSettings, loss_cross, loss_rec, loss_triplet,
                              sample_cross_batch, total_loss, train)


@pytest.fixture(scope="module")
def tiny():
    """Tiny model and 16-frame cycles cut from real preprocessed data."""
    cfg = tiny_model_config()
    return cfg, init_params(cfg, 1)


def shrink(batch: CrossBatch, length: int = 16) -> CrossBatch:
    return CrossBatch(np.ascontiguousarray(batch.x[..., :length]), batch.subjects, batch.affects,
                      batch.subject_triplets, batch.affect_triplets, batch.source_index)


@pytest.fixture(scope="module")
def batch(small_cycles):
    return shrink(sample_cross_batch(small_cycles, 3, 11))


# --- reconstruction loss ---------------------------------------------------

def test_loss_rec_zero_and_offset(tiny, rng, monkeypatch):
    cfg, params = tiny
    x = rng.normal(size=(2, 45, 16))
    monkeypatch.setattr(Forward, "decode", lambda self, s, a: self.graph.constant(x))
    assert loss_rec(params, x) == 0.0
    monkeypatch.setattr(Forward, "decode", lambda self, s, a: self.graph.constant(x + 1))
    assert loss_rec(params, x) == pytest.approx(1.0, abs=1e-15)


def test_loss_rec_matches_loop_oracle(tiny, rng):
    cfg, params = tiny
    x = rng.normal(size=(3, 45, 16))
    rec = reconstruct(params, x)
    total = 0.0
    for n in range(3):
        for c in range(45):
            for t in range(16):
                total += (rec[n, c, t] - x[n, c, t]) ** 2
    assert abs(loss_rec(params, x) - total / x.size) <= 1e-12


def test_loss_rec_empty_batch(tiny):
    with pytest.raises(ValueError):
        loss_rec(tiny[1], np.zeros((0, 45, 16)))


# --- cross loss ---------------------------------------------------------------

def test_loss_cross_self_transfer(tiny, rng):
    cfg, params = tiny
    x = rng.normal(size=(2, 45, 16))
    b = CrossBatch(np.concatenate([x] * 4), np.zeros(8, int), np.zeros(8, int),
                   np.zeros((0, 3), int), np.zeros((0, 3), int), np.arange(8))
    assert abs(loss_cross(params, b) - 2 * loss_rec(params, x)) <= 1e-12


def test_loss_cross_compositional_oracle(tiny, batch):
    cfg, params = tiny
    s_b, a_a = encode_subject(params, batch.x_b), encode_affect(params, batch.x_a)
    s_a, a_b = encode_subject(params, batch.x_a), encode_affect(params, batch.x_b)
    kj, il = decode(params, s_b, a_a), decode(params, s_a, a_b)
    expected = np.mean((kj - batch.gt_kj) ** 2) + np.mean((il - batch.gt_il) ** 2)
    assert abs(loss_cross(params, batch) - expected) <= 1e-12
    kj2, il2 = cross_reconstruct(params, batch.x_a, batch.x_b)
    np.testing.assert_allclose(kj2, kj, atol=1e-12)


# --- triplet loss -------------------------------------------------------------

def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_triplet_examples(rng):
    a = unit(rng.normal(size=(5, 4)))
    n = -a
    assert loss_triplet(a, a, n, 0.2) == 0.0
    p = unit(rng.normal(size=(5, 4)))
    assert loss_triplet(a, p, p, 0.2) == pytest.approx(0.2, abs=1e-15)


def test_triplet_formula_oracle_and_graph(rng):
    a, p, n = (unit(rng.normal(size=(6, 5))) for _ in range(3))
    direct = np.mean([max(0.0, math.dist(a[r], p[r]) - math.dist(a[r], n[r]) + 0.2) for r in range(6)])
    assert abs(loss_triplet(a, p, n, 0.2) - direct) <= 1e-12
    from gaitdis.training import triplet_graph
    g = ad.Graph()
    codes = g.input(np.concatenate([a, p, n]))
    trip = np.stack([np.arange(6), np.arange(6) + 6, np.arange(6) + 12], axis=1)
    assert abs(float(triplet_graph(codes, trip, 0.2).data) - direct) <= 1e-12


def test_triplet_hinge_floor(rng):
    for _ in range(100):
        a, p, n = (unit(rng.normal(size=(3, 4))) for _ in range(3))
        assert loss_triplet(a, p, n, 0.3) >= 0


# --- total loss ------------------------------------------------------------------

def test_total_loss_decomposition_and_linearity(tiny, batch):
    cfg, params = tiny
    w = LossWeights(0.7, 1.3, 0.4, 0.9, 0.25)
    tot, parts = total_loss(params, batch, w)
    manual = sum(wt * parts[k] for wt, k in zip(w.as_tuple(), COMPONENTS))
    assert abs(tot - manual) <= 1e-12
    doubled, _ = total_loss(params, batch, LossWeights(1.4, 2.6, 0.8, 1.8, 0.25))
    assert abs(doubled - 2 * tot) <= 1e-12
    only_rec, parts = total_loss(params, batch, LossWeights(1, 0, 0, 0))
    assert abs(only_rec - loss_rec(params, batch.x[:2 * batch.size])) <= 1e-12
    assert abs(parts["l_cross"] - loss_cross(params, batch)) <= 1e-12


def test_total_loss_does_not_touch_running_stats(tiny, batch):
    cfg, params = tiny
    before = {k: s.copy() for k, s in params.stats.items()}
    total_loss(params, batch, LossWeights(), mode="train")
    for k, s in params.stats.items():
        np.testing.assert_array_equal(s.mean, before[k].mean)


@pytest.mark.parametrize("bad", [LossWeights(0, 0, 0, 0), LossWeights(-1, 1, 0, 0), LossWeights(margin=0)])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        bad.validate()


# --- sampler ---------------------------------------------------------------

def test_sampler_deterministic(small_cycles):
    a, b = sample_cross_batch(small_cycles, 8, 5), sample_cross_batch(small_cycles, 8, 5)
    np.testing.assert_array_equal(a.source_index, b.source_index)
    np.testing.assert_array_equal(a.x, b.x)


def test_sampler_pair_constraints_and_uniformity(small_cycles):
    sampler = CrossSampler(small_cycles)
    s, a = sampler.s, sampler.a
    batch = sampler.sample(10_000, 0)
    B = batch.size
    idx = batch.source_index.reshape(4, B)
    i, j = s[idx[0]], a[idx[0]]
    k, l = s[idx[1]], a[idx[1]]
    assert np.all(i != k) and np.all(j != l)
    np.testing.assert_array_equal(s[idx[2]], k)
    np.testing.assert_array_equal(a[idx[2]], j)
    np.testing.assert_array_equal(s[idx[3]], i)
    np.testing.assert_array_equal(a[idx[3]], l)
    counts = np.bincount(i * 4 + j, minlength=8)
    assert chisquare(counts).pvalue > 0.01


def test_sampler_triplet_roles(small_cycles):
    batch = sample_cross_batch(small_cycles, 6, 2)
    s, a = batch.subjects, batch.affects
    st, at = batch.subject_triplets, batch.affect_triplets
    assert np.all(s[st[:, 0]] == s[st[:, 1]]) and np.all(s[st[:, 0]] != s[st[:, 2]])
    assert np.all(a[at[:, 0]] == a[at[:, 1]]) and np.all(a[at[:, 0]] != a[at[:, 2]])


def test_sampler_missing_coverage(small_cycles):
    partial = [c for c in small_cycles if not (c.subject_id == "s00" and c.affect == "sad")]
    with pytest.raises(ValueError, match="s00.*sad"):
        CrossSampler(partial)


# --- training loop ------------------------------------------------------------

def test_train_smoke_one_epoch(small_cycles):
    cfg = tiny_model_config(length=128, encoder=((6, 3, 4), (8, 3, 4)))
    eight = list({(c.subject_id, c.affect): c for c in small_cycles}.values())
    assert len(eight) == 8
    params, report = train(eight, cfg, epochs=1, rng_seed=0,
                           settings=TrainSettings(batch_size=2, steps_per_epoch=2))
    assert len(report.epochs) == 1
    row = report.epochs[0]
    assert all(math.isfinite(row[k]) for k in COMPONENTS + ("total",))


def test_train_deterministic_and_report_csv(small_cycles, tmp_path):
    cfg = tiny_model_config(length=128, encoder=((6, 3, 4), (8, 3, 4)))
    s = TrainSettings(batch_size=2, steps_per_epoch=2)
    _, r1 = train(small_cycles, cfg, epochs=3, rng_seed=4, settings=s)
    _, r2 = train(small_cycles, cfg, epochs=3, rng_seed=4, settings=s)
    assert r1.epochs == r2.epochs and r1.config_hash == r2.config_hash
    r1.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_rec,l_cross,l_trip_s,l_trip_a,total" and len(lines) == 4


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergence_reports_last_good(small_cycles, tmp_path):
    cfg = tiny_model_config(length=128, encoder=((6, 3, 4), (8, 3, 4)))
    bad = [c for c in small_cycles]
    bad[0] = type(bad[0])(**{**bad[0].__dict__, "tensor": np.full((45, 128), 1e200)})
    with pytest.raises(TrainingDiverged) as info:
        train(bad, cfg, epochs=20, rng_seed=0, settings=TrainSettings(batch_size=8, steps_per_epoch=4),
              checkpoint_path=tmp_path / "last.gdae")
    assert (tmp_path / "last.gdae").exists()
    assert info.value.last_good.weights.keys() == init_params(cfg, 0).weights.keys()


@pytest.mark.slow
def test_overfit_small_dataset():
    """2 subjects x 2 affects x 4 cycles, 500 epochs: the model can memorise them."""
    seqs, _, _ = synth_generate(SynthConfig(n_subjects=2, cycles_per_pair=6, rng_seed=3))
    cycles, seen = [], {}
    for c in preprocess_pipeline(seqs).cycles:
        key = (c.subject_id, c.affect)
        if c.affect in ("happy", "sad") and seen.get(key, 0) < 4:
            cycles.append(c)
            seen[key] = seen.get(key, 0) + 1
    assert len(cycles) == 16
    params, report = train(cycles, ModelConfig(), epochs=500, rng_seed=0,
                           settings=TrainSettings(batch_size=4, steps_per_epoch=1))
    assert report.epochs[-1]["l_rec"] < 1e-2
    assert loss_rec(params, np.stack([c.tensor for c in cycles])) < 1e-2

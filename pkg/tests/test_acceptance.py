"""Acceptance criteria: one PASS/FAIL line per criterion.

Criteria 4-8 train the full autoencoder three times (default, noise-free,
and without triplet losses); expect roughly 25 minutes on one core.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import time

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from gaitdis import autodiff as ad
from gaitdis.classifiers import (MODELS, CnnConfig, affect_labels, cnn_classifier_train, cnn_init, privacy_eval,
                                 run_benchmark)
from gaitdis.cli import run_subcommand
from gaitdis.explain import (AffectPath, aggregate_global, combine_attribution,
                             explain_cross_validated, grad_cam, guided_grad_cam, joint_summaries,
                             mirror_first_layer, mirror_signals, normalize_sample, upsample_heatmap)
from gaitdis.gradcheck import run_gradient_suite
from gaitdis.mocap import JOINT_NAMES, MotionSequence, SynthConfig, mirror_permutation, synth_generate
from gaitdis.model import ModelConfig, batched, cross_reconstruct, reconstruct
from gaitdis.preprocessing import SsaParams, preprocess_known_cycle, preprocess_pipeline, ssa_smooth
from gaitdis.training import LossWeights, TrainSettings, encode_all, train

from test_autodiff import naive_conv1d
from test_preprocessing import check_invariants, rigid

SEED = 7
EPOCHS = 200
ROOT = JOINT_NAMES.index("c_hip")


@pytest.fixture
def verdict(request):
    """Print ``PASS|FAIL criterion N: detail`` on the terminal and fail the test on FAIL."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line
    return emit


def _train(cycles, weights=None):
    t = time.perf_counter()
    params, report = train(cycles, ModelConfig(), weights or LossWeights(), epochs=EPOCHS, rng_seed=SEED,
                           settings=TrainSettings())
    return params, report, time.perf_counter() - t


@pytest.fixture(scope="module")
def default_run():
    t = time.perf_counter()
    seqs, _, gen = synth_generate(SynthConfig(rng_seed=SEED))
    res = preprocess_pipeline(seqs)
    prep = time.perf_counter() - t
    params, report, train_time = _train(res.cycles)
    return dict(cycles=res.cycles, params=params, report=report, prep_time=prep, train_time=train_time)


@pytest.fixture(scope="module")
def ablation_params(default_run):
    return _train(default_run["cycles"], LossWeights(trip_s=0.0, trip_a=0.0))[0]


# --- 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_check(verdict):
    t = time.perf_counter()
    results = run_gradient_suite(50, seed=0)
    elapsed = time.perf_counter() - t
    valid = [r for r in results if not r.kink_crossed]
    worst = {}
    for r in valid:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    n_total = sum(r.name == "total_loss" for r in valid)
    ok = max(worst.values()) < 1e-4 and elapsed < 60 and n_total == 50
    name, err = max(worst.items(), key=lambda kv: kv[1])
    verdict(1, ok, f"{len(worst)} checks x 50 configs (eps 1e-5), max rel error {err:.2e} ({name}); "
                   f"{len(results) - len(valid)} kink-crossing draws redrawn; {elapsed:.1f}s")


# --- 2 -------------------------------------------------------------------------

def test_criterion_2_oracles(verdict, rng):
    conv_err = 0.0
    configs = [((45, 128), (64, 45, 7), 2, 3)] + [
        ((int(rng.integers(1, 6)), int(rng.integers(8, 40))), (int(rng.integers(1, 6)), None, int(rng.integers(1, 8))),
         int(rng.integers(1, 4)), int(rng.integers(0, 4))) for _ in range(50)]
    for xs, (c_out, _, k), stride, pad in configs:
        x = rng.normal(size=xs)
        w = rng.normal(size=(c_out, xs[0], k))
        g = ad.Graph()
        out = ad.conv1d(g.input(x), g.input(w), stride, pad).data
        conv_err = max(conv_err, float(np.max(np.abs(out - naive_conv1d(x, w, stride, pad)))))
    ssa_err = 0.0
    for length in (10, 25, 60):
        series = rng.normal(size=200)
        ssa_err = max(ssa_err, float(np.max(np.abs(ssa_smooth(series, SsaParams(length, length)) - series))))
    mse_err = 0.0
    for _ in range(20):
        a, b = rng.normal(size=(2, 3, 45, 16))
        g = ad.Graph()
        fast = float(ad.mse(g.input(a), g.input(b)).data)
        loop = 0.0
        for i in np.ndindex(a.shape):
            loop += (a[i] - b[i]) ** 2
        mse_err = max(mse_err, abs(fast - loop / a.size))
    ok = conv_err <= 1e-12 and ssa_err <= 1e-9 and mse_err <= 1e-12
    verdict(2, ok, f"conv1d vs naive {conv_err:.1e} (<=1e-12), SSA k=L {ssa_err:.1e} (<=1e-9), "
                   f"MSE vs loop {mse_err:.1e} (<=1e-12)")


# --- 3 -------------------------------------------------------------------------

def test_criterion_3_preprocessing_invariance(verdict, rng):
    t = time.perf_counter()
    seqs, _, _ = synth_generate(SynthConfig(rng_seed=SEED))
    base = preprocess_pipeline(seqs)
    moved = [MotionSequence(rigid(s.frames, rng.uniform(0, 2 * np.pi), rng.normal(size=3) * 5),
                            s.frame_rate, s.subject_id, s.affect, s.seq_id) for s in seqs]
    scaled = [MotionSequence(1.7 * s.frames, s.frame_rate, s.subject_id, s.affect, s.seq_id) for s in seqs]
    rigid_err = scale_err = 0.0
    same_cycles = True
    for variant, factor in ((moved, 1.0), (scaled, 1.7)):
        out = preprocess_pipeline(variant, mean_lengths=base.mean_lengths * factor)
        same_cycles &= [c.source for c in out.cycles] == [c.source for c in base.cycles]
        err = max(float(np.max(np.abs(a.tensor - b.tensor))) for a, b in zip(out.cycles, base.cycles))
        if factor == 1.0:
            rigid_err = err
        else:
            scale_err = err
    failures = 0
    for c in base.cycles:
        try:
            check_invariants(c, base.mean_lengths)
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - t
    ok = same_cycles and rigid_err < 1e-9 and scale_err < 1e-9 and failures == 0 and elapsed < 120
    verdict(3, ok, f"{len(base.cycles)} cycles; rigid {rigid_err:.1e}, scale {scale_err:.1e} (<1e-9); "
                   f"GaitCycle invariant failures {failures}; {elapsed:.1f}s (<120s)")


# --- 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_affect_recognition(verdict, default_run):
    t = time.perf_counter()
    reports = run_benchmark(default_run["cycles"], default_run["params"], MODELS, seed=SEED)
    elapsed = default_run["prep_time"] + default_run["train_time"] + time.perf_counter() - t
    ae, svm = reports["ae-xyz"].mean_accuracy, reports["svm-xyz"].mean_accuracy
    ok = ae >= 85 and ae >= svm and elapsed < 900
    others = ", ".join(f"{m} {r.mean_accuracy:.1f}" for m, r in reports.items())
    verdict(4, ok, f"AE-xyz {ae:.2f}% (>=85, >= SVM-xyz {svm:.2f}%); {others}; "
                   f"pipeline {elapsed / 60:.1f} min (<15)")


# --- 5 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_privacy(verdict, default_run):
    cycles = default_run["cycles"]
    reports = privacy_eval(cycles, default_run["params"], seed=SEED)
    chance = 100.0 / len({c.subject_id for c in cycles})
    raw = reports["svm-xyz"].mean_accuracy
    enc = max(reports["svm-enc"].mean_accuracy, reports["cnn-enc"].mean_accuracy)
    shuffled = reports["svm-xyz-shuffled"].mean_accuracy
    ok = raw >= 95 and enc <= 2 * chance and abs(shuffled - chance) <= 10
    verdict(5, ok, f"raw {raw:.2f}% (>=95); a-codes svm {reports['svm-enc'].mean_accuracy:.2f}% / cnn "
                   f"{reports['cnn-enc'].mean_accuracy:.2f}% (<= {2 * chance:.1f}); shuffled {shuffled:.2f}% "
                   f"(chance {chance:.1f} +- 10)")


# --- 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_cross_reconstruction_exact_target(verdict):
    seqs, _, gen = synth_generate(SynthConfig(rng_seed=SEED, noise_std=0.0))
    res = preprocess_pipeline(seqs)
    cycles = res.cycles
    params = _train(cycles)[0]
    x = np.stack([c.tensor for c in cycles])
    self_mse = float(np.mean((batched(lambda b: reconstruct(params, b), x) - x) ** 2))
    rng = np.random.default_rng(SEED)
    subj = np.array([c.subject_id for c in cycles])
    aff = np.array([c.affect for c in cycles])
    xa, xb, target = [], [], []
    for ca in cycles:
        partner = cycles[rng.choice(np.flatnonzero((subj != ca.subject_id) & (aff != ca.affect)))]
        _, start, end = ca.source
        frames = gen.clean(gen.subject_index(partner.subject_id), ca.affect)[start:end]
        target.append(preprocess_known_cycle(frames, res.mean_lengths))
        xa.append(ca.tensor)
        xb.append(partner.tensor)
    xa, xb = np.stack(xa), np.stack(xb)
    kj = np.concatenate([cross_reconstruct(params, xa[i:i + 256], xb[i:i + 256])[0]
                         for i in range(0, len(xa), 256)])
    cross_mse = float(np.mean((kj - np.stack(target)) ** 2))
    ok = cross_mse <= 2 * self_mse
    verdict(6, ok, f"MSE(x_kj, exact) {cross_mse:.5f} <= 2 x self {self_mse:.5f} "
                   f"(ratio {cross_mse / self_mse:.3f}, {len(xa)} pairs)")


# --- 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_affect_silhouette(verdict, default_run, ablation_params):
    cycles = default_run["cycles"]
    x = np.stack([c.tensor for c in cycles])
    labels = [c.affect for c in cycles]
    full = silhouette_score(encode_all(default_run["params"], x, "ea"), labels)
    ablated = silhouette_score(encode_all(ablation_params, x, "ea"), labels)
    ok = full > 0 and full > ablated
    verdict(7, ok, f"a-code affect silhouette {full:.4f} (>0) vs lambda_trip=0 ablation {ablated:.4f}")


# --- 8 -------------------------------------------------------------------------

def _mirror_harness_ok(rng):
    params = cnn_init("raw", (45, 32), CnnConfig(norm=False, channels=(8, 6)), 3)
    w = params.weights["conv0.w"]
    params.weights["conv0.w"] = 0.5 * (w + mirror_first_layer(w))
    path = AffectPath(params)
    x = rng.normal(size=(8, 45, 32))
    perm = mirror_permutation()
    worst = 0.0
    for a, b in zip(guided_grad_cam(path, x, np.arange(8) % 4), guided_grad_cam(path, mirror_signals(x), np.arange(8) % 4)):
        ja, jb = joint_summaries(normalize_sample(a.values)), joint_summaries(normalize_sample(b.values))
        diff = float(np.max(np.abs(b.values - mirror_signals(a.values))))
        scale = float(np.abs(a.values).max())
        # an all-zero map (the ReLU'd heatmap vanished) must mirror to an all-zero map
        rel = diff / scale if scale > 0 else diff
        worst = max(worst, float(np.max(np.abs(jb - ja[perm]))), rel)
    return worst


@pytest.mark.slow
def test_criterion_8_explainability(verdict, default_run, rng):
    cycles, params = default_run["cycles"], default_run["params"]
    maps, order = explain_cross_validated(cycles, params, seed=SEED)
    x = np.stack([c.tensor for c in cycles])
    shape_ok = all(m.values.shape == x.shape[1:] for m in maps) and len(maps) == len(cycles)
    report = aggregate_global(maps)
    pct_err = max(float(np.max(np.abs(report.percentages[s][report.counts[s] > 0].sum(axis=1) - 100)))
                  for s in ("all", "correct", "incorrect") if report.counts[s].any())
    root_ok = all(np.all(m.values[3 * ROOT:3 * ROOT + 3] == 0) for m in maps) \
        and np.all(report.percentages["all"][:, ROOT] == 0)
    # masking: the attribution is the guided gradient gated by the upsampled heatmap,
    # so frames where the heatmap is zero carry no attribution
    codes = encode_all(params, x, "ea")
    path = AffectPath(cnn_classifier_train(codes, affect_labels(cycles), CnnConfig(), SEED), params)
    sub = x[:64]
    pred = path.predict(sub)
    cam = grad_cam(path, sub, pred)
    g, xin, _, logits = path.build(sub)
    seed = np.zeros_like(logits.data)
    seed[np.arange(len(sub)), pred] = 1.0
    guided = ad.guided_backprop_gradients(g, logits, seed)[xin]
    got = np.stack([m.values for m in guided_grad_cam(path, sub, pred)])
    fine = upsample_heatmap(cam, x.shape[-1])
    mask_ok = np.array_equal(got, combine_attribution(guided, cam))
    mask_ok &= bool(np.all(got.transpose(0, 2, 1)[fine == 0] == 0))
    forced = cam.copy()
    forced[:, 5:10] = 0.0  # a masked span of the coarse heatmap
    forced_zero = upsample_heatmap(forced, x.shape[-1]) == 0
    masked = combine_attribution(guided, forced)
    mask_ok &= bool(forced_zero.any() and np.all(masked.transpose(0, 2, 1)[forced_zero] == 0))
    natural_zero = int((fine == 0).sum())
    mirror_err = _mirror_harness_ok(rng)
    ok = shape_ok and pct_err <= 1e-6 and root_ok and mask_ok and mirror_err <= 1e-9
    verdict(8, ok, f"shape {'ok' if shape_ok else 'BAD'}; percentage sum error {pct_err:.1e} (<=1e-6); "
                   f"root {'exactly 0' if root_ok else 'NONZERO'}; masking {'ok' if mask_ok else 'BAD'} "
                   f"({natural_zero} naturally zero frames); mirror error {mirror_err:.1e}")


# --- 9 -------------------------------------------------------------------------

ALL_CONFIG = {
    "synth": {"n_subjects": 3, "cycles_per_pair": 8},
    "train": {"epochs": 3},
    "eval": {"cnn": {"epochs": 3, "latent_epochs": 20}},
}


def test_criterion_9_all_is_reproducible(verdict, tmp_path, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(ALL_CONFIG))
    codes = []
    for run, threads in (("r1", "1"), ("r2", "3")):
        monkeypatch.setenv("GAITDIS_THREADS", threads)
        codes.append(run_subcommand(["all", "--config", str(cfg), "--seed", str(SEED), "--out", str(tmp_path / run)]))
    files = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*.csv"))
    other = sorted(p.relative_to(tmp_path / "r2") for p in (tmp_path / "r2").rglob("*.csv"))
    differing = [str(f) for f in files if f not in other
                 or (tmp_path / "r1" / f).read_bytes() != (tmp_path / "r2" / f).read_bytes()]
    ok = codes == [0, 0] and files == other and not differing and len(files) > 0
    verdict(9, ok, f"`all` twice (GAITDIS_THREADS 1 vs 3): {len(files)} CSVs, "
                   f"{len(differing)} differ; exit codes {codes}")

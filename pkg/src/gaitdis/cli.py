"""Command-line entry point: synth, preprocess, train, eval, privacy, explain, report, all.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print one
line ``error: <kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .classifiers import (MODELS, PRIVACY_MODELS, CnnConfig, EvalSettings, affect_labels,
                          cnn_classifier_train, load_classifier, privacy_eval, run_benchmark,
                          save_classifier, subject_labels)
from .explain import (AffectPath, ExplainSettings, aggregate_global, attribute, emit_attribution_report,
                      explain_cross_validated, latent_pca, write_attribution_maps)
from .mocap import AFFECTS, DatasetManifest, SynthConfig, synth_generate, write_dataset
from .model import ModelConfig, ModelParams
from .preprocessing import SsaParams, load_cycles, preprocess_pipeline, save_cycles
from .training import LossWeights, TrainSettings, encode_all, train

log = logging.getLogger("gaitdis")

EFFECTIVE_CONFIG = "effective_config.json"

# Published per-class accuracies (%, mean and std over folds) on the external
# 30-subject motion-capture dataset; printed as context only.
PUBLISHED_ACCURACY = {
    "KNN-man": [(79.71, 3.58), (68.42, 5.52), (75.41, 4.63), (88.17, 2.35)],
    "SVM-man": [(80.66, 3.61), (68.89, 5.59), (74.96, 6.38), (87.1, 1.83)],
    "SVM-xyz": [(87.03, 3.48), (69.62, 3.36), (76.2, 3.36), (85.19, 4.16)],
    "CNN-xyz": [(88.4, 6.11), (68.77, 9.24), (83.62, 3.97), (87.74, 3.55)],
    "AE-xyz": [(93.82, 2.34), (86.17, 3.99), (90.25, 2.89), (96.82, 2.06)],
}


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class PreprocessSettings:
    window: Optional[int] = None  # SSA window; None = frame_rate / 3
    components: int = 2

    def ssa(self) -> Optional[SsaParams]:
        """Fixed SSA parameters, or ``None`` to derive the window per sequence frame rate."""
        if self.window is None:
            return None
        params = SsaParams(self.window, self.components)
        params.validate()
        return params


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    models: List[str] = field(default_factory=lambda: list(MODELS))
    explain: ExplainSettings = field(default_factory=ExplainSettings)

    SECTIONS = ("synth", "preprocess", "model", "loss", "train", "eval", "explain")

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "synth" in d:
            cfg.synth = SynthConfig.from_json(d["synth"])
        if "preprocess" in d:
            extra = set(d["preprocess"]) - set(PreprocessSettings.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown preprocess keys: {sorted(extra)}")
            cfg.preprocess = PreprocessSettings(**d["preprocess"])
        if "model" in d:
            cfg.model = ModelConfig.from_json(d["model"])
        if "loss" in d:
            cfg.loss = LossWeights.from_json(d["loss"])
        if "train" in d:
            cfg.train = TrainSettings.from_json(d["train"])
        if "eval" in d:
            cfg.eval = EvalSettings.from_json(d["eval"])
            if "models" in d["eval"]:
                cfg.models = parse_models(d["eval"]["models"])
        if "explain" in d:
            cfg.explain = ExplainSettings.from_json(d["explain"])
        cfg.synth.validate()
        cfg.model.validate()
        cfg.loss.validate()
        return cfg

    def to_json(self) -> dict:
        ev = self.eval.to_json()
        ev["models"] = list(self.models)
        train = asdict(self.train)
        train["betas"] = list(self.train.betas)
        return {"synth": self.synth.to_json(), "preprocess": asdict(self.preprocess),
                "model": self.model.to_json(), "loss": asdict(self.loss), "train": train,
                "eval": ev, "explain": asdict(self.explain)}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / EFFECTIVE_CONFIG
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def parse_models(spec) -> List[str]:
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip().lower() for n in names if n.strip()]
    bad = [n for n in names if n not in MODELS]
    if bad or not names:
        raise ValueError(f"unknown models {bad}; choose from {','.join(MODELS)}")
    return names


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: file not found: {path}")
    try:
        return RunConfig.from_json(json.loads(p.read_text()))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from None


def _existing(path: str, flag: str, kind: str = "path") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file() if kind == "file" else p.exists()
    if not ok:
        raise UsageError(f"{flag}: {kind} not found: {path}")
    return p


def _cycles(path: str):
    return load_cycles(_existing(path, "--cycles", "dir"))


def _model_config_for(ckpt: Path, fallback: ModelConfig) -> ModelConfig:
    side = ckpt.with_suffix(ckpt.suffix + ".json")
    if side.is_file():
        return ModelConfig.from_json(json.loads(side.read_text())["model"])
    return fallback


def _load_ae(path: str, cfg: RunConfig) -> ModelParams:
    ckpt = _existing(path, "--ckpt", "file")
    return ModelParams.load(ckpt, _model_config_for(ckpt, cfg.model))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> None:
    if args.seed is not None:
        cfg.synth.rng_seed = args.seed
    out = Path(args.out)
    seqs, manifest, _ = synth_generate(cfg.synth)
    write_dataset(seqs, manifest, out)
    cfg.write(out)
    log.info("wrote %d sequences to %s", len(seqs), out)


def cmd_preprocess(args, cfg: RunConfig) -> None:
    manifest = DatasetManifest.load(_existing(args.manifest, "--manifest", "file"))
    if args.ssa_window is not None:
        cfg.preprocess.window = args.ssa_window
    if args.ssa_components is not None:
        cfg.preprocess.components = args.ssa_components
    res = preprocess_pipeline(manifest, cfg.preprocess.ssa())
    out = Path(args.out)
    save_cycles(res.cycles, out, res.mean_lengths, manifest.skeleton)
    cfg.write(out)
    log.info("wrote %d cycles to %s", len(res.cycles), out)


def cmd_train(args, cfg: RunConfig) -> None:
    cycles = _cycles(args.cycles)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params, report = train(cycles, cfg.model, cfg.loss, settings=cfg.train, progress=True)
    params.save(out)
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps({"model": cfg.model.to_json()}, indent=2, sort_keys=True) + "\n")
    report.write_csv(out.parent / "train_report.csv")
    cfg.write(out.parent)
    log.info("trained %d epochs in %.1fs", len(report.epochs), report.wall_clock)


def cmd_eval(args, cfg: RunConfig) -> None:
    cycles = _cycles(args.cycles)
    models = parse_models(args.models) if args.models else cfg.models
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.models = models
    params = _load_ae(args.ckpt, cfg) if "ae-xyz" in models else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_benchmark(cycles, params, models, cfg.train.seed, cfg.eval)
    for name, rep in reports.items():
        rep.write_csv(out / f"eval_{name}.csv")
        rep.write_confusion_csv(out / f"confusion_{name}.csv")
    if params is not None:
        x = np.stack([c.tensor for c in cycles])
        codes = encode_all(params, x, "ea")
        clf = cnn_classifier_train(codes, affect_labels(cycles), cfg.eval.cnn, cfg.train.seed)
        save_classifier(clf, out / "ae_xyz_classifier.gdae")
        proj = latent_pca(codes)
        _write_rows(out / "latent_pca.csv", ["index", "subject", "affect", "pc1", "pc2"],
                    [[i, c.subject_id, c.affect, repr(float(p[0])), repr(float(p[1]))]
                     for i, (c, p) in enumerate(zip(cycles, proj))])
    cfg.write(out)


def cmd_privacy(args, cfg: RunConfig) -> None:
    cycles = _cycles(args.cycles)
    if args.seed is not None:
        cfg.train.seed = args.seed
    params = _load_ae(args.ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = privacy_eval(cycles, params, cfg.train.seed, cfg.eval)
    n_subjects = len(subject_labels(cycles)[1])
    chance = 100.0 / n_subjects
    _write_rows(out / "privacy.csv", ["model", "input", "mean_acc", "std_acc", "chance"],
                [[name, "a-codes" if name.endswith("-enc") else "raw", f"{rep.mean_accuracy:.6f}",
                  f"{rep.std_accuracy:.6f}", f"{chance:.6f}"] for name, rep in reports.items()])
    for name, rep in reports.items():
        rep.write_csv(out / f"privacy_{name}.csv")
    from .plots import accuracy_bars
    accuracy_bars({k: r.mean_accuracy for k, r in reports.items()},
                  {k: r.std_accuracy for k, r in reports.items()}, out / "privacy.svg",
                  "subject identification", reference=chance)
    cfg.write(out)


def cmd_explain(args, cfg: RunConfig) -> None:
    cycles = _cycles(args.cycles)
    if args.seed is not None:
        cfg.train.seed = args.seed
    params = _load_ae(args.ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.per_sample:
        cfg.explain.per_sample = True
    if args.classifier:
        clf = load_classifier(_existing(args.classifier, "--classifier", "file"))
        x = np.stack([c.tensor for c in cycles])
        maps = attribute(AffectPath(clf, params), x, affect_labels(cycles), cfg.explain.batch)
        index = np.arange(len(cycles))
    else:
        maps, index = explain_cross_validated(cycles, params, cfg.train.seed, cfg.explain, cfg.eval.cnn)
    report = aggregate_global(maps, AFFECTS)
    emit_attribution_report(report, out)
    if cfg.explain.per_sample:
        write_attribution_maps(maps, index, out / "attributions.npz")
    cfg.write(out)


def _read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, cfg: Optional[RunConfig] = None) -> None:
    run = _existing(args.run, "--run", "dir")
    write_report(run)


def write_report(run: Path) -> Path:
    lines = ["# Run summary", ""]
    eval_dir, priv_dir, expl_dir = run / "eval", run / "privacy", run / "explain"
    lines += ["## Affect recognition (cross-validated, per-class accuracy = recall, mean ± std %)", ""]
    header = "| model | " + " | ".join(AFFECTS) + " | macro |"
    lines += [header, "|" + "---|" * (len(AFFECTS) + 2)]
    found = False
    for name in MODELS:
        path = eval_dir / f"eval_{name}.csv"
        if not path.is_file():
            lines.append(f"| {name} | " + " | ".join("missing" for _ in AFFECTS) + " | missing |")
            continue
        found = True
        rows = _read_csv(path)
        mean = {r["class"]: float(r["acc"]) for r in rows if r["fold"] == "mean"}
        std = {r["class"]: float(r["acc"]) for r in rows if r["fold"] == "std"}
        cells = [f"{mean[c]:.2f} ± {std[c]:.2f}" for c in list(AFFECTS) + ["macro"]]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    if not found:
        lines += ["", "_Evaluation outputs missing: run `eval` first._"]
    lines += ["", "Published reference values (external 30-subject dataset; not reproduced here):", "",
              header.replace(" | macro |", " |"), "|" + "---|" * (len(AFFECTS) + 1)]
    for name, vals in PUBLISHED_ACCURACY.items():
        lines.append(f"| {name} | " + " | ".join(f"{m:.2f} ± {s:.2f}" for m, s in vals) + " |")
    lines += ["", "## Subject identification (privacy)", ""]
    ppath = priv_dir / "privacy.csv"
    if ppath.is_file():
        rows = _read_csv(ppath)
        lines += ["| model | input | accuracy % | chance % |", "|---|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['model']} | {r['input']} | {float(r['mean_acc']):.2f} ± "
                         f"{float(r['std_acc']):.2f} | {float(r['chance']):.2f} |")
        lines += ["", "![privacy](privacy/privacy.svg)"]
    else:
        lines.append("_Privacy outputs missing: run `privacy` first._")
    lines += ["", "## Joint contributions (% of attribution, all test samples)", ""]
    jpath = expl_dir / "joint_contributions.csv"
    if jpath.is_file():
        rows = _read_csv(jpath)
        joints = list(dict.fromkeys(r["joint"] for r in rows))
        lines += ["| class | " + " | ".join(joints) + " |", "|" + "---|" * (len(joints) + 1)]
        for cls in AFFECTS:
            vals = {r["joint"]: float(r["pct"]) for r in rows if r["class"] == cls}
            lines.append(f"| {cls} | " + " | ".join(f"{vals[j]:.1f}" for j in joints) + " |")
        lines += ["", "![joints](explain/joint_contributions.svg)", "",
                  "![curves](explain/bodypart_curves.svg)"]
    else:
        lines.append("_Attribution outputs missing: run `explain` first._")
    tpath = run / "model" / "train_report.csv"
    if tpath.is_file():
        rows = _read_csv(tpath)
        last = rows[-1]
        lines += ["", "## Training", "", f"{len(rows)} epochs; final total loss {float(last['total']):.5f} "
                  f"(rec {float(last['l_rec']):.5f}, cross {float(last['l_cross']):.5f})."]
    out = run / "summary.md"
    out.write_text("\n".join(lines) + "\n")
    return out


def cmd_all(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    if args.seed is not None:
        cfg.synth.rng_seed = args.seed
        cfg.train.seed = args.seed
    ns = argparse.Namespace
    cmd_synth(ns(out=str(out / "data"), seed=None), cfg)
    cmd_preprocess(ns(manifest=str(out / "data" / "manifest.json"), ssa_window=None, ssa_components=None,
                      out=str(out / "cycles")), cfg)
    cmd_train(ns(cycles=str(out / "cycles"), epochs=None, seed=None, out=str(out / "model" / "ae.gdae")), cfg)
    ckpt = str(out / "model" / "ae.gdae")
    cmd_eval(ns(cycles=str(out / "cycles"), ckpt=ckpt, models=None, seed=None, out=str(out / "eval")), cfg)
    cmd_privacy(ns(cycles=str(out / "cycles"), ckpt=ckpt, seed=None, out=str(out / "privacy")), cfg)
    cmd_explain(ns(cycles=str(out / "cycles"), ckpt=ckpt, classifier=None, per_sample=False, seed=None,
                   out=str(out / "explain")), cfg)
    cfg.write(out)
    write_report(out)


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitdis", description="Affect/identity disentanglement for gait cycles.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="RunConfig JSON (unknown keys are rejected)")
        return sp

    sp = add("synth", "generate the synthetic motion dataset")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp = add("preprocess", "segment and normalize sequences into gait cycles")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ssa-window", type=int)
    sp.add_argument("--ssa-components", type=int)
    sp.add_argument("--out", required=True)
    sp = add("train", "train the disentangling autoencoder")
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp = add("eval", "5-fold affect recognition benchmark")
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--models", help=f"comma list from {','.join(MODELS)}")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp = add("privacy", "subject identification from raw cycles and affect codes")
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp = add("explain", "guided Grad-CAM joint contributions")
    sp.add_argument("--cycles", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--classifier", help="saved AE-xyz classifier; default: per-fold classifiers")
    sp.add_argument("--per-sample", action="store_true")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("--run", required=True)
    sp = add("all", "run the whole pipeline on one seed")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "privacy": cmd_privacy, "explain": cmd_explain, "report": cmd_report, "all": cmd_all}


def run_subcommand(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(getattr(args, "config", None))
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level contract: one line, exit 1
        log.debug("failure", exc_info=True)
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_subcommand())

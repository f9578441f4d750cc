"""Command-line front end: gen-data, pretrain, train, eval, trace, ablate."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .domains import (
    CLASS_NAMES,
    EVAL_SCENE,
    N_CLASSES,
    MetricsRecord,
    confusion_matrix,
    derive_seed,
    evaluate,
    format_metrics,
    gen_data,
    gen_scene,
    pretrain_images,
    read_pgm,
    read_ppm,
    source_spec,
    target_spec,
)
from .nets import EncoderDecoder, PretrainConfig, pretrain_autoencoder
from .training import Checkpoint, TrainConfig, probe_sample, train

ROWS = ("baseline", "stylization", "noise", "ash")
ROW_LABELS = {
    "baseline": "baseline",
    "stylization": "+stylization",
    "noise": "+noise",
    "ash": "+ASH",
    "ash_uniform": "ASH (uniform semantics)",
}
EVAL_N = 100
EVAL_SEED = 1


def data_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get("ASH_LAB_DATA_DIR") or "ash_data")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    d = json.loads(Path(path).read_text())
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return d


# -- ablation -------------------------------------------------------------

def _cell(job: tuple) -> tuple[str, int, list[float], list[float], float, float]:
    row, seed, iterations, overrides, encdec_path, out_dir, eval_n, snapshot_every, severity = job
    encdec = EncoderDecoder.load(encdec_path) if row != "baseline" else None
    kw = dict(overrides)
    kw.update(iterations=iterations, seed=seed)
    if row.startswith("ash"):
        kw.setdefault("snapshot_every", snapshot_every)
    cfg = TrainConfig.for_row(row, **kw)
    t0 = time.perf_counter()
    res = train(cfg, encdec, out_dir=Path(out_dir) / f"{row}_seed{seed}")
    dt = time.perf_counter() - t0
    tgt = evaluate(res.players.segnet, target_spec(severity), eval_n, EVAL_SEED)
    src = evaluate(res.players.segnet, source_spec(), eval_n, EVAL_SEED)
    return row, seed, tgt.iou.tolist(), tgt.confusion.ravel().tolist(), src.miou, dt


def run_ablation(encdec_path, out_dir, seeds=(0, 1, 2), iterations: int = 5000, *, uniform: bool = False,
                 overrides: dict | None = None, eval_n: int = EVAL_N, snapshot_every: int = 500,
                 severity: float = 1.0, jobs: int = 1, log=None) -> dict:
    """Train every (row, seed) cell and evaluate on the target domain.

    Returns ``{row: {"target": [MetricsRecord per seed], "source_miou": [...], "seconds": [...]}}``,
    where seconds is the training wall time of each cell.
    Each cell writes to its own sub-directory, so cells can run in parallel.
    """
    rows = list(ROWS) + (["ash_uniform"] if uniform else [])
    grid = [(r, s, iterations, overrides or {}, str(encdec_path), str(out_dir), eval_n, snapshot_every, severity)
            for r in rows for s in seeds]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_cell, grid))
    else:
        results = []
        for job in grid:
            results.append(_cell(job))
            if log:
                r = results[-1]
                log(f"{r[0]} seed {r[1]}: target mIoU {np.nanmean(r[2]):.4f} source mIoU {r[4]:.4f}")
    out: dict = {r: {"target": [], "source_miou": [], "seconds": []} for r in rows}
    for row, _seed, _iou, cm, src, dt in results:
        rec = MetricsRecord.from_confusion(np.array(cm).reshape(N_CLASSES, N_CLASSES))
        out[row]["target"].append(rec)
        out[row]["source_miou"].append(src)
        out[row]["seconds"].append(dt)
    return out


def ablation_csv(summary: dict) -> str:
    """Median over seeds of per-class target IoU and mIoU, one line per row."""
    lines = ["config," + ",".join(CLASS_NAMES) + ",mIoU"]
    for row, d in summary.items():
        ious = np.array([r.iou for r in d["target"]])
        mious = [r.miou for r in d["target"]]
        with np.errstate(all="ignore"):
            med = np.nanmedian(ious, axis=0) if len(ious) else np.full(N_CLASSES, np.nan)
        cells = ["" if np.isnan(v) else f"{v:.6f}" for v in med]
        lines.append(",".join([row] + cells + [f"{float(np.median(mious)):.6f}"]))
    return "\n".join(lines) + "\n"


def median_miou(summary: dict, row: str) -> float:
    return float(np.median([r.miou for r in summary[row]["target"]]))


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(a) -> int:
    out = gen_data(data_dir(a.out), a.n_source, a.n_target, a.n_styles, a.seed, a.severity)
    print(f"wrote {out}")
    return 0


def cmd_pretrain(a) -> int:
    cfg = {**load_config(a.config), **{k: v for k, v in (("seed", a.seed),
           ("recon_iterations", a.recon_iterations), ("adain_iterations", a.adain_iterations)) if v is not None}}
    pc = PretrainConfig(**cfg)
    ed = pretrain_autoencoder(pretrain_images(a.n_images, pc.seed), pc)
    digest = ed.save(a.out)
    print(f"saved {a.out} sha256={digest}")
    return 0


def _train_config(a) -> TrainConfig:
    cfg = load_config(a.config)
    for key in ("seed", "iterations", "snapshot_every", "trace_every"):
        v = getattr(a, key, None)
        if v is not None:
            cfg[key] = v
    if a.uniform_semantics:
        cfg["uniform_semantics"] = True
    if a.row:
        return TrainConfig.for_row(a.row, **cfg)
    return TrainConfig.from_dict(cfg)


def cmd_train(a) -> int:
    cfg = _train_config(a)
    encdec = EncoderDecoder.load(a.encdec) if cfg.stylization else None
    resume = Checkpoint.load(a.resume) if a.resume else None
    res = train(cfg, encdec, out_dir=a.out, resume=resume)
    print(f"iterations {res.checkpoint.iteration} digest {res.checkpoint.digest()}")
    print(f"metrics {res.metrics_csv}\ncheckpoint {res.checkpoint_path}")
    return 0


class _Oracle:
    """Predicts the ground truth it was handed; a sanity check for the metric path."""

    def __init__(self, labels):
        self.labels = labels

    def predict(self, image):
        return self.labels


def _eval_from_files(segnet, root: Path, domain: str) -> MetricsRecord:
    index = json.loads((root / "index.json").read_text())
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    items = [it for it in index["items"] if it["domain"] == domain]
    if not items:
        raise ValueError(f"{root}: no '{domain}' items in index.json")
    for it in items:
        labels = read_pgm(root / it["labels"])
        model = segnet if segnet is not None else _Oracle(labels)
        cm += confusion_matrix(model.predict(read_ppm(root / it["image"])), labels)
    return MetricsRecord.from_confusion(cm)


def cmd_eval(a) -> int:
    segnet = None if a.oracle else Checkpoint.load(a.checkpoint).players.segnet
    root = data_dir(a.data_dir)
    for domain in ("source", "target") if a.domain == "both" else (a.domain,):
        if (root / "index.json").exists():
            rec = _eval_from_files(segnet, root, domain)
        else:
            spec = source_spec() if domain == "source" else target_spec(a.severity)
            if segnet is None:
                cm = sum(confusion_matrix(s.labels, s.labels) for s in
                         (gen_scene(spec, derive_seed(a.seed, EVAL_SCENE, i)) for i in range(a.n)))
                rec = MetricsRecord.from_confusion(cm)
            else:
                rec = evaluate(segnet, spec, a.n, a.seed)
        print(format_metrics(rec, domain))
    return 0


def _checkpoint_paths(items: list[str]) -> list[Path]:
    paths: list[Path] = []
    for it in items:
        p = Path(it)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.ckpt")))
        else:
            paths.append(p)
    if not paths:
        raise ValueError("no checkpoints given")
    return paths


def cmd_trace(a) -> int:
    image = probe_sample(a.seed).image
    out = analysis.trace_coeffs(_checkpoint_paths(a.checkpoints), image, a.every, a.out)
    print(f"wrote {out}")
    if a.plots:
        for p in analysis.write_plots(Path(a.out).parent, a.metrics, out):
            print(f"wrote {p}")
    return 0


def cmd_ablate(a) -> int:
    overrides = load_config(a.config)
    seeds = list(range(a.seed, a.seed + a.seeds))
    out = Path(a.out)
    summary = run_ablation(a.encdec, out, seeds, a.iterations, uniform=a.uniform_semantics, overrides=overrides,
                           eval_n=a.eval_n, severity=a.severity, jobs=a.jobs,
                           log=lambda m: print(m, file=sys.stderr))
    text = ablation_csv(summary)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ash-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--config", help="JSON file of key/value settings")
        sp.add_argument("--seed", type=int, default=seed_default)
        return sp

    g = common(sub.add_parser("gen-data", help="write the synthetic source/target/style sets"))
    g.add_argument("--out", help="output directory (default $ASH_LAB_DATA_DIR or ./ash_data)")
    g.add_argument("--n-source", type=int, default=200)
    g.add_argument("--n-target", type=int, default=EVAL_N)
    g.add_argument("--n-styles", type=int, default=200)
    g.add_argument("--severity", type=float, default=1.0)
    g.set_defaults(fn=cmd_gen_data)

    g = common(sub.add_parser("pretrain", help="fit and freeze the stylization encoder/decoder"), None)
    g.add_argument("--out", default="encdec.ckpt")
    g.add_argument("--n-images", type=int, default=1000)
    g.add_argument("--recon-iterations", type=int)
    g.add_argument("--adain-iterations", type=int)
    g.set_defaults(fn=cmd_pretrain)

    g = common(sub.add_parser("train", help="adversarial training with hallucination"), None)
    g.add_argument("--encdec", default="encdec.ckpt")
    g.add_argument("--out", default="run")
    g.add_argument("--row", choices=list(ROW_LABELS), help="ablation row preset")
    g.add_argument("--iterations", type=int)
    g.add_argument("--uniform-semantics", action="store_true")
    g.add_argument("--snapshot-every", type=int)
    g.add_argument("--trace-every", type=int)
    g.add_argument("--resume", help="checkpoint to continue from")
    g.set_defaults(fn=cmd_train)

    g = common(sub.add_parser("eval", help="per-class IoU and mIoU"), EVAL_SEED)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    g.add_argument("--domain", choices=("source", "target", "both"), default="target")
    g.add_argument("--data-dir", help="evaluate on files written by gen-data")
    g.add_argument("--n", type=int, default=EVAL_N)
    g.add_argument("--severity", type=float, default=1.0)
    g.set_defaults(fn=cmd_eval)

    g = common(sub.add_parser("trace", help="per-class coefficient contributions over checkpoints"))
    g.add_argument("checkpoints", nargs="+", help="checkpoint files or directories")
    g.add_argument("--every", type=int, default=1)
    g.add_argument("--out", default="coeff_trace.csv")
    g.add_argument("--plots", action="store_true", help="also write SVG charts next to the CSV")
    g.add_argument("--metrics", help="metrics.csv to plot alongside")
    g.set_defaults(fn=cmd_trace)

    g = common(sub.add_parser("ablate", help="baseline / +stylization / +noise / +ASH over several seeds"))
    g.add_argument("--encdec", default="encdec.ckpt")
    g.add_argument("--out", default="ablation")
    g.add_argument("--seeds", type=int, default=3)
    g.add_argument("--iterations", type=int, default=5000)
    g.add_argument("--uniform-semantics", action="store_true", help="add the uniform-semantics row")
    g.add_argument("--eval-n", type=int, default=EVAL_N)
    g.add_argument("--severity", type=float, default=1.0)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return a.fn(a)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001 - report and exit non-zero
        print(f"ash-lab {a.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

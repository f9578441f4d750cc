"""Three-player training: hallucination module, segmenter and discriminator."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .domains import (
    NOISE, PROBE, TRAIN_SCENE, TRAIN_STYLE, DomainSpec, derive_seed, gen_scene, gen_style, source_spec,
)
from .hallucination import DEFAULT_EPS, HINGE_MARGIN, AshNet, ash_loss, hallucinate
from .nets import Discriminator, EncoderDecoder, Module, SegNet, load_arrays, prefixed, save_arrays, unprefixed
from .optim import Adam, SGDMomentum
from .tensor import Tensor

log = logging.getLogger(__name__)

SCORE_EPS = 1e-7
PROB_EPS = 1e-9
METRICS_HEADER = "iteration,seg_loss,adv_loss,ash_loss,disc_loss"
LOSS_KEYS = ("seg_loss", "adv_loss", "ash_loss", "disc_loss")


class TrainingDivergence(FloatingPointError):
    pass


ASH_ADV_TERMS = ("bce", "fool")


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_seg: float = 1.0e-2
    lr_disc: float = 1.0e-4
    lr_ash: float = 2.5e-4
    momentum: float = 0.9
    eps_smooth: float = DEFAULT_EPS
    hinge_margin: float = HINGE_MARGIN
    lambda_adv: float = 0.1
    seg_stylized: bool = False  # add cross-entropy on the stylized image to the fool term
    ash_adv: str = "bce"  # adversarial term in L_ASH: "bce" (D's loss) or "fool" (segmenter's loss on stylized)
    seed: int = 0
    batch_size: int = 1
    stylization: bool = True
    noise: bool = True
    ash: bool = True
    uniform_semantics: bool = False
    log_every: int = 50
    snapshot_every: int = 0
    trace_every: int = 0

    # fields that do not change the trajectory are left out of the digest
    _NON_TRAJECTORY = ("iterations", "log_every", "snapshot_every", "trace_every")

    def __post_init__(self):
        for name in ("lr_seg", "lr_disc", "lr_ash"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.ash and not self.noise or self.noise and not self.stylization:
            raise ValueError("ablation flags must satisfy ash => noise => stylization")
        if self.ash_adv not in ASH_ADV_TERMS:
            raise ValueError(f"ash_adv must be one of {ASH_ADV_TERMS}, got {self.ash_adv!r}")
        if self.uniform_semantics and not self.ash:
            raise ValueError("uniform_semantics requires ash")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_row(cls, row: str, **kw) -> TrainConfig:
        """Ablation rows: baseline, stylization, noise, ash, ash_uniform."""
        flags = {
            "baseline": dict(stylization=False, noise=False, ash=False),
            "stylization": dict(stylization=True, noise=False, ash=False),
            "noise": dict(stylization=True, noise=True, ash=False),
            "ash": dict(stylization=True, noise=True, ash=True),
            "ash_uniform": dict(stylization=True, noise=True, ash=True, uniform_semantics=True),
        }[row]
        return cls(**{**flags, **kw})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._NON_TRAJECTORY}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- losses ---------------------------------------------------------------

def seg_loss(prob: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy over non-ignored pixels."""
    labels = np.asarray(labels)
    valid = labels != 255
    n = int(valid.sum())
    if n == 0:
        raise ValueError("seg_loss: every pixel is ignored")
    picked = T.take_channels(prob, np.where(valid, labels, 0))
    nll = -T.log(T.clip(picked, PROB_EPS, 1.0 - PROB_EPS))
    return (nll * valid.astype(np.float64)).sum() * (1.0 / n)


def _bce_terms(scores: Tensor, target_one: bool) -> Tensor:
    s = T.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    return -T.log(s).mean() if target_one else -T.log(1.0 - s).mean()


def adv_loss_from_scores(d_src: Tensor, d_sty: Tensor) -> Tensor:
    return _bce_terms(d_src, True) + _bce_terms(d_sty, False)


def adv_loss(disc: Discriminator, prob_src: Tensor, prob_stylized: Tensor) -> Tensor:
    """-E[log D(src)] - E[log(1 - D(stylized))], averaged over the score map."""
    return adv_loss_from_scores(disc(prob_src), disc(prob_stylized))


def fool_loss(d_sty: Tensor) -> Tensor:
    """Non-saturating objective for the segmenter on stylized inputs."""
    return _bce_terms(d_sty, True)


def ash_adv_term(h, segnet, disc, kind: str = "bce") -> Tensor:
    """The adversarial quantity the hallucination module maximizes.

    "fool": the segmenter's adversarial loss on the stylized image, so ASH
    works against G. "bce": the discriminator's two-term loss, which ASH
    can only raise by making stylized outputs look like source ones.
    """
    d_sty = disc(segnet(h.x_stylized))
    if kind == "fool":
        return fool_loss(d_sty)
    if kind == "bce":
        return adv_loss_from_scores(disc(h.prob_src), d_sty)
    raise ValueError(f"unknown adversarial term {kind!r}")


# -- state ----------------------------------------------------------------

@contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradient flow into the given modules' parameters."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters().values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


@dataclass
class Players:
    segnet: SegNet
    disc: Discriminator
    ash: AshNet

    @classmethod
    def init(cls, seed: int) -> Players:
        rng = np.random.default_rng(derive_seed(seed, 0))
        return cls(SegNet(rng), Discriminator(rng), AshNet(rng))

    def modules(self) -> dict[str, Module]:
        return {"segnet": self.segnet, "disc": self.disc, "ash": self.ash}


@dataclass
class Checkpoint:
    players: Players
    iteration: int
    config: TrainConfig
    optim: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    history: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.players.modules().items():
            out.update(prefixed(name, m.state_dict()))
        for name, st in self.optim.items():
            out.update(prefixed(f"optim.{name}", st))
        out.update(prefixed("history", self.history))
        return out

    def save(self, path) -> str:
        meta = {
            "kind": "train",
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
        }
        return save_arrays(path, self.arrays(), meta)

    def digest(self) -> str:
        return hashlib.sha256(
            "".join(m.digest() for m in self.players.modules().values()).encode()
        ).hexdigest()

    @classmethod
    def load(cls, path) -> Checkpoint:
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "train":
            raise ValueError(f"{path}: not a training checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        players = Players.init(config.seed)
        for name, m in players.modules().items():
            m.load_state_dict(unprefixed(name, arrays))
        optim = {}
        for name in ("seg", "disc", "ash"):
            st = unprefixed(f"optim.{name}", arrays)
            if st:
                optim[name] = st
        history = unprefixed("history", arrays)
        return cls(players, int(meta["iteration"]), config, optim, history)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: dict[str, np.ndarray]
    metrics_csv: Path | None = None
    checkpoint_path: Path | None = None
    trace_csv: Path | None = None
    snapshots: list[Path] = field(default_factory=list)

    @property
    def players(self) -> Players:
        return self.checkpoint.players


def format_metrics_csv(history: dict[str, np.ndarray], log_every: int, active: dict[str, bool]) -> str:
    n = len(history["seg_loss"])
    lines = [METRICS_HEADER]
    for end in range(log_every, n + 1, log_every):
        cells = [str(end)]
        for k in LOSS_KEYS:
            cells.append(f"{float(np.mean(history[k][end - log_every:end])):.9f}" if active[k] else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def probe_sample(seed: int, spec: DomainSpec | None = None):
    return gen_scene(spec or source_spec(), derive_seed(seed, PROBE))


# -- main loop ------------------------------------------------------------

def train(
    config: TrainConfig,
    encdec: EncoderDecoder | None,
    *,
    source: DomainSpec | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Three-player training loop; returns the final checkpoint and history.

    Per iteration: hallucination update, segmenter update on source,
    segmenter update on the stylized image (fooling the discriminator),
    discriminator update. Every image is drawn from an iteration-indexed
    seed, so a resumed run follows the uninterrupted trajectory.
    """
    source = source or source_spec()
    if config.stylization:
        if encdec is None:
            raise ValueError("stylization requires a pretrained encoder/decoder")
        if not encdec.frozen:
            raise ValueError("encoder/decoder must be frozen before training")

    if resume is not None:
        if resume.config.digest() != config.digest():
            raise ValueError("checkpoint was produced by a different configuration")
        players, start = resume.players, resume.iteration
        history = {k: list(resume.history.get(k, [])) for k in LOSS_KEYS}
    else:
        players, start = Players.init(config.seed), 0
        history = {k: [] for k in LOSS_KEYS}
    segnet, disc, ash = players.segnet, players.disc, players.ash

    opt_seg = SGDMomentum(segnet, config.lr_seg, config.momentum)
    opt_ash = SGDMomentum(ash, config.lr_ash, config.momentum)
    opt_disc = Adam(disc, config.lr_disc, beta1=config.momentum)
    optims = {"seg": opt_seg, "disc": opt_disc, "ash": opt_ash}
    if resume is not None:
        for name, st in resume.optim.items():
            optims[name].load_state_arrays(st)

    out = Path(out_dir) if out_dir is not None else None
    snapshots: list[Path] = []
    trace_rows: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    probe = probe_sample(config.seed, source) if config.trace_every and config.ash else None

    def snapshot(it: int) -> Checkpoint:
        return Checkpoint(
            players, it, config,
            {n: o.state_arrays() for n, o in optims.items()},
            {k: np.array(v) for k, v in history.items()},
        )

    def check(value: Tensor, it: int, player: str) -> float:
        v = value.item()
        if not np.isfinite(v):
            raise TrainingDivergence(f"iteration {it}: non-finite loss for player '{player}'")
        return v

    def step(loss: Tensor, opt, it: int, player: str) -> float:
        v = check(loss, it, player)
        for m in players.modules().values():
            m.zero_grad()
        loss.backward()
        opt.step()
        for m in players.modules().values():
            m.zero_grad()
        return v

    def record_trace(it: int) -> None:
        from .analysis import coeff_rows

        trace_rows.extend(coeff_rows(it, segnet, ash, probe.image))

    if probe is not None and start == 0:
        record_trace(0)

    for it in range(start, config.iterations):
        sample = gen_scene(source, derive_seed(config.seed, TRAIN_SCENE, it))
        x = Tensor(sample.image)
        prob_src = segnet(x)
        losses = dict.fromkeys(LOSS_KEYS, 0.0)

        if not config.stylization:
            losses["seg_loss"] = step(seg_loss(prob_src, sample.labels), opt_seg, it, "segmenter")
        else:
            x_style = gen_style(derive_seed(config.seed, TRAIN_STYLE, it))
            noise_seed = derive_seed(config.seed, NOISE, it)
            kw = dict(noise=config.noise, eps=config.eps_smooth, prob_src=prob_src)
            if config.ash:
                with frozen(segnet, disc):
                    h = hallucinate(x, x_style, segnet, ash, encdec, noise_seed,
                                    uniform_semantics=config.uniform_semantics, **kw)
                    adv = ash_adv_term(h, segnet, disc, config.ash_adv)
                    l_ash = ash_loss(adv, h.f_src, h.f_style, h.merged, config.hinge_margin)
                losses["ash_loss"] = step(l_ash, opt_ash, it, "hallucination")
            else:
                with T.no_grad():
                    h = hallucinate(x, x_style, segnet, None, encdec, noise_seed, **kw)
            x_sty = h.x_stylized.detach()

            losses["seg_loss"] = step(seg_loss(prob_src, sample.labels), opt_seg, it, "segmenter")

            with frozen(disc):
                prob_sty = segnet(x_sty)
                l_fool = fool_loss(disc(prob_sty)) * config.lambda_adv
                l_g = l_fool + seg_loss(prob_sty, sample.labels) if config.seg_stylized else l_fool
            step(l_g, opt_seg, it, "segmenter-adversarial")
            losses["adv_loss"] = check(l_fool, it, "segmenter-adversarial")

            l_disc = adv_loss(disc, prob_src.detach(), prob_sty.detach())
            losses["disc_loss"] = step(l_disc, opt_disc, it, "discriminator")

        for k, v in losses.items():
            history[k].append(v)
        done = it + 1
        if out is not None and config.snapshot_every and done % config.snapshot_every == 0:
            p = out / "snapshots" / f"iter_{done:07d}.ckpt"
            p.parent.mkdir(exist_ok=True)
            snapshot(done).save(p)
            snapshots.append(p)
        if probe is not None and done % config.trace_every == 0:
            record_trace(done)

    final = snapshot(max(start, config.iterations))
    result = TrainResult(final, final.history, snapshots=snapshots)
    if out is not None:
        active = {
            "seg_loss": True,
            "adv_loss": config.stylization,
            "ash_loss": config.ash,
            "disc_loss": config.stylization,
        }
        result.metrics_csv = out / "metrics.csv"
        with open(result.metrics_csv, "w", newline="\n") as fh:
            fh.write(format_metrics_csv(final.history, config.log_every, active))
        result.checkpoint_path = out / "checkpoint.ckpt"
        final.save(result.checkpoint_path)
        if probe is not None:
            from .analysis import TRACE_HEADER

            result.trace_csv = out / "coeff_trace.csv"
            with open(result.trace_csv, "a" if resume is not None and start > 0 else "w", newline="\n") as fh:
                if resume is None or start == 0:
                    fh.write(TRACE_HEADER + "\n")
                fh.writelines(r + "\n" for r in trace_rows)
    return result

"""Adam, the learning-rate schedule, the epoch loop with checkpoint/resume, evaluation and ablations."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TOGGLES, ConfigError, RunConfig
from .data import DatasetManifest, ScenePair
from .diffmath import NonFiniteError, Tensor
from .geometry import RegistrationMetrics, RigidTransform, compose, registration_metrics
from .model import OBMNet, load_checkpoint
from .solver import DegenerateError, icp_baseline, register_iterative

log = logging.getLogger(__name__)

EVAL_STREAM = 7_777_777  # separates evaluation randomness from training draws
LOG_COLUMNS = ("epoch", "lr", "tau", "l_g", "l_n", "l_s", "total", "skipped", "val_mie_r", "val_mie_t")


class TrainingDiverged(FloatingPointError):
    pass


# -- optimiser -------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
            lr,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step], dtype=np.int64)}
        out.update({f"adam/m/{k}": v for k, v in self.m.items()})
        out.update({f"adam/v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], lr: float) -> "OptimizerState":
        m = {k[len("adam/m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam/m/")}
        v = {k[len("adam/v/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam/v/")}
        return cls(m, v, int(arrays["adam/step"][0]), lr)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    """Bias-corrected Adam update, in place on ``params``; missing grads count as zero."""
    for k, g in grads.items():
        if g is None:
            continue
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDiverged(f"non-finite gradient for {k} ({bad} entries) at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.data = p.data - state.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return state


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor**passed


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: None if g is None else g * scale for k, g in grads.items()}


# -- one pair ---------------------------------------------------------------------


def pair_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def train_pair(model: OBMNet, pair: ScenePair, rng, tau: float) -> dict[str, float]:
    """Forward/backward over ``train_iters`` refinement passes; grads accumulate on the params.

    Each pass starts from the source moved by the detached estimate of the
    previous passes.  Returns the mean loss components.
    """
    cfg = model.cfg
    src, tgt = pair.source.points, pair.target.points
    model.zero_grad()
    acc = RigidTransform.identity()
    sums = np.zeros(4)
    for _ in range(cfg.train_iters):
        cur = acc.apply(src)
        out = model.forward(cur, tgt, rng, tau=tau)
        lb = model.losses(cur, tgt, out)
        lb.tensor.backward()
        sums += (lb.l_g, lb.l_n, lb.l_s, lb.total)
        acc = compose(RigidTransform(out.R.data, out.t.data), acc)
    sums /= cfg.train_iters
    return dict(zip(("l_g", "l_n", "l_s", "total"), sums.tolist()))


# -- evaluation -------------------------------------------------------------------


def evaluate(model: OBMNet, pairs: list[ScenePair], n_iter: int | None = None, seed: int | None = None) -> list[RegistrationMetrics]:
    cfg = model.cfg
    n_iter = cfg.n_iter if n_iter is None else n_iter
    seed = cfg.seed if seed is None else seed
    rows = []
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng([seed, EVAL_STREAM, i])
        res = register_iterative(
            pair.source, pair.target, model, n_iter, rng, cfg.tau_end, cfg.early_stop_rot_deg, cfg.early_stop_trans
        )
        rows.append(registration_metrics(res.transform, pair.gt_transform))
    return rows


def evaluate_icp(pairs: list[ScenePair], max_iter: int = 50) -> list[RegistrationMetrics]:
    return [registration_metrics(icp_baseline(p.source, p.target, max_iter=max_iter), p.gt_transform) for p in pairs]


def median_errors(rows: list[RegistrationMetrics]) -> tuple[float, float]:
    if not rows:
        return float("nan"), float("nan")
    return float(np.median([r.mie_r for r in rows])), float(np.median([r.mie_t for r in rows]))


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: OBMNet
    history: list[dict] = field(default_factory=list)
    best_path: Path | None = None
    last_path: Path | None = None


def format_log(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def train(
    manifest: DatasetManifest,
    cfg: RunConfig,
    out_dir,
    resume: bool = False,
    train_split: str = "train",
    val_split: str = "val",
) -> TrainResult:
    """Epoch loop over the train split, one pair per step.

    Writes ``metrics.csv``, ``last.npz`` (params plus Adam state, used for
    resume) and ``best.npz`` (lowest validation median rotation error, or the
    last epoch when there is no validation split) into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path, best_path = out / "last.npz", out / "best.npz"
    train_entries = manifest.split(train_split)
    if not train_entries:
        raise ValueError(f"manifest has no {train_split!r} pairs")
    train_pairs = [manifest.load_pair(e) for e in train_entries]
    val_pairs = manifest.pairs(val_split)

    history: list[dict] = []
    start = 0
    best_val = math.inf
    if resume and last_path.exists():
        ck_cfg, params, extra, meta = load_checkpoint(last_path)
        model = OBMNet(ck_cfg.replace(epochs=cfg.epochs), params)
        opt = OptimizerState.from_arrays(extra, cfg.lr)
        history = meta.get("history", [])
        start = int(meta["epoch"]) + 1
        best_val = float(meta.get("best_val", math.inf))
        log.info("resuming at epoch %d", start)
    else:
        model = OBMNet(cfg)
        opt = OptimizerState.for_params(model.params, cfg.lr)
    cfg = model.cfg

    for epoch in range(start, cfg.epochs):
        opt.lr = lr_schedule(epoch, cfg)
        tau = model.tau_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_pairs))
        sums = np.zeros(4)
        used = skipped = 0
        for i in order:
            pair = train_pairs[i]
            try:
                comps = train_pair(model, pair, pair_rng(cfg.seed, epoch, int(i)), tau)
            except DegenerateError as exc:
                skipped += 1
                log.warning("epoch %d: skipped pair seed %d (%s)", epoch, pair.seed, exc)
                continue
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}, pair seed {pair.seed}: {exc}") from exc
            grads = clip_gradients({k: p.grad for k, p in model.params.items()}, cfg.grad_clip)
            try:
                adam_step(model.params, grads, opt)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, pair seed {pair.seed}: {exc}") from exc
            sums += (comps["l_g"], comps["l_n"], comps["l_s"], comps["total"])
            used += 1
        means = sums / max(used, 1)
        val_r, val_t = median_errors(evaluate(model, val_pairs)) if val_pairs else (float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            "tau": tau,
            "l_g": means[0],
            "l_n": means[1],
            "l_s": means[2],
            "total": means[3],
            "skipped": skipped,
            "val_mie_r": val_r,
            "val_mie_t": val_t,
        }
        history.append(row)
        log.info("epoch %d total %.5f val_mie_r %.3f", epoch, means[3], val_r)
        improved = val_r < best_val if val_pairs else True
        if improved:
            best_val = val_r if val_pairs else best_val
            model.save(best_path, meta={"epoch": epoch, "val_mie_r": val_r})
        meta = {"epoch": epoch, "best_val": best_val, "history": history}
        model.save(last_path, extra=opt.to_arrays(), meta=meta)
        (out / "metrics.csv").write_text(format_log(history))

    if not best_path.exists():
        model.save(best_path, meta={"epoch": cfg.epochs - 1})
    return TrainResult(model, history, best_path, last_path)


# -- ablation ---------------------------------------------------------------------

FULL = frozenset(TOGGLES)
STANDARD_ABLATIONS = {
    "full": FULL,
    "no_nmm": FULL - {"NMM"},
    "baseline": frozenset({"L_g", "L_n", "L_s"}),
    "loss_g_s": FULL - {"L_n"},
    "loss_g": FULL - {"L_n", "L_s"},
}


def toggle_label(toggles) -> str:
    return "+".join(t for t in TOGGLES if t in set(toggles))


def ablate(
    cfg: RunConfig,
    toggle_sets: dict[str, frozenset] | None,
    manifest: DatasetManifest,
    out_dir,
    eval_split: str = "test",
) -> list[dict]:
    """Train and evaluate each toggle combination on the same data; one row per combination."""
    toggle_sets = STANDARD_ABLATIONS if toggle_sets is None else toggle_sets
    if "full" not in toggle_sets:
        toggle_sets = {"full": FULL, **toggle_sets}
    for name, ts in toggle_sets.items():
        cfg.with_toggles(ts)  # validate every set before spending time on training
    test_pairs = manifest.pairs(eval_split)
    if not test_pairs:
        raise ValueError(f"manifest has no {eval_split!r} pairs")
    rows = []
    for name, ts in toggle_sets.items():
        run_cfg = cfg.with_toggles(ts)
        res = train(manifest, run_cfg, Path(out_dir) / name)
        model = OBMNet.load(res.best_path)
        metrics = evaluate(model, test_pairs)
        rows.append(summarize(name, toggle_label(ts), metrics))
    return rows


def summarize(name: str, label: str, metrics: list[RegistrationMetrics]) -> dict:
    arr = np.array([[m.mae_r, m.mae_t, m.mie_r, m.mie_t] for m in metrics])
    mean = arr.mean(axis=0)
    med = np.median(arr, axis=0)
    return {
        "name": name,
        "toggles": label,
        "mae_r": float(mean[0]),
        "mae_t": float(mean[1]),
        "mie_r": float(mean[2]),
        "mie_t": float(mean[3]),
        "median_mie_r": float(med[2]),
        "median_mie_t": float(med[3]),
    }


def parse_toggles(text: str) -> frozenset:
    """``"OS,BP,NMM,L_g"`` -> frozenset; ``"full"`` is every toggle."""
    if text.strip().lower() == "full":
        return FULL
    parts = frozenset(t.strip() for t in text.split(",") if t.strip())
    unknown = parts - FULL
    if unknown:
        raise ConfigError(f"unknown toggles {sorted(unknown)}; choose from {TOGGLES}")
    return parts


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True)

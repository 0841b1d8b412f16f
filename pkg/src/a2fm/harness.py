"""Experiment driver: data, model zoo, attack campaigns, transfer, sweeps, reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .config import ExperimentConfig
from .io import FormatError, load_artifact, save_artifact
from .metrics import direction_coherence, feature_diff, fooling_rate, outcome_aap
from .models import Model, build_model, train_model
from .videodata import DataConfig, Dataset, VideoClip, make_dummy_frames, synth_dataset

COLUMNS = (
    "model",
    "method",
    "support",
    "dataset_seed",
    "attack_seed",
    "FR_percent",
    "AAP",
    "DIFF",
    "coherence",
    "iters_mean",
    "wallclock_s",
)
SWEEP_KINDS = ("lambda_l", "spatial_rate", "pattern")
DEFAULT_GRIDS = {
    "lambda_l": [0.0, 0.01, 0.05, 0.1, 1.0],
    "spatial_rate": [1.0, 0.8, 0.5, 0.2],
    "pattern": ["GlyphOnDark", "GlyphOnLight", "GlyphLarge"],
}


class HarnessError(ValueError):
    pass


class CheckpointMissing(HarnessError):
    pass


class CheckpointCorrupt(HarnessError):
    pass


@dataclass
class Row:
    model: str
    method: str
    support: str
    dataset_seed: int
    attack_seed: int
    FR_percent: float
    AAP: float
    DIFF: float = math.nan
    coherence: float = math.nan
    iters_mean: float = math.nan
    wallclock_s: float = math.nan
    eligible: int = 0

    def as_dict(self, timing: bool = True) -> dict:
        d = {c: getattr(self, c) for c in COLUMNS}
        if not timing:
            d["wallclock_s"] = math.nan
        return d


@dataclass
class TransferMatrix:
    method: str
    models: list[str]
    cells: np.ndarray  # [held-out row, attacked model]

    @property
    def rows(self) -> list[str]:
        return [f"-{m}" for m in self.models]

    def held_out(self) -> np.ndarray:
        return np.diag(self.cells).copy()


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    rows: list[Row]
    wallclock: float
    artifacts: list[str] = field(default_factory=list)
    matrices: list[TransferMatrix] = field(default_factory=list)


# --------------------------------------------------------------------------
# data and models
# --------------------------------------------------------------------------


def _data_config(cfg: ExperimentConfig, **overrides) -> DataConfig:
    d = cfg.dataset
    base = dict(
        K=d.K, clips_per_class=d.clips_per_class, T=d.T, W=d.W, H=d.H, C=d.C,
        noise=d.noise, shape_size=d.shape_size, speed=d.speed, test_fraction=d.test_fraction,
    )
    base.update(overrides)
    return DataConfig(**base)


def make_data(cfg: ExperimentConfig) -> tuple[Dataset, list[VideoClip]]:
    """Training dataset and the separate clip set attacks are evaluated on."""
    train = synth_dataset(_data_config(cfg), seed=cfg.dataset.seed)
    ev = synth_dataset(_data_config(cfg, clips_per_class=cfg.dataset.eval_clips_per_class), seed=cfg.dataset.eval_seed)
    clips = ev.clips
    if cfg.attack.max_videos is not None:
        order = np.random.default_rng(cfg.dataset.eval_seed).permutation(len(clips))
        clips = [clips[i] for i in np.sort(order[: cfg.attack.max_videos])]
    return train, clips


def input_len(cfg: ExperimentConfig) -> int:
    return cfg.dataset.T + cfg.attack.delta_t


def train_zoo(cfg: ExperimentConfig, data: Dataset, out: Path | None = None):
    """Build and train every configured model; optionally save checkpoints."""
    zoo, reports = {}, {}
    m = cfg.model
    dims = (input_len(cfg), cfg.dataset.W, cfg.dataset.H, cfg.dataset.C)
    for kind in m.kinds:
        model = build_model(kind, dims, cfg.dataset.K, m.hidden.get(kind), seed=m.seed)
        reports[kind] = train_model(
            model, data, epochs=m.epochs, lr=m.lr, batch_size=m.batch_size, seed=m.seed, card_rate=m.card_rate
        )
        zoo[kind] = model
        if out is not None:
            save_artifact(Path(out) / f"{kind}.ckpt", model, "checkpoint")
    return zoo, reports


def load_zoo(cfg: ExperimentConfig, directory) -> dict[str, Model]:
    zoo = {}
    for kind in cfg.model.kinds:
        path = Path(directory) / f"{kind}.ckpt"
        if not path.exists():
            raise CheckpointMissing(f"missing checkpoint {path}")
        try:
            model = load_artifact(path, "checkpoint")
        except FormatError as e:
            raise CheckpointCorrupt(f"corrupt checkpoint {path}: {e}") from None
        if model.input_len != input_len(cfg) or tuple(model.frame_shape) != (cfg.dataset.W, cfg.dataset.H, cfg.dataset.C):
            raise HarnessError(f"checkpoint {path} has dims {model.dims}, config needs T_in={input_len(cfg)}")
        zoo[kind] = model
    return zoo


# --------------------------------------------------------------------------
# attack campaigns
# --------------------------------------------------------------------------


def attack_config(cfg: ExperimentConfig, support: atk.PerturbSupport, **overrides) -> atk.AttackConfig:
    a = cfg.attack
    mask = None
    if support.is_appended and a.pattern_mask:
        mask = atk.make_pattern_mask(a.pattern, cfg.dataset.W, cfg.dataset.H)
    elif a.spatial_rate is not None:
        mask = atk.make_square_mask(cfg.dataset.W, cfg.dataset.H, a.spatial_rate)
    kw = dict(
        support=support, lam=a.lam, p=a.p, step_size=a.step_size, max_iters=a.max_iters,
        stop_on_success=a.stop_on_success, stop_threshold=a.stop_threshold, patience=a.patience,
        target_label=a.target_label, mask=mask, lam_l=a.lam_l, layer=a.layer, feature_p=a.feature_p, seed=a.seed,
    )
    kw.update(overrides)
    return atk.AttackConfig(**kw)


def _supports(cfg: ExperimentConfig) -> list[tuple[str, atk.PerturbSupport]]:
    out = []
    if cfg.attack.method in ("appended", "both"):
        out.append(("A2FM", atk.support_for(cfg.attack.delta_t)))
    if cfg.attack.method in ("whole", "both"):
        out.append(("BAM", atk.PerturbSupport.whole()))
    return out


def _dummy(cfg: ExperimentConfig, pattern: str | None = None):
    d = cfg.dataset
    return make_dummy_frames(pattern or cfg.attack.pattern, cfg.attack.delta_t, d.W, d.H, d.C)


def _row(cfg, model_name, method, support, outcomes, t0, diff=math.nan, coherence=math.nan) -> Row:
    el = [o for o in outcomes if not o.skipped]
    if not el:
        raise HarnessError(f"no eligible videos for {model_name} / {method}")
    return Row(
        model=model_name,
        method=method,
        support=support.kind.value,
        dataset_seed=cfg.dataset.seed,
        attack_seed=cfg.attack.seed,
        FR_percent=fooling_rate(outcomes),
        AAP=outcome_aap(outcomes),
        DIFF=diff,
        coherence=coherence,
        iters_mean=float(np.mean([o.iterations for o in el])),
        wallclock_s=time.perf_counter() - t0,
        eligible=len(el),
    )


def coherence_for(model: Model, clips, dummy, support: atk.PerturbSupport, limit: int) -> float:
    """Gradient-direction coherence over the first ``limit`` clips."""
    if limit < 2 or len(clips) < 2:
        return math.nan
    grads = atk.support_gradients(model, clips[:limit], dummy, support)
    grads = [g for g in grads if np.any(g)]
    return direction_coherence(grads) if len(grads) >= 2 else math.nan


def run_single(cfg, zoo, clips, targeted: bool = False) -> list[Row]:
    rows = []
    dummy = _dummy(cfg)
    for name, model in zoo.items():
        for method, support in _supports(cfg):
            t0 = time.perf_counter()
            outs = []
            for c in clips:
                target = None
                if targeted:
                    target = cfg.attack.target_label
                    if target is None:
                        target = (c.label + 1) % model.K
                ac = attack_config(cfg, support, target_label=target)
                outs.append(atk.attack_single(model, c, dummy if support.is_appended else None, ac))
            coh = coherence_for(model, clips, dummy if support.is_appended else None, support, cfg.attack.coherence_videos)
            label = f"{method}-T" if targeted else method
            rows.append(_row(cfg, name, label, support, outs, t0, coherence=coh))
    return rows


def _batches(clips, size):
    return [clips[i : i + size] for i in range(0, len(clips), size)]


def run_universal(cfg, zoo, clips) -> list[Row]:
    """Universal perturbations per batch of clips.

    FR is reported on the crafting batch and, when there are at least two
    batches, on a held-out batch: each batch's perturbation is evaluated on
    the next batch (cyclically).
    """
    rows = []
    dummy = _dummy(cfg)
    batches = _batches(clips, cfg.attack.universal_batch)
    for name, model in zoo.items():
        for method, support in _supports(cfg):
            t0 = time.perf_counter()
            d = dummy if support.is_appended else None
            outs, held = [], []
            for i, batch in enumerate(batches):
                res = atk.attack_universal_videos(model, batch, d, attack_config(cfg, support))
                outs += res.outcomes[0]
                if len(batches) > 1:
                    other = batches[(i + 1) % len(batches)]
                    held += atk.evaluate_perturbation(model, other, d, res.E, support)
            rows.append(_row(cfg, name, f"{method}-AV", support, outs, t0))
            if held and any(not o.skipped for o in held):
                row = _row(cfg, name, f"{method}-AV(held-out)", support, held, t0)
                row.iters_mean = math.nan
                rows.append(row)
    return rows


def loo_transfer(cfg, zoo: dict[str, Model], clips) -> tuple[list[TransferMatrix], list[Row]]:
    """Leave-one-out ensemble transfer, one matrix per support.

    Each row crafts universal perturbations on the zoo without one model and
    evaluates them on every model; the diagonal holds the held-out cells.
    """
    if len(zoo) < 2:
        raise HarnessError("leave-one-out transfer needs at least two models")
    names = list(zoo)
    dummy = _dummy(cfg)
    matrices, rows = [], []
    for method, support in _supports(cfg):
        cells = np.zeros((len(names), len(names)))
        for i, held in enumerate(names):
            t0 = time.perf_counter()
            ensemble = [zoo[n] for n in names if n != held]
            per_model = {n: [] for n in names}
            for batch in _batches(clips, cfg.attack.universal_batch):
                d = dummy if support.is_appended else None
                res = atk.attack_ensemble_models(ensemble, batch, d, attack_config(cfg, support))
                for n in names:
                    per_model[n] += atk.evaluate_perturbation(zoo[n], batch, d, res.E, support)
            for j, n in enumerate(names):
                cells[i, j] = fooling_rate(per_model[n])
                row = _row(cfg, n, f"{method}-AM(-{held})", support, per_model[n], t0)
                row.iters_mean = math.nan
                rows.append(row)
        matrices.append(TransferMatrix(method, names, cells))
    return matrices, rows


def run_feature_similar(cfg, zoo, clips, lam_l: float | None = None, method: str | None = None) -> list[Row]:
    rows = []
    dummy = _dummy(cfg)
    lam_l = cfg.attack.lam_l if lam_l is None else lam_l
    support = atk.support_for(cfg.attack.delta_t)
    if not support.is_appended:
        raise HarnessError("feature-similar attack needs delta_t >= 1")
    for name, model in zoo.items():
        t0 = time.perf_counter()
        ac = attack_config(cfg, support, lam_l=lam_l)
        outs = [atk.attack_feature_similar(model, c, dummy, ac) for c in clips]
        layer = model.last_conv_tap if cfg.attack.layer is None else cfg.attack.layer
        el = [o for o in outs if not o.skipped]
        diff = float(np.mean([feature_diff(model, o.adv_frames, o.ref_frames, layer) for o in el])) if el else math.nan
        rows.append(_row(cfg, name, method or f"A2FM-FS(lambda_l={lam_l:g})", support, outs, t0, diff=diff))
    return rows


def sweep(kind: str, grid, cfg: ExperimentConfig, zoo, clips) -> list[Row]:
    """One row per (grid value, model) on a shared seed baseline."""
    if kind not in SWEEP_KINDS:
        raise HarnessError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    grid = list(grid)
    if not grid:
        raise HarnessError("empty sweep grid")
    rows = []
    for value in grid:
        if kind == "lambda_l":
            rows += run_feature_similar(cfg, zoo, clips, lam_l=float(value), method=f"A2FM-FS(lambda_l={float(value):g})")
            continue
        if kind == "spatial_rate":
            sub = cfg.replace(attack={"spatial_rate": float(value), "method": "appended", "pattern_mask": False})
            label = f"A2FM(rate={float(value):g})"
        else:
            sub = cfg.replace(attack={"pattern": str(value), "method": "appended"})
            label = f"A2FM(pattern={value})"
        for r in run_single(sub, zoo, clips):
            r.method = label
            rows.append(r)
    return rows


def run_config(cfg: ExperimentConfig, models_dir=None, out=None) -> RunRecord:
    """Generate data, train (or load) the zoo and run the configured attack mode."""
    t0 = time.perf_counter()
    data, clips = make_data(cfg)
    zoo = load_zoo(cfg, models_dir) if models_dir else train_zoo(cfg, data)[0]
    mode = cfg.attack.mode
    matrices = []
    if mode == "single":
        rows = run_single(cfg, zoo, clips)
    elif mode == "targeted":
        rows = run_single(cfg, zoo, clips, targeted=True)
    elif mode == "universal":
        rows = run_universal(cfg, zoo, clips)
    elif mode == "ensemble":
        matrices, rows = loo_transfer(cfg, zoo, clips)
    else:
        rows = run_feature_similar(cfg, zoo, clips)
    rec = RunRecord(cfg.digest(), cfg.attack.seed, rows, time.perf_counter() - t0, matrices=matrices)
    if out is not None:
        rec.artifacts.append(str(write_report(rows, Path(out) / f"{mode}.{cfg.report.format}", cfg)))
    return rec


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 6))
    return str(v)


def rows_to_csv(rows: list[Row], timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        d = r.as_dict(timing)
        w.writerow([_fmt(d[c]) for c in COLUMNS])
    return buf.getvalue()


def rows_to_json(rows: list[Row], timing: bool = False) -> str:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else (round(v, 6) if isinstance(v, float) else v)

    return json.dumps([{c: clean(r.as_dict(timing)[c]) for c in COLUMNS} for r in rows], indent=1) + "\n"


def render(rows: list[Row], fmt: str = "csv", timing: bool = False) -> str:
    if fmt == "csv":
        return rows_to_csv(rows, timing)
    if fmt == "json":
        return rows_to_json(rows, timing)
    raise HarnessError(f"unknown report format {fmt!r}")


def write_report(rows: list[Row], path, cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(rows, cfg.report.format, cfg.report.include_timing))
    return path


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise HarnessError(f"{path} does not have the report columns")
        return list(reader)

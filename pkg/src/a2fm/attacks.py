"""Sign-gradient attacks on appended ending frames (and the whole-video baseline).

Every public attack funnels into :func:`_optimize`, one loop over a set of
videos and a set of models. The single-video, universal, ensemble and
feature-similar attacks are the same loop with different arguments, which
is what makes the degradation identities exact:

* universal with one video is the single-video attack,
* ensemble with one model is the universal attack,
* feature-similar with ``lam_l == 0`` is the single-video attack,
* a zero-length ending card selects whole-video support (the baseline).

Perturbations live on the float32 grid so they can be saved losslessly.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Graph, backward, eval_forward
from .models import Model, ModelError
from .videodata import DummyFrames, VideoClip, append_frames, pad_clip, pattern_foreground

DEFAULT_ITERS = 40
FS_ITERS = 200


class AttackError(ValueError):
    pass


class SupportKind(str, enum.Enum):
    APPENDED = "appended"
    WHOLE = "whole"


@dataclass(frozen=True)
class PerturbSupport:
    kind: SupportKind = SupportKind.APPENDED
    delta_t: int = 2

    def __post_init__(self):
        if self.kind is SupportKind.APPENDED and self.delta_t < 1:
            raise AttackError("appended-frame support needs at least one frame")

    @classmethod
    def appended(cls, delta_t: int) -> "PerturbSupport":
        return cls(SupportKind.APPENDED, delta_t)

    @classmethod
    def whole(cls) -> "PerturbSupport":
        return cls(SupportKind.WHOLE, 0)

    @property
    def is_appended(self) -> bool:
        return self.kind is SupportKind.APPENDED


def support_for(delta_t: int) -> PerturbSupport:
    """Appended-frame support, degrading to whole-video support at zero frames."""
    return PerturbSupport.whole() if delta_t == 0 else PerturbSupport.appended(delta_t)


@dataclass(frozen=True)
class SpatialMask:
    mask: np.ndarray  # (W, H) of 0.0 / 1.0

    @property
    def rate(self) -> float:
        return float(self.mask.sum() / self.mask.size)


def make_square_mask(W: int, H: int, rate: float) -> SpatialMask:
    """Centered square covering about ``rate`` of the frame."""
    if not 0.0 <= rate <= 1.0:
        raise AttackError(f"rate must lie in [0, 1], got {rate}")
    side = int(round(math.sqrt(rate * W * H)))
    sw, sh = min(side, W), min(side, H)
    m = np.zeros((W, H))
    x0, y0 = (W - sw) // 2, (H - sh) // 2
    m[x0 : x0 + sw, y0 : y0 + sh] = 1.0
    return SpatialMask(m)


def make_pattern_mask(pattern, W: int, H: int) -> SpatialMask:
    """Ones exactly on the glyph foreground of the ending card."""
    return SpatialMask(pattern_foreground(pattern, W, H).astype(np.float64))


@dataclass(frozen=True)
class AttackConfig:
    support: PerturbSupport = field(default_factory=lambda: PerturbSupport.appended(2))
    lam: float = 0.0
    p: float = math.inf
    step_size: float = 0.01
    max_iters: int | None = None
    stop_on_success: bool = True
    stop_threshold: float = 0.001
    patience: int = 0
    target_label: int | None = None
    mask: SpatialMask | None = None
    lam_l: float = 0.0
    layer: int | None = None
    feature_p: float = 2.0
    alpha: tuple[float, ...] | None = None
    beta: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.lam_l < 0:
            raise AttackError("penalty weights must be non-negative")
        if self.step_size <= 0:
            raise AttackError("step_size must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise AttackError("max_iters must be positive")
        if self.p not in (1, 2, math.inf) or self.feature_p not in (1, 2, math.inf):
            raise AttackError("norm order must be 1, 2 or inf")
        for name in ("alpha", "beta"):
            w = getattr(self, name)
            if w is not None and any(v < 0 for v in w):
                raise AttackError(f"{name} weights must be non-negative")

    @property
    def targeted(self) -> bool:
        return self.target_label is not None


class Status(str, enum.Enum):
    SUCCESS = "success"
    FAILED = "failed"
    SKIPPED = "skipped"


@dataclass
class AttackOutcome:
    status: Status
    E: np.ndarray
    iterations: int
    loss_trace: list[float]
    x_adv: np.ndarray
    initial_label: int
    final_label: int
    label: int
    model: str = ""
    ref_frames: np.ndarray | None = None
    diff_trace: list[float] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS

    @property
    def skipped(self) -> bool:
        return self.status is Status.SKIPPED

    @property
    def adv_frames(self) -> np.ndarray:
        """The perturbed frames themselves (the support region of ``x_adv``)."""
        n = self.E.shape[0]
        if n == self.x_adv.shape[0]:
            return self.x_adv
        start = self.x_adv.shape[0] - n - self._pad
        return self.x_adv[start : start + n]

    _pad: int = 0


@dataclass
class CampaignResult:
    """A shared perturbation and its outcomes, indexed ``[model][video]``."""

    E: np.ndarray
    iterations: int
    loss_trace: list[float]
    outcomes: list[list[AttackOutcome]]

    @property
    def flat(self) -> list[AttackOutcome]:
        return [o for row in self.outcomes for o in row]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _round_toward(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    """Float32-grid value of ``new`` never further from ``old`` than ``new`` is."""
    q = new.astype(np.float32)
    over = np.abs(q.astype(np.float64) - old) > np.abs(new - old)
    if over.any():
        q[over] = np.nextafter(q[over], old[over].astype(np.float32))
    return q.astype(np.float64)


def gradient_step(E: np.ndarray, g: np.ndarray, config: AttackConfig, base: np.ndarray | None = None) -> np.ndarray:
    """One signed step along the ascent direction ``g``.

    The result keeps ``base + E'`` inside ``[0, 1]`` (``E'`` inside ``[-1, 1]``
    when there is no single base) and never moves a pixel by more than
    ``config.step_size``. Pixels outside the mask are left untouched.
    """
    if g.shape != E.shape:
        raise AttackError(f"gradient shape {g.shape} does not match perturbation {E.shape}")
    new = E + config.step_size * np.sign(g)
    if base is None:
        new = np.clip(new, -1.0, 1.0)
    else:
        new = np.clip(new, -base, 1.0 - base)
    new = _round_toward(new, E)
    if config.mask is not None:
        new = np.where(config.mask.mask[None, :, :, None] > 0, new, E)
    return new


def _norm(g: Graph, node: int, p: float) -> int:
    if p == math.inf:
        return g.max_abs(node)
    if p == 2:
        return g.l2_norm(node)
    return g.sum_abs(node)


def _penalty_graph(p: float) -> Graph:
    g = Graph()
    g.output(_norm(g, g.input("E"), p))
    return g


def _fs_graph(model: Model, n_frames: int, layer: int, p: float) -> Graph:
    key = ("fs", n_frames, layer, p)
    if key not in model._graphs:
        if layer == 0:
            g = Graph()
            feat = g.input("x")
        else:
            g = model.graph("features", T=n_frames, tap=layer)
            g = _clone(g)
            feat = g.outputs[0]
            g.outputs = []
        diff = g.sub(feat, g.input("ref"))
        g.output(_norm(g, diff, p))
        model._graphs[key] = g
    return model._graphs[key]


def _clone(g: Graph) -> Graph:
    c = Graph()
    c.nodes = list(g.nodes)
    c.inputs = dict(g.inputs)
    c.outputs = list(g.outputs)
    return c


def reference_frames(clip: VideoClip, delta_t: int, seed: int) -> np.ndarray:
    """A contiguous run of ``delta_t`` original frames at a seeded start."""
    if delta_t > clip.length:
        raise AttackError(f"cannot take {delta_t} reference frames from a {clip.length}-frame clip")
    start = int(np.random.default_rng(seed).integers(0, clip.length - delta_t + 1))
    return clip.frames[start : start + delta_t].copy()


@dataclass
class _Video:
    clip: VideoClip
    prefix: np.ndarray | None  # (T, W, H, C) clean frames before the support
    base: np.ndarray  # unperturbed support region
    suffix: np.ndarray | None
    pad: int


def _layout(clips, dummy, support, input_len):
    vids = []
    for clip in clips:
        if dummy is not None and dummy.delta_t and dummy.frames.shape[1:] != clip.frames.shape[1:]:
            raise AttackError(f"dummy frames {dummy.frames.shape[1:]} do not match clip {clip.frames.shape[1:]}")
        if support.is_appended:
            if dummy is None or dummy.delta_t != support.delta_t:
                raise AttackError("appended support needs an ending card of matching length")
            pad = input_len - clip.length - support.delta_t
            if pad < 0:
                raise AttackError(f"clip of {clip.length} frames plus {support.delta_t} exceeds model input {input_len}")
            suffix = np.repeat(clip.frames[-1:], pad, axis=0) if pad else None
            vids.append(_Video(clip, clip.frames, dummy.frames, suffix, pad))
        else:
            base = pad_clip(clip, input_len).frames
            vids.append(_Video(clip, None, base, None, 0))
    return vids


def _assemble(v: _Video, region: np.ndarray) -> np.ndarray:
    parts = [p for p in (v.prefix, region, v.suffix) if p is not None]
    return parts[0].copy() if len(parts) == 1 else np.concatenate(parts, axis=0)


def _parts_key(v: _Video) -> tuple[str, ...]:
    return tuple(n for n, p in (("prefix", v.prefix), ("adv", v.base), ("suffix", v.suffix)) if p is not None)


def _predict_batch(model: Model, xs: np.ndarray) -> np.ndarray:
    return model.probs(xs).argmax(axis=1)


# --------------------------------------------------------------------------
# the shared loop
# --------------------------------------------------------------------------


def _optimize(models, clips, dummy, config: AttackConfig, max_iters: int, trace_diff: bool = False) -> CampaignResult:
    if not models:
        raise AttackError("no models to attack")
    if not clips:
        raise AttackError("no videos to attack")
    m0 = models[0]
    for m in models[1:]:
        if m.dims != m0.dims or m.K != m0.K:
            raise AttackError(f"models disagree on input dims/classes: {m0.name} vs {m.name}")
    for c in clips:
        if c.frames.shape[1:] != tuple(m0.frame_shape):
            raise AttackError(f"clip frames {c.frames.shape[1:]} do not match model frames {m0.frame_shape}")
    if len({c.length for c in clips}) != 1:
        raise AttackError("all videos in one campaign must have the same length")
    support = config.support
    if config.targeted and not 0 <= config.target_label < m0.K:
        raise AttackError(f"target label {config.target_label} outside [0, {m0.K})")
    alpha = np.full(len(clips), 1.0 / len(clips)) if config.alpha is None else np.asarray(config.alpha, float)
    beta = np.full(len(models), 1.0 / len(models)) if config.beta is None else np.asarray(config.beta, float)
    if alpha.shape != (len(clips),) or beta.shape != (len(models),):
        raise AttackError("alpha/beta lengths must match the number of videos/models")
    layer = config.layer
    if config.lam_l > 0:
        if not support.is_appended:
            raise AttackError("feature similarity needs appended-frame support")
        for m in models:
            tap = m.last_conv_tap if layer is None else layer
            if tap not in m.layer_taps:
                raise ModelError(f"{m.name} has no layer tap {tap}")

    vids = _layout(clips, dummy, support, m0.input_len)
    labels = np.array([c.label for c in clips])
    shared_base = vids[0].base if (support.is_appended or len(vids) == 1) else None
    E = np.zeros_like(vids[0].base)
    parts = _parts_key(vids[0])
    targets = np.full(len(clips), config.target_label) if config.targeted else labels

    # clean predictions decide eligibility
    clean = np.stack([_assemble(v, v.base) for v in vids])
    initial = np.stack([_predict_batch(m, clean) for m in models])  # [k, n]
    active = initial == labels[None, :]
    if config.targeted:
        active &= labels[None, :] != config.target_label
    weights = beta[:, None] * alpha[None, :]

    # references for the feature-similarity term, one per video
    refs: list[list[np.ndarray | None]] = [[None] * len(clips) for _ in models]
    ref_frames = [None] * len(clips)
    if support.is_appended and (config.lam_l > 0 or trace_diff):
        for n, c in enumerate(clips):
            ref_frames[n] = reference_frames(c, support.delta_t, config.seed + n)
        for k, m in enumerate(models):
            tap = m.last_conv_tap if layer is None else layer
            for n in range(len(clips)):
                src = dummy.frames if tap == 0 else ref_frames[n]
                refs[k][n] = _features(m, src, tap)

    pen_graph = _penalty_graph(config.p) if config.lam > 0 else None
    loss_trace: list[float] = []
    diff_traces: list[list[float]] = [[] for _ in clips]
    final = initial.copy()
    best = math.inf
    since_best = 0
    it = 0
    while True:
        region = np.clip(shared_base + E, 0.0, 1.0) if shared_base is not None else None
        G = np.zeros_like(E)
        objective = 0.0
        done = True
        grads = []
        for k, m in enumerate(models):
            idx = np.flatnonzero(active[k])
            if idx.size == 0:
                continue
            g = m.graph("loss", parts=parts)
            feeds = _feeds(vids, idx, E, region, parts)
            w = weights[k, idx]
            loss = eval_forward(g, {**feeds, "onehot": np.eye(m.K)[targets[idx]], "weights": w, **m.bindings(idx.size)})
            pred = g.value(g.logits).argmax(axis=1)
            final[k, idx] = pred
            hit = pred == config.target_label if config.targeted else pred != labels[idx]
            if not hit.all():
                done = False
            grads.append((k, g, float(loss[0])))
        if trace_diff:
            _trace_diffs(models, vids, E, region, refs, layer, diff_traces)
        if (config.stop_on_success and done) or it >= max_iters:
            break
        sign = -1.0 if config.targeted else 1.0
        for k, g, loss in grads:
            gk = backward(g, g.outputs[0], [g.inputs["adv"]])[g.inputs["adv"]].sum(axis=0)
            G = G + sign * gk
            objective -= sign * loss
        if pen_graph is not None:
            val = eval_forward(pen_graph, {"E": E})[0]
            objective += config.lam * val
            G = G - config.lam * backward(pen_graph, pen_graph.outputs[0], [0])[0]
        if config.lam_l > 0:
            for k, m in enumerate(models):
                tap = m.last_conv_tap if layer is None else layer
                fg = _fs_graph(m, support.delta_t, tap, config.feature_p)
                x_node = fg.inputs["x"]
                for n in np.flatnonzero(active[k]):
                    val = eval_forward(fg, {"x": region[None], "ref": refs[k][n][None], **m.bindings(1)})[0]
                    c = config.lam_l * weights[k, n]
                    objective += c * val
                    G = G - c * backward(fg, fg.outputs[0], [x_node])[x_node][0]
        loss_trace.append(float(objective))
        E = gradient_step(E, G, config, shared_base)
        it += 1
        if config.patience:
            if objective < best - config.stop_threshold:
                best, since_best = objective, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    # re-evaluate predictions at the current E before leaving
                    max_iters = it
    outcomes = []
    region = np.clip(shared_base + E, 0.0, 1.0) if shared_base is not None else None
    for k, m in enumerate(models):
        row = []
        for n, v in enumerate(vids):
            x_adv = _assemble(v, region if region is not None else np.clip(v.base + E, 0.0, 1.0))
            if not active[k, n]:
                status = Status.SKIPPED
                x_out = clean[n].copy()
                fl = int(initial[k, n])
            else:
                fl = int(final[k, n])
                hit = fl == config.target_label if config.targeted else fl != labels[n]
                status = Status.SUCCESS if hit else Status.FAILED
                x_out = x_adv
            o = AttackOutcome(
                status=status,
                E=E.copy() if status is not Status.SKIPPED else np.zeros_like(E),
                iterations=it if status is not Status.SKIPPED else 0,
                loss_trace=list(loss_trace) if status is not Status.SKIPPED else [],
                x_adv=x_out,
                initial_label=int(initial[k, n]),
                final_label=fl,
                label=int(labels[n]),
                model=m.name,
                ref_frames=ref_frames[n],
                diff_trace=list(diff_traces[n]) if k == 0 else [],
            )
            o._pad = v.pad
            row.append(o)
        outcomes.append(row)
    return CampaignResult(E, it, loss_trace, outcomes)


def _feeds(vids, idx, E, region, parts):
    feeds = {}
    if "prefix" in parts:
        feeds["prefix"] = np.stack([vids[i].prefix for i in idx])
    if "suffix" in parts:
        feeds["suffix"] = np.stack([vids[i].suffix for i in idx])
    if region is not None:
        feeds["adv"] = np.broadcast_to(region, (idx.size,) + region.shape)
    else:
        feeds["adv"] = np.stack([np.clip(vids[i].base + E, 0.0, 1.0) for i in idx])
    return feeds


def _features(model: Model, frames: np.ndarray, tap: int) -> np.ndarray:
    from .models import features_at

    return features_at(model, frames, tap)


def _trace_diffs(models, vids, E, region, refs, layer, traces):
    m = models[0]
    tap = m.last_conv_tap if layer is None else layer
    for n in range(len(vids)):
        if refs[0][n] is None:
            continue
        f = _features(m, region, tap)
        traces[n].append(float(np.sqrt(np.sum((f - refs[0][n]) ** 2))))


# --------------------------------------------------------------------------
# public attacks
# --------------------------------------------------------------------------


def attack_single(model: Model, clip: VideoClip, dummy: DummyFrames | None, config: AttackConfig) -> AttackOutcome:
    """Attack one video on one model.

    Returns a ``SKIPPED`` outcome when the clean input (with the unperturbed
    ending card) is already misclassified.
    """
    iters = config.max_iters or DEFAULT_ITERS
    cfg = replace(config, alpha=(1.0,), beta=(1.0,))
    return _optimize([model], [clip], dummy, cfg, iters).outcomes[0][0]


def bam_attack(model: Model, clip: VideoClip, config: AttackConfig) -> AttackOutcome:
    """The whole-video baseline: perturb every input frame."""
    return attack_single(model, clip, None, replace(config, support=PerturbSupport.whole()))


def attack_universal_videos(model: Model, clips: list[VideoClip], dummy: DummyFrames | None, config: AttackConfig) -> CampaignResult:
    """One perturbation shared by every video (budget ``10 * N`` by default)."""
    if not clips:
        raise AttackError("empty video batch")
    iters = config.max_iters or 10 * len(clips)
    cfg = replace(config, beta=(1.0,))
    return _optimize([model], clips, dummy, cfg, iters)


def attack_ensemble_models(models: list[Model], clips: list[VideoClip], dummy: DummyFrames | None, config: AttackConfig) -> CampaignResult:
    """One perturbation shared by every model and video (budget ``5 * K * N``)."""
    if not models:
        raise AttackError("empty model list")
    if not clips:
        raise AttackError("empty video batch")
    iters = config.max_iters or 5 * len(models) * len(clips)
    return _optimize(models, clips, dummy, config, iters)


def attack_feature_similar(model: Model, clip: VideoClip, dummy: DummyFrames, config: AttackConfig) -> AttackOutcome:
    """Single-video attack plus a feature-distance penalty on the ending card.

    The outcome carries ``diff_trace``: the L2 feature distance between the
    adversarial card and the reference frames after every iteration.
    """
    if not config.support.is_appended:
        raise AttackError("feature-similar attack needs appended-frame support")
    layer = model.last_conv_tap if config.layer is None else config.layer
    if layer not in model.layer_taps:
        raise ModelError(f"{model.name} has no layer tap {layer}")
    iters = config.max_iters or FS_ITERS
    cfg = replace(config, alpha=(1.0,), beta=(1.0,), layer=layer)
    return _optimize([model], [clip], dummy, cfg, iters, trace_diff=True).outcomes[0][0]


def apply_perturbation(model: Model, clip: VideoClip, dummy: DummyFrames | None, E: np.ndarray, support: PerturbSupport) -> np.ndarray:
    """The adversarial model input for ``clip`` under perturbation ``E``."""
    (v,) = _layout([clip], dummy, support, model.input_len)
    if E.shape != v.base.shape:
        raise AttackError(f"perturbation {E.shape} does not fit support {v.base.shape}")
    return _assemble(v, np.clip(v.base + E, 0.0, 1.0))


def evaluate_perturbation(model: Model, clips, dummy, E, support, target_label=None) -> list[AttackOutcome]:
    """Outcomes of a fixed perturbation on ``model`` (transfer evaluation)."""
    vids = _layout(clips, dummy, support, model.input_len)
    clean = np.stack([_assemble(v, v.base) for v in vids])
    adv = np.stack([_assemble(v, np.clip(v.base + E, 0.0, 1.0)) for v in vids])
    p0 = _predict_batch(model, clean)
    p1 = _predict_batch(model, adv)
    out = []
    for n, c in enumerate(clips):
        eligible = p0[n] == c.label and (target_label is None or c.label != target_label)
        if not eligible:
            status = Status.SKIPPED
        else:
            hit = p1[n] == target_label if target_label is not None else p1[n] != c.label
            status = Status.SUCCESS if hit else Status.FAILED
        o = AttackOutcome(status, E.copy(), 0, [], adv[n] if eligible else clean[n], int(p0[n]), int(p1[n]), c.label, model.name)
        o._pad = vids[n].pad
        out.append(o)
    return out


def support_gradients(model: Model, clips, dummy, support: PerturbSupport) -> list[np.ndarray]:
    """Per-video loss gradient with respect to the support at ``E = 0``."""
    grads = []
    for v in _layout(clips, dummy, support, model.input_len):
        parts = _parts_key(v)
        g = model.graph("loss", parts=parts)
        feeds = _feeds([v], np.array([0]), np.zeros_like(v.base), v.base if support.is_appended else None, parts)
        onehot = np.eye(model.K)[[v.clip.label]]
        eval_forward(g, {**feeds, "onehot": onehot, "weights": np.ones(1), **model.bindings(1)})
        grads.append(backward(g, g.outputs[0], [g.inputs["adv"]])[g.inputs["adv"]][0])
    return grads


def append_dummy(clip: VideoClip, dummy: DummyFrames, input_len: int) -> VideoClip:
    """The clean appended clip a model of ``input_len`` frames sees."""
    return append_frames(clip, dummy, input_len - clip.length - dummy.delta_t)

"""Three tiny differentiable video classifiers.

* ``Conv3DTiny``: two 3x3x3 convolutions, spatial pooling between them,
  spatial averaging, a maximum over time and a dense classifier (C3D-like).
* ``Factorized21DTiny``: each 3D convolution split into a 1x3x3 spatial and a
  3x1x1 temporal convolution (P3D-like).
* ``CnnRecurrentTiny``: a per-frame 2D convolutional encoder followed by a
  gated recurrent cell over time and a dense classifier on the last state
  (CNN+LSTM-like).

All models take channels-last clips of a fixed length ``input_len``. Layer
tap 0 is the raw input; higher taps are activations, the highest being the
last convolutional stage.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, backward, eval_forward
from .videodata import Dataset, PatternKind, VideoClip, make_dummy_frames, pad_clip, to_storage


class ModelKind(str, enum.Enum):
    CONV3D = "Conv3DTiny"
    FACTORIZED = "Factorized21DTiny"
    RECURRENT = "CnnRecurrentTiny"


DEFAULT_HIDDEN = {
    # tmax: 1 takes the maximum over time of the pooled features, 0 the mean
    ModelKind.CONV3D: {"c1": 6, "c2": 8, "tmax": 1},
    ModelKind.FACTORIZED: {"c1": 6, "c2": 8, "tmax": 1},
    ModelKind.RECURRENT: {"c1": 6, "pool": 4, "gru": 16},
}


DEFAULT_EPOCHS = {ModelKind.CONV3D: 25, ModelKind.FACTORIZED: 25, ModelKind.RECURRENT: 60}


class ModelError(ValueError):
    pass


def param_shapes(kind: ModelKind, dims, K: int, hidden: dict) -> dict[str, tuple[int, ...]]:
    """Ordered parameter block shapes; a pure function of the architecture."""
    kind = ModelKind(kind)
    T, W, H, C = dims
    if kind is ModelKind.CONV3D:
        c1, c2 = hidden["c1"], hidden["c2"]
        return {
            "conv1.w": (3, 3, 3, C, c1),
            "conv1.b": (c1,),
            "conv2.w": (3, 3, 3, c1, c2),
            "conv2.b": (c2,),
            "fc.w": (c2, K),
            "fc.b": (K,),
        }
    if kind is ModelKind.FACTORIZED:
        c1, c2 = hidden["c1"], hidden["c2"]
        return {
            "conv1s.w": (1, 3, 3, C, c1),
            "conv1s.b": (c1,),
            "conv1t.w": (3, 1, 1, c1, c1),
            "conv1t.b": (c1,),
            "conv2s.w": (1, 3, 3, c1, c2),
            "conv2s.b": (c2,),
            "conv2t.w": (3, 1, 1, c2, c2),
            "conv2t.b": (c2,),
            "fc.w": (c2, K),
            "fc.b": (K,),
        }
    c1, pool, hd = hidden["c1"], hidden["pool"], hidden["gru"]
    feat = (W // pool) * (H // pool) * c1
    return {
        "conv.w": (1, hidden.get("k", 3), hidden.get("k", 3), C, c1),
        "conv.b": (c1,),
        "gru.wx": (feat, 3 * hd),
        "gru.wh": (hd, 3 * hd),
        "gru.b": (3 * hd,),
        "fc.w": (hd, K),
        "fc.b": (K,),
    }


def _check_dims(kind, dims, K, hidden):
    T, W, H, C = dims
    if min(dims) < 1:
        raise ModelError(f"dims must be positive, got {dims}")
    if K < 2:
        raise ModelError("class count must be at least 2")
    if W < 3 or H < 3:
        raise ModelError(f"frames {W}x{H} are smaller than the 3x3 kernel")
    if kind in (ModelKind.CONV3D, ModelKind.FACTORIZED) and (W % 2 or H % 2):
        raise ModelError(f"frame size {W}x{H} must be even for 2x2 pooling")
    if kind is ModelKind.RECURRENT and (W % hidden["pool"] or H % hidden["pool"]):
        raise ModelError(f"frame size {W}x{H} not divisible by pool {hidden['pool']}")


@dataclass
class Model:
    kind: ModelKind
    input_len: int
    frame_shape: tuple[int, int, int]
    K: int
    hidden: dict
    params: dict[str, np.ndarray]
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.input_len,) + tuple(self.frame_shape)

    @property
    def layer_taps(self) -> list[int]:
        return [0, 1, 2]

    @property
    def last_conv_tap(self) -> int:
        return 2 if self.kind is not ModelKind.RECURRENT else 1

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- graph construction -------------------------------------------------

    def _network(self, g: Graph, x: int, T: int, upto: int | None = None):
        """Append the network on input node ``x``; return (taps, logits)."""
        p = {name: g.input(name) for name in self.params}
        taps = [x]
        W, H, _ = self.frame_shape
        if self.kind is ModelKind.CONV3D:
            h = g.relu(g.conv3d(x, p["conv1.w"], p["conv1.b"]), name="conv1")
            taps.append(h)
            if upto == 1:
                return taps, None
            h = g.mean_pool(h, (1, 2, 2))
            h = g.relu(g.conv3d(h, p["conv2.w"], p["conv2.b"]), name="conv2")
            taps.append(h)
            if upto == 2:
                return taps, None
            h = g.mean_pool(h, (1, W // 2, H // 2))
            if self.hidden["tmax"]:
                h = g.max_pool(h, (T, 1, 1))
            else:
                h = g.mean_pool(h, (T, 1, 1))
            h = g.reshape(h, (-1, self.hidden["c2"]))
        elif self.kind is ModelKind.FACTORIZED:
            h = g.relu(g.conv3d(x, p["conv1s.w"], p["conv1s.b"]))
            h = g.relu(g.conv3d(h, p["conv1t.w"], p["conv1t.b"]), name="conv1")
            taps.append(h)
            if upto == 1:
                return taps, None
            h = g.mean_pool(h, (1, 2, 2))
            h = g.relu(g.conv3d(h, p["conv2s.w"], p["conv2s.b"]))
            h = g.relu(g.conv3d(h, p["conv2t.w"], p["conv2t.b"]), name="conv2")
            taps.append(h)
            if upto == 2:
                return taps, None
            h = g.mean_pool(h, (1, W // 2, H // 2))
            if self.hidden["tmax"]:
                h = g.max_pool(h, (T, 1, 1))
            else:
                h = g.mean_pool(h, (T, 1, 1))
            h = g.reshape(h, (-1, self.hidden["c2"]))
        else:
            c1, pool, hd = self.hidden["c1"], self.hidden["pool"], self.hidden["gru"]
            h = g.relu(g.conv3d(x, p["conv.w"], p["conv.b"]), name="conv")
            taps.append(h)
            if upto == 1:
                return taps, None
            h = g.mean_pool(h, (1, pool, pool), name="pooled")
            taps.append(h)
            if upto == 2:
                return taps, None
            feat = (W // pool) * (H // pool) * c1
            seq = g.reshape(h, (-1, T, feat))
            state = g.input("h0")
            for t in range(T):
                xt = g.reshape(g.slice(seq, t, t + 1, axis=1), (-1, feat))
                state = g.gru_cell(xt, state, p["gru.wx"], p["gru.wh"], p["gru.b"], name=f"gru{t}")
            h = state
        logits = g.dense(h, p["fc.w"], p["fc.b"], name="logits")
        return taps, logits

    def graph(self, purpose: str, T: int | None = None, parts: tuple[str, ...] = ("x",), tap: int | None = None):
        """Cached graphs.

        ``purpose`` is ``"loss"`` (inputs ``parts`` concatenated on time,
        ``onehot``, ``weights``; output the weighted cross-entropy),
        ``"probs"`` (softmax output) or ``"features"`` (activation at ``tap``).
        """
        T = self.input_len if T is None else T
        key = (purpose, T, parts, tap)
        if key in self._graphs:
            return self._graphs[key]
        g = Graph()
        ins = [g.input(name) for name in parts]
        x = ins[0] if len(ins) == 1 else g.concat(ins, axis=1, name="clip")
        if purpose == "features":
            taps, _ = self._network(g, x, T, upto=tap)
            g.output(taps[tap])
        else:
            _, logits = self._network(g, x, T)
            g.logits = logits
            if purpose == "loss":
                g.output(g.softmax_xent(logits, g.input("onehot"), g.input("weights"), name="loss"))
            elif purpose == "probs":
                g.output(g.softmax(logits, name="probs"))
            else:
                raise ValueError(purpose)
        self._graphs[key] = g
        return g

    def bindings(self, batch: int) -> dict[str, np.ndarray]:
        b = dict(self.params)
        if self.kind is ModelKind.RECURRENT:
            b["h0"] = np.zeros((batch, self.hidden["gru"]))
        return b

    def check_clip(self, frames: np.ndarray):
        if frames.shape != self.dims:
            raise ModelError(f"{self.name} expects clips of shape {self.dims}, got {frames.shape}")

    # -- inference ----------------------------------------------------------

    def probs(self, batch: np.ndarray) -> np.ndarray:
        """Class probabilities for a ``(B, T_in, W, H, C)`` batch."""
        if batch.ndim != 5 or batch.shape[1:] != self.dims:
            raise ModelError(f"{self.name} expects batches of shape (B, {self.dims}), got {batch.shape}")
        g = self.graph("probs")
        return eval_forward(g, {"x": batch, **self.bindings(batch.shape[0])})

    def loss_and_grads(self, batch, labels, wrt_params=True, weights=None):
        B = batch.shape[0]
        g = self.graph("loss")
        onehot = np.eye(self.K)[labels]
        w = np.full(B, 1.0 / B) if weights is None else weights
        loss = eval_forward(g, {"x": batch, "onehot": onehot, "weights": w, **self.bindings(B)})
        if not wrt_params:
            return float(loss[0]), {}
        targets = [g.inputs[n] for n in self.params]
        grads = backward(g, g.outputs[0], targets)
        return float(loss[0]), {n: grads[g.inputs[n]] for n in self.params}


def build_model(kind, dims, K: int, hidden: dict | None = None, seed: int = 0) -> Model:
    """Seeded uniform initialisation with bounds scaled by fan-in."""
    kind = ModelKind(kind)
    hidden = {**DEFAULT_HIDDEN[kind], **(hidden or {})}
    dims = tuple(int(d) for d in dims)
    _check_dims(kind, dims, K, hidden)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(kind, dims, K, hidden).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            if name == "gru.b":
                # update gate starts leaning toward keeping the state
                params[name][: hidden["gru"]] = 1.0
            continue
        if name.startswith("gru."):
            bound = 1.0 / np.sqrt(hidden["gru"])
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
        params[name] = to_storage(rng.uniform(-bound, bound, size=shape))
    return Model(kind, dims[0], dims[1:], K, hidden, params)


@dataclass
class TrainReport:
    epochs: int
    train_accuracy: float
    test_accuracy: float
    seconds: float
    losses: list[float] = field(default_factory=list)


def _prepare(model: Model, clips: list[VideoClip]):
    x = np.stack([pad_clip(c, model.input_len).frames for c in clips])
    y = np.array([c.label for c in clips], dtype=int)
    return x, y


def accuracy(model: Model, clips: list[VideoClip], batch_size: int = 64) -> float:
    if not clips:
        return float("nan")
    x, y = _prepare(model, clips)
    correct = 0
    for s in range(0, len(y), batch_size):
        p = model.probs(x[s : s + batch_size])
        correct += int((p.argmax(axis=1) == y[s : s + batch_size]).sum())
    return correct / len(y)


def train_model(
    model: Model,
    dataset: Dataset,
    epochs: int | None = None,
    lr: float = 0.01,
    batch_size: int = 8,
    seed: int = 0,
    clips=None,
    shift_augment: bool = True,
    card_rate: float = 0.1,
) -> TrainReport:
    """Mini-batch Adam on mean cross-entropy.

    Clean clips are padded to the model's input length by repeating their
    last frame. ``epochs`` defaults per model kind. With ``shift_augment``
    every batch is circularly shifted in space by a random offset per clip;
    the toy clips wrap around, so the label is unchanged. A fraction ``card_rate`` of the samples get a
    random glyph ending card in place of the repeated-frame tail, so cards
    carry no class evidence. ``clips`` overrides the training split.
    """
    train = list(dataset.train if clips is None else clips)
    if not train:
        raise ModelError("empty training set")
    if dataset.K != model.K:
        raise ModelError(f"dataset has {dataset.K} classes, model {model.K}")
    if epochs is None:
        epochs = DEFAULT_EPOCHS[model.kind]
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise ModelError(f"bad hyperparameters: epochs={epochs} lr={lr} batch_size={batch_size}")
    t0 = time.perf_counter()
    x, y = _prepare(model, train)
    rng = np.random.default_rng(seed)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m1 = {n: np.zeros_like(v) for n, v in model.params.items()}
    m2 = {n: np.zeros_like(v) for n, v in model.params.items()}
    step = 0
    losses = []
    W, H = model.frame_shape[:2]
    tail = model.input_len - min(c.length for c in train)
    cards = []
    if card_rate > 0 and tail > 0 and len({c.length for c in train}) == 1:
        cards = [make_dummy_frames(p, tail, W, H, model.frame_shape[2]).frames for p in PatternKind]
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            xb = x[idx]
            if shift_augment:
                offsets = rng.integers(0, (W, H), size=(len(idx), 2))
                xb = np.stack([np.roll(v, (int(dx), int(dy)), axis=(1, 2)) for v, (dx, dy) in zip(xb, offsets)])
            if cards:
                xb = xb.copy()
                use = rng.random(len(idx)) < card_rate
                pick = rng.integers(0, len(cards), size=len(idx))
                for i in np.flatnonzero(use):
                    xb[i, -tail:] = cards[pick[i]]
            loss, grads = model.loss_and_grads(xb, y[idx])
            total += loss * len(idx)
            step += 1
            for name, g in grads.items():
                m1[name] = b1 * m1[name] + (1 - b1) * g
                m2[name] = b2 * m2[name] + (1 - b2) * g * g
                upd = (m1[name] / (1 - b1**step)) / (np.sqrt(m2[name] / (1 - b2**step)) + eps)
                model.params[name] = to_storage(model.params[name] - lr * upd)
        losses.append(total / len(y))
    return TrainReport(
        epochs=epochs,
        train_accuracy=accuracy(model, train),
        test_accuracy=accuracy(model, dataset.test) if clips is None else float("nan"),
        seconds=time.perf_counter() - t0,
        losses=losses,
    )


def predict(model: Model, clip) -> tuple[np.ndarray, int]:
    """Class distribution and argmax label (ties go to the lowest index)."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float64)
    model.check_clip(frames)
    p = model.probs(frames[None])[0]
    return p, int(np.argmax(p))


def features_at(model: Model, frames: np.ndarray, layer: int) -> np.ndarray:
    """Activation of ``frames`` (``n x W x H x C``) at layer tap ``layer``."""
    if layer not in model.layer_taps:
        raise ModelError(f"{model.name} has no layer tap {layer}; valid taps are {model.layer_taps}")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1:] != tuple(model.frame_shape):
        raise ModelError(f"frames of shape {frames.shape} do not match {model.frame_shape}")
    if layer == 0:
        return frames.copy()
    g = model.graph("features", T=frames.shape[0], tap=layer)
    return eval_forward(g, {"x": frames[None], **model.bindings(1)})[0]


def feature_dims(model: Model, n_frames: int, layer: int) -> tuple[int, ...]:
    """Declared activation shape at a tap, from the architecture alone."""
    W, H, C = model.frame_shape
    if layer == 0:
        return (n_frames, W, H, C)
    if model.kind is ModelKind.RECURRENT:
        c1, pool = model.hidden["c1"], model.hidden["pool"]
        return (n_frames, W, H, c1) if layer == 1 else (n_frames, W // pool, H // pool, c1)
    if layer == 1:
        return (n_frames, W, H, model.hidden["c1"])
    return (n_frames, W // 2, H // 2, model.hidden["c2"])

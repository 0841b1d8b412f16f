"""Synthetic motion clips, glyph ending cards and frame appending.

Clips are ``(T, W, H, C)`` float64 arrays in ``[0, 1]`` whose values lie on the
float32 grid (see :func:`to_storage`), so they survive the binary tensor
format unchanged.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# 3x5 glyphs, row-major strings, '#' = foreground
_FONT = {
    "T": ("###", ".#.", ".#.", ".#.", ".#."),
    "H": ("#.#", "#.#", "###", "#.#", "#.#"),
    "A": (".#.", "#.#", "###", "#.#", "#.#"),
    "N": ("#.#", "###", "###", "###", "#.#"),
    "K": ("#.#", "##.", "#..", "##.", "#.#"),
    "S": (".##", "#..", ".#.", "..#", "##."),
    "F": ("###", "#..", "##.", "#..", "#.."),
    "O": (".#.", "#.#", "#.#", "#.#", ".#."),
    "R": ("##.", "#.#", "##.", "#.#", "#.#"),
    "W": ("#.#", "#.#", "#.#", "###", "#.#"),
    "C": (".##", "#..", "#..", "#..", ".##"),
    "I": ("###", ".#.", ".#.", ".#.", "###"),
    "G": (".##", "#..", "#.#", "#.#", ".##"),
}
CARD_TEXT = "THANKSFORWATCHING"
CELL = (4, 6)  # glyph cell (width, height): 3x5 glyph plus one pixel of spacing
# dyadic levels, so a card and its inverse are both exact in float32
CARD_DARK = 0.0625
CARD_BRIGHT = 1.0 - CARD_DARK


class PatternKind(str, enum.Enum):
    GLYPH_ON_DARK = "GlyphOnDark"
    GLYPH_ON_LIGHT = "GlyphOnLight"
    GLYPH_LARGE = "GlyphLarge"


def to_storage(a) -> np.ndarray:
    """Round to the float32 grid, keeping float64 storage."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def glyph_bitmap(W: int, H: int, scale: int = 1) -> np.ndarray:
    """Boolean ``(W, H)`` map of glyph foreground pixels for the ending card.

    Characters of :data:`CARD_TEXT` are laid out cyclically in a grid of
    ``CELL * scale`` cells starting at the top-left corner; glyphs crossing the
    frame border are cropped.
    """
    cw, ch = CELL[0] * scale, CELL[1] * scale
    fg = np.zeros((W, H), dtype=bool)
    k = 0
    for y0 in range(0, H, ch):
        for x0 in range(0, W, cw):
            glyph = _FONT[CARD_TEXT[k % len(CARD_TEXT)]]
            k += 1
            for gy, row in enumerate(glyph):
                for gx, ch_ in enumerate(row):
                    if ch_ != "#":
                        continue
                    for sy in range(scale):
                        for sx in range(scale):
                            x, y = x0 + gx * scale + sx, y0 + gy * scale + sy
                            if x < W and y < H:
                                fg[x, y] = True
    return fg


def pattern_foreground(pattern: PatternKind, W: int, H: int) -> np.ndarray:
    pattern = PatternKind(pattern)
    return glyph_bitmap(W, H, scale=2 if pattern is PatternKind.GLYPH_LARGE else 1)


@dataclass(frozen=True)
class DummyFrames:
    frames: np.ndarray
    pattern: PatternKind

    @property
    def delta_t(self) -> int:
        return self.frames.shape[0]


def make_dummy_frames(pattern, delta_t: int, W: int, H: int, C: int) -> DummyFrames:
    """A static ending card repeated over ``delta_t`` frames."""
    pattern = PatternKind(pattern)
    if delta_t < 0 or min(W, H, C) < 1:
        raise ValueError(f"bad dummy frame dims ({delta_t}, {W}, {H}, {C})")
    fg = pattern_foreground(pattern, W, H)
    card = to_storage(np.where(fg, CARD_BRIGHT, CARD_DARK))
    if pattern is PatternKind.GLYPH_ON_LIGHT:
        card = 1.0 - card
    frames = np.broadcast_to(card[None, :, :, None], (delta_t, W, H, C))
    return DummyFrames(frames.copy(), pattern)


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray
    label: int

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def append_frames(clip: VideoClip, dummy: DummyFrames, pad: int = 0) -> VideoClip:
    """``clip ++ dummy ++ pad copies of the clip's last frame``."""
    x = clip.frames
    d = dummy.frames
    if d.shape[0] and d.shape[1:] != x.shape[1:]:
        raise ValueError(f"dummy frames {d.shape[1:]} do not match clip frames {x.shape[1:]}")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    parts = [x]
    if d.shape[0]:
        parts.append(d)
    if pad:
        parts.append(np.repeat(x[-1:], pad, axis=0))
    if len(parts) == 1:
        return VideoClip(x.copy(), clip.label)
    return VideoClip(np.concatenate(parts, axis=0), clip.label)


def pad_clip(clip: VideoClip, length: int) -> VideoClip:
    """Extend a clip to ``length`` frames by repeating its last frame."""
    if length < clip.length:
        raise ValueError(f"clip of {clip.length} frames is longer than {length}")
    return append_frames(clip, DummyFrames(np.zeros((0,) + clip.frames.shape[1:]), PatternKind.GLYPH_ON_DARK), length - clip.length)


@dataclass(frozen=True)
class DataConfig:
    K: int = 4
    clips_per_class: int = 40
    T: int = 12
    W: int = 16
    H: int = 16
    C: int = 1
    noise: float = 0.05
    shape_size: int = 4
    speed: float = 1.0
    test_fraction: float = 0.1


@dataclass
class Dataset:
    clips: list[VideoClip]
    K: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    config: DataConfig = field(default_factory=DataConfig)

    @property
    def train(self) -> list[VideoClip]:
        return [self.clips[i] for i in self.train_idx]

    @property
    def test(self) -> list[VideoClip]:
        return [self.clips[i] for i in self.test_idx]

    def arrays(self, which="train"):
        clips = self.train if which == "train" else self.test if which == "test" else self.clips
        return np.stack([c.frames for c in clips]), np.array([c.label for c in clips])


BACKGROUND = 0.1
FOREGROUND = 0.9


def class_velocity(k: int, K: int, speed: float = 1.0) -> tuple[float, float]:
    """Per-frame displacement (dx, dy) of class ``k``: evenly spaced directions."""
    theta = 2.0 * np.pi * k / K
    vx, vy = speed * np.cos(theta), speed * np.sin(theta)
    return float(np.round(vx, 12)), float(np.round(vy, 12))


def render_clip(k: int, cfg: DataConfig, start: tuple[float, float], noise: np.ndarray | None) -> np.ndarray:
    vx, vy = class_velocity(k, cfg.K, cfg.speed)
    frames = np.full((cfg.T, cfg.W, cfg.H, cfg.C), BACKGROUND)
    s = cfg.shape_size
    for t in range(cfg.T):
        x0 = int(np.floor(start[0] + vx * t)) % cfg.W
        y0 = int(np.floor(start[1] + vy * t)) % cfg.H
        xs = (x0 + np.arange(s)) % cfg.W
        ys = (y0 + np.arange(s)) % cfg.H
        frames[t][np.ix_(xs, ys)] = FOREGROUND
    if noise is not None:
        frames = frames + noise
    return to_storage(np.clip(frames, 0.0, 1.0))


def synth_dataset(config: DataConfig | None = None, seed: int = 0, **overrides) -> Dataset:
    """Balanced motion-direction dataset with a seeded 9:1 train/test split.

    Each class is a bright square translating (with wrap-around) in a
    class-specific direction; clips of one class differ only in starting
    position and additive uniform noise of amplitude ``config.noise``.
    """
    cfg = config or DataConfig()
    if overrides:
        cfg = DataConfig(**{**cfg.__dict__, **overrides})
    if cfg.K < 2:
        raise ValueError("need at least two classes")
    if min(cfg.clips_per_class, cfg.T, cfg.W, cfg.H, cfg.C, cfg.shape_size) < 1:
        raise ValueError(f"degenerate dataset dims: {cfg}")
    if cfg.shape_size > min(cfg.W, cfg.H):
        raise ValueError("shape larger than frame")
    if not 0.0 <= cfg.noise <= 0.05:
        raise ValueError("noise amplitude must lie in [0, 0.05]")
    rng = np.random.default_rng(seed)
    clips = []
    for k in range(cfg.K):
        for _ in range(cfg.clips_per_class):
            start = (rng.uniform(0, cfg.W), rng.uniform(0, cfg.H))
            # drawn even at zero amplitude so positions do not depend on it
            unit = rng.uniform(-1.0, 1.0, size=(cfg.T, cfg.W, cfg.H, cfg.C))
            clips.append(VideoClip(render_clip(k, cfg, start, cfg.noise * unit), k))
    n = len(clips)
    n_test = int(round(n * cfg.test_fraction))
    perm = rng.permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return Dataset(clips, cfg.K, train_idx, test_idx, seed, cfg)

"""Frame-level fingerspelling detection and weak-interval refiltering.

A small MLP scores each frame as fingerspelling or not; a sliding-window
vote smooths the per-frame decisions into contiguous intervals; weak
annotations are then tightened to the detected interval or rejected when
the detector finds zero or several events inside the padded search range.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import Annotation, Clip, DataError, ModelCheckpoint
from .features import HAND_FEATURE_DIM, clip_hand_features
from .nn import Adam, Dropout, GradientError, LayerNorm, Linear, ReLU

REJECT_NO_FS = "no_fingerspelling"
REJECT_MULTI = "multiple_events"
TIGHTENED = "tightened"


@dataclass(frozen=True)
class DetectorConfig:
    input_dim: int = HAND_FEATURE_DIM
    layer_units: tuple[int, ...] = (128, 64, 32)
    dropout: float = 0.3
    window_w: int = 6
    window_k: int = 4
    frame_threshold: float = 0.5
    search_pad: int = 12

    def __post_init__(self) -> None:
        if not 1 <= self.window_k <= self.window_w:
            raise DataError(f"need 1 <= window_k <= window_w, got {self.window_k}/{self.window_w}")
        if not 0.0 < self.frame_threshold < 1.0:
            raise DataError(f"frame_threshold must be in (0,1), got {self.frame_threshold}")
        if self.search_pad < 0:
            raise DataError("search_pad must be >= 0")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layer_units": list(self.layer_units),
            "dropout": self.dropout,
            "window_w": self.window_w,
            "window_k": self.window_k,
            "frame_threshold": self.frame_threshold,
            "search_pad": self.search_pad,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["layer_units"] = tuple(d.get("layer_units", (128, 64, 32)))
        return cls(**d)


@dataclass(frozen=True)
class Interval:
    start: int
    end: int  # inclusive

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise DataError(f"interval start {self.start} > end {self.end}")
        if self.start < 0:
            raise DataError(f"negative interval start {self.start}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Detector:
    """MLP over per-frame hand features: (LN, ReLU, dropout) blocks + sigmoid."""

    def __init__(self, cfg: DetectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = []
        prev = cfg.input_dim
        for i, units in enumerate(cfg.layer_units):
            self.blocks.append((
                Linear(prev, units, rng, f"det.{i}.lin"),
                LayerNorm(units, f"det.{i}.ln"),
                ReLU(),
                Dropout(cfg.dropout),
            ))
            prev = units
        self.head = Linear(prev, 1, rng, "det.head")

    def params(self):
        out = []
        for lin, ln, _, _ in self.blocks:
            out.extend(lin.params())
            out.extend(ln.params())
        out.extend(self.head.params())
        return out

    def forward_logits(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise GradientError(
                f"detector expects (T, {self.cfg.input_dim}) features, got {x.shape}")
        h = x
        for lin, ln, relu, drop in self.blocks:
            h = drop.forward(relu.forward(ln.forward(lin.forward(h))), train, rng)
        return self.head.forward(h)[:, 0]

    def backward_logits(self, dz: np.ndarray) -> None:
        dh = self.head.backward(dz[:, None])
        for lin, ln, relu, drop in reversed(self.blocks):
            dh = lin.backward(ln.backward(relu.backward(drop.backward(dh))))

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Per-frame fingerspelling probabilities in (0,1)."""
        return sigmoid(self.forward_logits(x, train, rng))

    def to_checkpoint(self, seed_note: str = "") -> ModelCheckpoint:
        weights = {p.name: p.value.reshape(-1).copy() for p in self.params()}
        return ModelCheckpoint(model_kind="detector", arch_config=self.cfg.to_dict(),
                               weights=weights, rng_seed_provenance=seed_note)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "Detector":
        if ckpt.model_kind != "detector":
            raise DataError(f"checkpoint holds a {ckpt.model_kind!r} model")
        cfg = DetectorConfig.from_dict(ckpt.arch_config)
        det = cls(cfg, np.random.default_rng(0))
        for p in det.params():
            if p.name not in ckpt.weights:
                raise DataError(f"checkpoint missing weight {p.name!r}")
            flat = ckpt.weights[p.name]
            if flat.size != p.value.size:
                raise DataError(f"weight {p.name!r} has {flat.size} values, expected {p.value.size}")
            p.value[...] = flat.reshape(p.value.shape)
        return det


def smooth(binary, w: int = 6, k: int = 4) -> np.ndarray:
    """Sliding-window vote: a frame is positive iff some full w-frame window
    containing it holds at least k positives.  Windows truncated at the edges
    do not vote."""
    x = np.asarray(binary, dtype=np.int64)
    if x.ndim != 1:
        raise DataError("smooth expects a 1-D binary array")
    if not 1 <= k <= w:
        raise DataError(f"need 1 <= k <= w, got k={k} w={w}")
    T = len(x)
    out = np.zeros(T, dtype=np.int64)
    if T < w:
        return out
    counts = np.convolve(x, np.ones(w, dtype=np.int64), mode="valid")
    cover = np.zeros(T + 1, dtype=np.int64)
    starts = np.nonzero(counts >= k)[0]
    np.add.at(cover, starts, 1)
    np.add.at(cover, starts + w, -1)
    out[np.cumsum(cover[:-1]) > 0] = 1
    return out


def extract_intervals(binary) -> list[Interval]:
    """Maximal runs of ones, as inclusive intervals, sorted and disjoint."""
    x = np.asarray(binary, dtype=np.int64)
    if x.ndim != 1:
        raise DataError("expects a 1-D binary array")
    padded = np.r_[0, x, 0]
    rises = np.nonzero(np.diff(padded) == 1)[0]
    falls = np.nonzero(np.diff(padded) == -1)[0]
    return [Interval(int(a), int(b - 1)) for a, b in zip(rises, falls)]


def intervals_to_mask(intervals, T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=np.int64)
    for iv in intervals:
        if iv.end >= T:
            raise DataError(f"interval {iv} exceeds length {T}")
        mask[iv.start:iv.end + 1] = 1
    return mask


def detect_intervals(det: Detector, features: np.ndarray) -> list[Interval]:
    """Run the detector over per-frame features and return smoothed intervals."""
    probs = det.forward(features)
    raw = (probs >= det.cfg.frame_threshold).astype(np.int64)
    return extract_intervals(smooth(raw, det.cfg.window_w, det.cfg.window_k))


@dataclass(frozen=True)
class RefilterResult:
    status: str  # TIGHTENED | REJECT_NO_FS | REJECT_MULTI
    annotation: Annotation | None
    n_intervals: int


def refilter_annotation(clip: Clip, weak: Annotation, det: Detector,
                        hand: np.ndarray | None = None) -> RefilterResult:
    """Tighten or reject a weak annotation using detected intervals.

    The detector searches the weak interval padded by ``search_pad`` frames on
    both sides.  Zero detected events reject the entry, two or more reject it
    as merged events, exactly one replaces the weak interval (grade stays
    weak).  ``hand`` lets callers reuse precomputed per-frame features.
    """
    weak.validate_against(clip)
    if hand is None:
        hand = clip_hand_features(clip)
    T = len(clip.frames)
    lo = max(0, weak.start - det.cfg.search_pad)
    hi = min(T - 1, weak.end + det.cfg.search_pad)
    found = detect_intervals(det, hand[lo:hi + 1])
    if len(found) == 0:
        return RefilterResult(REJECT_NO_FS, None, 0)
    if len(found) > 1:
        return RefilterResult(REJECT_MULTI, None, len(found))
    iv = found[0]
    tightened = Annotation(
        clip_id=weak.clip_id, start=lo + iv.start, end=lo + iv.end,
        word=weak.word, letters=weak.letters, frame_labels=None, grade=weak.grade,
    )
    return RefilterResult(TIGHTENED, tightened, 1)


def refilter_pool(clips_by_id: dict[str, Clip], weaks, det: Detector):
    """Refilter a pool of weak annotations.

    Returns (kept annotations, stage counts).  Counts follow the filtering
    report layout: input size, each rejection reason, and the surviving count.
    """
    kept = []
    counts = {"input": 0, REJECT_NO_FS: 0, REJECT_MULTI: 0, "kept": 0}
    hand_cache: dict[str, np.ndarray] = {}
    for weak in weaks:
        counts["input"] += 1
        clip = clips_by_id.get(weak.clip_id)
        if clip is None:
            raise DataError(f"annotation references unknown clip {weak.clip_id!r}")
        if weak.clip_id not in hand_cache:
            hand_cache[weak.clip_id] = clip_hand_features(clip)
        res = refilter_annotation(clip, weak, det, hand_cache[weak.clip_id])
        if res.status == TIGHTENED:
            kept.append(res.annotation)
            counts["kept"] += 1
        else:
            counts[res.status] += 1
    return kept, counts


@dataclass
class DetectorTrainLog:
    losses: list[float] = field(default_factory=list)


def train_detector(X: np.ndarray, y: np.ndarray, cfg: DetectorConfig,
                   seed: int = 0, epochs: int = 4, lr: float = 1e-3,
                   batch_size: int = 512) -> tuple[Detector, DetectorTrainLog]:
    """Fit the frame classifier with class-balanced binary cross-entropy.

    Balancing weights each class inversely to its frequency so sparse
    fingerspelling frames are not swamped by the background class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("X must be (N,F) with matching labels")
    n = len(y)
    n_pos = float(y.sum())
    n_neg = float(n - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("need both classes to train the detector")
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * n_neg)
    sample_w = np.where(y > 0.5, w_pos, w_neg)

    rng = np.random.default_rng(seed)
    det = Detector(cfg, rng)
    opt = Adam(det.params(), lr=lr)
    log = DetectorTrainLog()
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            xb, yb, wb = X[idx], y[idx], sample_w[idx]
            opt.zero_grad()
            z = det.forward_logits(xb, train=True, rng=rng)
            # stable BCE-with-logits: softplus(z) - y*z, weighted per sample
            loss = float(np.mean(wb * (np.logaddexp(0.0, z) - yb * z)))
            dz = wb * (sigmoid(z) - yb) / len(idx)
            det.backward_logits(dz)
            opt.step()
            epoch_loss += loss * len(idx)
        log.losses.append(epoch_loss / n)
    return det, log

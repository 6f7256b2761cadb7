"""Hand feature extraction, context stacking, and train-time augmentation.

The per-frame hand feature is 128-dimensional: 63 root-relative left-hand
coordinates, 63 root-relative right-hand coordinates, then the 2D and 3D
distances between the hand centers.  Context stacking concatenates three
neighboring frames (stride 1, edge replication) into the 384-dim vector the
models consume.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datamodel import LETTERS, Clip, DataError, KeypointFrame

HAND_FEATURE_DIM = 128
STACKED_DIM = 3 * HAND_FEATURE_DIM


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame features for one clip interval.

    The clip pipeline always produces (T, 384) hand rows (stacked context);
    the container itself only demands matched 2-D blocks so models of any
    width share it.
    """

    hand: np.ndarray            # (T, D_hand); 384 from the clip pipeline
    lip: Optional[np.ndarray] = None  # (T, D_lip)

    def __post_init__(self) -> None:
        if self.hand.ndim != 2:
            raise DataError(f"hand features must be 2-D, got shape {self.hand.shape}")
        if self.lip is not None and (
                self.lip.ndim != 2 or self.lip.shape[0] != self.hand.shape[0]):
            raise DataError("lip block must be 2-D with one row per hand row")

    def __len__(self) -> int:
        return self.hand.shape[0]


def extract_hand_features(frame: KeypointFrame) -> np.ndarray:
    """128-dim feature vector: root-relative joints + inter-hand distances.

    Each hand is translated so its wrist (joint 0) sits at the origin; the 3D
    distance is taken between the hand centroids before that translation.
    """
    left = frame.left_joints
    right = frame.right_joints
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
        raise DataError("non-finite joint coordinates")
    dist_3d = float(np.linalg.norm(left.mean(axis=0) - right.mean(axis=0)))
    dist_2d = float(np.linalg.norm(frame.left_center_2d - frame.right_center_2d))
    out = np.empty(HAND_FEATURE_DIM, dtype=np.float64)
    out[:63] = (left - left[0]).reshape(-1)
    out[63:126] = (right - right[0]).reshape(-1)
    out[126] = dist_2d
    out[127] = dist_3d
    return out


def clip_hand_features(clip: Clip) -> np.ndarray:
    """Per-frame 128-dim features for a whole clip, as a (T, 128) matrix."""
    return np.stack([extract_hand_features(fr) for fr in clip.frames])


def stack_context(frames: np.ndarray) -> np.ndarray:
    """Concatenate each frame with its neighbors: row t = f[t-1] | f[t] | f[t+1].

    Sequence boundaries replicate the edge frame.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] < 1:
        raise DataError("stack_context needs at least one frame")
    prev = np.vstack([frames[:1], frames[:-1]])
    nxt = np.vstack([frames[1:], frames[-1:]])
    return np.hstack([prev, frames, nxt])


def clip_feature_matrix(clip: Clip) -> np.ndarray:
    """(T, 384) context-stacked hand features for a clip."""
    return stack_context(clip_hand_features(clip))


def clip_lip_matrix(clip: Clip) -> Optional[np.ndarray]:
    if clip.frames[0].lip is None:
        return None
    return np.stack([fr.lip for fr in clip.frames]).astype(np.float64)


def sequence_for_interval(clip: Clip, start: int, end: int,
                          hand: Optional[np.ndarray] = None) -> FeatureSequence:
    """FeatureSequence for an inclusive frame interval of a clip.

    Context stacking is done over the whole clip first so interval rows see
    their true neighbors; ``hand`` can pass a precomputed clip_feature_matrix.
    """
    if hand is None:
        hand = clip_feature_matrix(clip)
    lip = clip_lip_matrix(clip)
    return FeatureSequence(
        hand=hand[start:end + 1].copy(),
        lip=None if lip is None else lip[start:end + 1].copy(),
    )


def augment_noise(seq: FeatureSequence, sigma: float, rng: np.random.Generator) -> FeatureSequence:
    """Add i.i.d. zero-mean Gaussian noise to every hand and lip entry."""
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return seq
    hand = seq.hand + rng.normal(0.0, sigma, size=seq.hand.shape)
    lip = None if seq.lip is None else seq.lip + rng.normal(0.0, sigma, size=seq.lip.shape)
    return FeatureSequence(hand=hand, lip=lip)


def augment_temporal(seq: FeatureSequence, labels: Optional[np.ndarray],
                     rng: np.random.Generator,
                     p_swap: float = 0.05, p_drop: float = 0.02, p_dup: float = 0.05):
    """Frame-level temporal jitter: neighbor swap, frame drop, frame duplication.

    One left-to-right pass over the input; each frame draws at most one
    operation with precedence swap > drop > duplicate.  A swap emits the next
    frame before the current one and consumes both.  Labels, when given, are
    remapped with the same source indices.  Never returns an empty sequence.
    """
    for name, p in (("p_swap", p_swap), ("p_drop", p_drop), ("p_dup", p_dup)):
        if not 0.0 <= p <= 1.0:
            raise DataError(f"{name} must be in [0,1], got {p}")
    T = len(seq)
    draws = rng.random((T, 3))
    src: list[int] = []
    t = 0
    while t < T:
        u_swap, u_drop, u_dup = draws[t]
        if u_swap < p_swap and t + 1 < T:
            src.extend((t + 1, t))
            t += 2
        elif u_drop < p_drop:
            t += 1
        elif u_dup < p_dup:
            src.extend((t, t))
            t += 1
        else:
            src.append(t)
            t += 1
    if not src:
        src = [0]
    idx = np.asarray(src, dtype=np.int64)
    out = FeatureSequence(
        hand=seq.hand[idx],
        lip=None if seq.lip is None else seq.lip[idx],
    )
    out_labels = None if labels is None else np.asarray(labels)[idx]
    return out, out_labels


def class_weights(letter_counts: dict[str, int]) -> dict[str, float]:
    """Inverse-frequency letter weights, normalized to sum 1 over seen letters."""
    seen = {c: n for c, n in letter_counts.items() if n > 0}
    if not seen:
        raise DataError("no labeled letters to weight")
    raw = {c: 1.0 / max(n, 1) for c, n in seen.items()}
    total = sum(raw.values())
    return {c: w / total for c, w in raw.items()}


def count_letters(annotations) -> dict[str, int]:
    counts = {c: 0 for c in LETTERS}
    for ann in annotations:
        if ann.letters:
            for c in ann.letters:
                counts[c] += 1
    return counts


def annotation_weights(annotations) -> np.ndarray:
    """Per-annotation sampling weight = mean of its letters' class weights."""
    weights = class_weights(count_letters(annotations))
    out = np.empty(len(annotations), dtype=np.float64)
    for i, ann in enumerate(annotations):
        if not ann.letters:
            raise DataError(f"annotation {ann.clip_id} has no letters to weight")
        out[i] = float(np.mean([weights[c] for c in ann.letters]))
    return out

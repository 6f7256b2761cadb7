"""Core domain types and file formats.

Conventions fixed here and relied on everywhere else:

* class index 0 is the blank symbol, letters a-z occupy indices 1-26
  (27 output classes total);
* frame intervals are inclusive and 0-based;
* per-frame label strings use ``-`` for blank;
* all model weights are float64, stored little-endian.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LETTERS = "abcdefghijklmnopqrstuvwxyz"
BLANK_INDEX = 0
BLANK_CHAR = "-"
N_CLASSES = 27  # blank + 26 letters

GRADES = ("strong", "weak", "accepted", "rejected")

CHECKPOINT_SCHEMA_VERSION = 1
MODEL_KINDS = ("detector", "frame_classifier", "recognizer")


class DataError(ValueError):
    """Malformed or invariant-violating data, with context in the message."""


class CheckpointError(DataError):
    """Checkpoint file unreadable or incompatible."""


def letter_to_index(c: str) -> int:
    """Class index of a letter, in 1..26."""
    if len(c) != 1 or not "a" <= c <= "z":
        raise DataError(f"not a lowercase letter: {c!r}")
    return ord(c) - ord("a") + 1


def index_to_letter(i: int) -> str:
    if not 1 <= i <= 26:
        raise DataError(f"letter index out of range: {i}")
    return LETTERS[i - 1]


def word_to_indices(word: str) -> np.ndarray:
    """Letter string -> int array over 1..26 (no blanks)."""
    return np.array([letter_to_index(c) for c in word], dtype=np.int64)


def indices_to_word(idx) -> str:
    return "".join(index_to_letter(int(i)) for i in idx)


def labels_to_indices(labels: str) -> np.ndarray:
    """Frame-label string (letters and '-') -> int array over 0..26."""
    out = np.empty(len(labels), dtype=np.int64)
    for t, c in enumerate(labels):
        out[t] = BLANK_INDEX if c == BLANK_CHAR else letter_to_index(c)
    return out


def indices_to_labels(idx) -> str:
    return "".join(BLANK_CHAR if i == BLANK_INDEX else index_to_letter(int(i)) for i in idx)


def validate_word(word: str, what: str = "word") -> None:
    if not word or any(c not in LETTERS for c in word):
        raise DataError(f"{what} must be a non-empty string over a-z, got {word!r}")


def validate_frame_labels(labels: str, what: str = "frame_labels") -> None:
    bad = {c for c in labels if c != BLANK_CHAR and c not in LETTERS}
    if bad:
        raise DataError(f"{what} contains symbols outside alphabet+blank: {sorted(bad)}")


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class KeypointFrame:
    """Per-frame 3D joints for both hands plus 2D centers and optional lip vector."""

    left_joints: np.ndarray   # (21, 3)
    right_joints: np.ndarray  # (21, 3)
    left_center_2d: np.ndarray   # (2,)
    right_center_2d: np.ndarray  # (2,)
    lip: Optional[np.ndarray] = None  # (D_lip,)

    def validate(self, where: str = "frame") -> None:
        for name, arr, shape in (
            ("left_joints", self.left_joints, (21, 3)),
            ("right_joints", self.right_joints, (21, 3)),
            ("left_center_2d", self.left_center_2d, (2,)),
            ("right_center_2d", self.right_center_2d, (2,)),
        ):
            if arr.shape != shape:
                raise DataError(f"{where}: {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{where}: non-finite value in {name}")
        if self.lip is not None:
            if self.lip.ndim != 1:
                raise DataError(f"{where}: lip must be a 1-D vector")
            if not np.all(np.isfinite(self.lip)):
                raise DataError(f"{where}: non-finite value in lip")


@dataclass(frozen=True)
class Clip:
    clip_id: str
    fps: float
    frames: tuple[KeypointFrame, ...]

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if self.fps <= 0:
            raise DataError(f"clip {self.clip_id}: fps must be > 0")
        if not self.frames:
            raise DataError(f"clip {self.clip_id}: empty frame sequence")
        d_lip = None
        for t, fr in enumerate(self.frames):
            fr.validate(where=f"clip {self.clip_id} frame {t}")
            d = None if fr.lip is None else fr.lip.shape[0]
            if t == 0:
                d_lip = d
            elif d != d_lip:
                raise DataError(f"clip {self.clip_id} frame {t}: lip dimension changed within clip")

    @property
    def lip_dim(self) -> Optional[int]:
        return None if self.frames[0].lip is None else int(self.frames[0].lip.shape[0])


@dataclass
class Annotation:
    """A fingerspelling interval [start, end] (inclusive) inside one clip.

    ``word`` is the associated English word; ``letters`` the exact fingerspelt
    sequence when known; ``frame_labels`` per-frame letters/blanks covering the
    interval.  ``grade`` records provenance: strong / weak / accepted / rejected.
    """

    clip_id: str
    start: int
    end: int
    word: Optional[str] = None
    letters: Optional[str] = None
    frame_labels: Optional[str] = None
    grade: str = "weak"

    def __post_init__(self) -> None:
        if self.grade not in GRADES:
            raise DataError(f"annotation {self.clip_id}: unknown grade {self.grade!r}")
        if self.start < 0 or self.end < self.start:
            raise DataError(
                f"annotation {self.clip_id}: bad interval [{self.start}, {self.end}]")
        if self.word is not None:
            validate_word(self.word, "word")
        if self.letters is not None:
            validate_word(self.letters, "letters")
        if self.frame_labels is not None:
            validate_frame_labels(self.frame_labels)
            if len(self.frame_labels) != self.length:
                raise DataError(
                    f"annotation {self.clip_id}: frame_labels length {len(self.frame_labels)}"
                    f" != interval length {self.length}")
        if self.grade == "accepted" and self.letters is None:
            raise DataError(f"annotation {self.clip_id}: accepted grade requires letters")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def validate_against(self, clip: Clip) -> None:
        if self.clip_id != clip.clip_id:
            raise DataError(f"annotation clip_id {self.clip_id} does not match clip {clip.clip_id}")
        if self.end >= len(clip):
            raise DataError(
                f"annotation {self.clip_id}: interval end {self.end} exceeds clip length {len(clip)}")


@dataclass(frozen=True)
class EditCounts:
    """Edit-operation counts of a minimal alignment against a reference of length N."""

    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        return self.total / self.reference_length


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined per-frame CE + CTC objective."""

    lambda_f: float = 0.02
    lambda_ctc: float = 0.98

    def __post_init__(self) -> None:
        for name, v in (("lambda_f", self.lambda_f), ("lambda_ctc", self.lambda_ctc)):
            if not np.isfinite(v) or v < 0:
                raise DataError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class ModelCheckpoint:
    """Versioned weights + architecture config for one model.

    ``weights`` maps parameter names to flat float64 arrays; order is
    significant and preserved bit-exactly through save/load.
    """

    model_kind: str
    arch_config: dict
    weights: dict[str, np.ndarray]
    rng_seed_provenance: str = ""
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise DataError(f"unknown model_kind {self.model_kind!r}")
        for name, arr in self.weights.items():
            if arr.ndim != 1 or arr.dtype != np.float64:
                raise DataError(f"checkpoint array {name!r} must be a flat float64 array")


# ---------------------------------------------------------------------------
# line-delimited JSON files

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False, allow_nan=False)


def _frame_to_obj(fr: KeypointFrame) -> dict:
    obj = {
        "left": [float(v) for v in fr.left_joints.reshape(-1)],
        "right": [float(v) for v in fr.right_joints.reshape(-1)],
        "left_center_2d": [float(v) for v in fr.left_center_2d],
        "right_center_2d": [float(v) for v in fr.right_center_2d],
    }
    if fr.lip is not None:
        obj["lip"] = [float(v) for v in fr.lip]
    return obj


def _frame_from_obj(obj: dict, where: str) -> KeypointFrame:
    def arr(key, n):
        v = obj.get(key)
        if not isinstance(v, list) or len(v) != n:
            raise DataError(f"{where}: field {key!r} must be a list of {n} numbers")
        return np.asarray(v, dtype=np.float64)

    lip = obj.get("lip")
    fr = KeypointFrame(
        left_joints=arr("left", 63).reshape(21, 3),
        right_joints=arr("right", 63).reshape(21, 3),
        left_center_2d=arr("left_center_2d", 2),
        right_center_2d=arr("right_center_2d", 2),
        lip=None if lip is None else np.asarray(lip, dtype=np.float64),
    )
    fr.validate(where)
    return fr


def write_clips(clips, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for clip in clips:
            obj = {
                "clip_id": clip.clip_id,
                "fps": float(clip.fps),
                "frames": [_frame_to_obj(fr) for fr in clip.frames],
            }
            f.write(_dumps(obj) + "\n")


def read_clips(path) -> list[Clip]:
    """Parse a line-delimited clips file; malformed lines are reported by number."""
    clips = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            clip_id = obj.get("clip_id")
            if not isinstance(clip_id, str) or not clip_id:
                raise DataError(f"{path}:{lineno}: missing clip_id")
            frames = obj.get("frames")
            if not isinstance(frames, list):
                raise DataError(f"{path}:{lineno}: clip {clip_id}: missing frames list")
            parsed = [
                _frame_from_obj(fo, f"{path}:{lineno}: clip {clip_id} frame {t}")
                for t, fo in enumerate(frames)
            ]
            clip = Clip(clip_id=clip_id, fps=float(obj.get("fps", 0.0)), frames=tuple(parsed))
            clip.validate()
            clips.append(clip)
    return clips


def write_annotations(annotations, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ann in annotations:
            obj = {"clip_id": ann.clip_id, "start": ann.start, "end": ann.end}
            if ann.word is not None:
                obj["word"] = ann.word
            if ann.letters is not None:
                obj["letters"] = ann.letters
            if ann.frame_labels is not None:
                obj["frame_labels"] = ann.frame_labels
            obj["grade"] = ann.grade
            f.write(_dumps(obj) + "\n")


def read_annotations(path) -> list[Annotation]:
    anns = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            try:
                anns.append(Annotation(
                    clip_id=obj["clip_id"],
                    start=int(obj["start"]),
                    end=int(obj["end"]),
                    word=obj.get("word"),
                    letters=obj.get("letters"),
                    frame_labels=obj.get("frame_labels"),
                    grade=obj.get("grade", "weak"),
                ))
            except (KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: missing/bad field: {e}") from None
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return anns


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then raw little-endian float64 blocks

def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    manifest = []
    offset = 0
    for name, arr in ckpt.weights.items():
        manifest.append({"name": name, "offset": offset, "length": int(arr.size)})
        offset += arr.size * 8
    header = {
        "schema_version": ckpt.schema_version,
        "model_kind": ckpt.model_kind,
        "arch_config": ckpt.arch_config,
        "rng_seed_provenance": ckpt.rng_seed_provenance,
        "arrays": manifest,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for arr in ckpt.weights.values():
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from None
        version = header.get("schema_version")
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(
                f"{path}: schema_version {version} incompatible with supported"
                f" version {CHECKPOINT_SCHEMA_VERSION}")
        blob = f.read()
    weights: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        name, offset, length = entry["name"], entry["offset"], entry["length"]
        end = offset + length * 8
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated array block {name!r}")
        weights[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
    return ModelCheckpoint(
        model_kind=header["model_kind"],
        arch_config=header["arch_config"],
        weights=weights,
        rng_seed_provenance=header.get("rng_seed_provenance", ""),
        schema_version=version,
    )

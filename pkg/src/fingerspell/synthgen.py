"""Deterministic synthetic keypoint corpus for end-to-end verification.

Real broadcast footage cannot ship with this repository, so acceptance runs
on generated data instead: 26 well-separated handshape templates, words
rendered as hold/transition frame sequences with co-articulation, signer
jitter, mouthing-style lip embeddings of the full associated word, and a
weak-annotation pool with loose boundaries and planted defects.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ctc import collapse
from .datamodel import (LETTERS, Annotation, Clip, DataError, KeypointFrame,
                        read_annotations, read_clips, write_annotations,
                        write_clips)
from .features import extract_hand_features

# English-ish letter frequencies blended toward uniform so rare letters still
# occur often enough to measure per-class recall on a small corpus
_ENGLISH_FREQ = {
    "a": 8.2, "b": 1.5, "c": 2.8, "d": 4.3, "e": 12.7, "f": 2.2, "g": 2.0,
    "h": 6.1, "i": 7.0, "j": 0.15, "k": 0.77, "l": 4.0, "m": 2.4, "n": 6.7,
    "o": 7.5, "p": 1.9, "q": 0.095, "r": 6.0, "s": 6.3, "t": 9.1, "u": 2.8,
    "v": 0.98, "w": 2.4, "x": 0.15, "y": 2.0, "z": 0.074,
}


def letter_distribution(mix_uniform: float = 0.3) -> np.ndarray:
    freq = np.array([_ENGLISH_FREQ[c] for c in LETTERS])
    freq = freq / freq.sum()
    return (1.0 - mix_uniform) * freq + mix_uniform / 26.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_strong: int = 150
    n_weak: int = 1500
    n_heldout: int = 300
    hold_min: int = 2
    hold_max: int = 4
    trans_min: int = 1
    trans_max: int = 2
    p_abbrev: float = 0.15
    n_signers: int = 5
    signer_jitter: float = 0.05
    slack_max: int = 25
    template_delta: float = 1.0
    lip_dim: int = 16
    rest_min: int = 6
    rest_max: int = 14
    word_min_len: int = 3
    word_max_len: int = 8
    keypoint_noise: float = 0.01
    defect_empty_frac: float = 0.05
    defect_double_frac: float = 0.05
    letter_mix_uniform: float = 0.3

    def __post_init__(self) -> None:
        if not (1 <= self.hold_min <= self.hold_max):
            raise DataError("need 1 <= hold_min <= hold_max")
        if not (1 <= self.trans_min <= self.trans_max):
            raise DataError("transition frames must be >= 1 so repeated letters stay separable")
        for name in ("p_abbrev", "defect_empty_frac", "defect_double_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must be in [0,1], got {v}")
        if self.template_delta <= 0:
            raise DataError("template_delta must be > 0")
        if self.word_min_len < 1 or self.word_min_len > self.word_max_len:
            raise DataError("bad word length range")
        if self.rest_min < 0 or self.rest_min > self.rest_max:
            raise DataError("bad rest range")
        if self.n_signers < 1:
            raise DataError("need at least one signer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HandTemplate:
    left: np.ndarray   # (21,3)
    right: np.ndarray  # (21,3)


REST_TEMPLATE = HandTemplate(left=np.zeros((21, 3)), right=np.zeros((21, 3)))


def _template_frame(tpl: HandTemplate) -> KeypointFrame:
    return KeypointFrame(
        left_joints=tpl.left,
        right_joints=tpl.right,
        left_center_2d=tpl.left[:, :2].mean(axis=0),
        right_center_2d=tpl.right[:, :2].mean(axis=0),
    )


def make_templates(seed: int, delta: float, max_tries: int = 2000) -> list[HandTemplate]:
    """26 pseudo-random handshapes, rejection-sampled so every pair sits at
    hand-feature distance >= delta.  Deterministic per seed."""
    if delta <= 0:
        raise DataError("delta must be > 0")
    rng = np.random.default_rng([seed, 0xF5])
    templates: list[HandTemplate] = []
    feats: list[np.ndarray] = []
    tries = 0
    while len(templates) < 26:
        if tries >= max_tries:
            raise DataError(
                f"could not place 26 templates at separation {delta} in {max_tries} draws")
        tries += 1
        left = rng.normal(0.0, 0.5, size=(21, 3)) + np.array([-0.3, 0.0, 0.0])
        right = rng.normal(0.0, 0.5, size=(21, 3)) + np.array([0.3, 0.0, 0.0])
        cand = HandTemplate(left=left, right=right)
        f = extract_hand_features(_template_frame(cand))
        if all(np.linalg.norm(f - g) >= delta for g in feats):
            templates.append(cand)
            feats.append(f)
    return templates


def _lip_table(seed: int, lip_dim: int) -> np.ndarray:
    """(27, lip_dim) embeddings: row 0 is the resting mouth, rows 1..26 letters."""
    rng = np.random.default_rng([seed, 0x11F])
    table = rng.normal(0.0, 1.0, size=(27, lip_dim))
    table[0] = 0.0
    return table


@dataclass(frozen=True)
class SignerTransform:
    matrix: np.ndarray  # (3,3)
    offset: np.ndarray  # (3,)

    def apply(self, joints: np.ndarray) -> np.ndarray:
        return joints @ self.matrix.T + self.offset


def make_signers(seed: int, n: int, jitter: float) -> list[SignerTransform]:
    rng = np.random.default_rng([seed, 0x516])
    out = []
    for _ in range(n):
        m = np.eye(3) + rng.normal(0.0, jitter, size=(3, 3))
        off = rng.normal(0.0, jitter, size=3)
        out.append(SignerTransform(matrix=m, offset=off))
    return out


@dataclass(frozen=True)
class RenderedWord:
    frames: tuple[KeypointFrame, ...]
    letters: str        # retained subsequence actually spelt
    frame_labels: str   # per-frame letter or blank
    lip: np.ndarray     # (T, lip_dim), mouthing of the FULL word


def _make_frame(left: np.ndarray, right: np.ndarray, signer: SignerTransform,
                noise: float, rng: np.random.Generator,
                lip_row: np.ndarray | None) -> KeypointFrame:
    # 6-decimal rounding keeps emitted files compact; well below the noise floor
    lj = np.round(signer.apply(left + rng.normal(0.0, noise, size=(21, 3))), 6)
    rj = np.round(signer.apply(right + rng.normal(0.0, noise, size=(21, 3))), 6)
    return KeypointFrame(
        left_joints=lj,
        right_joints=rj,
        left_center_2d=np.round(lj[:, :2].mean(axis=0), 6),
        right_center_2d=np.round(rj[:, :2].mean(axis=0), 6),
        lip=None if lip_row is None else np.round(lip_row, 6),
    )


def render_word(word: str, signer: SignerTransform, templates: list[HandTemplate],
                lip_table: np.ndarray, cfg: SynthConfig,
                rng: np.random.Generator) -> RenderedWord:
    """Render one fingerspelling event.

    Each retained letter holds its template for a few frames; consecutive
    letters are bridged by linearly interpolated transition frames labeled
    blank.  Letters after the first drop out with the abbreviation
    probability.  Lip rows spell the full word regardless of abbreviation.
    """
    if not word or any(not "a" <= c <= "z" for c in word):
        raise DataError(f"word must be non-empty lowercase a-z, got {word!r}")
    retained = word[0] + "".join(
        c for c in word[1:] if rng.random() >= cfg.p_abbrev)

    holds = []
    for li, letter in enumerate(retained):
        tpl = templates[ord(letter) - ord("a")]
        h = int(rng.integers(cfg.hold_min, cfg.hold_max + 1))
        holds.append((letter, tpl, h))

    joints_seq: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[str] = []
    for i, (letter, tpl, h) in enumerate(holds):
        joints_seq.extend([(tpl.left, tpl.right)] * h)
        labels.extend(letter * h)
        if i + 1 < len(holds):
            nxt = holds[i + 1][1]
            t = int(rng.integers(cfg.trans_min, cfg.trans_max + 1))
            for j in range(1, t + 1):
                a = j / (t + 1.0)
                joints_seq.append(((1 - a) * tpl.left + a * nxt.left,
                                   (1 - a) * tpl.right + a * nxt.right))
                labels.append("-")

    T = len(joints_seq)
    # mouthing tracks the full word, stretched across the whole event
    word_rows = np.array([lip_table[ord(c) - ord("a") + 1] for c in word])
    idx = np.minimum((np.arange(T) * len(word)) // T, len(word) - 1)
    lip = word_rows[idx] + rng.normal(0.0, 0.05, size=(T, cfg.lip_dim))

    frames = tuple(
        _make_frame(lf, rt, signer, cfg.keypoint_noise, rng, lip[t])
        for t, (lf, rt) in enumerate(joints_seq))
    return RenderedWord(frames=frames, letters=retained,
                        frame_labels="".join(labels), lip=lip)


def _rest_frames(n: int, signer: SignerTransform, lip_table: np.ndarray,
                 cfg: SynthConfig, rng: np.random.Generator) -> list[KeypointFrame]:
    out = []
    for _ in range(n):
        lip_row = lip_table[0] + rng.normal(0.0, 0.05, size=cfg.lip_dim)
        out.append(_make_frame(REST_TEMPLATE.left, REST_TEMPLATE.right, signer,
                               cfg.keypoint_noise, rng, lip_row))
    return out


def sample_word(rng: np.random.Generator, cfg: SynthConfig, p: np.ndarray) -> str:
    length = int(rng.integers(cfg.word_min_len, cfg.word_max_len + 1))
    return "".join(rng.choice(list(LETTERS), size=length, p=p))


@dataclass
class SynthCorpus:
    clips: dict[str, Clip]
    strong: list[Annotation]
    weak: list[Annotation]
    heldout: list[Annotation]
    fs_masks: dict[str, np.ndarray] = field(default_factory=dict)
    defect_empty_ids: set[str] = field(default_factory=set)
    defect_double_ids: set[str] = field(default_factory=set)
    manifest: dict = field(default_factory=dict)

    def letter_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ann in self.strong:
            for c in ann.letters or "":
                counts[c] = counts.get(c, 0) + 1
        return counts


def _build_clip(clip_id: str, rendered: list[RenderedWord], signer: SignerTransform,
                lip_table: np.ndarray, cfg: SynthConfig,
                rng: np.random.Generator):
    """Assemble rest lead-in + rendered events (rest gaps between) + tail.

    Returns (clip, per-event (start, end) spans, fingerspelling mask).
    """
    frames: list[KeypointFrame] = []
    frames.extend(_rest_frames(int(rng.integers(cfg.rest_min, cfg.rest_max + 1)),
                               signer, lip_table, cfg, rng))
    spans = []
    for k, rw in enumerate(rendered):
        if k > 0:
            # gap long enough that smoothing cannot bridge the two events
            frames.extend(_rest_frames(int(rng.integers(12, 20)), signer,
                                       lip_table, cfg, rng))
        start = len(frames)
        frames.extend(rw.frames)
        spans.append((start, len(frames) - 1))
    frames.extend(_rest_frames(int(rng.integers(cfg.rest_min, cfg.rest_max + 1)),
                               signer, lip_table, cfg, rng))
    clip = Clip(clip_id=clip_id, fps=25.0, frames=tuple(frames))
    mask = np.zeros(len(frames), dtype=np.int64)
    for a, b in spans:
        mask[a:b + 1] = 1
    return clip, spans, mask


def make_corpus(cfg: SynthConfig) -> SynthCorpus:
    """Generate the full strong/weak/held-out corpus, a pure function of cfg."""
    templates = make_templates(cfg.seed, cfg.template_delta)
    lip_table = _lip_table(cfg.seed, cfg.lip_dim)
    signers = make_signers(cfg.seed, cfg.n_signers, cfg.signer_jitter)
    p_letters = letter_distribution(cfg.letter_mix_uniform)

    corpus = SynthCorpus(clips={}, strong=[], weak=[], heldout=[])

    def rng_for(tag: int, i: int) -> np.random.Generator:
        return np.random.default_rng([cfg.seed, tag, i])

    # strong set: tight intervals with exact letters and per-frame labels
    for i in range(cfg.n_strong):
        rng = rng_for(1, i)
        clip_id = f"strong_{i:05d}"
        signer = signers[int(rng.integers(cfg.n_signers))]
        word = sample_word(rng, cfg, p_letters)
        rw = render_word(word, signer, templates, lip_table, cfg, rng)
        clip, spans, mask = _build_clip(clip_id, [rw], signer, lip_table, cfg, rng)
        a, b = spans[0]
        corpus.clips[clip_id] = clip
        corpus.fs_masks[clip_id] = mask
        corpus.strong.append(Annotation(
            clip_id=clip_id, start=a, end=b, word=word, letters=rw.letters,
            frame_labels=rw.frame_labels, grade="strong"))

    # weak pool: slack-padded intervals, associated word only, planted defects
    for i in range(cfg.n_weak):
        rng = rng_for(2, i)
        clip_id = f"weak_{i:05d}"
        signer = signers[int(rng.integers(cfg.n_signers))]
        word = sample_word(rng, cfg, p_letters)
        u = rng.random()
        if u < cfg.defect_empty_frac:
            clip, spans, mask = _build_clip(clip_id, [], signer, lip_table, cfg, rng)
            corpus.defect_empty_ids.add(clip_id)
            T = len(clip.frames)
            a, b = 0, T - 1
        elif u < cfg.defect_empty_frac + cfg.defect_double_frac:
            second = sample_word(rng, cfg, p_letters)
            rw1 = render_word(word, signer, templates, lip_table, cfg, rng)
            rw2 = render_word(second, signer, templates, lip_table, cfg, rng)
            clip, spans, mask = _build_clip(clip_id, [rw1, rw2], signer,
                                            lip_table, cfg, rng)
            corpus.defect_double_ids.add(clip_id)
            a, b = spans[0][0], spans[1][1]
        else:
            rw = render_word(word, signer, templates, lip_table, cfg, rng)
            clip, spans, mask = _build_clip(clip_id, [rw], signer, lip_table, cfg, rng)
            a, b = spans[0]
        T = len(clip.frames)
        start = max(0, a - int(rng.integers(0, cfg.slack_max + 1)))
        end = min(T - 1, b + int(rng.integers(0, cfg.slack_max + 1)))
        corpus.clips[clip_id] = clip
        corpus.fs_masks[clip_id] = mask
        corpus.weak.append(Annotation(
            clip_id=clip_id, start=start, end=end, word=word, letters=None,
            frame_labels=None, grade="weak"))

    # held-out set: full ground truth, never trained on
    for i in range(cfg.n_heldout):
        rng = rng_for(3, i)
        clip_id = f"held_{i:05d}"
        signer = signers[int(rng.integers(cfg.n_signers))]
        word = sample_word(rng, cfg, p_letters)
        rw = render_word(word, signer, templates, lip_table, cfg, rng)
        clip, spans, mask = _build_clip(clip_id, [rw], signer, lip_table, cfg, rng)
        a, b = spans[0]
        corpus.clips[clip_id] = clip
        corpus.fs_masks[clip_id] = mask
        corpus.heldout.append(Annotation(
            clip_id=clip_id, start=a, end=b, word=word, letters=rw.letters,
            frame_labels=rw.frame_labels, grade="strong"))

    corpus.manifest = {
        "config": cfg.to_dict(),
        "n_clips": len(corpus.clips),
        "n_frames": int(sum(len(c.frames) for c in corpus.clips.values())),
        "defect_empty": sorted(corpus.defect_empty_ids),
        "defect_double": sorted(corpus.defect_double_ids),
        "letter_counts": {c: n for c, n in sorted(corpus.letter_counts().items())},
    }
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir) -> None:
    """Emit clips/annotations/masks/manifest files; byte-stable per config."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = [corpus.clips[k] for k in sorted(corpus.clips)]
    write_clips(ordered, out / "clips.jsonl")
    write_annotations(corpus.strong, out / "strong.jsonl")
    write_annotations(corpus.weak, out / "weak.jsonl")
    write_annotations(corpus.heldout, out / "heldout.jsonl")
    masks = {cid: [int(v) for v in m] for cid, m in sorted(corpus.fs_masks.items())}
    with open(out / "masks.json", "w", encoding="utf-8") as fh:
        json.dump(masks, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(in_dir) -> SynthCorpus:
    """Read a corpus directory written by write_corpus."""
    from pathlib import Path
    src = Path(in_dir)
    for name in ("clips.jsonl", "strong.jsonl", "weak.jsonl", "heldout.jsonl",
                 "masks.json", "manifest.json"):
        if not (src / name).exists():
            raise DataError(f"corpus directory {src} is missing {name}")
    clips = {c.clip_id: c for c in read_clips(src / "clips.jsonl")}
    with open(src / "masks.json", encoding="utf-8") as fh:
        masks = {cid: np.asarray(m, dtype=np.int64)
                 for cid, m in json.load(fh).items()}
    with open(src / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    for cid, m in masks.items():
        if cid not in clips:
            raise DataError(f"masks.json references unknown clip {cid!r}")
        if len(m) != len(clips[cid].frames):
            raise DataError(f"mask length mismatch for clip {cid!r}")
    return SynthCorpus(
        clips=clips,
        strong=read_annotations(src / "strong.jsonl"),
        weak=read_annotations(src / "weak.jsonl"),
        heldout=read_annotations(src / "heldout.jsonl"),
        fs_masks=masks,
        defect_empty_ids=set(manifest.get("defect_empty", [])),
        defect_double_ids=set(manifest.get("defect_double", [])),
        manifest=manifest,
    )


def sanity_check(corpus: SynthCorpus) -> None:
    """Internal consistency: labels collapse to letters, intervals in range."""
    for ann in corpus.strong + corpus.heldout:
        if collapse(ann.frame_labels) != ann.letters:
            raise DataError(f"{ann.clip_id}: frame labels do not collapse to letters")
        ann.validate_against(corpus.clips[ann.clip_id])
    for ann in corpus.weak:
        ann.validate_against(corpus.clips[ann.clip_id])

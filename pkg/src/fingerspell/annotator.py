"""Iterative re-annotation: label-assignment strategies, CER-gated acceptance,
staged pool filtering, and the multi-round training loop.

Each round trains a frame classifier on everything with per-frame labels,
re-labels the weak pool with it, trains the word recognizer, then promotes
weak entries whose open-alphabet decode agrees with the associated word
(CER strictly below the acceptance bound).  Held-out CER is logged per round.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ctc import mask_to_word
from .datamodel import (Annotation, Clip, DataError, letter_to_index,
                        save_checkpoint, validate_word, write_annotations)
from .features import clip_feature_matrix, sequence_for_interval
from .metrics import cer
from .nn import log_softmax
from .recognizer import (Recognizer, RecognizerConfig, TrainConfig,
                         build_examples, evaluate_cer, frame_clf_config,
                         train_new)

BLANK = "-"


def equal_split(n_frames: int, letters: str) -> str:
    """Assign contiguous equal blocks of frames to each letter in order.

    Remainder frames go to the earliest letters, so block sizes differ by at
    most one.
    """
    L = len(letters)
    if L == 0:
        raise DataError("letters must be non-empty")
    if n_frames < L:
        raise DataError(f"cannot split {n_frames} frames among {L} letters")
    base, rem = divmod(n_frames, L)
    return "".join(c * (base + (1 if i < rem else 0)) for i, c in enumerate(letters))


def transition_split(frame_probs: np.ndarray, letters: str) -> str:
    """Place letter boundaries at probability crossovers.

    ``frame_probs`` holds per-frame letter probabilities, shape (T, 26) with
    column j for letter chr(ord('a')+j).  Scanning left to right, the boundary
    between letters i and i+1 lands on the first frame after the previous
    boundary where p(next) exceeds p(current), constrained so every remaining
    letter keeps at least one frame.  With no such crossover the remaining
    letters fall back to an equal split of the remaining frames.
    """
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 26:
        raise DataError(f"frame_probs must be (T, 26), got {probs.shape}")
    L = len(letters)
    if L == 0:
        raise DataError("letters must be non-empty")
    T = probs.shape[0]
    if T < L:
        raise DataError(f"cannot align {L} letters to {T} frames")
    out: list[str] = []
    start = 0
    for i in range(L - 1):
        cur = letter_to_index(letters[i]) - 1
        nxt = letter_to_index(letters[i + 1]) - 1
        hi = T - (L - i - 1)  # latest boundary leaving one frame per remaining letter
        boundary = None
        for t in range(start + 1, hi + 1):
            if probs[t, nxt] > probs[t, cur]:
                boundary = t
                break
        if boundary is None:
            return "".join(out) + equal_split(T - start, letters[i:])
        out.append(letters[i] * (boundary - start))
        start = boundary
    out.append(letters[-1] * (T - start))
    return "".join(out)


def max_prob_labels(masked_probs: np.ndarray, word: str, threshold: float = 0.35) -> str:
    """Per-frame letter assignment from word-masked probabilities.

    ``masked_probs`` rows are probabilities over the 27 classes after word
    masking and renormalization (blank column 0 retained).  A frame whose best
    word-letter probability exceeds the threshold takes that letter; a
    low-confidence frame holds the previous frame's letter; frames before the
    first confident one stay blank.
    """
    probs = np.asarray(masked_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 27:
        raise DataError(f"masked_probs must be (T, 27), got {probs.shape}")
    validate_word(word)
    cols = sorted({letter_to_index(c) for c in word})
    letter_probs = probs[:, cols]
    out = []
    prev = BLANK
    for t in range(probs.shape[0]):
        j = int(np.argmax(letter_probs[t]))
        if letter_probs[t, j] > threshold:
            prev = chr(ord("a") + cols[j] - 1)
        out.append(prev)
    return "".join(out)


def accept_by_cer(decoded: str, associated_word: str, max_cer: float = 0.3) -> bool:
    """Strict acceptance gate: CER(decoded, word) < max_cer."""
    if not associated_word:
        raise DataError("associated word must be non-empty")
    value, _ = cer(decoded, associated_word)
    return value < max_cer


# ---------------------------------------------------------------------------
# staged pool filtering

def _stage_missing_clip(ann, ctx):
    return ann if ann.clip_id in ctx["clips"] else None


def _stage_detector_refilter(ann, ctx):
    from .detector import TIGHTENED, refilter_annotation
    det = ctx["detector"]
    clip = ctx["clips"][ann.clip_id]
    hand = ctx.get("hand_raw", {}).get(ann.clip_id)
    res = refilter_annotation(clip, ann, det, hand)
    reasons = ctx.setdefault("refilter_reasons", {})
    reasons[res.status] = reasons.get(res.status, 0) + 1
    return res.annotation if res.status == TIGHTENED else None


def _stage_test_split(ann, ctx):
    return None if ann.clip_id in ctx.get("test_ids", set()) else ann


def _stage_missing_word(ann, ctx):
    return ann if ann.word else None


def _stage_cer_acceptance(ann, ctx):
    decoded = ctx["decode"](ann)
    bound = ctx.get("max_cer", 0.3)
    return ann if accept_by_cer(decoded, ann.word, bound) else None


STAGES = {
    "missing_clip": _stage_missing_clip,
    "detector_refilter": _stage_detector_refilter,
    "test_split": _stage_test_split,
    "missing_word": _stage_missing_word,
    "cer_acceptance": _stage_cer_acceptance,
}


def filter_pool(pool, stage_names, ctx):
    """Apply named filter stages in order.

    Returns the surviving pool (entries possibly rewritten, e.g. tightened
    intervals) and a per-stage survival report shaped like a filtering
    statistics table: [(stage, surviving count)], starting with the input.
    """
    for name in stage_names:
        if name not in STAGES:
            raise DataError(f"unknown filter stage {name!r}")
    report = [("input", len(pool))]
    current = list(pool)
    for name in stage_names:
        fn = STAGES[name]
        nxt = []
        for ann in current:
            kept = fn(ann, ctx)
            if kept is not None:
                nxt.append(kept)
        current = nxt
        report.append((name, len(current)))
    return current, report


# ---------------------------------------------------------------------------
# the iterative loop

@dataclass(frozen=True)
class PipelineConfig:
    model: RecognizerConfig = field(default_factory=RecognizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    iterations: int = 3
    accept_cer: float = 0.3
    confidence_threshold: float = 0.35
    strong_labels: str = "given"  # given | equal_split | transition_split
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise DataError("need at least one iteration")
        if not 0.0 < self.accept_cer <= 1.0:
            raise DataError("accept_cer must be in (0,1]")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise DataError("confidence threshold must be in (0,1)")
        if self.strong_labels not in ("given", "equal_split", "transition_split"):
            raise DataError(f"unknown strong-label strategy {self.strong_labels!r}")


@dataclass
class PipelineState:
    iteration: int = 0
    strong: list[Annotation] = field(default_factory=list)
    weak: list[Annotation] = field(default_factory=list)
    accepted: list[Annotation] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)

    def audit(self) -> None:
        """Check the state invariants; raises on violation."""
        weak_keys = {(a.clip_id, a.start, a.end) for a in self.weak}
        for ann in self.accepted:
            if (ann.clip_id, ann.start, ann.end) in weak_keys:
                raise DataError(f"{ann.clip_id}: entry is both weak and accepted")
            if ann.grade != "accepted":
                raise DataError(f"{ann.clip_id}: accepted entry has grade {ann.grade!r}")
            if not accept_by_cer(ann.letters, ann.word):
                raise DataError(f"{ann.clip_id}: accepted entry fails its own gate")


def _with_equal_split_labels(annotations) -> list[Annotation]:
    out = []
    for ann in annotations:
        if not ann.letters:
            raise DataError(f"{ann.clip_id}: cannot split frames without letters")
        labels = equal_split(ann.end - ann.start + 1, ann.letters)
        out.append(replace(ann, frame_labels=labels))
    return out


def _relabel_transition(frame_clf, annotations, cache) -> list[Annotation]:
    out = []
    for ann in annotations:
        seq = sequence_for_interval(cache.clip(ann.clip_id), ann.start, ann.end,
                                    hand=cache.features(ann.clip_id))
        probs = np.exp(log_softmax(frame_clf.forward(seq), axis=-1))[:, 1:]
        labels = transition_split(probs, ann.letters)
        out.append(replace(ann, frame_labels=labels))
    return out


class FeatureCache:
    """Lazily computed per-clip stacked feature matrices."""

    def __init__(self, clips_by_id: dict[str, Clip]):
        self._clips = clips_by_id
        self._feats: dict[str, np.ndarray] = {}

    def clip(self, clip_id: str) -> Clip:
        clip = self._clips.get(clip_id)
        if clip is None:
            raise DataError(f"unknown clip {clip_id!r}")
        return clip

    def features(self, clip_id: str) -> np.ndarray:
        if clip_id not in self._feats:
            self._feats[clip_id] = clip_feature_matrix(self.clip(clip_id))
        return self._feats[clip_id]

    def sequence(self, ann: Annotation):
        return sequence_for_interval(self.clip(ann.clip_id), ann.start, ann.end,
                                     hand=self.features(ann.clip_id))


def prepare_strong(strong, mode: str) -> list[Annotation]:
    """Ensure every strong entry carries frame labels.

    Mode "given" requires them present; the split modes synthesize an initial
    assignment (transition_split refines per round inside the loop, so its
    bootstrap here is the equal split).
    """
    strong = list(strong)
    if mode in ("equal_split", "transition_split"):
        return _with_equal_split_labels(strong)
    if mode != "given":
        raise DataError(f"unknown strong-label strategy {mode!r}")
    for ann in strong:
        if not ann.frame_labels:
            raise DataError(
                f"{ann.clip_id}: strong entry lacks frame labels; "
                "set strong_labels to equal_split or transition_split")
    return strong


def relabel_weak(frame_clf: Recognizer, weak, cache: FeatureCache,
                 threshold: float) -> dict[tuple, str]:
    """Candidate per-frame labels for each weak entry via the hold rule."""
    out = {}
    for ann in weak:
        logits = frame_clf.forward(cache.sequence(ann))
        probs = np.exp(mask_to_word(logits, ann.word))
        out[(ann.clip_id, ann.start, ann.end)] = max_prob_labels(
            probs, ann.word, threshold)
    return out


def run_iteration(state: PipelineState, cache: FeatureCache,
                  pcfg: PipelineConfig) -> tuple[PipelineState, dict]:
    """One round: frame classifier, weak re-labeling, recognizer, acceptance.

    Returns the advanced state and the iteration's artifacts (models and the
    metrics row).  Deterministic given (state, config): all rng seeds derive
    from (pipeline seed, iteration index, phase).
    """
    it = state.iteration + 1
    train_anns = state.strong + state.accepted

    frame_tc = frame_clf_config(pcfg.train)
    frame_examples = build_examples(cache._clips, train_anns,
                                    {a.clip_id: cache.features(a.clip_id)
                                     for a in train_anns})
    frame_clf, _ = train_new(pcfg.model, frame_examples, frame_tc,
                             seed=_phase_seed(pcfg.seed, it, 1))

    candidate_labels = relabel_weak(frame_clf, state.weak, cache,
                                    pcfg.confidence_threshold)

    strong = state.strong
    if pcfg.strong_labels == "transition_split":
        strong = _relabel_transition(frame_clf, strong, cache)
        train_anns = strong + state.accepted
        frame_examples = build_examples(cache._clips, train_anns,
                                        {a.clip_id: cache.features(a.clip_id)
                                         for a in train_anns})

    recog_examples = build_examples(cache._clips, train_anns,
                                    {a.clip_id: cache.features(a.clip_id)
                                     for a in train_anns})
    recog, _ = train_new(pcfg.model, recog_examples, pcfg.train,
                         seed=_phase_seed(pcfg.seed, it, 2))

    still_weak: list[Annotation] = []
    newly_accepted: list[Annotation] = []
    for ann in state.weak:
        decoded, _ = recog.predict(cache.sequence(ann))
        if decoded and accept_by_cer(decoded, ann.word, pcfg.accept_cer):
            newly_accepted.append(Annotation(
                clip_id=ann.clip_id, start=ann.start, end=ann.end,
                word=ann.word, letters=decoded,
                frame_labels=candidate_labels[(ann.clip_id, ann.start, ann.end)],
                grade="accepted"))
        else:
            still_weak.append(ann)

    new_state = PipelineState(
        iteration=it, strong=strong, weak=still_weak,
        accepted=state.accepted + newly_accepted, metrics=list(state.metrics))
    return new_state, {"frame_clf": frame_clf, "recognizer": recog,
                       "newly_accepted": len(newly_accepted)}


def _phase_seed(seed: int, iteration: int, phase: int) -> int:
    return int(np.random.default_rng([seed, iteration, phase]).integers(2 ** 31))


def run_pipeline(clips_by_id: dict[str, Clip], strong, weak, heldout,
                 pcfg: PipelineConfig, out_dir=None) -> PipelineState:
    """Full loop: initial strong-only model, then the acceptance rounds.

    The metrics log gets one row per round, iteration 0 being the model
    trained on the strong set alone.  With ``out_dir`` set, every round also
    writes its model checkpoints, the cumulative accepted annotations, and a
    refreshed metrics.json.
    """
    if not strong:
        raise DataError("empty strong set")
    if not heldout:
        raise DataError("empty held-out set")
    cache = FeatureCache(dict(clips_by_id))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    strong = prepare_strong(strong, pcfg.strong_labels)

    heldout_examples = build_examples(cache._clips, heldout,
                                      {a.clip_id: cache.features(a.clip_id)
                                       for a in heldout})

    def log_row(state: PipelineState, recog: Recognizer, frame_clf=None) -> None:
        value, _ = evaluate_cer(recog, heldout_examples)
        state.metrics.append({
            "iteration": state.iteration,
            "accepted": len(state.accepted),
            "heldout_cer": round(value, 6),
        })
        if out is not None:
            save_checkpoint(recog.to_checkpoint(
                "recognizer", seed_note=f"seed={pcfg.seed} iter={state.iteration}"),
                out / f"recognizer_iter{state.iteration}.fsckpt")
            if frame_clf is not None:
                save_checkpoint(frame_clf.to_checkpoint(
                    "frame_classifier",
                    seed_note=f"seed={pcfg.seed} iter={state.iteration}"),
                    out / f"frame_clf_iter{state.iteration}.fsckpt")
            write_annotations(state.accepted,
                              out / f"accepted_iter{state.iteration}.jsonl")
            with open(out / "metrics.json", "w", encoding="utf-8") as fh:
                json.dump(state.metrics, fh, indent=2, sort_keys=True)
                fh.write("\n")

    state = PipelineState(iteration=0, strong=strong, weak=list(weak))
    base_examples = build_examples(cache._clips, strong,
                                   {a.clip_id: cache.features(a.clip_id)
                                    for a in strong})
    recog0, _ = train_new(pcfg.model, base_examples, pcfg.train,
                          seed=_phase_seed(pcfg.seed, 0, 2))
    log_row(state, recog0)

    for _ in range(pcfg.iterations):
        state, artifacts = run_iteration(state, cache, pcfg)
        state.audit()
        log_row(state, artifacts["recognizer"], artifacts["frame_clf"])
    return state

"""Fusion recognition model: hand branch, optional lip branch, fusion encoder,
per-frame letter head, plus training (combined CTC + frame CE objective) and
open-alphabet word prediction.

One architecture serves both the frame classifier (CE-only loss weights) and
the word recognizer (CTC-dominant weights); the per-frame head feeds both
objectives, so logits are shared.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ctc import (ctc_loss, greedy_decode, mask_to_word,
                  masked_log_softmax_backward, min_frames_for, per_frame_ce)
from .datamodel import (N_CLASSES, Annotation, Clip, DataError, LossWeights,
                        ModelCheckpoint, indices_to_labels, labels_to_indices)
from .features import (FeatureSequence, annotation_weights, augment_noise,
                       augment_temporal, sequence_for_interval)
from .metrics import cer
from .nn import (Adam, Dropout, EncoderConfig, EncoderStack, LayerNorm, Linear,
                 Param, ReLU, log_softmax)


@dataclass(frozen=True)
class RecognizerConfig:
    hand_in: int = 384
    lip_in: int = 16
    embed: int = 128
    branch_layers: int = 2
    fusion_layers: int = 2
    heads: int = 2
    ffn_dim: int = 512
    head_hidden: int = 256
    dropout: float = 0.3
    use_lip: bool = True

    def __post_init__(self) -> None:
        if self.embed % self.heads != 0:
            raise DataError(f"embed {self.embed} not divisible by heads {self.heads}")
        if min(self.hand_in, self.lip_in, self.embed, self.head_hidden) < 1:
            raise DataError("all dimensions must be >= 1")

    def branch_encoder(self) -> EncoderConfig:
        return EncoderConfig(model_dim=self.embed, heads=self.heads,
                             ffn_dim=self.ffn_dim, layers=self.branch_layers,
                             dropout=self.dropout, add_positional=True)

    def fusion_encoder(self) -> EncoderConfig:
        return EncoderConfig(model_dim=2 * self.embed, heads=self.heads,
                             ffn_dim=self.ffn_dim, layers=self.fusion_layers,
                             dropout=self.dropout, add_positional=True)

    def to_dict(self) -> dict:
        return {
            "hand_in": self.hand_in, "lip_in": self.lip_in, "embed": self.embed,
            "branch_layers": self.branch_layers, "fusion_layers": self.fusion_layers,
            "heads": self.heads, "ffn_dim": self.ffn_dim,
            "head_hidden": self.head_hidden, "dropout": self.dropout,
            "use_lip": self.use_lip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecognizerConfig":
        return cls(**d)


class Recognizer:
    """Two encoder branches -> concat -> fusion encoder -> 2-layer head -> 27 logits."""

    def __init__(self, cfg: RecognizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        e = cfg.embed
        self.hand_proj = Linear(cfg.hand_in, e, rng, "hand.proj")
        self.hand_enc = EncoderStack(cfg.branch_encoder(), rng, "hand.enc")
        self.lip_proj = Linear(cfg.lip_in, e, rng, "lip.proj")
        self.lip_enc = EncoderStack(cfg.branch_encoder(), rng, "lip.enc")
        self.lip_missing = Param("lip.missing", np.zeros(e))
        self.fusion = EncoderStack(cfg.fusion_encoder(), rng, "fusion")
        self.final_ln = LayerNorm(2 * e, "final_ln")
        self.head1 = Linear(2 * e, cfg.head_hidden, rng, "head.1")
        self.head_relu = ReLU()
        self.head_drop = Dropout(cfg.dropout)
        self.head2 = Linear(cfg.head_hidden, N_CLASSES, rng, "head.2")
        self._lip_was_real = False

    def params(self):
        return (self.hand_proj.params() + self.hand_enc.params()
                + self.lip_proj.params() + self.lip_enc.params()
                + [self.lip_missing]
                + self.fusion.params() + self.final_ln.params()
                + self.head1.params() + self.head2.params())

    def forward(self, seq: FeatureSequence, train: bool = False, rng=None) -> np.ndarray:
        """(T, 27) logits; the lip branch degrades to a learned constant row
        when lip features are absent or disabled."""
        hand = np.asarray(seq.hand, dtype=np.float64)
        if hand.ndim != 2 or hand.shape[1] != self.cfg.hand_in:
            raise DataError(f"hand features must be (T, {self.cfg.hand_in}), got {hand.shape}")
        T = hand.shape[0]
        h = self.hand_enc.forward(self.hand_proj.forward(hand), train, rng)
        if seq.lip is not None and self.cfg.use_lip:
            lip = np.asarray(seq.lip, dtype=np.float64)
            if lip.shape != (T, self.cfg.lip_in):
                raise DataError(f"lip features must be (T, {self.cfg.lip_in}), got {lip.shape}")
            l = self.lip_enc.forward(self.lip_proj.forward(lip), train, rng)
            self._lip_was_real = True
        else:
            l = np.tile(self.lip_missing.value, (T, 1))
            self._lip_was_real = False
        z = self.fusion.forward(np.concatenate([h, l], axis=1), train, rng)
        z = self.final_ln.forward(z)
        z = self.head_drop.forward(self.head_relu.forward(self.head1.forward(z)),
                                   train, rng)
        return self.head2.forward(z)

    def backward(self, dlogits: np.ndarray) -> None:
        dz = self.head2.backward(dlogits)
        dz = self.head1.backward(self.head_relu.backward(self.head_drop.backward(dz)))
        dz = self.final_ln.backward(dz)
        dz = self.fusion.backward(dz)
        e = self.cfg.embed
        dh, dl = dz[:, :e], dz[:, e:]
        self.hand_proj.backward(self.hand_enc.backward(dh))
        if self._lip_was_real:
            self.lip_proj.backward(self.lip_enc.backward(dl))
        else:
            self.lip_missing.grad += dl.sum(axis=0)

    def predict(self, seq: FeatureSequence):
        """Open-alphabet greedy decode: (word, per-frame label string).

        No word masking here: the associated word is unknown at test time.
        """
        logprobs = log_softmax(self.forward(seq, train=False), axis=-1)
        path, word = greedy_decode(logprobs)
        return word, indices_to_labels(path)

    def to_checkpoint(self, model_kind: str = "recognizer",
                      seed_note: str = "") -> ModelCheckpoint:
        weights = {p.name: p.value.reshape(-1).copy() for p in self.params()}
        return ModelCheckpoint(model_kind=model_kind, arch_config=self.cfg.to_dict(),
                               weights=weights, rng_seed_provenance=seed_note)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "Recognizer":
        if ckpt.model_kind not in ("recognizer", "frame_classifier"):
            raise DataError(f"checkpoint holds a {ckpt.model_kind!r} model")
        model = cls(RecognizerConfig.from_dict(ckpt.arch_config),
                    np.random.default_rng(0))
        for p in model.params():
            if p.name not in ckpt.weights:
                raise DataError(f"checkpoint missing weight {p.name!r}")
            flat = ckpt.weights[p.name]
            if flat.size != p.value.size:
                raise DataError(
                    f"weight {p.name!r} has {flat.size} values, expected {p.value.size}")
            p.value[...] = flat.reshape(p.value.shape)
        return model


@dataclass(frozen=True)
class TrainExample:
    seq: FeatureSequence
    letters: str               # CTC target
    labels: np.ndarray         # per-frame class indices, -1 = unlabeled
    word: str                  # masking vocabulary for the CTC branch
    weight: float = 1.0        # sampling weight (inverse letter frequency)


def make_example(clip: Clip, ann: Annotation, weight: float = 1.0,
                 hand: np.ndarray | None = None) -> TrainExample:
    """Slice one annotated interval into a training example."""
    if not ann.letters:
        raise DataError(f"annotation {ann.clip_id} has no letters to train on")
    seq = sequence_for_interval(clip, ann.start, ann.end, hand=hand)
    T = ann.end - ann.start + 1
    if ann.frame_labels is not None:
        labels = labels_to_indices(ann.frame_labels)
    else:
        labels = np.full(T, -1, dtype=np.int64)
    return TrainExample(seq=seq, letters=ann.letters, labels=labels,
                        word=ann.word or ann.letters, weight=weight)


def build_examples(clips_by_id: dict[str, Clip], annotations,
                   hand_cache: dict[str, np.ndarray] | None = None) -> list[TrainExample]:
    """Examples for a set of annotations, weighted by inverse letter frequency."""
    weights = annotation_weights(annotations)
    out = []
    for ann, w in zip(annotations, weights):
        clip = clips_by_id.get(ann.clip_id)
        if clip is None:
            raise DataError(f"annotation references unknown clip {ann.clip_id!r}")
        hand = hand_cache.get(ann.clip_id) if hand_cache is not None else None
        out.append(make_example(clip, ann, weight=float(w), hand=hand))
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    virtual_batch: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    noise_sigma: float = 0.005
    p_swap: float = 0.05
    p_drop: float = 0.02
    p_dup: float = 0.05
    augment: bool = True
    weighted_sampling: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.virtual_batch < 1:
            raise DataError("epochs and virtual_batch must be >= 1")
        if self.lr <= 0:
            raise DataError("lr must be > 0")


FRAME_CLF_WEIGHTS = LossWeights(lambda_f=1.0, lambda_ctc=0.0)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0  # examples whose CTC target became infeasible


def _example_pass(model: Recognizer, ex: TrainExample, tc: TrainConfig,
                  rng: np.random.Generator):
    """Forward + backward for one example; returns its loss, or None if the
    (possibly augmented) sequence cannot align to the target."""
    seq, labels = ex.seq, ex.labels
    if tc.augment:
        seq = augment_noise(seq, tc.noise_sigma, rng)
        seq, labels = augment_temporal(seq, labels, rng, p_swap=tc.p_swap,
                                       p_drop=tc.p_drop, p_dup=tc.p_dup)
    w = tc.loss_weights
    need_ctc = w.lambda_ctc != 0.0
    if need_ctc and len(seq) < min_frames_for(ex.letters):
        return None
    logits = model.forward(seq, train=True, rng=rng)
    loss = 0.0
    dlogits = np.zeros_like(logits)
    if w.lambda_f != 0.0 and np.any(labels >= 0):
        lf, df = per_frame_ce(logits, labels)
        loss += w.lambda_f * lf
        dlogits += w.lambda_f * df
    if need_ctc:
        logprobs = mask_to_word(logits, ex.word)
        res = ctc_loss(logprobs, ex.letters)
        if not res.feasible:
            return None
        loss += w.lambda_ctc * res.loss
        dlogits += w.lambda_ctc * masked_log_softmax_backward(logprobs, res.grad)
    model.backward(dlogits / tc.virtual_batch)
    return loss


def train(model: Recognizer, examples: list[TrainExample], tc: TrainConfig,
          seed: int = 0) -> TrainLog:
    """Adam over single sequences with gradient accumulation.

    One rng drives sampling order, augmentation, and dropout, so a fixed
    (model init, examples, config, seed) tuple reproduces training exactly.
    """
    if not examples:
        raise DataError("empty training set")
    rng = np.random.default_rng([seed, 0x7EA1])
    opt = Adam(model.params(), lr=tc.lr)
    n = len(examples)
    if tc.weighted_sampling:
        p = np.array([ex.weight for ex in examples], dtype=np.float64)
        if np.any(p < 0) or p.sum() <= 0:
            raise DataError("sampling weights must be nonnegative with positive sum")
        p = p / p.sum()
    log = TrainLog()
    for _ in range(tc.epochs):
        if tc.weighted_sampling:
            order = rng.choice(n, size=n, replace=True, p=p)
        else:
            order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        in_batch = 0
        opt.zero_grad()
        for j in order:
            out = _example_pass(model, examples[int(j)], tc, rng)
            if out is None:
                log.skipped += 1
                continue
            epoch_loss += out
            seen += 1
            in_batch += 1
            if in_batch == tc.virtual_batch:
                opt.step()
                opt.zero_grad()
                in_batch = 0
        if in_batch:
            opt.step()
            opt.zero_grad()
        log.losses.append(epoch_loss / max(seen, 1))
    return log


def train_new(cfg: RecognizerConfig, examples: list[TrainExample], tc: TrainConfig,
              seed: int = 0) -> tuple[Recognizer, TrainLog]:
    """Initialize (seeded) and train in one step."""
    model = Recognizer(cfg, np.random.default_rng([seed, 0x1417]))
    log = train(model, examples, tc, seed=seed)
    return model, log


def frame_clf_config(tc: TrainConfig) -> TrainConfig:
    """The frame classifier is the same architecture trained CE-only."""
    return replace(tc, loss_weights=FRAME_CLF_WEIGHTS)


def evaluate_cer(model: Recognizer, examples_or_pairs) -> tuple[float, list[dict]]:
    """Micro-averaged CER of open-alphabet predictions against reference letters.

    Accepts TrainExamples (reference = their letters).  Returns the aggregate
    CER (total edits / total reference length) and per-item records.
    """
    total_edits = 0
    total_ref = 0
    rows = []
    for ex in examples_or_pairs:
        word, frame_labels = model.predict(ex.seq)
        value, counts = cer(word, ex.letters)
        total_edits += counts.total
        total_ref += counts.reference_length
        rows.append({"reference": ex.letters, "decoded": word,
                     "cer": value, "frame_labels": frame_labels})
    if total_ref == 0:
        raise DataError("no reference letters to evaluate")
    return total_edits / total_ref, rows

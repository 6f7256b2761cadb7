"""Batch command-line interface.

One subcommand per pipeline stage; every command is re-runnable from its
on-disk inputs alone, and --seed pins all stochastic behavior.  Exit codes:
0 success, 1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .annotator import (FeatureCache, PipelineConfig, PipelineState,
                        prepare_strong, run_iteration, run_pipeline)
from .datamodel import (DataError, LossWeights, load_checkpoint,
                        read_annotations, save_checkpoint, write_annotations)
from .detector import (Detector, DetectorConfig, refilter_pool, smooth,
                       train_detector)
from .features import clip_hand_features
from .metrics import avg_class_accuracy, confusion, roc_auc
from .recognizer import (Recognizer, build_examples, evaluate_cer,
                         frame_clf_config, train_new, RecognizerConfig,
                         TrainConfig)
from .svgplot import (svg_cer_curve, svg_confusion, svg_letter_strip,
                      svg_mask_timeline, svg_roc)
from .synthgen import SynthConfig, load_corpus, make_corpus, sanity_check, write_corpus


# ---------------------------------------------------------------------------
# run configuration (TOML file, flags override)

@dataclass(frozen=True)
class DetectorTrain:
    epochs: int = 4
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.lr <= 0:
            raise DataError("detector_train needs epochs >= 1 and lr > 0")


@dataclass(frozen=True)
class PipelineSection:
    iterations: int = 3
    accept_cer: float = 0.3
    confidence_threshold: float = 0.35
    strong_labels: str = "given"
    refilter: bool = True  # detector-tighten the weak pool before iterating
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: RecognizerConfig = field(default_factory=RecognizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_train: DetectorTrain = field(default_factory=DetectorTrain)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline
        return PipelineConfig(model=self.model, train=self.train,
                              iterations=p.iterations, accept_cer=p.accept_cer,
                              confidence_threshold=p.confidence_threshold,
                              strong_labels=p.strong_labels, seed=p.seed)


_SECTIONS = {
    "synth": SynthConfig,
    "model": RecognizerConfig,
    "train": TrainConfig,
    "detector": DetectorConfig,
    "detector_train": DetectorTrain,
    "pipeline": PipelineSection,
}


def _build_section(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kw = {}
    for key, value in data.items():
        if key not in known:
            raise DataError(f"unknown key {where}.{key}")
        current = getattr(defaults, key)
        if key == "loss_weights":
            if not isinstance(value, dict):
                raise DataError(f"{where}.loss_weights must be a table")
            extra = set(value) - {"lambda_f", "lambda_ctc"}
            if extra:
                raise DataError(f"unknown key {where}.loss_weights.{extra.pop()}")
            value = LossWeights(**{k: float(v) for k, v in value.items()})
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise DataError(f"{where}.{key} must be a boolean")
        elif isinstance(current, float) and isinstance(value, int):
            value = float(value)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise DataError(f"{where}.{key} must be an array")
            value = tuple(value)
        if not isinstance(current, bool) and isinstance(value, bool):
            raise DataError(f"{where}.{key} must not be a boolean")
        kw[key] = value
    return cls(**kw)


def load_run_config(path) -> RunConfig:
    """Parse a TOML run configuration; unknown sections or keys are errors."""
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise DataError(f"{path}: bad config: {e}") from None
    kw = {}
    for name, section in doc.items():
        if name not in _SECTIONS:
            raise DataError(f"{path}: unknown config section [{name}]")
        if not isinstance(section, dict):
            raise DataError(f"{path}: [{name}] must be a table")
        kw[name] = _build_section(_SECTIONS[name], section, name)
    return RunConfig(**kw)


def _effective_config(args) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        rc = replace(rc, synth=replace(rc.synth, seed=args.seed),
                     pipeline=replace(rc.pipeline, seed=args.seed))
    if getattr(args, "iterations", None) is not None:
        rc = replace(rc, pipeline=replace(rc.pipeline, iterations=args.iterations))
    if getattr(args, "threshold", None) is not None:
        rc = replace(rc, pipeline=replace(rc.pipeline,
                                          confidence_threshold=args.threshold))
    if getattr(args, "no_lip", False):
        rc = replace(rc, model=replace(rc.model, use_lip=False))
    return rc


# ---------------------------------------------------------------------------
# shared plumbing

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    if args.data is None:
        raise DataError("--data is required for this command")
    return load_corpus(args.data)


def _hand_cache(corpus, annotations) -> dict[str, np.ndarray]:
    cache = FeatureCache(corpus.clips)
    return {a.clip_id: cache.features(a.clip_id) for a in annotations}


def _training_annotations(corpus, args):
    anns = list(corpus.strong)
    if getattr(args, "accepted", None):
        anns += read_annotations(args.accepted)
    return anns


def _write_svg(doc: str, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(doc)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    rc = _effective_config(args)
    out = _out_dir(args)
    corpus = make_corpus(rc.synth)
    sanity_check(corpus)
    write_corpus(corpus, out)
    print(f"synth: {len(corpus.clips)} clips, "
          f"{corpus.manifest['n_frames']} frames -> {out}")
    print(f"synth: strong={len(corpus.strong)} weak={len(corpus.weak)} "
          f"heldout={len(corpus.heldout)}")
    return 0


def cmd_train_detector(args) -> int:
    rc = _effective_config(args)
    out = _out_dir(args)
    corpus = _load_data(args)
    ids = sorted(corpus.clips)
    X = np.vstack([clip_hand_features(corpus.clips[cid]) for cid in ids])
    y = np.concatenate([corpus.fs_masks[cid] for cid in ids])
    det, log = train_detector(X, y, rc.detector, seed=rc.pipeline.seed,
                              epochs=rc.detector_train.epochs,
                              lr=rc.detector_train.lr)
    _, auc = roc_auc(det.forward(X), y)
    path = out / "detector.fsckpt"
    save_checkpoint(det.to_checkpoint(seed_note=f"seed={rc.pipeline.seed}"), path)
    print(f"train-detector: {len(y)} frames, final loss {log.losses[-1]:.4f}, "
          f"train AUC {auc:.4f} -> {path}")
    return 0


def cmd_refilter(args) -> int:
    _effective_config(args)  # validates the config file if given
    out = _out_dir(args)
    corpus = _load_data(args)
    det = Detector.from_checkpoint(load_checkpoint(args.detector))
    kept, counts = refilter_pool(corpus.clips, corpus.weak, det)
    write_annotations(kept, out / "weak_refiltered.jsonl")
    with open(out / "refilter_report.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "count"])
        for stage in ("input", "no_fingerspelling", "multiple_events", "kept"):
            w.writerow([stage, counts[stage]])
    for stage in ("input", "no_fingerspelling", "multiple_events", "kept"):
        print(f"refilter: {stage:<18} {counts[stage]}")
    return 0


def _cmd_train_recognizer_like(args, frame_only: bool) -> int:
    rc = _effective_config(args)
    out = _out_dir(args)
    corpus = _load_data(args)
    anns = prepare_strong(_training_annotations(corpus, args),
                          rc.pipeline.strong_labels)
    examples = build_examples(corpus.clips, anns, _hand_cache(corpus, anns))
    tc = frame_clf_config(rc.train) if frame_only else rc.train
    model, log = train_new(rc.model, examples, tc, seed=rc.pipeline.seed)
    kind = "frame_classifier" if frame_only else "recognizer"
    path = out / ("frame_clf.fsckpt" if frame_only else "recognizer.fsckpt")
    save_checkpoint(model.to_checkpoint(kind, seed_note=f"seed={rc.pipeline.seed}"),
                    path)
    name = "train-frame-clf" if frame_only else "train-recognizer"
    print(f"{name}: {len(examples)} examples, {tc.epochs} epochs, "
          f"final loss {log.losses[-1]:.4f} -> {path}")
    return 0


def cmd_train_frame_clf(args) -> int:
    return _cmd_train_recognizer_like(args, frame_only=True)


def cmd_train_recognizer(args) -> int:
    return _cmd_train_recognizer_like(args, frame_only=False)


def cmd_annotate(args) -> int:
    rc = _effective_config(args)
    out = _out_dir(args)
    corpus = _load_data(args)
    pcfg = rc.pipeline_config()
    accepted = read_annotations(args.accepted) if args.accepted else []
    taken = {a.clip_id for a in accepted}
    weak = [a for a in corpus.weak if a.clip_id not in taken]
    state = PipelineState(iteration=args.iteration,
                          strong=prepare_strong(corpus.strong, pcfg.strong_labels),
                          weak=weak, accepted=accepted)
    cache = FeatureCache(corpus.clips)
    state, artifacts = run_iteration(state, cache, pcfg)
    state.audit()
    write_annotations(state.accepted, out / "accepted.jsonl")
    save_checkpoint(artifacts["recognizer"].to_checkpoint(
        "recognizer", seed_note=f"seed={pcfg.seed} iter={state.iteration}"),
        out / "recognizer.fsckpt")
    save_checkpoint(artifacts["frame_clf"].to_checkpoint(
        "frame_classifier", seed_note=f"seed={pcfg.seed} iter={state.iteration}"),
        out / "frame_clf.fsckpt")
    heldout_examples = build_examples(corpus.clips, corpus.heldout,
                                      _hand_cache(corpus, corpus.heldout))
    value, _ = evaluate_cer(artifacts["recognizer"], heldout_examples)
    print(f"annotate: iteration {state.iteration}: "
          f"+{artifacts['newly_accepted']} accepted "
          f"({len(state.accepted)} total, {len(state.weak)} weak remain), "
          f"held-out CER {value:.4f}")
    return 0


def train_interval_detector(clips_by_id, strong, cfg: DetectorConfig,
                            train: DetectorTrain, seed: int) -> Detector:
    """Detector trained on the strong clips alone, with per-frame targets
    derived from the strong intervals (1 inside, 0 outside)."""
    ids = sorted({a.clip_id for a in strong})
    if not ids:
        raise DataError("no strong annotations to train the detector on")
    feats, targets = [], []
    for cid in ids:
        clip = clips_by_id[cid]
        mask = np.zeros(len(clip.frames), dtype=np.int64)
        for a in strong:
            if a.clip_id == cid:
                a.validate_against(clip)
                mask[a.start:a.end + 1] = 1
        feats.append(clip_hand_features(clip))
        targets.append(mask)
    det, _ = train_detector(np.vstack(feats), np.concatenate(targets), cfg,
                            seed=seed, epochs=train.epochs, lr=train.lr)
    return det


def cmd_pipeline(args) -> int:
    rc = _effective_config(args)
    out = _out_dir(args)
    corpus = load_corpus(args.data) if args.data else make_corpus(rc.synth)
    pcfg = rc.pipeline_config()
    weak = corpus.weak
    if rc.pipeline.refilter and weak:
        det = train_interval_detector(corpus.clips, corpus.strong, rc.detector,
                                      rc.detector_train, pcfg.seed)
        save_checkpoint(det.to_checkpoint(seed_note=f"seed={pcfg.seed}"),
                        out / "detector.fsckpt")
        weak, counts = refilter_pool(corpus.clips, weak, det)
        print(f"pipeline: refilter kept {counts['kept']}/{counts['input']} "
              f"(no_fingerspelling {counts['no_fingerspelling']}, "
              f"multiple_events {counts['multiple_events']})")
    state = run_pipeline(corpus.clips, corpus.strong, weak,
                         corpus.heldout, pcfg, out_dir=out)
    _write_svg(svg_cer_curve(state.metrics), out / "cer_curve.svg")
    for row in state.metrics:
        print(f"pipeline: iteration {row['iteration']}: "
              f"accepted {row['accepted']}, held-out CER {row['heldout_cer']:.4f}")
    return 0


def cmd_eval(args) -> int:
    _effective_config(args)  # validates the config file if given
    out = _out_dir(args)
    corpus = _load_data(args)
    model = Recognizer.from_checkpoint(load_checkpoint(args.recognizer))
    heldout_examples = build_examples(corpus.clips, corpus.heldout,
                                      _hand_cache(corpus, corpus.heldout))
    value, rows = evaluate_cer(model, heldout_examples)

    gt_chars: list[str] = []
    pred_chars: list[str] = []
    for ann, row in zip(corpus.heldout, rows):
        if ann.frame_labels is None:
            continue
        gt_chars.extend(ann.frame_labels)
        pred_chars.extend(row["frame_labels"])
    letter_pairs = [(p, g) for p, g in zip(pred_chars, gt_chars) if g != "-"]
    if not letter_pairs:
        raise DataError("held-out set carries no per-frame letter labels")
    acc = avg_class_accuracy([p for p, _ in letter_pairs],
                             [g for _, g in letter_pairs])
    cm = confusion(pred_chars, gt_chars)

    per_class_total: dict[str, int] = {}
    per_class_correct: dict[str, int] = {}
    for p, g in letter_pairs:
        per_class_total[g] = per_class_total.get(g, 0) + 1
        if p == g:
            per_class_correct[g] = per_class_correct.get(g, 0) + 1
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["letter", "support", "recall"])
        for c in "abcdefghijklmnopqrstuvwxyz":
            n = per_class_total.get(c, 0)
            r = f"{per_class_correct.get(c, 0) / n:.4f}" if n else ""
            w.writerow([c, n, r])

    _write_svg(svg_confusion(cm), out / "confusion.svg")
    summary = {"cer": round(value, 6), "avg_class_accuracy": round(acc, 6),
               "n_items": len(rows)}

    if args.detector:
        det = Detector.from_checkpoint(load_checkpoint(args.detector))
        ids = sorted(corpus.fs_masks)
        scores = np.concatenate([det.forward(clip_hand_features(corpus.clips[cid]))
                                 for cid in ids])
        labels = np.concatenate([corpus.fs_masks[cid] for cid in ids])
        curve, auc = roc_auc(scores, labels)
        _write_svg(svg_roc(curve, auc), out / "roc.svg")
        summary["detector_auc"] = round(auc, 6)
        print(f"eval: detector AUC {auc:.4f} over {len(labels)} frames")

    with open(out / "eval_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"eval: CER {value:.4f}, avg class accuracy {acc:.4f} "
          f"over {len(rows)} held-out items -> {out}")
    return 0


def cmd_viz(args) -> int:
    _effective_config(args)  # validates the config file if given
    out = _out_dir(args)
    wrote = []
    if args.metrics:
        with open(args.metrics, encoding="utf-8") as fh:
            rows = json.load(fh)
        _write_svg(svg_cer_curve(rows), out / "cer_curve.svg")
        wrote.append("cer_curve.svg")
    if args.detector or args.recognizer:
        corpus = _load_data(args)
        chosen = [a for a in sorted(corpus.heldout, key=lambda a: a.clip_id)
                  if a.frame_labels is not None][:args.clips]
        if not chosen:
            raise DataError("no labeled held-out clips to draw")
        cache = FeatureCache(corpus.clips)
        if args.detector:
            det = Detector.from_checkpoint(load_checkpoint(args.detector))
            for ann in chosen:
                clip = corpus.clips[ann.clip_id]
                probs = det.forward(clip_hand_features(clip))
                raw = (probs >= det.cfg.frame_threshold).astype(np.int64)
                pred = smooth(raw, det.cfg.window_w, det.cfg.window_k)
                doc = svg_mask_timeline(
                    [("truth", corpus.fs_masks[ann.clip_id]), ("detected", pred)],
                    title=f"detection timeline {ann.clip_id}")
                name = f"timeline_{ann.clip_id}.svg"
                _write_svg(doc, out / name)
                wrote.append(name)
        if args.recognizer:
            model = Recognizer.from_checkpoint(load_checkpoint(args.recognizer))
            for ann in chosen:
                decoded, frame_labels = model.predict(cache.sequence(ann))
                doc = svg_letter_strip(
                    [("truth", ann.frame_labels), ("predicted", frame_labels)],
                    title=f"{ann.clip_id}: truth {ann.letters!r} "
                          f"decoded {decoded!r}")
                name = f"letters_{ann.clip_id}.svg"
                _write_svg(doc, out / name)
                wrote.append(name)
    if not wrote:
        raise DataError("nothing to draw: pass --metrics, --detector, "
                        "or --recognizer")
    print(f"viz: wrote {len(wrote)} file(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this artifact reserves 2 for runtime
    failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p, need_out=True, need_data=False, data_optional=False):
    p.add_argument("--config", type=Path, default=None,
                   help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="override every configured seed")
    p.add_argument("--out", type=Path, required=need_out,
                   help="output directory")
    if need_data or data_optional:
        p.add_argument("--data", type=Path, required=need_data and not data_optional,
                       default=None, help="corpus directory from `synth`")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fingerspell",
                     description="fingerspelling recognition pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-detector", help="train the frame detector")
    _add_common(p, need_data=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("refilter", help="tighten or reject weak intervals")
    _add_common(p, need_data=True)
    p.add_argument("--detector", type=Path, required=True,
                   help="detector checkpoint")
    p.set_defaults(func=cmd_refilter)

    p = sub.add_parser("train-frame-clf", help="train the frame classifier")
    _add_common(p, need_data=True)
    p.add_argument("--accepted", type=Path, default=None,
                   help="extra accepted annotations file")
    p.add_argument("--no-lip", action="store_true", dest="no_lip")
    p.set_defaults(func=cmd_train_frame_clf)

    p = sub.add_parser("annotate", help="run one re-annotation round")
    _add_common(p, need_data=True)
    p.add_argument("--accepted", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=None,
                   help="frame-label confidence threshold")
    p.add_argument("--iteration", type=int, default=0,
                   help="index of the round being resumed")
    p.add_argument("--no-lip", action="store_true", dest="no_lip")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train-recognizer", help="train the word recognizer")
    _add_common(p, need_data=True)
    p.add_argument("--accepted", type=Path, default=None)
    p.add_argument("--no-lip", action="store_true", dest="no_lip")
    p.set_defaults(func=cmd_train_recognizer)

    p = sub.add_parser("eval", help="held-out CER / class accuracy / plots")
    _add_common(p, need_data=True)
    p.add_argument("--recognizer", type=Path, required=True)
    p.add_argument("--detector", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="full iterative loop")
    _add_common(p, data_optional=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--no-lip", action="store_true", dest="no_lip")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("viz", help="timeline and progress SVGs")
    _add_common(p, data_optional=True)
    p.add_argument("--metrics", type=Path, default=None,
                   help="metrics.json from `pipeline`")
    p.add_argument("--detector", type=Path, default=None)
    p.add_argument("--recognizer", type=Path, default=None)
    p.add_argument("--clips", type=int, default=4,
                   help="how many clips to draw")
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a command is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError) as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a runtime failure
        print(f"{parser.prog}: failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

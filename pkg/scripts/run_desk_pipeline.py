"""Desk-scale end-to-end run: corpus -> detector -> refilter -> 3 iterations.

Mirrors what `fingerspell pipeline` does, but through the Python API so the
intermediate objects are easy to poke at interactively.  Writes checkpoints,
accepted-pool snapshots, metrics.json, and the CER curve SVG into --out.

Usage:
    python scripts/run_desk_pipeline.py --out runs/desk --seed 0
"""

import argparse
import sys
import time
from pathlib import Path

from fingerspell.annotator import PipelineConfig, run_pipeline
from fingerspell.cli import DetectorTrain, train_interval_detector
from fingerspell.detector import DetectorConfig, refilter_pool
from fingerspell.recognizer import RecognizerConfig, TrainConfig
from fingerspell.svgplot import svg_cer_curve
from fingerspell.synthgen import SynthConfig, make_corpus

DESK_MODEL = RecognizerConfig(embed=32, branch_layers=1, fusion_layers=1,
                              heads=2, ffn_dim=64, head_hidden=32, dropout=0.1)
DESK_TRAIN = TrainConfig(epochs=20, lr=1e-3, virtual_batch=8)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=3)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    corpus = make_corpus(SynthConfig(seed=args.seed))
    print(f"corpus: {len(corpus.clips)} clips, {len(corpus.strong)} strong / "
          f"{len(corpus.weak)} weak / {len(corpus.heldout)} held out "
          f"({time.time() - t0:.0f}s)")

    det = train_interval_detector(corpus.clips, corpus.strong,
                                  DetectorConfig(), DetectorTrain(),
                                  seed=args.seed)
    kept, counts = refilter_pool(corpus.clips, corpus.weak, det)
    print("refilter:", ", ".join(f"{k}={v}" for k, v in counts.items()))

    pcfg = PipelineConfig(model=DESK_MODEL, train=DESK_TRAIN,
                          iterations=args.iterations, seed=args.seed)
    state = run_pipeline(corpus.clips, corpus.strong, kept, corpus.heldout,
                         pcfg, out_dir=args.out)

    for row in state.metrics:
        print(f"iteration {row['iteration']}: accepted {row['accepted']:5d}, "
              f"held-out CER {row['heldout_cer']:.4f}")
    (args.out / "cer_curve.svg").write_text(svg_cer_curve(state.metrics))
    print(f"artifacts in {args.out} ({time.time() - t0:.0f}s total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

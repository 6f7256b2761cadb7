"""Ablation: inverse-frequency weighted sampling vs uniform epochs.

Trains two recognizers on the same strong set with the same seed, one with
weighted sampling and one without, then compares frame-level average class
accuracy on the rare letters (bottom quartile of the strong-set letter
frequencies).  Rare-letter recall is where weighting should pay off.

Usage:
    python scripts/weighted_ablation.py --corpus-seed 9 --train-seed 9
"""

import argparse
import math
import sys
import time

from fingerspell.annotator import FeatureCache
from fingerspell.metrics import avg_class_accuracy
from fingerspell.recognizer import RecognizerConfig, TrainConfig, build_examples, train_new
from fingerspell.synthgen import SynthConfig, make_corpus

DESK_MODEL = RecognizerConfig(embed=32, branch_layers=1, fusion_layers=1,
                              heads=2, ffn_dim=64, head_hidden=32, dropout=0.1)


def rare_letters(strong, quantile=0.25):
    counts = {c: 0 for c in "abcdefghijklmnopqrstuvwxyz"}
    for ann in strong:
        for c in ann.letters:
            counts[c] += 1
    n_rare = math.ceil(len(counts) * quantile)
    order = sorted(counts, key=lambda c: (counts[c], c))
    return set(order[:n_rare]), counts


def rare_frame_pairs(model, heldout, cache, rare):
    """(pred, gt) per frame, restricted to frames whose truth is a rare letter."""
    preds, gts = [], []
    for ann in heldout:
        _, frame_pred = model.predict(cache.sequence(ann))
        for p, g in zip(frame_pred, ann.frame_labels):
            if g in rare:
                preds.append(p)
                gts.append(g)
    return preds, gts


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus-seed", type=int, default=9)
    ap.add_argument("--train-seed", type=int, default=9)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args(argv)

    corpus = make_corpus(SynthConfig(seed=args.corpus_seed))
    cache = FeatureCache(corpus.clips)
    examples = build_examples(corpus.clips, corpus.strong,
                              {a.clip_id: cache.features(a.clip_id)
                               for a in corpus.strong})
    rare, counts = rare_letters(corpus.strong)
    print(f"rare letters ({len(rare)}):",
          " ".join(f"{c}:{counts[c]}" for c in sorted(rare)))

    scores = {}
    for weighted in (True, False):
        tc = TrainConfig(epochs=args.epochs, lr=1e-3, virtual_batch=8,
                         weighted_sampling=weighted)
        t0 = time.time()
        model, _ = train_new(DESK_MODEL, examples, tc, seed=args.train_seed)
        preds, gts = rare_frame_pairs(model, corpus.heldout, cache, rare)
        scores[weighted] = avg_class_accuracy(preds, gts)
        print(f"weighted={weighted}: rare-letter avg class accuracy "
              f"{scores[weighted]:.4f}  ({time.time() - t0:.0f}s, {len(gts)} frames)")

    margin = scores[True] - scores[False]
    print(f"margin (weighted - unweighted): {margin:+.4f}")
    return 0 if margin > 0 else 1


if __name__ == "__main__":
    sys.exit(main())

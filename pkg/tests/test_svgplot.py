"""SVG emitters: every document must parse as XML and contain the plotted
data; malformed inputs must be rejected."""
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fingerspell.datamodel import DataError
from fingerspell.metrics import ConfusionMatrix, confusion, roc_auc
from fingerspell.svgplot import (svg_cer_curve, svg_confusion,
                                 svg_letter_strip, svg_mask_timeline, svg_roc)

SVG_NS = "{http://www.w3.org/2000/svg}"


def _parse(doc: str) -> ET.Element:
    root = ET.fromstring(doc)
    assert root.tag == f"{SVG_NS}svg"
    return root


def test_confusion_svg_parses_and_holds_counts():
    cm = confusion(list("aabbc"), list("ababc"))
    root = _parse(svg_confusion(cm))
    rects = root.findall(f".//{SVG_NS}rect")
    assert len(rects) >= 26 * 26
    titles = " ".join(t.text for t in root.findall(f".//{SVG_NS}title"))
    assert "gt a -> pred a: 1" in titles
    assert "gt a -> pred b: 1" in titles


def test_confusion_svg_shape_check():
    with pytest.raises(DataError):
        svg_confusion(ConfusionMatrix(counts=np.zeros((5, 5), dtype=np.int64)))


def test_roc_svg_parses():
    rng = np.random.default_rng(3)
    scores = np.concatenate([rng.normal(1, 1, 200), rng.normal(-1, 1, 200)])
    labels = np.concatenate([np.ones(200, dtype=int), np.zeros(200, dtype=int)])
    curve, auc = roc_auc(scores, labels)
    root = _parse(svg_roc(curve, auc))
    polys = root.findall(f".//{SVG_NS}polyline")
    assert len(polys) == 1
    assert len(polys[0].get("points").split()) == len(curve)
    text = " ".join(t.text for t in root.findall(f".//{SVG_NS}text"))
    assert f"AUC {auc:.3f}" in text


def test_roc_svg_rejects_bad_curves():
    with pytest.raises(DataError):
        svg_roc(np.array([[0.0, 0.0]]))
    with pytest.raises(DataError):
        svg_roc(np.array([[0.0, 0.0], [2.0, 1.0]]))


def test_cer_curve_svg_contains_every_iteration():
    rows = [{"iteration": 0, "accepted": 0, "heldout_cer": 0.42},
            {"iteration": 1, "accepted": 310, "heldout_cer": 0.21},
            {"iteration": 2, "accepted": 800, "heldout_cer": 0.13}]
    root = _parse(svg_cer_curve(rows))
    text = " ".join(t.text for t in root.findall(f".//{SVG_NS}text"))
    for r in rows:
        assert f"{r['heldout_cer']:.3f}" in text
        assert f"+{r['accepted']}" in text
    assert len(root.findall(f".//{SVG_NS}circle")) == 3


def test_cer_curve_single_row_and_errors():
    _parse(svg_cer_curve([{"iteration": 0, "accepted": 0, "heldout_cer": 0.0}]))
    with pytest.raises(DataError):
        svg_cer_curve([])
    with pytest.raises(DataError):
        svg_cer_curve([{"iteration": 0}])


def test_mask_timeline_runs_become_rects():
    mask = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1])
    root = _parse(svg_mask_timeline([("truth", mask), ("pred", 1 - mask)]))
    titles = [t.text for t in root.findall(f".//{SVG_NS}title")]
    assert "truth: frames 1..2" in titles
    assert "truth: frames 7..9" in titles
    assert "pred: frames 5..6" in titles


def test_mask_timeline_validation():
    with pytest.raises(DataError):
        svg_mask_timeline([])
    with pytest.raises(DataError):
        svg_mask_timeline([("a", np.array([0, 1])), ("b", np.array([1]))])
    with pytest.raises(DataError):
        svg_mask_timeline([("a", np.array([0, 2]))])


def test_letter_strip_one_cell_per_frame():
    root = _parse(svg_letter_strip([("gt", "-aab-"), ("pred", "-ab--")]))
    texts = [t.text for t in root.findall(f".//{SVG_NS}text")]
    # letters drawn for non-blank cells only: aab + ab
    assert texts.count("a") == 3
    assert texts.count("b") == 2


def test_letter_strip_validation():
    with pytest.raises(DataError):
        svg_letter_strip([("gt", "a!b")])
    with pytest.raises(DataError):
        svg_letter_strip([("gt", "ab"), ("pred", "abc")])
    with pytest.raises(DataError):
        svg_letter_strip([])


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 60))
def test_mask_timeline_always_valid_xml(seed, n_tracks, T):
    rng = np.random.default_rng(seed)
    tracks = [(f"t{k}", rng.integers(0, 2, size=T)) for k in range(n_tracks)]
    _parse(svg_mask_timeline(tracks))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
def test_letter_strip_always_valid_xml(seed, T):
    rng = np.random.default_rng(seed)
    alphabet = list("abcdefghijklmnopqrstuvwxyz-")
    s = "".join(rng.choice(alphabet, size=T))
    _parse(svg_letter_strip([("labels", s)]))


def test_confusion_heat_scales_with_random_counts():
    rng = np.random.default_rng(9)
    counts = rng.integers(0, 50, size=(26, 26))
    _parse(svg_confusion(ConfusionMatrix(counts=counts)))

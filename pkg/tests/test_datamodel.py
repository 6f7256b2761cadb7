import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fingerspell import datamodel as dm
from conftest import random_clip, random_keypoint_frame


def test_alphabet_indexing_bijective():
    for c in dm.LETTERS:
        i = dm.letter_to_index(c)
        assert 1 <= i <= 26
        assert dm.index_to_letter(i) == c
    assert dm.BLANK_INDEX == 0
    assert dm.N_CLASSES == 27


def test_letter_index_rejects_non_letters():
    for bad in ("A", "-", "", "ab", "é"):
        with pytest.raises(dm.DataError):
            dm.letter_to_index(bad)


def test_labels_round_trip():
    s = "ab--za"
    assert dm.indices_to_labels(dm.labels_to_indices(s)) == s


def test_frame_labels_validation_rejects_foreign_symbols():
    with pytest.raises(dm.DataError):
        dm.validate_frame_labels("ab?c")


# --- clips ----------------------------------------------------------------

def test_clip_file_round_trip(tmp_path, rng):
    clip = random_clip(rng, "c1", n_frames=10, with_lip=True)
    path = tmp_path / "clips.jsonl"
    dm.write_clips([clip], path)
    back = dm.read_clips(path)
    assert len(back) == 1
    assert len(back[0]) == 10
    assert back[0].clip_id == "c1"
    np.testing.assert_array_equal(back[0].frames[3].left_joints, clip.frames[3].left_joints)


def test_read_clips_reports_bad_joint_count(tmp_path):
    line = json.dumps({
        "clip_id": "bad", "fps": 25.0,
        "frames": [{"left": [0.0] * 60, "right": [0.0] * 63,
                    "left_center_2d": [0, 0], "right_center_2d": [0, 0]}],
    })
    path = tmp_path / "clips.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(dm.DataError, match="bad"):
        dm.read_clips(path)


def test_read_clips_rejects_non_finite(tmp_path):
    line = json.dumps({
        "clip_id": "naninside", "fps": 25.0,
        "frames": [{"left": ["NaN"] + [0.0] * 62, "right": [0.0] * 63,
                    "left_center_2d": [0, 0], "right_center_2d": [0, 0]}],
    }).replace('"NaN"', "NaN")
    path = tmp_path / "clips.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(dm.DataError, match="frame 0"):
        dm.read_clips(path)


def test_read_clips_missing_file():
    with pytest.raises(FileNotFoundError):
        dm.read_clips("/nonexistent/clips.jsonl")


def test_clip_round_trip_structural(tmp_path):
    rng = np.random.default_rng(7)
    clips = [random_clip(rng, f"c{i}", n_frames=int(rng.integers(1, 8)),
                         with_lip=bool(i % 2)) for i in range(12)]
    p1 = tmp_path / "a.jsonl"
    dm.write_clips(clips, p1)
    once = dm.read_clips(p1)
    p2 = tmp_path / "b.jsonl"
    dm.write_clips(once, p2)
    assert p1.read_bytes() == p2.read_bytes()


# --- annotations ----------------------------------------------------------

def test_annotation_round_trip_preserves_grade(tmp_path):
    anns = [
        dm.Annotation("c1", 0, 3, word="adam", letters="adam", grade="strong"),
        dm.Annotation("c2", 5, 9, word="turner", grade="weak"),
    ]
    path = tmp_path / "ann.jsonl"
    dm.write_annotations(anns, path)
    back = dm.read_annotations(path)
    assert back[0].grade == "strong" and back[0].letters == "adam"
    assert back[1].letters is None and back[1].grade == "weak"


annotation_strategy = st.builds(
    dm.Annotation,
    clip_id=st.text(alphabet="abc123", min_size=1, max_size=6),
    start=st.integers(0, 50),
    end=st.integers(51, 120),
    word=st.one_of(st.none(), st.text(alphabet=dm.LETTERS, min_size=1, max_size=8)),
    letters=st.one_of(st.none(), st.text(alphabet=dm.LETTERS, min_size=1, max_size=8)),
    grade=st.sampled_from(["strong", "weak"]),
)


@given(st.lists(annotation_strategy, max_size=25))
@settings(max_examples=50, deadline=None)
def test_annotation_serialization_is_stable(tmp_path_factory, anns):
    tmp = tmp_path_factory.mktemp("ann")
    p1, p2 = tmp / "a.jsonl", tmp / "b.jsonl"
    dm.write_annotations(anns, p1)
    dm.write_annotations(dm.read_annotations(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_annotation_invariants():
    with pytest.raises(dm.DataError):
        dm.Annotation("c", 5, 3)
    with pytest.raises(dm.DataError):
        dm.Annotation("c", 0, 3, frame_labels="ab")  # wrong length
    with pytest.raises(dm.DataError):
        dm.Annotation("c", 0, 3, grade="accepted")  # letters required
    with pytest.raises(dm.DataError):
        dm.Annotation("c", 0, 1, grade="golden")
    ok = dm.Annotation("c", 0, 3, letters="ab", frame_labels="a-b-", grade="accepted")
    assert ok.length == 4


def test_annotation_interval_checked_against_clip(rng):
    clip = random_clip(rng, "c9", n_frames=5)
    ann = dm.Annotation("c9", 2, 10)
    with pytest.raises(dm.DataError, match="exceeds"):
        ann.validate_against(clip)


# --- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip_empty(tmp_path):
    ckpt = dm.ModelCheckpoint(model_kind="detector", arch_config={"layers": [4]},
                              weights={})
    path = tmp_path / "m.fsckpt"
    dm.save_checkpoint(ckpt, path)
    back = dm.load_checkpoint(path)
    assert back.model_kind == "detector"
    assert back.arch_config == {"layers": [4]}
    assert back.weights == {}


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(3)
    weights = {f"layer{i}.W": rng.normal(size=rng.integers(1, 200)).astype(np.float64)
               for i in range(5)}
    ckpt = dm.ModelCheckpoint(model_kind="recognizer", arch_config={"embed": 128},
                              weights=weights, rng_seed_provenance="seed=3")
    p1 = tmp_path / "a.fsckpt"
    p2 = tmp_path / "b.fsckpt"
    dm.save_checkpoint(ckpt, p1)
    back = dm.load_checkpoint(p1)
    for name in weights:
        assert back.weights[name].tobytes() == weights[name].tobytes()
    dm.save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_truncated_file(tmp_path):
    rng = np.random.default_rng(4)
    ckpt = dm.ModelCheckpoint(model_kind="detector", arch_config={},
                              weights={"w": rng.normal(size=64)})
    path = tmp_path / "m.fsckpt"
    dm.save_checkpoint(ckpt, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(dm.CheckpointError, match="truncated"):
        dm.load_checkpoint(path)


def test_checkpoint_schema_mismatch(tmp_path):
    ckpt = dm.ModelCheckpoint(model_kind="detector", arch_config={}, weights={})
    path = tmp_path / "m.fsckpt"
    dm.save_checkpoint(ckpt, path)
    raw = path.read_bytes().replace(b'"schema_version":1', b'"schema_version":99')
    path.write_bytes(raw)
    with pytest.raises(dm.CheckpointError, match="incompatible"):
        dm.load_checkpoint(path)

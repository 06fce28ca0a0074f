import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from posestitch.pose_core import (FrameMask, PoseFormatError, PoseSequence, Skeleton, bone_lengths,
                                  flatten, load_pose_sequence, normalize, save_pose_sequence,
                                  unflatten)

CHAIN3 = Skeleton.chain(3)


def random_sequence(rng, F=7, N=3):
    return PoseSequence(rng.normal(scale=3.0, size=(F, N, 3)), Skeleton.chain(N))


def test_skeleton_rejects_bad_trees():
    with pytest.raises(ValueError):
        Skeleton(3, ((0, 1), (1, 5)))
    with pytest.raises(ValueError):
        Skeleton(4, ((0, 1), (1, 0), (2, 3)))
    with pytest.raises(ValueError):
        Skeleton(3, ((0, 1),))
    Skeleton(4, ((2, 0), (2, 1), (2, 3)), root=2)


def test_sequence_invariants():
    with pytest.raises(ValueError):
        PoseSequence(np.zeros((0, 3, 3)), CHAIN3)
    with pytest.raises(ValueError):
        PoseSequence(np.zeros((2, 4, 3)), CHAIN3)
    bad = np.zeros((2, 3, 3))
    bad[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        PoseSequence(bad, CHAIN3)


def test_frame_mask_complement():
    m = FrameMask(5, (3, 1))
    assert m.masked == (1, 3)
    assert m.observed == (0, 2, 4)
    np.testing.assert_array_equal(m.keep_vector(), [1, 0, 1, 0, 1])
    with pytest.raises(ValueError):
        FrameMask(3, (3,))
    with pytest.raises(ValueError):
        FrameMask(3, (1, 1))


def test_load_valid_small_file(tmp_path):
    path = tmp_path / "s.poseseq"
    path.write_text("POSESEQ 1 2 3\nEDGES 0 0 1 1 2\n" + "0 0 0 1 0 0 2 0 0\n" * 2)
    seq = load_pose_sequence(path)
    assert seq.frame_count == 2 and seq.joint_count == 3
    assert seq.skeleton.edges == ((0, 1), (1, 2))
    assert seq.frames[0, 2, 0] == 2.0


def test_zero_frame_body_line(tmp_path):
    path = tmp_path / "z.poseseq"
    save_pose_sequence(PoseSequence(np.zeros((1, 1, 3)), Skeleton(1, ())), path)
    assert path.read_text().splitlines()[2] == "0 0 0"
    assert b"\r" not in path.read_bytes()


@pytest.mark.parametrize("text, line", [
    ("POSESEQ 2 1 1\nEDGES 0\n0 0 0\n", 1),
    ("POSE 1 1 1\nEDGES 0\n0 0 0\n", 1),
    ("POSESEQ 1 1 2\nEDGES 0 0 1\n0 0 0 1 1\n", 3),
    ("POSESEQ 1 2 1\nEDGES 0\n0 0 0\n0 inf 0\n", 4),
    ("POSESEQ 1 1 1\nEDGES 0\n0 x 0\n", 3),
    ("POSESEQ 1 1 2\nEDGES 0 0 7\n0 0 0 1 1 1\n", 2),
])
def test_malformed_files_report_line(tmp_path, text, line):
    path = tmp_path / "bad.poseseq"
    path.write_text(text)
    with pytest.raises(PoseFormatError) as info:
        load_pose_sequence(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_version_error_message(tmp_path):
    path = tmp_path / "v2.poseseq"
    path.write_text("POSESEQ 2 1 1\nEDGES 0\n0 0 0\n")
    with pytest.raises(PoseFormatError, match="version"):
        load_pose_sequence(path)


def test_roundtrip_random_sequences(tmp_path):
    rng = np.random.default_rng(3)
    for k in range(20):
        seq = random_sequence(rng, F=int(rng.integers(1, 9)), N=int(rng.integers(1, 6)))
        path = tmp_path / f"r{k}.poseseq"
        save_pose_sequence(seq, path)
        back = load_pose_sequence(path)
        assert back.frames.shape == seq.frames.shape
        assert np.abs(back.frames - seq.frames).max() < 1e-9
        assert back.skeleton == seq.skeleton


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 2, 3), elements=st.floats(-1e3, 1e3, allow_subnormal=False)))
def test_roundtrip_property(tmp_path_factory, frames):
    path = tmp_path_factory.mktemp("rt") / "p.poseseq"
    seq = PoseSequence(frames, Skeleton.chain(2))
    save_pose_sequence(seq, path)
    assert np.abs(load_pose_sequence(path).frames - frames).max() < 1e-9


def _mean_bone(frames, sk):
    total, count = 0.0, 0
    for f in range(frames.shape[0]):
        for p, c in sk.edges:
            total += float(np.sqrt(((frames[f, c] - frames[f, p]) ** 2).sum()))
            count += 1
    return total / count


def test_normalize_unit_mean_bone_and_centred_root():
    rng = np.random.default_rng(0)
    seq = random_sequence(rng, F=11, N=5)
    out = normalize(seq)
    assert abs(_mean_bone(out.frames, out.skeleton) - 1.0) < 1e-9
    assert np.abs(out.frames[:, 0]).max() == 0.0


def test_normalize_idempotent_and_invariant():
    rng = np.random.default_rng(1)
    seq = random_sequence(rng, F=6, N=4)
    once = normalize(seq)
    np.testing.assert_allclose(normalize(once).frames, once.frames, atol=1e-9, rtol=0)
    scaled = PoseSequence(seq.frames * 7.0, seq.skeleton)
    np.testing.assert_allclose(normalize(scaled).frames, once.frames, atol=1e-9, rtol=0)
    moved = PoseSequence(seq.frames + np.array([3.0, -2.0, 10.0]), seq.skeleton)
    np.testing.assert_allclose(normalize(moved).frames, once.frames, atol=1e-9, rtol=0)


def test_normalize_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        normalize(PoseSequence(np.ones((3, 3, 3)), CHAIN3))


def test_bone_lengths_shape():
    seq = random_sequence(np.random.default_rng(2), F=4, N=3)
    assert bone_lengths(seq.frames, seq.skeleton).shape == (4, 2)


def test_flatten_layout_and_roundtrip():
    frames = np.arange(18, dtype=float).reshape(2, 3, 3)
    seq = PoseSequence(frames, CHAIN3)
    flat = flatten(seq)
    assert flat.shape == (2, 9)
    np.testing.assert_array_equal(flat[0, 3:6], frames[0, 1])
    assert np.array_equal(unflatten(flat, CHAIN3).frames, seq.frames)

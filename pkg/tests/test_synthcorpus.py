import numpy as np
import pytest

from posestitch.pose_core import normalize
from posestitch.synthcorpus import (CorpusConfig, carve_protocol, generate_corpus, keyframe_indices,
                                    read_corpus, write_corpus)


def test_counts_and_determinism():
    cfg = CorpusConfig(sequence_count=8, frames_per_sequence=60, seed=7)
    a, b = generate_corpus(cfg), generate_corpus(cfg)
    assert len(a) == 8 and all(s.frame_count == 60 for s in a)
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))
    c = generate_corpus(CorpusConfig(sequence_count=8, frames_per_sequence=60, seed=8))
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_sequences_are_normalized():
    for seq in generate_corpus(CorpusConfig(sequence_count=4, trajectory="sinusoidal", seed=1)):
        again = normalize(seq)
        assert np.abs(again.frames - seq.frames).max() < 1e-9


def test_smoothstep_frame_delta_bound():
    cfg = CorpusConfig(sequence_count=6, frames_per_sequence=60, keypose_count=5, noise=0.0, seed=3)
    knots = keyframe_indices(cfg)
    for seq in generate_corpus(cfg):
        x = seq.frames
        for lo, hi in zip(knots[:-1], knots[1:]):
            key_dist = np.abs(x[hi] - x[lo]).max()
            deltas = np.abs(np.diff(x[lo : hi + 1], axis=0)).max()
            assert deltas <= 1.5 * key_dist / (hi - lo) + 1e-12


def test_invalid_configs():
    with pytest.raises(ValueError):
        CorpusConfig(frames_per_sequence=9, keypose_count=5)
    with pytest.raises(ValueError):
        CorpusConfig(trajectory="zigzag")
    with pytest.raises(ValueError):
        CorpusConfig(sequence_count=0)


@pytest.mark.parametrize("F, o, g, lengths, gaps", [
    (50, 20, 10, [20, 20], 1),
    (40, 10, 20, [10, 10], 1),
    (60, 20, 10, [20, 30], 1),
    (100, 20, 10, [20, 20, 40], 2),
    (110, 20, 10, [20, 20, 20, 20], 3),
])
def test_carve_protocol_shapes(F, o, g, lengths, gaps):
    seq = generate_corpus(CorpusConfig(sequence_count=1, frames_per_sequence=F, seed=4))[0]
    segs, held = carve_protocol(seq, o, g)
    assert [s.frame_count for s in segs.segments] == lengths
    assert len(held) == gaps and all(h.shape[0] == g for h in held)
    assert segs.gap_length == g


def test_carve_protocol_is_a_partition():
    seq = generate_corpus(CorpusConfig(sequence_count=1, frames_per_sequence=77, seed=5))[0]
    segs, held = carve_protocol(seq, 13, 9)
    pieces = [segs.segments[0].frames]
    for gap, seg in zip(held, segs.segments[1:]):
        pieces += [gap, seg.frames]
    rebuilt = np.concatenate(pieces)
    assert rebuilt.tobytes() == seq.frames.tobytes()
    ranges = segs.gap_ranges()
    covered = sorted(i for lo, hi in ranges for i in range(lo, hi))
    assert len(covered) == len(set(covered)) == 9 * len(held)


def test_carve_protocol_too_short():
    seq = generate_corpus(CorpusConfig(sequence_count=1, frames_per_sequence=40, seed=6))[0]
    with pytest.raises(ValueError):
        carve_protocol(seq, 20, 10)


def test_corpus_directory_roundtrip(tmp_path):
    cfg = CorpusConfig(sequence_count=3, frames_per_sequence=20, keypose_count=3, seed=2)
    seqs = generate_corpus(cfg)
    write_corpus(tmp_path, {"train": seqs[:2], "heldout": seqs[2:]}, cfg)
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "file train train_0000.poseseq" in manifest and "config.seed = 2" in manifest
    back = read_corpus(tmp_path, "train")
    assert len(back) == 2
    assert np.abs(back[1].frames - seqs[1].frames).max() < 1e-9
    with pytest.raises(ValueError):
        read_corpus(tmp_path, "valid")

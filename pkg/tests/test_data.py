import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmae import data
from skelmae.data import SkeletonFormatError, SkeletonSequence


def write_ntu(path, frames, bodies_per_frame=None, joint_fields=12):
    """Write frames (list of per-body joint arrays) in the NTU text layout."""
    lines = [str(len(frames))]
    for bodies in frames:
        lines.append(str(len(bodies)))
        for body in bodies:
            lines.append("72057594037931101 0 1 1 1 1 0 0.02 0.18 2")
            lines.append(str(len(body)))
            for x, y, z in body:
                extra = " ".join(["0.5"] * (joint_fields - 3))
                lines.append(f"{x} {y} {z} {extra}".strip())
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def two_frame_file(tmp_path):
    f0 = [(0.1 * j, 0.2 * j, 3.0 + 0.01 * j) for j in range(25)]
    f1 = [(0.1 * j + 1, 0.2 * j, 3.0) for j in range(25)]
    other = [(9.0, 9.0, 9.0)] * 25
    path = tmp_path / "S001C002P003R001A007.skeleton"
    write_ntu(path, [[f0, other], [f1]])
    return path


def test_load_ntu_fixture(two_frame_file):
    seq = data.load_ntu_skeleton(two_frame_file)
    assert seq.frames.shape == (2, 25, 3)
    assert seq.frames[0, 3].tolist() == [0.30000000000000004, 0.6000000000000001, 3.03]
    assert seq.frames[1, 0].tolist() == [1.0, 0.0, 3.0]
    assert seq.label == 6 and seq.subject_id == 3


def test_load_ntu_drops_frames_without_bodies(tmp_path):
    body = [(0.0, 0.0, 1.0)] * 25
    path = tmp_path / "x.skeleton"
    write_ntu(path, [[], [body], []])
    assert data.load_ntu_skeleton(path).num_frames == 1


def test_load_ntu_zero_frames(tmp_path):
    path = tmp_path / "empty.skeleton"
    path.write_text("0\n")
    with pytest.raises(SkeletonFormatError, match="zero parsable frames"):
        data.load_ntu_skeleton(path)


def test_load_ntu_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.skeleton"
    body = [(0.0, 0.0, 1.0)] * 25
    write_ntu(path, [[body]])
    lines = path.read_text().splitlines()
    lines[6] = "0.1 0.2"
    path.write_text("\n".join(lines))
    with pytest.raises(SkeletonFormatError, match=r":7:"):
        data.load_ntu_skeleton(path)


def test_clip_or_pad_subsamples_uniformly():
    frames = np.arange(40)[:, None, None] * np.ones((40, 2, 3))
    out = data.clip_or_pad(SkeletonSequence(frames), 20)
    np.testing.assert_array_equal(out.frames[:, 0, 0], np.arange(0, 40, 2))


def test_clip_or_pad_identity_and_repeat():
    frames = np.random.default_rng(0).normal(size=(20, 25, 3))
    assert np.array_equal(data.clip_or_pad(SkeletonSequence(frames), 20).frames, frames)
    short = data.clip_or_pad(SkeletonSequence(frames[:5]), 20).frames
    np.testing.assert_array_equal(short[:5], frames[:5])
    assert all(np.array_equal(short[i], frames[4]) for i in range(5, 20))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 40))
def test_clip_or_pad_length(T, target):
    seq = SkeletonSequence(np.zeros((T, 2, 3)))
    assert data.clip_or_pad(seq, target).num_frames == target


def test_normalize_properties():
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(6, 25, 3))
    centered = data.normalize(SkeletonSequence(frames))
    assert np.array_equal(data.normalize(centered).frames, centered.frames)
    shifted = data.normalize(SkeletonSequence(frames + np.array([1.5, -2.0, 3.25])))
    np.testing.assert_allclose(shifted.frames, centered.frames, atol=1e-12)
    assert np.all(centered.frames[0, 0] == 0)


def test_json_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(7)
    seq = SkeletonSequence(rng.normal(size=(4, 25, 3)) * np.pi, label=3)
    data.save_sequence(seq, tmp_path / "s.json")
    back = data.load_sequence(tmp_path / "s.json")
    assert np.array_equal(back.frames, seq.frames) and back.label == 3
    obj = json.loads((tmp_path / "s.json").read_text())
    assert (obj["T"], obj["J"], obj["D"]) == (4, 25, 3)


def test_synthetic_determinism_and_counts():
    spec = data.SyntheticActionSpec.default(4, seed=5, noise_sigma=0.0)
    a = data.generate_synthetic(spec, 50, 20)
    b = data.generate_synthetic(spec, 50, 20)
    assert len(a) == 200
    assert data.class_census(a) == {0: 50, 1: 50, 2: 50, 3: 50}
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))


def test_synthetic_is_pure_function_of_index():
    spec = data.SyntheticActionSpec.default(3, seed=1, noise_sigma=0.05)
    ds = data.generate_synthetic(spec, 4, 12)
    assert np.array_equal(data.synthetic_sample(spec, 7, 12).frames, ds[7].frames)


def test_synthetic_zero_amplitude_is_base_pose():
    spec = data.SyntheticActionSpec.default(2, noise_sigma=0.0)
    zero = tuple(tuple(0.0 for _ in a) for a in spec.amplitude)
    from dataclasses import replace
    flat = replace(spec, amplitude=zero)
    for seq in data.generate_synthetic(flat, 3, 10):
        assert np.array_equal(seq.frames, np.broadcast_to(spec.base_pose, (10, 25, 3)))


def test_synthetic_classes_differ_and_validate():
    spec = data.SyntheticActionSpec.default(6, seed=2)
    sigs = {(j, f) for j, f in zip(spec.moving_joints, spec.frequency)}
    assert len(sigs) == 6
    with pytest.raises(ValueError):
        data.SyntheticActionSpec.default(1)
    rebuilt = data.SyntheticActionSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert np.array_equal(data.synthetic_sample(rebuilt, 3, 8).frames, data.synthetic_sample(spec, 3, 8).frames)


@pytest.fixture
def ds200():
    return data.generate_synthetic(data.SyntheticActionSpec.default(4, noise_sigma=0.0), 50, 4)


def test_split_counts_and_disjointness(ds200):
    tr, te = data.split(ds200, 0.25, seed=0)
    assert (len(tr), len(te)) == (150, 50)
    ids = lambda d: {id(s) for s in d}
    assert not ids(tr) & ids(te)
    assert ids(tr) | ids(te) == ids(ds200)
    tr2, te2 = data.split(ds200, 0.25, seed=0)
    assert [id(s) for s in te] == [id(s) for s in te2]


def test_split_rejects_tiny_class():
    ds = data.generate_synthetic(data.SyntheticActionSpec.default(2), 1, 4)
    with pytest.raises(ValueError, match="fewer than 2"):
        data.split(ds, 0.5)


def test_subsample_labels():
    ds = data.generate_synthetic(data.SyntheticActionSpec.default(4, noise_sigma=0.0), 100, 3)
    assert data.subsample_labels(ds, 1.0) is ds
    sub = data.subsample_labels(ds, 0.05, seed=4)
    assert len(sub) == 20 and data.class_census(sub) == {0: 5, 1: 5, 2: 5, 3: 5}
    again = data.subsample_labels(ds, 0.05, seed=4)
    assert [id(s) for s in sub] == [id(s) for s in again]
    with pytest.raises(ValueError, match="empty"):
        data.subsample_labels(ds, 0.005)


def test_dataset_label_bounds():
    with pytest.raises(ValueError):
        data.Dataset((SkeletonSequence(np.zeros((1, 1, 3)), label=4),), class_count=4)

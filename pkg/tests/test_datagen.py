"""Generator determinism, modality-rate contracts, plants, and file round trips."""

import numpy as np
import pytest

from uprm.datagen import (
    CAUSE_TEMPLATES,
    GenProfile,
    NO_CAUSE_RESPONSE,
    NO_INTERVALS_RESPONSE,
    NO_THREAT_RESPONSE,
    SyntheticVideo,
    TOKEN_DIM,
    builtin_profile,
    generate_dataset,
    modality_rates,
    read_dataset,
    render_instructions,
    videos_equal,
    write_dataset,
)
from uprm.errors import ConfigError, DataError


def _small(seed=0, n=30, **kw):
    return generate_dataset(
        GenProfile("t", n, 0.5, 0.4, 0.6, frames_per_video=24, seed=seed, **kw)
    )


# ---------------------------------------------------------------------------
# generation


def test_generation_deterministic():
    a = _small(seed=5)
    b = _small(seed=5)
    assert all(videos_equal(x, y) for x, y in zip(a, b))


def test_different_seeds_differ():
    a = _small(seed=1)
    b = _small(seed=2)
    assert not all(videos_equal(x, y) for x, y in zip(a, b))


def test_zero_threat_rate():
    ds = _small(threat_rate=0.0)
    assert all(not v.ground_truth for v in ds)
    assert all(not v.per_frame_labels.any() for v in ds)


def test_labels_match_intervals():
    for v in _small(seed=7):
        expect = np.zeros(v.n_frames, dtype=np.int64)
        for s, e, c in v.ground_truth:
            assert 0 <= s < e <= v.n_frames
            assert 0 <= c < 8
            expect[s:e] = 1
        assert np.array_equal(v.per_frame_labels, expect)


def test_streams_consistent_with_presence():
    for v in _small(seed=9):
        assert v.coarse_frames.shape == (v.n_frames, TOKEN_DIM)
        assert len(v.poses.frames) == v.n_frames
        assert len(v.scenes) == v.n_frames
        has_rel = any(g is not None for g in v.scenes)
        if has_rel:
            assert v.patches is not None
            for g, p in zip(v.scenes, v.patches):
                assert (g is None) == (p is None)
        else:
            assert v.patches is None
        if v.background is not None:
            assert v.background.shape == (v.n_frames, TOKEN_DIM)


def test_modality_rates_pinned_at_1000():
    ds = generate_dataset(builtin_profile("cuva-like", video_count=1000, seed=3))
    rates = modality_rates(ds)
    assert abs(rates["pose"] - 0.46) <= 0.02
    assert abs(rates["background"] - 0.22) <= 0.02
    assert abs(rates["relation"] - 0.32) <= 0.02


def test_profile_validation():
    with pytest.raises(ConfigError, match="pose_presence_rate"):
        GenProfile("x", 10, 1.5, 0.2, 0.2)
    with pytest.raises(ConfigError):
        GenProfile("x", 10, 0.5, 0.5, 0.5, cause_vocab_size=0)
    with pytest.raises(ConfigError):
        generate_dataset(GenProfile("x", 0, 0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        generate_dataset(GenProfile("x", 5, 0.5, 0.5, 0.5, frames_per_video=0))
    with pytest.raises(ConfigError):
        builtin_profile("no-such-profile")


def test_coarse_plant_separates_threat_frames():
    # a logistic probe on raw coarse tokens alone must find the plant
    ds = generate_dataset(builtin_profile("cuva-like", video_count=150, seed=11))
    x = np.concatenate([v.coarse_frames for v in ds])
    y = np.concatenate([v.per_frame_labels for v in ds]).astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(300):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        w -= 0.5 * (x.T @ (p - y)) / len(y)
        b -= 0.5 * float((p - y).mean())
    score = x @ w + b
    order = np.argsort(score)
    ranks = np.empty(len(score))
    ranks[order] = np.arange(1, len(score) + 1)
    n1, n0 = y.sum(), (1.0 - y).sum()
    auc = (ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)
    assert auc >= 0.85


def test_threat_scenes_carry_marker_category():
    for v in _small(seed=13):
        if v.patches is None:
            continue
        for t, g in enumerate(v.scenes):
            if v.per_frame_labels[t] and g is not None:
                assert any(cat == 0 for cat, _ in g.entities)


# ---------------------------------------------------------------------------
# instructions


def test_instructions_with_intervals():
    v = next(v for v in _small(seed=4) if v.ground_truth)
    ins = render_instructions(v)
    assert ins.identify_response == "Yes, a threat is present."
    for s, e, c in v.ground_truth:
        assert f"between {s} and {e} seconds" in ins.locate_response
        assert CAUSE_TEMPLATES[c] in ins.attribute_response


def test_instructions_without_intervals():
    v = next(v for v in _small(seed=4) if not v.ground_truth)
    ins = render_instructions(v)
    assert ins.identify_response == NO_THREAT_RESPONSE
    assert ins.locate_response == NO_INTERVALS_RESPONSE
    assert ins.attribute_response == NO_CAUSE_RESPONSE


def test_instructions_enumerate_in_start_order():
    v = SyntheticVideo(
        id=0, poses=None, scenes=[], background=None,
        coarse_frames=np.zeros((30, TOKEN_DIM)),
        ground_truth=[(22, 24, 2), (4, 7, 1)],
        per_frame_labels=np.zeros(30, dtype=np.int64),
    )
    ins = render_instructions(v)
    assert ins.locate_response.index("4 and 7") < ins.locate_response.index("22 and 24")
    assert "22" in ins.locate_response and "24" in ins.locate_response


# ---------------------------------------------------------------------------
# files


def test_round_trip(tmp_path):
    prof = GenProfile("t", 12, 0.5, 0.4, 0.6, frames_per_video=16, seed=21)
    ds = generate_dataset(prof)
    path = tmp_path / "ds.txt"
    write_dataset(ds, path, prof)
    back = read_dataset(path)
    assert len(back) == len(ds)
    assert all(videos_equal(a, b) for a, b in zip(ds, back))


def test_writes_byte_identical(tmp_path):
    prof = GenProfile("t", 6, 0.5, 0.4, 0.6, frames_per_video=12, seed=2)
    ds = generate_dataset(prof)
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    write_dataset(ds, p1, prof)
    write_dataset(ds, p2, prof)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_file(tmp_path):
    path = tmp_path / "empty.txt"
    write_dataset([], path)
    assert read_dataset(path) == []


def test_truncated_record_names_last_good_line(tmp_path):
    prof = GenProfile("t", 3, 0.5, 0.4, 0.6, frames_per_video=8, seed=0)
    path = tmp_path / "ds.txt"
    write_dataset(generate_dataset(prof), path, prof)
    text = path.read_text()
    lines = text.splitlines()
    lines[-1] = lines[-1][: len(lines[-1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 4.*last good line was 3"):
        read_dataset(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "ds.txt"
    path.write_text('{"format": "uprm-ds", "version": 9}\n')
    with pytest.raises(DataError, match="version"):
        read_dataset(path)


def test_wrong_format_header(tmp_path):
    path = tmp_path / "ds.txt"
    path.write_text('{"format": "something-else", "version": 1}\n')
    with pytest.raises(DataError):
        read_dataset(path)

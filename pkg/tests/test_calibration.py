from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calfuse.calibration import (
    BinTable,
    bin_index,
    calibrate_model,
    compute_calibration,
    confidence_arrays,
    pixel_confidence,
    reliability_csv,
    report_from_dict,
    report_to_dict,
    result_from_table,
)
from calfuse.synth import SynthModel, SynthSpec, gen_dataset
from calfuse.tensor_store import LabelMask, ProbMap, ValidationError, load_manifest

from conftest import random_probmap
from reference import ref_bin, ref_calibration


def test_hand_fixture_exact():
    res = compute_calibration(
        [(0.6, True), (0.7, False), (0.9, True), (0.95, True)], 10
    )
    assert res.ece == 0.3125
    assert res.mce == 0.7


def test_full_confidence_alternating():
    pairs = [(1.0, i % 2 == 0) for i in range(1000)]
    res = compute_calibration(pairs, 10)
    assert res.ece == 0.5
    assert res.mce == 0.5
    assert sum(1 for b in res.bins if b.count) == 1


def test_perfect_prediction_is_perfectly_calibrated():
    res = compute_calibration([(1.0, True)] * 50, 10)
    assert res.ece == 0.0
    assert res.mce == 0.0


def test_bin_index_examples():
    assert bin_index(0.6, 10) == 6
    assert bin_index(1.0, 10) == 10
    assert bin_index(0.0, 10) == 1
    assert bin_index(0.5, 10) == 5  # boundary values close the bin on the right
    assert bin_index(0.1000001, 10) == 2


@settings(max_examples=150, deadline=None)
@given(
    conf=st.floats(0.0, 1.0, allow_nan=False),
    k=st.sampled_from([1, 3, 5, 10, 15, 20, 64]),
)
def test_bin_index_matches_scanning_reference(conf, k):
    assert bin_index(conf, k) == ref_bin(conf, k)


def test_bin_index_rejects_bad_domain():
    with pytest.raises(ValidationError):
        bin_index(1.5, 10)
    with pytest.raises(ValidationError):
        bin_index(0.5, 0)


def test_empty_stream_rejected():
    with pytest.raises(ValidationError, match="empty"):
        compute_calibration([], 10)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 400),
    k=st.sampled_from([5, 10, 15, 20]),
)
def test_matches_rational_reference(seed, n, k):
    rng = random.Random(seed)
    pairs = [(rng.random(), rng.random() < 0.7) for _ in range(n)]
    res = compute_calibration(pairs, k)
    ece, mce, bins = ref_calibration(pairs, k)
    assert abs(res.ece - ece) <= 1e-12
    assert abs(res.mce - mce) <= 1e-12
    for stat in res.bins:
        assert stat.count == bins[stat.index][0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 500))
def test_permutation_invariance_bitwise(seed, n):
    rng = random.Random(seed)
    pairs = [(rng.random(), rng.random() < 0.5) for _ in range(n)]
    first = compute_calibration(pairs, 10)
    rng.shuffle(pairs)
    second = compute_calibration(pairs, 10)
    assert first.ece == second.ece
    assert first.mce == second.mce
    assert first.bins == second.bins


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 500), cut=st.floats(0.1, 0.9))
def test_split_merge_reproduces_pooled_exactly(seed, n, cut):
    rng = random.Random(seed)
    pairs = [(rng.random(), rng.random() < 0.5) for _ in range(n)]
    at = max(1, min(n - 1, int(cut * n)))
    conf = np.array([p[0] for p in pairs])
    corr = np.array([p[1] for p in pairs])

    pooled = BinTable.empty(10)
    pooled.add_float64(conf, corr)

    left = BinTable.empty(10)
    left.add_float64(conf[:at], corr[:at])
    right = BinTable.empty(10)
    right.add_float64(conf[at:], corr[at:])
    left.merge(right)

    assert left.count == pooled.count
    assert left.correct == pooled.correct
    assert left.conf_units == pooled.conf_units
    assert result_from_table(left).ece == result_from_table(pooled).ece


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_float32_path_equals_float64_path(seed):
    rng = np.random.default_rng(seed)
    conf = rng.random((37, 23), dtype=np.float32)
    corr = rng.random((37, 23)) < 0.8
    a = BinTable.empty(10)
    a.add_float32(conf, corr)
    b = BinTable.empty(10)
    b.add_float64(conf.astype(np.float64), corr)
    assert a.count == b.count
    assert a.correct == b.correct
    assert a.conf_units == b.conf_units


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 300), k=st.sampled_from([5, 10, 20]))
def test_invariant_bounds(seed, n, k):
    rng = random.Random(seed)
    pairs = [(rng.random(), rng.random() < 0.6) for _ in range(n)]
    res = compute_calibration(pairs, k)
    assert 0.0 <= res.ece <= res.mce <= 1.0
    assert sum(b.count for b in res.bins) == res.total == n
    # bounds partition [0, 1]
    assert res.bins[0].lower == 0.0
    assert res.bins[-1].upper == 1.0
    for prev, cur in zip(res.bins, res.bins[1:]):
        assert prev.upper == cur.lower


def test_pixel_confidence_rules():
    pm = ProbMap.from_array(np.array([[[0.1, 0.9], [0.6, 0.4]]], dtype=np.float32))
    mask = LabelMask(1, 2, np.array([[1, 1]], dtype=np.uint8))
    out = list(pixel_confidence(pm, mask))
    assert out[0] == (pytest.approx(0.9), True)
    assert out[1] == (pytest.approx(0.6), False)


def test_pixel_confidence_tie_takes_lower_index():
    pm = ProbMap.from_array(np.array([[[0.5, 0.5]]], dtype=np.float32))
    out = list(pixel_confidence(pm, LabelMask(1, 1, np.zeros((1, 1), np.uint8))))
    assert out == [(0.5, True)]
    out = list(pixel_confidence(pm, LabelMask(1, 1, np.ones((1, 1), np.uint8))))
    assert out == [(0.5, False)]


def test_pixel_confidence_dimension_mismatch():
    pm = ProbMap.from_array(np.array([[[0.5, 0.5]]], dtype=np.float32))
    with pytest.raises(ValidationError, match="mismatch"):
        confidence_arrays(pm, LabelMask(2, 2, np.zeros((2, 2), np.uint8)))


def _one_model_dataset(tmp_path, model: SynthModel, seed=11, val=3):
    spec = SynthSpec(32, 32, seed, {"validation": val}, [model])
    return load_manifest(gen_dataset(spec, tmp_path)), spec


def test_calibrate_model_pools_pixels(tmp_path):
    man, spec = _one_model_dataset(tmp_path, SynthModel("m", 2.0, 1.0, 1.0))
    rep = calibrate_model("m", "validation", man, 10)
    assert rep.total == 3 * 32 * 32
    assert len(rep.per_image) == 3
    assert 0.0 <= rep.ece <= rep.mce <= 1.0

    # pooling the raw pixel stream gives the same corpus numbers
    pairs = []
    for entry in man.split("validation"):
        from calfuse.tensor_store import read_mask, read_probmap

        pm = read_probmap(man.prediction_path("m", "validation", entry.image_id))
        pairs.extend(pixel_confidence(pm, read_mask(entry.mask_path)))
    pooled = compute_calibration(pairs, 10)
    assert pooled.ece == rep.ece
    assert pooled.mce == rep.mce


def test_higher_temperature_worsens_corpus_ece(tmp_path):
    man_cool, _ = _one_model_dataset(tmp_path / "t1", SynthModel("m", 2.0, 1.0, 1.0))
    man_hot, _ = _one_model_dataset(tmp_path / "t5", SynthModel("m", 2.0, 5.0, 1.0))
    cool = calibrate_model("m", "validation", man_cool, 10)
    hot = calibrate_model("m", "validation", man_hot, 10)
    assert hot.ece > cool.ece


def test_calibrate_model_unknown_split_and_model(tmp_path):
    man, _ = _one_model_dataset(tmp_path, SynthModel("m", 2.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        calibrate_model("nope", "validation", man)
    with pytest.raises(ValidationError, match="no images"):
        calibrate_model("m", "testing", man)


def test_report_round_trip_and_csv(tmp_path):
    man, _ = _one_model_dataset(tmp_path, SynthModel("m", 2.0, 1.3, 1.0))
    rep = calibrate_model("m", "validation", man, 10)
    doc = report_to_dict(rep)
    assert doc["format_version"] == 1
    assert doc["K"] == 10 and doc["N"] == rep.total
    back = report_from_dict(json.loads(json.dumps(doc)))
    assert back.ece == rep.ece and back.mce == rep.mce
    assert back.bins == rep.bins

    csv_text = reliability_csv(rep)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "bin_index,lower,upper,count,accuracy,confidence,gap"
    assert len(lines) == 1 + 10
    # ece recomputed from the emitted bins stays within 1e-12
    import math

    total = rep.total
    recomputed = math.fsum(
        b.count / total * abs(b.accuracy - b.confidence) for b in rep.bins if b.count
    )
    assert abs(recomputed - rep.ece) <= 1e-12

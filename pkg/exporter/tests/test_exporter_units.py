import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from calfuse import load_manifest, read_mask, read_probmap
from cbpm_exporter import (
    ExportError,
    ExportJob,
    array_to_probmap,
    assign_splits,
    emit_manifest,
    export_masks,
    export_probmaps,
    run_export,
    scan_source,
    split_counts,
)

TWO = ("NonLung", "Lung")


def write_mask_png(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(data, dtype=np.uint8), mode="L").save(path, format="PNG")


def make_source(root, model_arrays, masks):
    """model_arrays: {model: {image: array}}, masks: {image: 2d uint8}."""
    for image_id, mask in masks.items():
        write_mask_png(root / "masks" / f"{image_id}.png", mask)
    for model_id, arrays in model_arrays.items():
        (root / model_id).mkdir(parents=True, exist_ok=True)
        for image_id, arr in arrays.items():
            np.save(root / model_id / f"{image_id}.npy", arr)
    return root


def simple_job(tmp_path, **overrides):
    mask = np.zeros((2, 2), dtype=np.uint8)
    mask[0, 0] = 255
    arr = np.full((2, 2, 2), 0.5, dtype=np.float32)
    source = make_source(tmp_path / "src", {"unet": {"img0": arr}}, {"img0": mask})
    defaults = dict(source=source, dest=tmp_path / "out", class_names=TWO)
    defaults.update(overrides)
    return ExportJob(**defaults)


# --- job validation -------------------------------------------------------

def test_job_rejects_single_class(tmp_path):
    job = simple_job(tmp_path, class_names=("only",))
    with pytest.raises(ExportError, match="at least 2 class names"):
        job.validate()


def test_job_rejects_duplicate_class_names(tmp_path):
    job = simple_job(tmp_path, class_names=("a", "a"))
    with pytest.raises(ExportError, match="duplicate class names"):
        job.validate()


@pytest.mark.parametrize("ratios", [(70, 10), (70, 10, 20, 0), (-1, 1, 1), (0, 0, 0)])
def test_job_rejects_bad_ratios(tmp_path, ratios):
    job = simple_job(tmp_path, ratios=ratios)
    with pytest.raises(ExportError, match="split ratios"):
        job.validate()


def test_class_map_is_a_bijection_onto_the_class_range(tmp_path):
    two = simple_job(tmp_path).class_map()
    assert two == {0: 0, 255: 1}
    four = simple_job(tmp_path, class_names=("a", "b", "c", "d")).class_map()
    assert sorted(four.values()) == [0, 1, 2, 3]
    assert len(set(four)) == len(four)


# --- source scanning ------------------------------------------------------

def test_scan_source_lists_models_and_images(tmp_path):
    mask = np.zeros((2, 2), dtype=np.uint8)
    arr = np.full((2, 2, 2), 0.5, dtype=np.float32)
    source = make_source(
        tmp_path / "src",
        {"unet": {"a": arr, "b": arr}, "segnet": {"a": arr, "b": arr}},
        {"a": mask, "b": mask},
    )
    job = ExportJob(source=source, dest=tmp_path / "out", class_names=TWO)
    assert scan_source(job) == (["segnet", "unet"], ["a", "b"])


def test_scan_source_rejects_array_without_mask(tmp_path):
    job = simple_job(tmp_path)
    np.save(job.source / "unet" / "ghost.npy", np.full((2, 2, 2), 0.5, dtype=np.float32))
    with pytest.raises(ExportError, match="missing mask for 'ghost'"):
        scan_source(job)


def test_scan_source_rejects_mask_without_array(tmp_path):
    job = simple_job(tmp_path)
    write_mask_png(job.source / "masks" / "lonely.png", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ExportError, match="no array for image 'lonely'"):
        scan_source(job)


def test_scan_source_rejects_empty_trees(tmp_path):
    (tmp_path / "src" / "masks").mkdir(parents=True)
    job = ExportJob(source=tmp_path / "src", dest=tmp_path / "out", class_names=TWO)
    with pytest.raises(ExportError, match="no \\*.png masks"):
        scan_source(job)
    write_mask_png(tmp_path / "src" / "masks" / "a.png", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ExportError, match="no model directories"):
        scan_source(job)


# --- split assignment -----------------------------------------------------

def test_split_counts_exact_when_ratios_divide():
    assert split_counts(100, (70, 10, 20)) == (70, 10, 20)
    assert split_counts(10, (70, 10, 20)) == (7, 1, 2)


def test_split_counts_largest_remainder_hand_cases():
    # n=7: quotas 4.9/0.7/1.4 -> floors 4/0/1, remainders 0.9/0.7/0.4
    assert split_counts(7, (70, 10, 20)) == (5, 1, 1)
    # n=3: quotas 2.1/0.3/0.6 -> floors 2/0/0, testing has the biggest remainder
    assert split_counts(3, (70, 10, 20)) == (2, 0, 1)
    assert split_counts(0, (70, 10, 20)) == (0, 0, 0)


@given(st.integers(0, 5000), st.tuples(*[st.integers(0, 99)] * 3).filter(lambda r: sum(r) > 0))
def test_split_counts_partition_n(n, ratios):
    counts = split_counts(n, ratios)
    assert sum(counts) == n
    assert all(c >= 0 for c in counts)
    total = sum(ratios)
    for count, ratio in zip(counts, ratios):
        assert n * ratio // total <= count <= n * ratio // total + 1


@settings(max_examples=50)
@given(st.sets(st.text(st.characters(categories=["L", "N"]), min_size=1, max_size=8),
               min_size=1, max_size=60),
       st.integers(0, 2**32))
def test_assign_splits_is_deterministic_and_order_free(ids, seed):
    ids = sorted(ids)
    forward = assign_splits(ids, seed=seed)
    backward = assign_splits(list(reversed(ids)), seed=seed)
    assert forward == backward
    counts = split_counts(len(ids), (70, 10, 20))
    sizes = tuple(sum(1 for s in forward.values() if s == name)
                  for name in ("training", "validation", "testing"))
    assert sizes == counts


def test_assign_splits_depends_on_seed():
    ids = [f"img{i:03d}" for i in range(40)]
    assert assign_splits(ids, seed=0) != assign_splits(ids, seed=1)


def test_assign_splits_rejects_duplicates():
    with pytest.raises(ExportError, match="duplicate image ids"):
        assign_splits(["a", "a"])


# --- probability array conversion ----------------------------------------

def test_binary_array_expands_with_background_first():
    p = np.array([[0.25, 1.0]], dtype=np.float32)
    probmap = array_to_probmap(p, 2, "arr")
    assert probmap.data.shape == (1, 2, 2)
    assert probmap.data[0, 0, 0] == np.float32(0.75)  # channel 0 holds 1 - p
    assert probmap.data[0, 0, 1] == np.float32(0.25)
    assert probmap.data[0, 1, 1] == np.float32(1.0)


def test_binary_array_needs_two_class_job():
    with pytest.raises(ExportError, match="implies 2 classes"):
        array_to_probmap(np.zeros((2, 2)), 3, "arr")


def test_drifted_sums_are_renormalized():
    arr = np.full((1, 1, 2), 0.5 * 1.0005, dtype=np.float64)
    probmap = array_to_probmap(arr, 2, "arr")
    assert probmap.data[0, 0, 0] == np.float32(0.5)


def test_drift_beyond_bound_is_rejected_with_pixel():
    arr = np.full((2, 3, 2), 0.5, dtype=np.float64)
    arr[1, 2] = 0.5 * 1.0011
    with pytest.raises(ExportError, match=r"at pixel \(1, 2\) sum to 1.0011"):
        array_to_probmap(arr, 2, "arr")


def test_out_of_range_value_is_rejected_with_pixel():
    arr = np.full((2, 2, 2), 0.5, dtype=np.float64)
    arr[0, 1, 0] = 1.2
    with pytest.raises(ExportError, match=r"value 1.2 at pixel \(0, 1\) class 0"):
        array_to_probmap(arr, 2, "arr")
    bad = np.zeros((2, 2), dtype=np.float64)
    bad[1, 0] = -0.5
    with pytest.raises(ExportError, match=r"value -0.5 at pixel \(1, 0\) outside"):
        array_to_probmap(bad, 2, "arr")


def test_nan_is_rejected():
    arr = np.full((1, 1, 2), 0.5)
    arr[0, 0, 1] = np.nan
    with pytest.raises(ExportError, match="outside"):
        array_to_probmap(arr, 2, "arr")


def test_wrong_shapes_are_rejected():
    with pytest.raises(ExportError, match="3 channels, job declares 2"):
        array_to_probmap(np.full((2, 2, 3), 1 / 3), 2, "arr")
    with pytest.raises(ExportError, match="got shape"):
        array_to_probmap(np.zeros((2, 2, 2, 2)), 2, "arr")
    with pytest.raises(ExportError, match="not numeric"):
        array_to_probmap(np.array([["a"]]), 2, "arr")


# --- file level operations ------------------------------------------------

def test_export_masks_remaps_255_to_1(tmp_path):
    job = simple_job(tmp_path)
    (written,) = export_masks(job)
    mask = read_mask(written)
    assert mask.data[0, 0] == 1
    assert mask.data[1, 1] == 0
    assert sorted(int(v) for v in np.unique(mask.data)) == [0, 1]


def test_export_masks_rejects_unmapped_value(tmp_path):
    job = simple_job(tmp_path)
    stray = np.zeros((2, 2), dtype=np.uint8)
    stray[1, 1] = 37
    write_mask_png(job.source / "masks" / "img0.png", stray)
    with pytest.raises(ExportError, match=r"img0.png: pixel value 37 has no class mapping"):
        export_masks(job)


def test_export_probmaps_checks_array_against_mask_size(tmp_path):
    job = simple_job(tmp_path)
    np.save(job.source / "unet" / "img0.npy", np.full((3, 2, 2), 0.5, dtype=np.float32))
    with pytest.raises(ExportError, match="array is 3x2 but the mask for 'img0' is 2x2"):
        export_probmaps(job)


def test_export_probmaps_rejects_unreadable_file(tmp_path):
    job = simple_job(tmp_path)
    (job.source / "unet" / "img0.npy").write_bytes(b"not numpy at all")
    with pytest.raises(ExportError, match="not a readable .npy array"):
        export_probmaps(job)


def test_emit_manifest_passes_downstream_validation(tmp_path):
    job = simple_job(tmp_path)
    export_masks(job)
    export_probmaps(job)
    path = emit_manifest(job)
    manifest = load_manifest(path)
    assert manifest.model_ids() == ["unet"]
    assert manifest.class_names == list(TWO)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1
    assert sum(len(entries) for entries in doc["splits"].values()) == 1


def test_run_export_round_trips_values(tmp_path):
    rng = np.random.default_rng(5)
    raw = rng.random((4, 5, 2))
    raw /= raw.sum(axis=2, keepdims=True)
    mask = (rng.random((4, 5)) < 0.5).astype(np.uint8) * 255
    source = make_source(tmp_path / "src", {"unet": {"img0": raw}},
                         {"img0": mask})
    job = ExportJob(source=source, dest=tmp_path / "out", class_names=TWO)
    manifest_path = run_export(job)
    assert manifest_path == tmp_path / "out" / "manifest.json"
    stored = read_probmap(tmp_path / "out" / "predictions" / "unet" / "img0.cbpm")
    expected = raw / raw.sum(axis=2, keepdims=True)
    assert np.abs(stored.data - expected).max() <= np.spacing(np.float32(1.0))


# --- command line ---------------------------------------------------------

def test_cli_happy_path(tmp_path, capsys):
    from cbpm_exporter.cli import main

    job = simple_job(tmp_path)
    code = main(["--source", str(job.source), "--dest", str(tmp_path / "out")])
    assert code == 0
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    load_manifest(tmp_path / "out" / "manifest.json")


def test_cli_rejects_bad_split_and_classes(tmp_path, capsys):
    from cbpm_exporter.cli import main

    job = simple_job(tmp_path)
    base = ["--source", str(job.source), "--dest", str(tmp_path / "out")]
    assert main([*base, "--split", "70,30"]) == 1
    assert "three integers" in capsys.readouterr().err
    assert main([*base, "--split", "a,b,c"]) == 1
    capsys.readouterr()
    assert main([*base, "--classes", "Lung,"]) == 1
    assert "comma-separated names" in capsys.readouterr().err


def test_cli_reports_contract_violations_as_exit_1(tmp_path, capsys):
    from cbpm_exporter.cli import main

    code = main(["--source", str(tmp_path / "nowhere"), "--dest", str(tmp_path / "out")])
    assert code == 1
    assert "not a directory" in capsys.readouterr().err

import numpy as np
import pytest

from radnet.dataset import read_dataset
from radnet.errors import ConfigError
from radnet.evaluate import max_run
from radnet.io import read_csv
from radnet.phantom import PhantomSpec, generate_phantom, write_dataset
from radnet.preprocess import window_normalize


@pytest.fixture(scope="module")
def cases():
    return generate_phantom(PhantomSpec(seed=42))


def test_seeded_determinism(cases):
    again = generate_phantom(PhantomSpec(seed=42))
    for a, b in zip(cases, again):
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
        assert a.mask.voxels.tobytes() == b.mask.voxels.tobytes()
        assert a.volume.spacing_mm == b.volume.spacing_mm


def test_other_seed_differs(cases):
    other = generate_phantom(PhantomSpec(seed=43))
    assert cases[0].volume.voxels.tobytes() != other[0].volume.voxels.tobytes()


def test_layout_and_class_counts(cases):
    assert len(cases) == 6
    assert sum(c.ct_label for c in cases) == 3
    for c in cases:
        assert c.volume.dims == (32, 64, 64) and c.volume.kind == "hu"
        assert c.volume.voxels.dtype == np.int16


def test_positive_volumes_have_three_slice_runs(cases):
    for c in cases:
        if c.ct_label:
            assert max_run(c.labels) >= 3
        else:
            assert c.labels.sum() == 0 and c.mask.voxels.sum() == 0


def test_label_mask_consistency_every_slice(cases):
    for c in cases:
        for s in c.slices:
            assert s.label == int(s.mask.any())


def test_blob_intensity_within_window(cases):
    for c in cases:
        blob = c.volume.voxels[c.mask.voxels == 1]
        if blob.size:
            assert blob.min() >= 50 and blob.max() <= 90
            norm = window_normalize(c.volume).voxels[c.mask.voxels == 1]
            assert norm.min() >= (50 - 0) / 80 - 1e-6


def test_skull_present(cases):
    assert all(c.volume.voxels.max() >= 800 for c in cases)


def test_zero_positive_fraction():
    cases = generate_phantom(PhantomSpec(seed=1, n_volumes=3, slices=8, size=32, positive_fraction=0.0))
    assert all(c.ct_label == 0 and c.mask.voxels.sum() == 0 for c in cases)


@pytest.mark.parametrize("kwargs", [
    {"positive_fraction": 1.5}, {"slices": 3}, {"size": 16}, {"n_volumes": 0}, {"blob_extent": (9, 12), "slices": 8},
])
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        PhantomSpec(**kwargs)


def test_infeasible_blob_is_config_error():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(seed=0, n_volumes=1, size=32, positive_fraction=1.0,
                                     blob_radius_px=(40.0, 50.0)))


def test_write_read_round_trip(cases, tmp_path):
    write_dataset(cases, tmp_path)
    back = read_dataset(tmp_path)
    assert [c.volume_id for c in back] == [c.volume_id for c in cases]
    for a, b in zip(cases, back):
        assert np.array_equal(a.volume.voxels, b.volume.voxels) and a.volume.voxels.dtype == b.volume.voxels.dtype
        assert np.array_equal(a.mask.voxels, b.mask.voxels)
        assert np.array_equal(a.labels, b.labels) and a.ct_label == b.ct_label
        assert a.volume.spacing_mm == b.volume.spacing_mm
    assert len(read_csv(tmp_path / "labels.csv", ("volume_id", "slice_index", "label"))) == 6 * 32
    manifest = read_csv(tmp_path / "manifest.csv", ("volume_id", "image", "mask", "n_slices", "ct_label"))
    assert len(manifest) == 6
    assert b"\r\n" not in (tmp_path / "labels.csv").read_bytes()


def test_write_is_byte_deterministic(cases, tmp_path):
    write_dataset(cases, tmp_path / "a")
    write_dataset(cases, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_read_dataset_reports_missing_labels(cases, tmp_path):
    from radnet.errors import DataError, FormatError

    write_dataset(cases[:1], tmp_path)
    lines = (tmp_path / "labels.csv").read_text().splitlines(keepends=True)
    (tmp_path / "labels.csv").write_text("".join(lines[:-1]))
    with pytest.raises(FormatError) as exc:
        read_dataset(tmp_path)
    assert "labels.csv" in str(exc.value)
    with pytest.raises(DataError):
        read_dataset(tmp_path / "nowhere")

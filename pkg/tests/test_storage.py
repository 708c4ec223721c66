"""Sample serialization, checksums and schema versioning."""

import json

import numpy as np
import pytest

from pychangen.constants import SAMPLE_META_FILE, SCHEMA_VERSION
from pychangen.errors import ChecksumError, SchemaVersionError
from pychangen.events import EventSpec
from pychangen.procedural import SceneSpec, gen_procedural_scene
from pychangen.sampler import GuidanceConfig, synthesize_time_series
from pychangen.storage import (
    CUMULATIVE_CHANGE_FILE,
    change_file,
    contour_file,
    is_valid_sample,
    read_sample,
    write_sample,
)


class CopySynthesizer:
    def synthesize(self, request):
        return request.pre_image


def make_series(length=1, condition_kind="semantic", seed=3):
    spec = SceneSpec(height=24, width=24, num_classes=3, object_count_range=(2, 4),
                     object_size_range=(3, 6))
    scene = gen_procedural_scene(spec, seed)
    if condition_kind == "contour":
        specs = [EventSpec.contour_remove(0.5, rng_seed=k) for k in range(length)]
    else:
        specs = [EventSpec.create(0.5, rng_seed=k) if k % 2 else EventSpec.remove(0.5, rng_seed=k)
                 for k in range(length)]
    return synthesize_time_series(scene, specs, GuidanceConfig(0.5, 10), CopySynthesizer(),
                                  condition_kind=condition_kind)


def test_change_file_names():
    assert change_file(0) == "change.png"
    assert change_file(1) == "change_2.png"


class TestRoundTrip:
    @pytest.mark.parametrize("length", [1, 3])
    def test_semantic(self, tmp_path, length):
        series = make_series(length)
        meta = write_sample(tmp_path / "s", series, {"sample_id": "000000"})
        loaded, loaded_meta = read_sample(tmp_path / "s")

        assert loaded_meta == json.loads(json.dumps(meta))
        assert loaded.length == length
        for a, b in zip(series.images, loaded.images):
            assert np.array_equal(a, b)
        for a, b in zip(series.masks, loaded.masks):
            assert a.equals(b)
        for a, b in zip(series.instances, loaded.instances):
            assert a.equals(b)
        assert loaded.cumulative_change.equals(series.cumulative_change)
        assert loaded.labels_consistent()
        assert (tmp_path / "s" / CUMULATIVE_CHANGE_FILE).exists() == (length > 1)

    def test_contour(self, tmp_path):
        series = make_series(2, condition_kind="contour")
        write_sample(tmp_path / "s", series, {})
        assert (tmp_path / "s" / contour_file(2)).exists()
        loaded, meta = read_sample(tmp_path / "s")
        assert meta["condition_kind"] == "contour"
        for a, b in zip(series.conditions, loaded.conditions):
            assert a.contour.equals(b.contour)

    def test_overwrite_leaves_no_tmp(self, tmp_path):
        write_sample(tmp_path / "s", make_series(seed=1), {})
        write_sample(tmp_path / "s", make_series(seed=2), {})
        assert sorted(p.name for p in tmp_path.iterdir()) == ["s"]
        assert is_valid_sample(tmp_path / "s")


class TestCorruption:
    def test_truncated_png(self, tmp_path):
        write_sample(tmp_path / "s", make_series(), {})
        target = tmp_path / "s" / change_file(0)
        target.write_bytes(target.read_bytes()[:20])
        assert not is_valid_sample(tmp_path / "s")
        with pytest.raises(ChecksumError):
            read_sample(tmp_path / "s")

    def test_missing_file(self, tmp_path):
        write_sample(tmp_path / "s", make_series(), {})
        (tmp_path / "s" / "t1.png").unlink()
        with pytest.raises(ChecksumError):
            read_sample(tmp_path / "s")

    def test_schema_mismatch(self, tmp_path):
        write_sample(tmp_path / "s", make_series(), {})
        meta_path = tmp_path / "s" / SAMPLE_META_FILE
        meta = json.loads(meta_path.read_text())
        meta["schema_version"] = SCHEMA_VERSION + 1
        meta_path.write_text(json.dumps(meta))
        assert not is_valid_sample(tmp_path / "s")
        with pytest.raises(SchemaVersionError):
            read_sample(tmp_path / "s")

    def test_garbled_meta(self, tmp_path):
        write_sample(tmp_path / "s", make_series(), {})
        (tmp_path / "s" / SAMPLE_META_FILE).write_text("{not json")
        with pytest.raises(ChecksumError):
            read_sample(tmp_path / "s")

import json
from collections import Counter

import numpy as np
import pytest

from fusionpose import dataio, synth
from fusionpose.model import N_JOINTS, PointCloud
from fusionpose.pseudolabel import PseudoLabelConfig, label_dataset

from conftest import front_points, make_sample


def assert_same_samples(a, b, rtol=1e-8):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.id == y.id
        for f in ("fx", "fy", "cx", "cy", "width", "height"):
            assert getattr(x.camera, f) == pytest.approx(getattr(y.camera, f), rel=rtol)
        np.testing.assert_allclose(x.camera.extrinsics, y.camera.extrinsics, rtol=rtol, atol=1e-12)
        np.testing.assert_allclose(x.bbox3d_center, y.bbox3d_center, rtol=rtol)
        np.testing.assert_allclose(x.cloud.points, y.cloud.points, rtol=rtol, atol=1e-12)
        np.testing.assert_allclose(x.keypoints2d.joints, y.keypoints2d.joints, rtol=rtol)
        np.testing.assert_allclose(x.keypoints2d.confidence, y.keypoints2d.confidence, rtol=rtol)
        for f in ("gt3d", "pseudo3d"):
            p, q = getattr(x, f), getattr(y, f)
            assert (p is None) == (q is None)
            if p is not None:
                np.testing.assert_array_equal(p.valid, q.valid)
                np.testing.assert_allclose(p.joints, q.joints, rtol=rtol, atol=1e-12)


class TestReadWrite:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert dataio.read_samples(tmp_path / "e.jsonl") == []

    def test_zero_samples(self, tmp_path):
        entry = dataio.write_samples([], tmp_path / "z.jsonl")
        lines = (tmp_path / "z.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["version"] == dataio.SCHEMA_VERSION
        assert entry["n_samples"] == 0 and dataio.read_samples(tmp_path / "z.jsonl") == []

    @pytest.mark.parametrize("name", ["d.jsonl", "d.jsonl.gz"])
    def test_roundtrip(self, nominal_small, tmp_path, name):
        labeled, _ = label_dataset(nominal_small, PseudoLabelConfig())
        dataio.write_samples(labeled, tmp_path / name)
        back = dataio.read_samples(tmp_path / name)
        assert_same_samples(labeled, back)
        dataio.write_samples(back, tmp_path / ("again." + name))
        assert (tmp_path / name).read_bytes() == (tmp_path / ("again." + name)).read_bytes()

    def test_byte_identical(self, nominal_small, tmp_path):
        a = dataio.write_samples(nominal_small, tmp_path / "a.jsonl.gz")
        b = dataio.write_samples(nominal_small, tmp_path / "b.jsonl.gz")
        assert a["sha256"] == b["sha256"]

    def test_null_optional_fields(self, nominal_small, tmp_path):
        s = nominal_small[0].replace(gt3d=None)
        dataio.write_samples([s], tmp_path / "n.jsonl")
        rec = json.loads((tmp_path / "n.jsonl").read_text().splitlines()[1])
        assert list(rec) == list(dataio.RECORD_FIELDS)
        assert rec["gt3d"] is None and rec["pseudo3d"] is None
        assert dataio.read_samples(tmp_path / "n.jsonl")[0].gt3d is None

    def test_non_finite_values_survive(self, rng, tmp_path):
        kp = np.zeros((N_JOINTS, 2))
        kp[3] = np.nan
        conf = np.ones(N_JOINTS)
        conf[3] = 0.0
        s = make_sample(front_points(80, rng), kp=kp, conf=conf)
        dataio.write_samples([s], tmp_path / "nan.jsonl")
        assert np.isnan(dataio.read_samples(tmp_path / "nan.jsonl")[0].keypoints2d.joints[3]).all()

    @pytest.mark.slow
    def test_thousand_sample_roundtrip(self, tmp_path):
        data = synth.generate_dataset(synth.SynthConfig(n_samples=1000, rng_seed=77))
        dataio.write_samples(data, tmp_path / "k.jsonl.gz")
        assert_same_samples(data, dataio.read_samples(tmp_path / "k.jsonl.gz"))


class TestParseErrors:
    def _write(self, tmp_path, nominal_small, mutate, line=0):
        dataio.write_samples(nominal_small[:3], tmp_path / "x.jsonl")
        lines = (tmp_path / "x.jsonl").read_text().splitlines()
        rec = json.loads(lines[line + 1])
        mutate(rec)
        lines[line + 1] = json.dumps(rec)
        (tmp_path / "x.jsonl").write_text("\n".join(lines) + "\n")
        return tmp_path / "x.jsonl"

    def test_missing_camera_names_line(self, tmp_path, nominal_small):
        path = self._write(tmp_path, nominal_small, lambda r: r.pop("camera"), line=1)
        with pytest.raises(dataio.DatasetFormatError, match="line 3: missing field.*camera") as exc:
            dataio.read_samples(path)
        assert exc.value.line == 3

    def test_bad_shape(self, tmp_path, nominal_small):
        path = self._write(tmp_path, nominal_small, lambda r: r.update(keypoints2d=r["keypoints2d"][:-1]))
        with pytest.raises(dataio.DatasetFormatError, match="line 2: keypoints2d"):
            dataio.read_samples(path)

    def test_unknown_field(self, tmp_path, nominal_small):
        path = self._write(tmp_path, nominal_small, lambda r: r.update(extra=1))
        with pytest.raises(dataio.DatasetFormatError, match="unknown field"):
            dataio.read_samples(path)

    def test_bad_json(self, tmp_path):
        (tmp_path / "b.jsonl").write_text(dataio.header() + "\n{not json\n")
        with pytest.raises(dataio.DatasetFormatError, match="line 2"):
            dataio.read_samples(tmp_path / "b.jsonl")

    def test_schema_version(self, tmp_path):
        head = json.loads(dataio.header())
        head["version"] = 99
        (tmp_path / "v.jsonl").write_text(json.dumps(head) + "\n")
        with pytest.raises(dataio.SchemaVersionError):
            dataio.read_samples(tmp_path / "v.jsonl")

    def test_missing_header(self, tmp_path, nominal_small):
        (tmp_path / "h.jsonl").write_text(dataio.encode_sample(nominal_small[0]) + "\n")
        with pytest.raises(dataio.DatasetFormatError, match="line 1"):
            dataio.read_samples(tmp_path / "h.jsonl")


class TestFilter:
    def test_all_pass(self, nominal_small):
        kept, man = dataio.filter_dataset(nominal_small)
        assert kept == list(nominal_small)
        assert set(man.rejections.values()) == {0}
        assert set(man.stage_counts.values()) == {len(nominal_small)}

    def test_one_violation_each(self, rng):
        good = make_sample(front_points(100, rng))
        few_points = make_sample(front_points(74, rng))
        few_kp = make_sample(front_points(100, rng), conf=np.r_[np.ones(6), np.zeros(7)])
        off_frame = make_sample(np.vstack([front_points(70, rng), front_points(30, rng) + [0, 0, -50]]))
        kept, man = dataio.filter_dataset([good, few_points, few_kp, off_frame])
        assert kept == [good]
        assert man.rejections == {"malformed": 0, "too_few_points": 1, "too_few_keypoints": 1, "camera_overlap": 1}
        assert list(man.stage_counts.values()) == [4, 4, 3, 2, 1]

    def test_far_pedestrians_lack_points(self):
        cfg = synth.SynthConfig(n_samples=120, rng_seed=3, require_valid=False, distance_range=(5.0, 50.0),
                                points_per_body=(1, 1000))
        data = synth.generate_dataset(cfg)
        kept, man = dataio.filter_dataset(data)
        manual = sum(len(s.cloud) < 75 for s in data)
        assert man.rejections["too_few_points"] == manual > 0
        assert man.rejection_rate > 0
        assert max(man.rejections, key=man.rejections.get) == "too_few_points"

    def test_idempotent(self):
        cfg = synth.SynthConfig(n_samples=60, rng_seed=4, require_valid=False, distance_range=(5.0, 50.0),
                                points_per_body=(1, 1000))
        kept, _ = dataio.filter_dataset(synth.generate_dataset(cfg))
        again, man = dataio.filter_dataset(kept)
        assert again == kept and set(man.rejections.values()) == {0}

    def test_manifest_monotone(self):
        with pytest.raises(ValueError):
            dataio.DatasetManifest(stage_counts={"input": 3, "well_formed": 4})


class TestSplit:
    def test_sizes(self):
        train, test = dataio.split(list(range(5000)), 0.834, seed=42)
        assert (len(train), len(test)) == (4170, 830)

    def test_partition_and_determinism(self):
        items = [f"s{i % 37}" for i in range(500)]
        a = dataio.split(items, 0.7, seed=3)
        b = dataio.split(items, 0.7, seed=3)
        assert a == b
        assert Counter(a[0]) + Counter(a[1]) == Counter(items)
        assert dataio.split(items, 0.7, seed=4) != a

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.2, 1.5])
    def test_fraction_range(self, f):
        with pytest.raises(ValueError):
            dataio.split([1, 2, 3], f)


def test_config_hash():
    a = dataio.config_hash(synth.SynthConfig())
    assert a == dataio.config_hash(synth.SynthConfig())
    assert a != dataio.config_hash(synth.SynthConfig(outlier_prob=0.2))
    assert len(a) == 16

import numpy as np
import pytest

from fusionpose import nn
from fusionpose.cli import random_batch

SMALL = nn.Architecture(lift_width=16, lift_blocks=2, point_widths=(8, 8, 16), head_widths=(12,), n_points=32)


def small_batch(seed=0, B=4, arch=SMALL):
    return random_batch(seed, B, arch)


class TestParams:
    def test_layout_covers_every_parameter_once(self):
        p = nn.ModelParams(SMALL)
        spans = sorted((a, b) for a, b, _ in p.slices.values())
        assert spans[0][0] == 0 and spans[-1][1] == p.size
        assert all(b1 == a2 for (_, b1), (a2, _) in zip(spans, spans[1:]))
        assert sum(int(np.prod(s)) for _, s in p.shapes) == p.size

    def test_flatten_roundtrip(self):
        p = nn.init_params(3, SMALL)
        q = nn.ModelParams.unflatten(SMALL, p.flatten())
        np.testing.assert_array_equal(q.flat, p.flat)
        for name in p.names():
            np.testing.assert_array_equal(q[name], p[name])

    def test_views_share_memory(self):
        p = nn.ModelParams(SMALL)
        p["fuse.b"][0] = 7.0
        a, _, _ = p.slices["fuse.b"]
        assert p.flat[a] == 7.0 and p.owner(a) == "fuse.b"

    def test_full_size_architecture(self):
        p = nn.ModelParams()
        assert p["lift.in.W"].shape == (26, 512)
        assert p["lift.out.W"].shape == (512, 39)
        assert p["point.conv4.W"].shape == (128, 1024)
        assert p["point.fc2.W"].shape == (256, 39)
        assert p["fuse.W"].shape == (78, 39)


class TestInit:
    def test_seeded(self):
        np.testing.assert_array_equal(nn.init_params(42).flat, nn.init_params(42).flat)
        assert not np.array_equal(nn.init_params(42).flat, nn.init_params(43).flat)

    def test_he_scale(self):
        w = nn.init_params(42)["lift.block0.0.W"]
        assert w.std() == pytest.approx(np.sqrt(2 / 512), rel=0.1)

    def test_biases_zero_and_fusion_averages(self):
        p = nn.init_params(1, SMALL)
        for name in p.names():
            if name.endswith(".b"):
                assert not p[name].any()
        o = SMALL.out_dim
        np.testing.assert_array_equal(p["fuse.W"], np.vstack([0.5 * np.eye(o), 0.5 * np.eye(o)]))


TOY_LIFT = nn.Architecture(lift_in=2, lift_width=2, lift_blocks=1, out_dim=2, lift_dropout=0.0)


class TestLifting:
    def test_zero_weights(self):
        p = nn.ModelParams()
        y, _ = nn.model_forward(p, np.random.default_rng(0).normal(size=(3, 26)), None, "lifting")
        np.testing.assert_array_equal(y, 0.0)

    def test_eval_is_deterministic(self):
        p = nn.init_params(0, SMALL)
        x = np.random.default_rng(0).normal(size=(3, 26))
        a, _ = nn.model_forward(p, x, None, "lifting", rng=np.random.default_rng(1))
        b, _ = nn.model_forward(p, x, None, "lifting", rng=np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)

    def test_hand_computed_block(self):
        p = nn.ModelParams(TOY_LIFT)
        p["lift.in.W"][...] = [[1, 0], [0, 1]]
        p["lift.in.b"][...] = [0, 0.5]
        p["lift.block0.0.W"][...] = [[2, -1], [1, 1]]
        p["lift.block0.0.b"][...] = [-0.5, 0]
        p["lift.block0.1.W"][...] = [[1, 1], [-1, 2]]
        p["lift.block0.1.b"][...] = [0, -1]
        p["lift.out.W"][...] = [[1, 0], [0, -1]]
        p["lift.out.b"][...] = [0.1, 0]
        y, _ = nn.model_forward(p, np.array([[1.0, -2.0]]), None, "lifting")
        relu = lambda v: max(v, 0.0)  # noqa: E731
        h0 = [relu(1 * 1 + -2 * 0 + 0), relu(1 * 0 + -2 * 1 + 0.5)]
        a1 = [relu(h0[0] * 2 + h0[1] * 1 - 0.5), relu(h0[0] * -1 + h0[1] * 1)]
        a2 = [relu(a1[0] * 1 + a1[1] * -1), relu(a1[0] * 1 + a1[1] * 2 - 1)]
        h = [h0[0] + a2[0], h0[1] + a2[1]]
        np.testing.assert_allclose(y[0], [h[0] + 0.1, -h[1]], atol=1e-15)
        np.testing.assert_allclose(y[0], [2.6, -0.5], atol=1e-15)


TOY_POINT = nn.Architecture(point_widths=(2,), head_widths=(), out_dim=1, head_dropout=0.0, n_points=2)


class TestPoint:
    def test_hand_computed_maxpool(self):
        p = nn.ModelParams(TOY_POINT)
        p["point.conv0.W"][...] = [[1, -1], [2, 0.5], [0, 0]]
        p["point.conv0.b"][...] = [0, 0.1]
        p["point.fc0.W"][...] = [[0.5], [-1]]
        p["point.fc0.b"][...] = [0.2]
        cloud = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
        y, _ = nn.model_forward(p, None, cloud, "point")
        # per point: (1, -1) and (2, 0.5); channel max (2, 0.5); + bias (2, 0.6)
        assert y[0, 0] == pytest.approx(0.5 * 2 - 1 * 0.6 + 0.2, abs=1e-15)

    def test_permutation_invariance(self):
        p = nn.init_params(5, SMALL)
        cloud = np.random.default_rng(0).normal(size=(2, 32, 3))
        perm = np.random.default_rng(1).permutation(32)
        a, _ = nn.model_forward(p, None, cloud, "point")
        b, _ = nn.model_forward(p, None, cloud[:, perm], "point")
        np.testing.assert_array_equal(a, b)

    def test_multiplicity_invariance(self):
        arch = nn.Architecture(point_widths=(8, 16), head_widths=(12,), n_points=512)
        p = nn.init_params(5, arch)
        half = np.random.default_rng(0).normal(size=(1, 256, 3))
        a, _ = nn.model_forward(p, None, np.concatenate([half, half], axis=1), "point")
        b, _ = nn.model_forward(p, None, half, "point")
        np.testing.assert_array_equal(a, b)

    def test_distinct_counts_skip_padding_exactly(self):
        p = nn.init_params(6, SMALL)
        rng = np.random.default_rng(2)
        sizes = [5, 32, 50, 17]
        raw = [rng.normal(size=(n, 3)) for n in sizes]
        cloud = np.stack([nn.resample_cloud(c, 32, rng) for c in raw])
        counts = [nn.distinct_rows(n, 32) for n in sizes]
        assert counts == [5, 32, 32, 17]
        batch = small_batch(3)
        full = nn.Batch(batch.x, cloud, batch.target, batch.valid, batch.beta)
        skip = nn.Batch(batch.x, cloud, batch.target, batch.valid, batch.beta, counts)
        la, dya, ta = nn.batch_loss(p, full, "fusion", train=True, rng=np.random.default_rng(0))
        lb, dyb, tb = nn.batch_loss(p, skip, "fusion", train=True, rng=np.random.default_rng(0))
        assert la == lb
        np.testing.assert_array_equal(nn.backward(ta, dya), nn.backward(tb, dyb))

    @pytest.mark.parametrize("counts", [[0, 1], [1, 33], [1]])
    def test_counts_validated(self, counts):
        p = nn.init_params(6, SMALL)
        with pytest.raises(ValueError, match="counts"):
            nn.model_forward(p, None, np.zeros((2, 32, 3)), "point", counts=counts)


class TestFusion:
    def _outs(self):
        rng = np.random.default_rng(0)
        return rng.normal(size=(4, 39)), rng.normal(size=(4, 39))

    def test_selector(self):
        lift, point = self._outs()
        w = {"fuse.W": np.vstack([np.eye(39), np.zeros((39, 39))]), "fuse.b": np.zeros(39)}
        np.testing.assert_array_equal(nn.fusion_forward(lift, point, w)[0], lift)

    def test_average(self):
        lift, point = self._outs()
        w = {"fuse.W": np.vstack([0.5 * np.eye(39), 0.5 * np.eye(39)]), "fuse.b": np.zeros(39)}
        np.testing.assert_allclose(nn.fusion_forward(lift, point, w)[0], (lift + point) / 2, atol=1e-15)

    def test_matches_matmul(self):
        lift, point = self._outs()
        rng = np.random.default_rng(1)
        W, b = rng.normal(scale=0.1, size=(78, 39)), rng.normal(size=39)
        expected = np.array([[sum(np.r_[lift[i], point[i]][k] * W[k, j] for k in range(78)) + b[j]
                              for j in range(39)] for i in range(4)])
        np.testing.assert_allclose(nn.fusion_forward(lift, point, {"fuse.W": W, "fuse.b": b})[0], expected, atol=1e-12)

    def test_missing_branch(self):
        p = nn.init_params(2, SMALL)
        bt = small_batch()
        av = np.array([[1, 0], [0, 1], [1, 1], [1, 0]], float)
        y, tr = nn.model_forward(p, bt.x, bt.cloud, "fusion", available=av)
        assert np.isfinite(y).all()
        lift_only, _ = nn.model_forward(p, bt.x, bt.cloud, "lifting")
        np.testing.assert_allclose(y[0], lift_only[0] @ p["fuse.W"][:39] + p["fuse.b"], atol=1e-12)


class TestBackward:
    def test_zero_output_gradient(self):
        p = nn.init_params(0, SMALL)
        bt = small_batch()
        _, tr = nn.model_forward(p, bt.x, bt.cloud, "fusion")
        assert not nn.backward(tr, np.zeros((4, 39))).any()

    def test_linear_layer_gradient_is_input(self):
        p = nn.init_params(0, SMALL)
        bt = small_batch()
        _, tr = nn.model_forward(p, bt.x, bt.cloud, "fusion")
        g = p.views(nn.backward(tr, np.ones((4, 39))))
        cat = tr.fuse["cat"]
        np.testing.assert_allclose(g["fuse.W"], np.repeat(cat.sum(0)[:, None], 39, axis=1), atol=1e-12)
        np.testing.assert_allclose(g["fuse.b"], 4.0)

    def test_shape_checked(self):
        p = nn.init_params(0, SMALL)
        bt = small_batch()
        _, tr = nn.model_forward(p, bt.x, bt.cloud, "fusion")
        with pytest.raises(ValueError):
            nn.backward(tr, np.zeros((3, 39)))

    @pytest.mark.parametrize("variant", nn.VARIANTS)
    def test_grad_check_small(self, variant):
        res = nn.grad_check(nn.init_params(7, SMALL), small_batch(7), variant=variant, seed=7)
        assert res.passed(1e-4), (res.max_rel_error, res.worst_name)

    def test_grad_check_with_missing_branches(self):
        p = nn.init_params(7, SMALL)
        bt = small_batch(7)
        av = np.array([[1, 0], [0, 1], [1, 1], [1, 1]], float)
        _, dy, tr = nn.batch_loss(p, bt, "fusion", available=av)
        g = nn.backward(tr, dy)
        idx = nn.choose_check_indices(p, g, 3, np.random.default_rng(0))
        theta = p.flat.copy()
        probe = nn.ModelParams(SMALL, theta)
        num = nn.numeric_gradient(lambda _: nn.batch_loss(probe, bt, "fusion", available=av)[0], theta, idx, 1e-6)
        assert nn.relative_error(g[idx], num).max() < 1e-4

    def test_detects_corruption(self):
        p = nn.init_params(7, SMALL)
        res = nn.grad_check(p, small_batch(7), corrupt_index=p.slices["lift.out.W"][0] + 3)
        assert res.max_rel_error > 0.1 and res.worst_name == "lift.out.W"

    def test_checker_on_quadratic(self):
        rng = np.random.default_rng(0)
        A, b = rng.normal(size=(6, 5)), rng.normal(size=6)
        theta = rng.normal(size=5)
        analytic = A.T @ (A @ theta - b)
        numeric = nn.numeric_gradient(lambda t: 0.5 * np.sum((A @ t - b) ** 2), theta, np.arange(5), 1e-5)
        assert nn.relative_error(analytic, numeric).max() < 1e-8


class TestDropout:
    def test_frozen_masks_reproduce(self):
        p = nn.init_params(0, SMALL)
        bt = small_batch()
        a, tr = nn.model_forward(p, bt.x, bt.cloud, "fusion", train=True, rng=np.random.default_rng(3))
        b, _ = nn.model_forward(p, bt.x, bt.cloud, "fusion", train=True, masks=tr.masks)
        np.testing.assert_array_equal(a, b)
        c, _ = nn.model_forward(p, bt.x, bt.cloud, "fusion", train=True, rng=np.random.default_rng(4))
        assert not np.array_equal(a, c)

    def test_train_needs_randomness(self):
        p = nn.init_params(0, SMALL)
        bt = small_batch()
        with pytest.raises(ValueError):
            nn.model_forward(p, bt.x, bt.cloud, "fusion", train=True)
        with pytest.raises(ValueError):
            nn.model_forward(p, bt.x, bt.cloud, "both")


class TestResample:
    def test_downsample_without_replacement(self, rng):
        pts = rng.normal(size=(600, 3))
        out = nn.resample_cloud(pts, 512, rng)
        assert len(np.unique(out, axis=0)) == 512

    def test_upsample_keeps_every_point(self, rng):
        pts = rng.normal(size=(100, 3))
        out = nn.resample_cloud(pts, 512, rng)
        assert out.shape == (512, 3)
        np.testing.assert_array_equal(np.unique(out, axis=0), np.unique(pts, axis=0))

    def test_exact_size_untouched(self, rng):
        pts = rng.normal(size=(512, 3))
        assert nn.resample_cloud(pts, 512, rng) is pts


class TestCheckpoint:
    def test_roundtrip_and_bytes(self, tmp_path):
        p = nn.init_params(9, SMALL)
        nn.save_checkpoint(tmp_path / "a.ckpt", p, 9, {"variant": "point"})
        nn.save_checkpoint(tmp_path / "b.ckpt", p, 9, {"variant": "point"})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        q, seed, meta = nn.load_checkpoint(tmp_path / "a.ckpt")
        assert seed == 9 and meta == {"variant": "point"} and q.arch == SMALL
        np.testing.assert_array_equal(q.flat, p.flat)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint at all")
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(tmp_path / "x")

    def test_rejects_truncated(self, tmp_path):
        nn.save_checkpoint(tmp_path / "a.ckpt", nn.init_params(0, SMALL), 0)
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-80])
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(tmp_path / "t.ckpt")

    @pytest.mark.parametrize("cut", [1, 3, 30])
    def test_rejects_odd_truncation(self, tmp_path, cut):
        nn.save_checkpoint(tmp_path / "a.ckpt", nn.init_params(0, SMALL), 0)
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:cut] if cut < 20 else raw[:-cut])
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(tmp_path / "t.ckpt")

import numpy as np
import pytest

from geovoxel.errors import InputError, NoCorrespondencesError
from geovoxel.featmodel import (
    ContrastiveConfig,
    ConvLayer,
    EncoderParams,
    conv3d,
    conv3d_backward,
    encoder_backward,
    encoder_forward,
    pair_loss_and_grads,
    prepare_pair,
    retrieval_accuracy,
    sample_negatives,
    ScenePair,
    train_view_prediction,
    view_contrastive_loss,
)
from geovoxel.geometry import GridSpec, VoxelGrid, rotation_about_axis
from geovoxel.harness.scenes import SceneSpec, render_depth, synth_scene

H = 1e-5
REL_TOL = 1e-4
# coordinates whose true gradient is this small are compared absolutely;
# float64 round-off in a central difference is ~1e-11 here
GRAD_FLOOR = 1e-6


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                   GRAD_FLOOR)


def central_diff(f, x, h=H):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def naive_conv(x, kernel, bias):
    """Direct seven-loop zero-padded cross-correlation."""
    dx, dy, dz, cin = x.shape
    k, cout = kernel.shape[0], kernel.shape[4]
    p = k // 2
    out = np.zeros((dx, dy, dz, cout))
    for i in range(dx):
        for j in range(dy):
            for l in range(dz):
                for co in range(cout):
                    acc = bias[co]
                    for a in range(k):
                        for b in range(k):
                            for c in range(k):
                                ii, jj, ll = i + a - p, j + b - p, l + c - p
                                if 0 <= ii < dx and 0 <= jj < dy and 0 <= ll < dz:
                                    acc += x[ii, jj, ll] @ kernel[a, b, c, :, co]
                    out[i, j, l, co] = acc
    return out


def random_grid(rng, dims=(4, 4, 4), c=3, empty_fraction=0.3):
    spec = GridSpec(np.zeros(3), 0.1, dims)
    occ = rng.uniform(0.2, 1.0, size=dims)
    occ[rng.random(dims) < empty_fraction] = 0.0
    data = rng.uniform(size=dims + (c,)) * (occ > 0)[..., None]
    return VoxelGrid(spec, data, occ)


def random_params(rng, channels=(3, 4, 5), kernel_sizes=(3, 1)):
    p = EncoderParams.init(int(rng.integers(2**31)), channels, kernel_sizes)
    for layer in p.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return p


def unit_rows(rng, n, c):
    v = rng.normal(size=(n, c))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestEncoderForward:
    def test_identity_kernel_normalizes_input(self):
        rng = np.random.default_rng(0)
        g = random_grid(rng, empty_fraction=0.0)
        g.occupancy[:] = 1.0
        p = EncoderParams([ConvLayer(np.eye(3).reshape(1, 1, 1, 3, 3), np.zeros(3))])
        out = encoder_forward(g, p).data
        np.testing.assert_allclose(out, g.data / np.linalg.norm(g.data, axis=-1, keepdims=True),
                                   atol=1e-15)

    def test_zero_weights_give_zero_features(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        for layer in p.layers:
            layer.kernel[:] = 0
            layer.bias[:] = 0
        assert not encoder_forward(random_grid(rng), p).data.any()

    def test_conv_matches_direct_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 5, 5, 3))
        kernel = rng.normal(size=(3, 3, 3, 3, 4))
        bias = rng.normal(size=4)
        np.testing.assert_allclose(conv3d(x, kernel, bias), naive_conv(x, kernel, bias), atol=1e-10)

    def test_unit_norm_where_occupied(self):
        rng = np.random.default_rng(3)
        g = random_grid(rng, dims=(6, 6, 6))
        f = encoder_forward(g, EncoderParams.init(0))
        n = np.linalg.norm(f.data, axis=-1)
        assert np.all(np.abs(n[g.occupancy > 0] - 1) < 1e-6)
        assert not f.data[g.occupancy == 0].any()

    def test_channel_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(InputError):
            encoder_forward(random_grid(rng, c=2), EncoderParams.init(0))

    def test_bad_chain_rejected(self):
        with pytest.raises(InputError):
            EncoderParams([ConvLayer(np.zeros((1, 1, 1, 3, 4)), np.zeros(4)),
                           ConvLayer(np.zeros((1, 1, 1, 5, 2)), np.zeros(2))])


class TestEncoderBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        g = random_grid(rng)
        p = random_params(rng)
        grads, gx = encoder_backward(g, p, np.zeros(g.spec.dims + (5,)))
        assert not np.concatenate([grads.flat(), gx.ravel()]).any()

    def test_linear_pointwise_weight_gradient_is_input_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4, 5, 2))
        gk, gb, _ = conv3d_backward(x, rng.normal(size=(1, 1, 1, 2, 3)), np.ones((3, 4, 5, 3)))
        for co in range(3):
            np.testing.assert_allclose(gk[0, 0, 0, :, co], x.sum(axis=(0, 1, 2)), atol=1e-12)
        np.testing.assert_array_equal(gb, [60, 60, 60])

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(InputError):
            encoder_backward(random_grid(rng), random_params(rng), np.zeros((4, 4, 4, 2)))

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        g = random_grid(rng)
        p = random_params(rng)
        u = rng.normal(size=g.spec.dims + (5,))

        def objective():
            return float(np.sum(u * encoder_forward(g, p).data))

        grads, gx = encoder_backward(g, p, u)
        for layer, glayer in zip(p.layers, grads.layers):
            assert rel_error(glayer.kernel, central_diff(objective, layer.kernel)).max() < REL_TOL
            assert rel_error(glayer.bias, central_diff(objective, layer.bias)).max() < REL_TOL
        assert rel_error(gx, central_diff(objective, g.data)).max() < REL_TOL


class TestContrastiveLoss:
    cfg = ContrastiveConfig(temperature=0.5, negatives_per_anchor=4)

    def test_identical_features(self):
        f = np.zeros((3, 3, 3, 4))
        f[...] = [0.5, 0.5, 0.5, 0.5]
        mask = np.ones((3, 3, 3), dtype=bool)
        loss, _, _ = view_contrastive_loss(f, f, mask, self.cfg)
        assert loss == pytest.approx(np.log(1 + 4), abs=1e-12)

    def test_orthogonal_negatives_closed_form(self):
        # every anchor equals its positive and is orthogonal to all negatives
        n = 3
        f = np.eye(n + 1).reshape(n + 1, 1, 1, n + 1)
        mask = np.ones((n + 1, 1, 1), dtype=bool)
        cfg = ContrastiveConfig(temperature=1.0, negatives_per_anchor=n)
        loss, _, _ = view_contrastive_loss(f, f, mask, cfg)
        assert loss == pytest.approx(-np.log(np.e / (np.e + n)), abs=1e-12)

    def test_empty_mask(self):
        f = np.ones((2, 2, 2, 3))
        with pytest.raises(NoCorrespondencesError):
            view_contrastive_loss(f, f, np.zeros((2, 2, 2), dtype=bool), self.cfg)

    def test_negatives_are_distinct_others(self):
        negs = sample_negatives(10, 5, np.random.default_rng(0))
        for i, row in enumerate(negs):
            assert i not in row and len(set(row)) == 5
        assert sample_negatives(3, 64, np.random.default_rng(0)).shape == (3, 2)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        fa = rng.normal(size=(4, 4, 4, 3))
        fb = rng.normal(size=(4, 4, 4, 3))
        mask = rng.random((4, 4, 4)) < 0.6
        r = rotation_about_axis([1, -2, 0.3], 0.8)
        l0, _, _ = view_contrastive_loss(fa, fb, mask, self.cfg)
        l1, _, _ = view_contrastive_loss(fa @ r.T, fb @ r.T, mask, self.cfg)
        assert l0 > 0
        assert abs(l0 - l1) < 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        fa = rng.normal(size=(3, 3, 3, 4))
        fb = rng.normal(size=(3, 3, 3, 4))
        mask = rng.random((3, 3, 3)) < 0.5
        mask[0, 0, 0] = mask[1, 1, 1] = True
        cfg = ContrastiveConfig(temperature=float(rng.uniform(0.1, 1.0)),
                                negatives_per_anchor=int(rng.integers(1, 8)), seed=seed)
        loss, ga, gb = view_contrastive_loss(fa, fb, mask, cfg)

        def objective():
            return view_contrastive_loss(fa, fb, mask, cfg)[0]

        assert rel_error(ga, central_diff(objective, fa)).max() < REL_TOL
        assert rel_error(gb, central_diff(objective, fb)).max() < REL_TOL

    def test_small_step_decreases_loss(self):
        rng = np.random.default_rng(5)
        fa = rng.normal(size=(4, 4, 4, 3))
        fb = rng.normal(size=(4, 4, 4, 3))
        mask = np.ones((4, 4, 4), dtype=bool)
        loss, ga, gb = view_contrastive_loss(fa, fb, mask, self.cfg)
        after, _, _ = view_contrastive_loss(fa - 1e-4 * ga, fb - 1e-4 * gb, mask, self.cfg)
        assert after < loss


class TestRetrieval:
    def test_exact_match(self):
        rng = np.random.default_rng(0)
        f = unit_rows(rng, 27, 5).reshape(3, 3, 3, 5)
        assert retrieval_accuracy(f, f, np.ones((3, 3, 3), dtype=bool)) == 1.0

    def test_ties_fail(self):
        f = np.ones((2, 2, 2, 3))
        assert retrieval_accuracy(f, f, np.ones((2, 2, 2), dtype=bool)) == 0.0

    def test_too_few_voxels(self):
        f = np.ones((2, 2, 2, 3))
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0, 0, 0] = True
        with pytest.raises(InputError):
            retrieval_accuracy(f, f, mask)

    def test_chance_level(self):
        rng = np.random.default_rng(1)
        m = 10
        accs = [retrieval_accuracy(unit_rows(rng, m, 4)[:, None, None, :],
                                   unit_rows(rng, m, 4)[:, None, None, :],
                                   np.ones((m, 1, 1), dtype=bool)) for _ in range(2000)]
        se = np.std(accs) / np.sqrt(len(accs))
        assert abs(np.mean(accs) - 1 / m) < 3 * se


def small_pairs(n, dims_px=32):
    spec = SceneSpec(width=dims_px, height=dims_px)
    pairs = []
    for s in range(n):
        sc = synth_scene(s, spec)
        da, ra = render_depth(sc, sc.cameras[0])
        db, rb = render_depth(sc, sc.cameras[1])
        pairs.append(ScenePair(ra, da, sc.cameras[0].pose, rb, db, sc.cameras[1].pose,
                               sc.cameras[0].intrinsics))
    return pairs


@pytest.fixture(scope="module")
def prepared():
    return [prepare_pair(p, (12, 12, 12)) for p in small_pairs(3)]


class TestTraining:

    def test_epochs_zero(self, prepared):
        p0 = EncoderParams.init(0)
        p, curve = train_view_prediction(prepared, p0, ContrastiveConfig(epochs=0))
        assert curve == [] and np.array_equal(p.flat(), p0.flat())

    def test_learning_rate_zero(self, prepared):
        p0 = EncoderParams.init(0)
        p, curve = train_view_prediction(prepared, p0, ContrastiveConfig(epochs=3, learning_rate=0.0))
        assert np.array_equal(p.flat(), p0.flat())
        assert len(set(curve)) == 1

    def test_deterministic(self, prepared):
        cfg = ContrastiveConfig(epochs=2, seed=7)
        p1, c1 = train_view_prediction(prepared, EncoderParams.init(0), cfg)
        p2, c2 = train_view_prediction(prepared, EncoderParams.init(0), cfg)
        assert c1 == c2 and np.array_equal(p1.flat(), p2.flat())

    def test_does_not_mutate_initial_params(self, prepared):
        p0 = EncoderParams.init(0)
        before = p0.flat().copy()
        train_view_prediction(prepared, p0, ContrastiveConfig(epochs=1))
        assert np.array_equal(p0.flat(), before)

    def test_all_empty_pairs_raise(self, prepared):
        empty = [type(p)(p.grid_a_in_b, p.grid_b, np.zeros_like(p.mask)) for p in prepared]
        with pytest.raises(NoCorrespondencesError):
            train_view_prediction(empty, EncoderParams.init(0), ContrastiveConfig(epochs=1))

    def test_empty_pair_skipped(self, prepared, caplog):
        empty = type(prepared[0])(prepared[0].grid_a_in_b, prepared[0].grid_b,
                                  np.zeros_like(prepared[0].mask))
        _, curve = train_view_prediction([empty] + prepared[1:], EncoderParams.init(0),
                                         ContrastiveConfig(epochs=1))
        assert len(curve) == 1 and "skipped 1" in caplog.text

    def test_pair_gradient_finite_differences(self, prepared):
        p = EncoderParams.init(3, channels=(3, 3, 4))
        cfg = ContrastiveConfig(temperature=0.5, negatives_per_anchor=8)
        pair = prepared[0]
        _, grads = pair_loss_and_grads(pair, p, cfg, 11)

        def objective():
            return pair_loss_and_grads(pair, p, cfg, 11)[0]

        layer, glayer = p.layers[1], grads.layers[1]
        assert rel_error(glayer.kernel, central_diff(objective, layer.kernel)).max() < REL_TOL
        sub = p.layers[0].kernel[1, 1, 1]
        num = central_diff(objective, sub)
        assert rel_error(grads.layers[0].kernel[1, 1, 1], num).max() < REL_TOL

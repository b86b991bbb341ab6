from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ring_cameras
from perspwarp.field import PARAM_NAMES, FieldConfig, GridConfig, NodeHashParams, RadianceField
from perspwarp.geometry import generate_rays
from perspwarp.renderer import (
    LossWeights,
    Model,
    ModelConfig,
    NumericError,
    RayPool,
    TrainConfig,
    Trainer,
    batch_loss,
    composite,
    composite_rays,
    disparity_loss,
    learning_rate,
    load_checkpoint,
    read_checkpoint_header,
    recon_loss,
    recon_loss_grad,
    render_image,
    save_checkpoint,
    tv_loss,
)

MICRO_FIELD = FieldConfig(GridConfig(levels=2, table_len=64, base_res=4, max_res=8), density_hidden=8,
                          density_out=8, color_hidden=8, dtype="float64")
SMALL_FIELD = FieldConfig(GridConfig(levels=4, table_len=2**10, base_res=4, max_res=32), density_hidden=16,
                          density_out=16, color_hidden=16)


def small_model(field=SMALL_FIELD, max_samples=128, **kw) -> Model:
    cams = ring_cameras(4, 4.0, 120.0, width=12)
    return Model(cams, ModelConfig(max_depth=5, n_per_axis=8, field=field, max_samples=max_samples, **kw))


@pytest.fixture(scope="module")
def model():
    return small_model()


@pytest.fixture(scope="module")
def micro_model():
    return small_model(MICRO_FIELD)


def toy_pool(model: Model) -> RayPool:
    # a vertical color gradient per image as a stand-in training target
    imgs = []
    for c in model.cams:
        v = (np.arange(c.height) + 0.5) / c.height
        imgs.append(np.broadcast_to(np.stack([v, 1 - v, 0.5 * np.ones_like(v)], -1)[:, None], (c.height, c.width, 3)))
    return RayPool.from_images(model.cams, imgs)


class TestComposite:
    def test_transparent(self):
        color, w, t_end = composite(np.zeros(5), np.ones(5), np.ones((5, 3)))
        np.testing.assert_array_equal(color, 0)
        np.testing.assert_array_equal(w, 0)
        assert t_end == 1.0

    def test_half_opaque_sample(self):
        color, w, t_end = composite([math.log(2)], [1.0], [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(color, [0.5, 0, 0])
        assert w[0] == pytest.approx(0.5) and t_end == pytest.approx(0.5)

    def test_weights_partition_unity(self, rng):
        for _ in range(200):
            n = rng.integers(1, 60)
            sigma = rng.exponential(rng.uniform(0.01, 50), n)
            dt = rng.uniform(1e-4, 1, n)
            _, w, t_end = composite(sigma, dt, rng.random((n, 3)))
            assert np.all(w >= 0) and w.sum() <= 1 + 1e-12
            assert w.sum() + t_end == pytest.approx(1.0, abs=1e-6)

    def test_batched_matches_single(self, rng):
        counts = rng.integers(0, 20, 30)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        n = offsets[-1]
        sigma, dt, rgb = rng.exponential(2.0, n), rng.uniform(0.01, 0.5, n), rng.random((n, 3))
        out, t_end = composite_rays(offsets, sigma, dt, rgb)
        for r in range(30):
            s = slice(offsets[r], offsets[r + 1])
            c, _, te = composite(sigma[s], dt[s], rgb[s])
            np.testing.assert_allclose(out[r], c, atol=1e-12)
            assert t_end[r] == pytest.approx(te, abs=1e-12)

    def test_transmittance_converges_linearly(self):
        # sigma(t) = 1 + t sampled at left endpoints on [0, 2]; exact optical depth 4
        exact = math.exp(-4.0)
        errs = []
        for dt in (4e-3, 2e-3, 1e-3):
            t = np.arange(0, 2, dt)
            _, _, t_end = composite(1 + t, np.full(len(t), dt), np.zeros((len(t), 3)))
            errs.append(abs(t_end - exact) / exact)
        assert errs[-1] <= 0.01
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)

    def test_constant_segment_exact(self):
        _, _, t_end = composite(np.full(1000, 0.7), np.full(1000, 1e-3), np.zeros((1000, 3)))
        assert t_end == pytest.approx(math.exp(-0.7), rel=1e-12)


class TestLosses:
    def test_recon_at_target(self):
        c = np.array([0.2, 0.4, 0.9])
        assert recon_loss(c, c) == pytest.approx(0.01)
        np.testing.assert_array_equal(recon_loss_grad(c, c), 0)

    def test_recon_small_eps_is_abs(self):
        assert recon_loss([0.5, 0.5, 0.5], [0, 0, 0], eps=1e-12) == pytest.approx(0.5, abs=1e-3)

    def test_recon_gradient_fd(self, rng):
        c, g = rng.random((4, 3)), rng.random((4, 3))
        grad = recon_loss_grad(c, g)
        h = 1e-7
        for idx in np.ndindex(c.shape):
            cp, cm = c.copy(), c.copy()
            cp[idx] += h
            cm[idx] -= h
            assert (recon_loss(cp, g) - recon_loss(cm, g)) / (2 * h) == pytest.approx(grad[idx], rel=1e-6)

    def test_disparity_examples(self):
        assert disparity_loss([np.zeros(3)], [np.ones(3)]) == 0.0
        assert disparity_loss([np.array([1.0])], [np.array([2.0])]) == 0.25
        assert disparity_loss([], []) == 0.0

    def test_disparity_scaling(self, rng):
        w = [rng.random(5) for _ in range(4)]
        t = [rng.uniform(1, 5, 5) for _ in range(4)]
        base = disparity_loss(w, t)
        assert disparity_loss(w, [3.0 * x for x in t]) == pytest.approx(base / 9.0)

    def test_batch_disparity_matches_direct_formula(self, model, rng):
        o, d = generate_rays(model.cams[0])
        b = model.sampler.march(o[:20], d[:20], model.cams[0].near)
        weights = LossWeights(lambda_disp=1.0, lambda_tv=0.0)
        terms = batch_loss(model, b, d[:20], np.zeros((20, 3)), weights)
        sigma, rgb, _ = model.query(b, d[:20])
        ws, ts = [], []
        for r in range(b.n_rays):
            s = slice(b.offsets[r], b.offsets[r + 1])
            ws.append(composite(sigma[s], b.dt[s], rgb[s])[1])
            ts.append(b.t[s])
        assert terms.disp == pytest.approx(disparity_loss(ws, ts), rel=1e-6)

    def test_loss_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(eps=0.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_tv=-1.0)


class TestTv:
    def test_single_leaf_is_zero(self, model, rng):
        cams = model.cams[:1]
        m = Model(cams, ModelConfig(max_depth=0, n_per_axis=8, field=SMALL_FIELD))
        assert len(m.faces) == 0
        assert tv_loss(m, 100, rng) == 0.0

    def test_identical_leaves_give_zero(self, rng):
        m = small_model(warp="none")
        n = len(m.warps)
        m.field = RadianceField(SMALL_FIELD, n, seed=0, hash_params=[NodeHashParams.shared()] * n)
        m.field.params["table"][...] = rng.normal(size=m.field.params["table"].shape)
        assert len(m.faces) > 0
        assert tv_loss(m, 500, rng) == 0.0

    def test_positive_for_distinct_leaves(self, model, rng):
        assert tv_loss(model, 500, rng) > 0

    def test_faces_weighted_by_area(self, model):
        rng = np.random.default_rng(0)
        pts, wa, wb = model.faces.sample(rng, 20_000)
        big = np.argmax(model.faces.area)
        hit = np.mean((wa == model.faces.wa[big]) & (wb == model.faces.wb[big]))
        assert hit == pytest.approx(model.faces.area[big] / model.faces.area.sum(), abs=0.01)

    def test_gradient_descent_lowers_tv(self):
        m = small_model()
        table = m.field.params["table"]
        table[...] = np.random.default_rng(0).normal(scale=0.1, size=table.shape)
        from perspwarp.renderer import Adam

        adam = Adam({"table": table})
        before = tv_loss(m, 4096, np.random.default_rng(7))
        rng = np.random.default_rng(1)
        for _ in range(200):
            g = np.zeros_like(table)
            tv_loss(m, 1024, rng, g)
            adam.step({"table": table}, {"table": g}, 1e-2)
        assert tv_loss(m, 4096, np.random.default_rng(7)) < before

    def test_gradient_matches_fd(self, micro_model):
        m = micro_model
        table = m.field.params["table"]
        table[...] = np.random.default_rng(2).normal(size=table.shape)
        g = np.zeros_like(table)
        tv_loss(m, 16, np.random.default_rng(3), g)
        h = 1e-6
        for idx in list(zip(*np.nonzero(g)))[:60]:
            old = table[idx]
            table[idx] = old + h
            up = tv_loss(m, 16, np.random.default_rng(3))
            table[idx] = old - h
            dn = tv_loss(m, 16, np.random.default_rng(3))
            table[idx] = old
            assert (up - dn) / (2 * h) == pytest.approx(g[idx], rel=1e-5, abs=1e-9)


class TestSchedule:
    def test_warmup_midpoint(self):
        assert learning_rate(500, TrainConfig()) == pytest.approx(0.05)

    def test_final_step(self):
        cfg = TrainConfig()
        assert learning_rate(cfg.steps, cfg) == pytest.approx(1e-2)

    def test_peak_after_warmup_and_monotone_decay(self):
        cfg = TrainConfig()
        assert learning_rate(1000, cfg) == pytest.approx(0.1)
        lrs = [learning_rate(s, cfg) for s in range(1000, cfg.steps + 1, 100)]
        assert np.all(np.diff(lrs) <= 0)

    def test_starts_at_zero(self):
        assert learning_rate(0, TrainConfig()) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            ModelConfig(warp="ndc")


class TestTraining:
    def test_batch_respects_point_budget(self, model):
        tr = Trainer(model, toy_pool(model), TrainConfig(steps=5, point_batch=2000, seed=3))
        batch, idx = tr.draw_batch()
        assert 0 < len(batch) <= 2000
        assert len(idx) == batch.n_rays

    def test_few_steps_reduce_loss(self):
        m = small_model()
        tr = Trainer(m, toy_pool(m), TrainConfig(steps=60, point_batch=4000, lr_peak=1e-2, lr_final=1e-3,
                                                 lr_warmup_steps=5, tv_points=64))
        log = tr.train()
        assert np.mean([r["recon"] for r in log[-10:]]) < np.mean([r["recon"] for r in log[:5]])

    def test_nan_is_a_hard_error(self):
        m = small_model()
        m.field.params["d_w0"][0, 0] = np.nan
        tr = Trainer(m, toy_pool(m), TrainConfig(steps=3, point_batch=500))
        with pytest.raises(NumericError, match="step 1"):
            tr.step()

    def test_training_is_deterministic(self):
        logs = []
        for _ in range(2):
            m = small_model()
            tr = Trainer(m, toy_pool(m), TrainConfig(steps=5, point_batch=1000, tv_points=32, seed=4))
            logs.append(tr.train())
        for a, b in zip(*logs):
            for k in ("recon", "disp", "tv", "lr"):
                assert a[k] == pytest.approx(b[k], abs=1e-6)


class TestRendering:
    def test_zero_field_renders_uniform_image(self):
        m = small_model(max_samples=1024)
        for p in m.field.params.values():
            p[...] = 0
        img = render_image(m, m.cams[1])
        assert img.shape == (m.cams[1].height, m.cams[1].width, 3)
        assert np.all(np.abs(img - img.mean()) <= 0.1)

    def test_render_is_deterministic(self, model):
        a = render_image(model, model.cams[0])
        b = render_image(model, model.cams[0])
        assert a.tobytes() == b.tobytes()

    def test_chunking_does_not_change_image(self, model):
        np.testing.assert_array_equal(render_image(model, model.cams[2], chunk=7),
                                      render_image(model, model.cams[2], chunk=4096))

    def test_values_in_unit_range(self, model):
        img = render_image(model, model.cams[3])
        assert img.min() >= 0 and img.max() <= 1


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, step=42, extra={"note": "x"})
        back, header = load_checkpoint(path)
        assert header["step"] == 42 and header["extra"] == {"note": "x"}
        assert read_checkpoint_header(path)["step"] == 42
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(back.field.params[k], model.field.params[k])
        assert back.config == model.config
        assert len(back.warps) == len(model.warps)
        assert render_image(back, model.cams[0]).tobytes() == render_image(model, model.cams[0]).tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(p)

    def test_rejects_truncated(self, model, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, model)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(p)


def full_loss(m: Model, batch, dirs, colors, weights, grads=None) -> float:
    return batch_loss(m, batch, dirs, colors, weights, np.random.default_rng(11), 8, grads).total


class TestGradient:
    def test_total_loss_matches_fd_on_all_parameters(self, micro_model):
        m = micro_model
        rng = np.random.default_rng(5)
        for v in m.field.params.values():
            v[...] = rng.normal(scale=0.5, size=v.shape)
        m.field.params["d_b1"][0] = 0.0
        o, d = generate_rays(m.cams[0])
        pick = rng.choice(len(o), 4, replace=False)
        batch = m.sampler.march(o[pick], d[pick], m.cams[0].near)
        colors = rng.random((4, 3))
        weights = LossWeights(lambda_disp=0.5, lambda_tv=0.5)
        grads = m.field.zero_grads()
        full_loss(m, batch, d[pick], colors, weights, grads)
        h = 1e-6
        for name in PARAM_NAMES:
            p = m.field.params[name]
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = full_loss(m, batch, d[pick], colors, weights)
                p[idx] = old - h
                dn = full_loss(m, batch, d[pick], colors, weights)
                p[idx] = old
                assert (up - dn) / (2 * h) == pytest.approx(grads[name][idx], rel=1e-3, abs=1e-8), (name, idx)


class TestProperties:
    @given(sigma=st.lists(st.floats(0, 1e3), min_size=1, max_size=40), seed=st.integers(0, 2**31 - 1))
    def test_composite_conserves_energy(self, sigma, seed):
        rng = np.random.default_rng(seed)
        dt = rng.uniform(1e-4, 2.0, len(sigma))
        color, w, t_end = composite(sigma, dt, rng.random((len(sigma), 3)))
        assert np.all(w >= 0)
        assert w.sum() + t_end == pytest.approx(1.0, abs=1e-6)
        assert np.all(color <= 1 + 1e-9)

    @given(step=st.integers(0, 40000), warm=st.integers(1, 5000))
    def test_lr_bounded(self, step, warm):
        cfg = TrainConfig(steps=20000, lr_warmup_steps=warm)
        assert 0 <= learning_rate(step, cfg) <= cfg.lr_peak + 1e-15

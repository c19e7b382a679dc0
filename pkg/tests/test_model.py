import numpy as np
import pytest

from battfault import model
from battfault.model import (
    ModelConfig,
    cls_embedding,
    embed,
    encode,
    encode_batch,
    init_params,
    msm_backward,
    msm_forward,
    msm_loss_value,
    param_shapes,
    reconstruct,
)
from battfault.numcore import DimensionError, SeededRng


@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig(D=3, H=16, L=2, A=2, FF=32, M_max=9, dropout_rate=0.1, K=2)
    params = init_params(cfg, SeededRng(1, ("init",)))
    return cfg, params


def random_instance(cfg, seed, B=1):
    rng = SeededRng(seed)
    M = cfg.M_max - 1
    X = rng.spawn("x").normal((B, M, cfg.D))
    mask = np.zeros((B, M, cfg.D))
    flat = rng.spawn("mask").choice(M * cfg.D, size=max(1, M * cfg.D // 5))
    for b in range(B):
        sel = rng.spawn("mask", b).choice(M * cfg.D, size=max(1, M * cfg.D // 5))
        mask[b].flat[np.asarray(sel, dtype=int)] = 1.0
    del flat
    return X * (1 - mask), X, mask


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(D=3, H=15, L=1, A=2, FF=8, M_max=4)  # H not divisible by A

    def test_desk_default(self):
        cfg = ModelConfig.desk_default()
        assert (cfg.L, cfg.H, cfg.A) == (2, 64, 4)

    def test_full_scale_dimensions(self):
        cfg = ModelConfig.full_scale()
        assert (cfg.L, cfg.H, cfg.A, cfg.FF) == (12, 768, 12, 3072)

    def test_param_shapes_cover_init(self, tiny):
        cfg, params = tiny
        shapes = param_shapes(cfg)
        assert set(shapes) == set(params.arrays)
        for name, shape in shapes.items():
            assert params.arrays[name].shape == shape


class TestForwardShapes:
    def test_embed_prepends_cls(self, tiny):
        cfg, params = tiny
        x = SeededRng(2).normal((8, cfg.D))
        E = embed(x, params, cfg)
        assert E.shape == (9, cfg.H)

    def test_encode_and_reconstruct(self, tiny):
        cfg, params = tiny
        x = SeededRng(3).normal((8, cfg.D))
        Hs = encode(embed(x, params, cfg), params, cfg)
        assert Hs.shape == (9, cfg.H)
        recon = reconstruct(Hs, params)
        assert recon.shape == (8, cfg.D)

    def test_sequence_too_long_rejected(self, tiny):
        cfg, params = tiny
        x = SeededRng(4).normal((cfg.M_max, cfg.D))  # M_max rows + CLS overflows
        with pytest.raises(DimensionError):
            embed(x, params, cfg)

    def test_encode_batch_matches_single(self, tiny):
        cfg, params = tiny
        X = SeededRng(5).normal((4, 8, cfg.D))
        batched = encode_batch(X, params, cfg)
        for b in range(4):
            np.testing.assert_allclose(batched[b], cls_embedding(X[b], params, cfg),
                                       atol=1e-12)

    def test_eval_mode_deterministic(self, tiny):
        cfg, params = tiny
        x = SeededRng(6).normal((8, cfg.D))
        np.testing.assert_array_equal(cls_embedding(x, params, cfg),
                                      cls_embedding(x, params, cfg))


class TestMsmLoss:
    def test_matches_naive_double_loop(self, tiny):
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 7)
        loss = msm_loss_value(params, cfg, Xc, X, mask)
        E, _ = model._embed_fwd(Xc, params, cfg, False, None)
        Hs, _ = model._encoder_fwd(E, params, cfg)
        recon = model._head_fwd(Hs, params)[0]
        total, count = 0.0, 0
        M, D = mask.shape[1:]
        for t in range(M):
            for d in range(D):
                if mask[0, t, d]:
                    total += (recon[t, d] - X[0, t, d]) ** 2
                    count += 1
        assert abs(loss - total / count) < 1e-12

    def test_unmasked_cells_do_not_contribute(self, tiny):
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 8)
        base = msm_loss_value(params, cfg, Xc, X, mask)
        X2 = X + 100.0 * (1 - mask)  # perturb targets only where unmasked
        assert msm_loss_value(params, cfg, Xc, X2, mask) == base

    def test_empty_mask_rejected(self, tiny):
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 9)
        with pytest.raises(ValueError):
            msm_forward(params, cfg, Xc, X, np.zeros_like(mask))

    def test_batch_loss_pools_masked_cells(self, tiny):
        # batch loss = total masked SE / total masked count, not a mean of means
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 10, B=3)
        batch_loss, _ = msm_forward(params, cfg, Xc, X, mask)
        se = 0.0
        for b in range(3):
            lb = msm_loss_value(params, cfg, Xc[b:b + 1], X[b:b + 1], mask[b:b + 1])
            se += lb * mask[b].sum()
        assert abs(batch_loss - se / mask.sum()) < 1e-12


class TestBackward:
    def test_grads_cover_all_params_and_are_finite(self, tiny):
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 11, B=2)
        _, cache = msm_forward(params, cfg, Xc, X, mask)
        grads = msm_backward(cache, params, cfg)
        assert set(grads) == set(param_shapes(cfg))
        for name, g in grads.items():
            assert g.shape == params.arrays[name].shape
            assert np.isfinite(g).all(), name

    def test_bk_gradient_vanishes(self, tiny):
        # softmax is shift-invariant, so key biases get zero gradient up to
        # float cancellation residue
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 12)
        _, cache = msm_forward(params, cfg, Xc, X, mask)
        grads = msm_backward(cache, params, cfg)
        for i in range(cfg.L):
            np.testing.assert_allclose(grads[f"layer{i}.bk"], 0.0, atol=1e-18)

    def test_gradient_check_tiny_config(self, tiny):
        cfg, params = tiny
        Xc, X, mask = random_instance(cfg, 13)
        report = model.msm_grad_check(params, cfg, Xc[0], X[0], mask[0])
        assert report.ok, report.failed


class TestParamCount:
    def test_desk_count_matches_shapes(self, tiny):
        cfg, params = tiny
        expected = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
        assert params.param_count() == expected

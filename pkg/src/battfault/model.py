"""Encoder network: time-series embedding, transformer stack, reconstruction head.

Layout: an input snippet is an (M, D) channel matrix. A learned summary vector
is prepended at position 0, data rows occupy positions 1..M. The stack is
post-norm (residual, then layer norm), feed-forward uses tanh-GELU, positions
are learned absolute embeddings. Backward passes are hand-written per block;
the architecture is static so no general autodiff tape is needed.

All forward/backward internals are batched over a leading axis; the public
single-snippet operations wrap a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    SeededRng,
    DimensionError,
    dropout_mask,
    gelu,
    gelu_fwd,
    gelu_grad,
    layer_norm_bwd,
    layer_norm_fwd,
    softmax_bwd,
    softmax_rows,
)

INIT_STD = 0.02
LN_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. H must divide evenly into A heads."""

    D: int = 3           # input channel count
    H: int = 64          # hidden dimension
    L: int = 2           # encoder layers
    A: int = 4           # attention heads
    FF: int = 256        # feed-forward inner dimension
    M_max: int = 129     # maximum sequence length including the summary row
    dropout_rate: float = 0.1
    K: int = 2           # static metadata dimension

    def __post_init__(self):
        if self.H % self.A != 0:
            raise ValueError(f"H={self.H} not divisible by A={self.A}")
        if self.FF < self.H:
            raise ValueError(f"FF={self.FF} must be >= H={self.H}")
        if self.M_max < 2:
            raise ValueError("M_max must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0,1)")
        if min(self.D, self.H, self.A) < 1 or self.L < 0 or self.K < 0:
            raise ValueError("invalid dimension in config")

    @property
    def head_dim(self) -> int:
        return self.H // self.A

    @classmethod
    def desk_default(cls) -> "ModelConfig":
        return cls(D=3, H=64, L=2, A=4, FF=256, M_max=129, dropout_rate=0.1, K=2)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        # 12x768 stack; the 32768-row positional table stands in for the
        # vocabulary table a text model would carry, bringing the total
        # parameter count to ~110M at the advertised capacity.
        return cls(D=3, H=768, L=12, A=12, FF=3072, M_max=32768, dropout_rate=0.1, K=2)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map of every learnable array."""
    shapes = {
        "embed.W_e": (cfg.D, cfg.H),
        "embed.b_e": (cfg.H,),
        "embed.pos": (cfg.M_max, cfg.H),
        "embed.cls": (cfg.H,),
        "embed.ln_g": (cfg.H,),
        "embed.ln_b": (cfg.H,),
    }
    for i in range(cfg.L):
        p = f"layer{i}."
        shapes[p + "Wq"] = (cfg.H, cfg.H)
        shapes[p + "bq"] = (cfg.H,)
        shapes[p + "Wk"] = (cfg.H, cfg.H)
        shapes[p + "bk"] = (cfg.H,)
        shapes[p + "Wv"] = (cfg.H, cfg.H)
        shapes[p + "bv"] = (cfg.H,)
        shapes[p + "Wo"] = (cfg.H, cfg.H)
        shapes[p + "bo"] = (cfg.H,)
        shapes[p + "ln1_g"] = (cfg.H,)
        shapes[p + "ln1_b"] = (cfg.H,)
        shapes[p + "W1"] = (cfg.H, cfg.FF)
        shapes[p + "b1"] = (cfg.FF,)
        shapes[p + "W2"] = (cfg.FF, cfg.H)
        shapes[p + "b2"] = (cfg.H,)
        shapes[p + "ln2_g"] = (cfg.H,)
        shapes[p + "ln2_b"] = (cfg.H,)
    shapes["head.W"] = (cfg.H, cfg.D)
    shapes["head.b"] = (cfg.D,)
    return shapes


@dataclass
class ModelParams:
    """All learnable arrays, keyed by name; shapes fixed by the config."""

    cfg: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if set(self.arrays) != set(expected):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.arrays[name].shape} != expected {shape}")

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})


def init_params(cfg: ModelConfig, rng: SeededRng) -> ModelParams:
    """Random init: Normal(0, 0.02^2) weights, zero biases, unit layer-norm gains."""
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf.startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.spawn(name).normal(shape, std=INIT_STD)
    return ModelParams(cfg, arrays)


# ---------------------------------------------------------------------------
# Forward passes (batched, with caches for backward)
# ---------------------------------------------------------------------------


def _embed_fwd(X: np.ndarray, params: ModelParams, cfg: ModelConfig,
               train_mode: bool = False, rng: SeededRng | None = None):
    """(B, M, D) -> (B, M+1, H) with cache. Row 0 is the summary position."""
    a = params.arrays
    B, M, D = X.shape
    if D != cfg.D:
        raise DimensionError(f"input has D={D}, config has D={cfg.D}")
    if M + 1 > cfg.M_max:
        raise DimensionError(f"sequence length {M}+1 exceeds M_max={cfg.M_max}")
    proj = X @ a["embed.W_e"] + a["embed.b_e"]
    pre = np.empty((B, M + 1, cfg.H))
    pre[:, 0, :] = a["embed.cls"] + a["embed.pos"][0]
    pre[:, 1:, :] = proj + a["embed.pos"][1:M + 1]
    normed, ln_cache = layer_norm_fwd(pre, a["embed.ln_g"], a["embed.ln_b"], LN_EPS)
    if train_mode and cfg.dropout_rate > 0.0:
        mask = dropout_mask(normed.shape, cfg.dropout_rate, rng.spawn("embed_dropout"))
        out = normed * mask
    else:
        mask = None
        out = normed
    return out, (X, ln_cache, mask)


def _outer_sum(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """sum over (batch, position) of outer products: (B,T,I),(B,T,J) -> (I,J)."""
    B, T = X.shape[:2]
    return X.reshape(B * T, -1).T @ Y.reshape(B * T, -1)


def _attention_fwd(X: np.ndarray, a: dict, prefix: str, cfg: ModelConfig):
    B, T, H = X.shape
    A, dh = cfg.A, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)

    def heads(Z):
        return Z.reshape(B, T, A, dh).transpose(0, 2, 1, 3)

    Q = heads(X @ a[prefix + "Wq"] + a[prefix + "bq"])
    K = heads(X @ a[prefix + "Wk"] + a[prefix + "bk"])
    V = heads(X @ a[prefix + "Wv"] + a[prefix + "bv"])
    scores = (Q @ K.transpose(0, 1, 3, 2)) * scale
    probs = softmax_rows(scores)
    context = (probs @ V).transpose(0, 2, 1, 3).reshape(B, T, H)
    out = context @ a[prefix + "Wo"] + a[prefix + "bo"]
    return out, (X, Q, K, V, probs, context, scale)


def _attention_bwd(dout: np.ndarray, cache, a: dict, prefix: str, cfg: ModelConfig, grads: dict):
    X, Q, K, V, probs, context, scale = cache
    B, T, H = X.shape
    A, dh = cfg.A, cfg.head_dim

    grads[prefix + "Wo"] += _outer_sum(context, dout)
    grads[prefix + "bo"] += dout.sum(axis=(0, 1))
    dcontext = (dout @ a[prefix + "Wo"].T).reshape(B, T, A, dh).transpose(0, 2, 1, 3)

    dprobs = dcontext @ V.transpose(0, 1, 3, 2)
    dV = probs.transpose(0, 1, 3, 2) @ dcontext
    dscores = softmax_bwd(dprobs, probs) * scale
    dQ = dscores @ K
    dK = dscores.transpose(0, 1, 3, 2) @ Q

    def unheads(Z):
        return Z.transpose(0, 2, 1, 3).reshape(B, T, H)

    dX = np.zeros_like(X)
    for dZ, w in ((dQ, "Wq"), (dK, "Wk"), (dV, "Wv")):
        flat = unheads(dZ)
        grads[prefix + w] += _outer_sum(X, flat)
        grads[prefix + w.replace("W", "b")] += flat.sum(axis=(0, 1))
        dX += flat @ a[prefix + w].T
    return dX


def _encoder_fwd(E: np.ndarray, params: ModelParams, cfg: ModelConfig):
    """(B, T, H) -> (B, T, H) through L post-norm layers, with per-layer caches."""
    a = params.arrays
    X = E
    caches = []
    for i in range(cfg.L):
        p = f"layer{i}."
        attn_out, attn_cache = _attention_fwd(X, a, p, cfg)
        R1 = X + attn_out
        X1, ln1_cache = layer_norm_fwd(R1, a[p + "ln1_g"], a[p + "ln1_b"], LN_EPS)
        F1 = X1 @ a[p + "W1"] + a[p + "b1"]
        G, tanh_term = gelu_fwd(F1)
        F2 = G @ a[p + "W2"] + a[p + "b2"]
        R2 = X1 + F2
        X2, ln2_cache = layer_norm_fwd(R2, a[p + "ln2_g"], a[p + "ln2_b"], LN_EPS)
        caches.append((attn_cache, ln1_cache, X1, F1, G, tanh_term, ln2_cache))
        X = X2
    return X, caches


def _encoder_bwd(dX: np.ndarray, caches, params: ModelParams, cfg: ModelConfig, grads: dict):
    a = params.arrays
    for i in reversed(range(cfg.L)):
        p = f"layer{i}."
        attn_cache, ln1_cache, X1, F1, G, tanh_term, ln2_cache = caches[i]

        dR2, dg, db = layer_norm_bwd(dX, ln2_cache)
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        # R2 = X1 + FFN(X1)
        dF2 = dR2
        grads[p + "W2"] += _outer_sum(G, dF2)
        grads[p + "b2"] += dF2.sum(axis=(0, 1))
        dG = dF2 @ a[p + "W2"].T
        dF1 = dG * gelu_grad(F1, tanh_term)
        grads[p + "W1"] += _outer_sum(X1, dF1)
        grads[p + "b1"] += dF1.sum(axis=(0, 1))
        dX1 = dR2 + dF1 @ a[p + "W1"].T

        dR1, dg, db = layer_norm_bwd(dX1, ln1_cache)
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        # R1 = X + Attn(X)
        dX = dR1 + _attention_bwd(dR1, attn_cache, a, p, cfg, grads)
    return dX


def _head_fwd(Hs: np.ndarray, params: ModelParams):
    """Reconstruct data positions: (B, M+1, H) -> (B, M, D). Row 0 excluded."""
    a = params.arrays
    return Hs[:, 1:, :] @ a["head.W"] + a["head.b"]


# ---------------------------------------------------------------------------
# Public single-snippet operations
# ---------------------------------------------------------------------------


def embed(channels: np.ndarray, params: ModelParams, cfg: ModelConfig,
          train_mode: bool = False, rng: SeededRng | None = None) -> np.ndarray:
    """(M, D) channel matrix -> (M+1, H) embedded sequence."""
    out, _ = _embed_fwd(channels[None, :, :], params, cfg, train_mode, rng)
    return out[0]


def encode(E: np.ndarray, params: ModelParams, cfg: ModelConfig,
           train_mode: bool = False, rng: SeededRng | None = None) -> np.ndarray:
    """(M+1, H) -> (M+1, H) through the transformer stack (dropout-free)."""
    out, _ = _encoder_fwd(E[None, :, :], params, cfg)
    return out[0]


def reconstruct(Hs: np.ndarray, params: ModelParams) -> np.ndarray:
    """(M+1, H) encoded sequence -> (M, D) reconstructed channels."""
    return _head_fwd(Hs[None, :, :], params)[0]


def cls_embedding(channels: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Whole-sequence summary vector: encoder output at position 0, eval mode."""
    E = embed(channels, params, cfg, train_mode=False)
    return encode(E, params, cfg)[0]


def encode_batch(X: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode summary vectors for a batch: (B, M, D) -> (B, H)."""
    E, _ = _embed_fwd(X, params, cfg, train_mode=False)
    Hs, _ = _encoder_fwd(E, params, cfg)
    return Hs[:, 0, :]


# ---------------------------------------------------------------------------
# Masked-reconstruction loss with full backward
# ---------------------------------------------------------------------------


def msm_forward(params: ModelParams, cfg: ModelConfig, X_corrupt: np.ndarray,
                X_target: np.ndarray, masks: np.ndarray,
                train_mode: bool = False, rng: SeededRng | None = None):
    """Masked-MSE forward over a batch; returns (loss, cache).

    X_corrupt / X_target / masks are (B, M, D); loss is total masked squared
    error over the batch divided by the total masked cell count.
    """
    total_masked = masks.sum()
    if total_masked < 1:
        raise ValueError("mask selects no cells")
    E, embed_cache = _embed_fwd(X_corrupt, params, cfg, train_mode, rng)
    Hs, enc_caches = _encoder_fwd(E, params, cfg)
    recon = _head_fwd(Hs, params)
    diff = recon - X_target
    loss = float((masks * diff * diff).sum() / total_masked)
    return loss, (embed_cache, enc_caches, Hs, diff, masks, total_masked)


def msm_backward(cache, params: ModelParams, cfg: ModelConfig) -> dict:
    """Gradients of the masked-MSE loss w.r.t. every parameter array."""
    embed_cache, enc_caches, Hs, diff, masks, total_masked = cache
    a = params.arrays
    grads = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}

    drecon = 2.0 * masks * diff / total_masked
    grads["head.W"] += _outer_sum(np.ascontiguousarray(Hs[:, 1:, :]), drecon)
    grads["head.b"] += drecon.sum(axis=(0, 1))
    dHs = np.zeros_like(Hs)
    dHs[:, 1:, :] = drecon @ a["head.W"].T

    dE = _encoder_bwd(dHs, enc_caches, params, cfg, grads)

    X, ln_cache, drop_mask = embed_cache
    if drop_mask is not None:
        dE = dE * drop_mask
    dpre, dg, db = layer_norm_bwd(dE, ln_cache)
    grads["embed.ln_g"] += dg
    grads["embed.ln_b"] += db
    M = X.shape[1]
    grads["embed.cls"] += dpre[:, 0, :].sum(axis=0)
    grads["embed.pos"][0] += dpre[:, 0, :].sum(axis=0)
    grads["embed.pos"][1:M + 1] += dpre[:, 1:, :].sum(axis=0)
    grads["embed.W_e"] += _outer_sum(X, np.ascontiguousarray(dpre[:, 1:, :]))
    grads["embed.b_e"] += dpre[:, 1:, :].sum(axis=(0, 1))
    return grads


def msm_loss_value(params: ModelParams, cfg: ModelConfig, X_corrupt: np.ndarray,
                   X_target: np.ndarray, masks: np.ndarray) -> float:
    """Deterministic (eval-mode) loss only; the finite-difference oracle target."""
    loss, _ = msm_forward(params, cfg, X_corrupt, X_target, masks, train_mode=False)
    return loss


# ---------------------------------------------------------------------------
# Batched perturbation evaluation for full-model gradient checking
# ---------------------------------------------------------------------------
#
# Evaluating the loss once per perturbed scalar is Python-overhead bound, so
# the checker stacks P perturbed copies of ONE weight array along a leading
# axis and runs a single vectorized forward; all other arrays broadcast.


def _vec(w: np.ndarray) -> np.ndarray:
    # lift a possibly P-stacked vector for broadcasting against (P, T, H)
    return w if w.ndim == 1 else w[:, None, :]


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one flat GEMM when the weight is shared across variants
    if w.ndim == 2:
        lead = x.shape[:-1]
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(lead + (w.shape[1],))
    return np.matmul(x, w)


def _loss_many(arrays: dict, cfg: ModelConfig, Xb: np.ndarray,
               X_target: np.ndarray, mask: np.ndarray,
               perturbed: str = "") -> np.ndarray:
    """Eval-mode masked loss for P parameter variants differing in one array.

    Xb is (P, M, D) (a broadcast view is fine). Stages upstream of the
    perturbed array are identical across variants and computed with P=1.
    """
    a = arrays
    P_full, M, _ = Xb.shape
    T = M + 1
    A, dh, H = cfg.A, cfg.head_dim, cfg.H
    scale = 1.0 / np.sqrt(dh)

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return _vec(g) * ((x - mu) / np.sqrt(var + LN_EPS)) + _vec(b)

    pos = a["embed.pos"]
    Xin = np.ascontiguousarray(Xb) if perturbed == "embed.W_e" else Xb[:1]
    proj = _mm(Xin, a["embed.W_e"]) + _vec(a["embed.b_e"])
    data = proj + (pos[1:M + 1] if pos.ndim == 2 else pos[:, 1:M + 1])
    row0 = a["embed.cls"] + (pos[0] if pos.ndim == 2 else pos[:, 0])
    row0 = np.atleast_2d(row0)[:, None, :]
    q = max(data.shape[0], row0.shape[0])
    pre = np.concatenate([np.broadcast_to(row0, (q, 1, H)),
                          np.broadcast_to(data, (q, M, H))], axis=1)
    X = ln(pre, a["embed.ln_g"], a["embed.ln_b"])
    lifted = X.shape[0] == P_full and P_full > 1

    for i in range(cfg.L):
        p = f"layer{i}."
        if not lifted and perturbed.startswith(p):
            lifted = True  # this layer's weights vary; outputs fan out to P
        P = P_full if lifted else 1

        def heads(Z):
            return np.broadcast_to(Z, (P, T, H)).reshape(P, T, A, dh).transpose(0, 2, 1, 3)

        Q = heads(_mm(X, a[p + "Wq"]) + _vec(a[p + "bq"]))
        K = heads(_mm(X, a[p + "Wk"]) + _vec(a[p + "bk"]))
        V = heads(_mm(X, a[p + "Wv"]) + _vec(a[p + "bv"]))
        probs = softmax_rows((Q @ K.transpose(0, 1, 3, 2)) * scale)
        context = (probs @ V).transpose(0, 2, 1, 3).reshape(P, T, H)
        attn = _mm(context, a[p + "Wo"]) + _vec(a[p + "bo"])
        X1 = ln(X + attn, a[p + "ln1_g"], a[p + "ln1_b"])
        F2 = _mm(gelu(_mm(X1, a[p + "W1"]) + _vec(a[p + "b1"])),
                 a[p + "W2"]) + _vec(a[p + "b2"])
        X = ln(X1 + F2, a[p + "ln2_g"], a[p + "ln2_b"])

    recon = _mm(X[:, 1:, :], a["head.W"]) + _vec(a["head.b"])
    diff = recon - X_target
    losses = (mask * diff * diff).sum(axis=(1, 2)) / mask.sum()
    return np.broadcast_to(losses, (P_full,)) if losses.shape[0] == 1 else losses


def msm_grad_check(params: ModelParams, cfg: ModelConfig, X_corrupt: np.ndarray,
                   X_target: np.ndarray, mask: np.ndarray,
                   step: float = 5e-4, tol: float = 1e-4, chunk: int = 192):
    """Check analytic gradients of the masked loss against central differences.

    Uses the 4th-order central stencil (-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h
    so one step size covers both high-curvature entries (truncation ~ h^4) and
    exactly-zero gradients (rounding noise ~ 1/h). Relative error per entry is
    |a - n| / max(|a|, |n|, 1e-8); returns a numcore.GradCheckReport.
    """
    from .numcore import GradCheckReport

    if X_corrupt.ndim == 2:
        X_corrupt = X_corrupt[None]
        X_target = X_target[None]
        mask = mask[None]
    loss, cache = msm_forward(params, cfg, X_corrupt, X_target, mask)
    analytic = msm_backward(cache, params, cfg)

    stencil = np.array([2.0, 1.0, -1.0, -2.0]) * step
    weights = np.array([-1.0, 8.0, -8.0, 1.0]) / (12.0 * step)
    report = GradCheckReport(tol=tol)
    base_arrays = params.arrays
    mask_b = mask[0]
    target_b = X_target[0]

    for name, base in base_arrays.items():
        grad_flat = analytic[name].reshape(-1)
        n = base.size
        worst = 0.0
        for start in range(0, n, chunk):
            idx = np.arange(start, min(start + chunk, n))
            m = idx.size
            P = 4 * m
            stacked = np.broadcast_to(base, (P,) + base.shape).copy()
            stacked.reshape(P, -1)[np.arange(P), np.repeat(idx, 4)] += np.tile(stencil, m)
            arrays = dict(base_arrays)
            arrays[name] = stacked
            Xb = np.broadcast_to(X_corrupt[0], (P,) + X_corrupt[0].shape)
            losses = _loss_many(arrays, cfg, Xb, target_b, mask_b, perturbed=name)
            if not np.all(np.isfinite(losses)):
                raise ValueError(f"non-finite loss while perturbing parameter {name!r}")
            numeric = (losses.reshape(m, 4) * weights).sum(axis=1)
            a_vals = grad_flat[idx]
            denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(numeric)), 1e-8)
            worst = max(worst, float((np.abs(a_vals - numeric) / denom).max()))
        report.rel_error[name] = worst
        if worst > tol:
            report.failed.append(name)
    return report

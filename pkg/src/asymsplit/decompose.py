"""Asymmetric decomposition of feature tensors.

Splits a ``c x h x w`` activation into a low-dimensional main part -- the
top-r principal channels restricted to low spatial frequencies -- and a
full-resolution residual carrying everything the main part discards.  The
residual is l2-clipped so that downstream noise calibration can treat its
norm as a fixed sensitivity bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SvdFactors, as_tensor3, dct_block_forward, idct_block, svd


@dataclass(frozen=True)
class DecompositionConfig:
    """Decomposition knobs: channel rank, DCT block sizes, clipping scale.

    r       -- number of principal channels kept in the main part (>= 1)
    t       -- DCT source block size (must divide h and w)
    t_prime -- kept low-frequency block size, 1 <= t_prime <= t
    C       -- l2 clipping scale for the residual, > 0
    """

    r: int
    t: int
    t_prime: int
    C: float = 1.0

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        if not 1 <= self.t_prime <= self.t:
            raise ValueError(
                f"t_prime must satisfy 1 <= t_prime <= t, got t_prime={self.t_prime} t={self.t}"
            )
        if not (np.isfinite(self.C) and self.C > 0):
            raise ValueError(f"C must be positive and finite, got {self.C}")

    def check_shape(self, shape) -> None:
        c, h, w = shape
        if self.r > c:
            raise ValueError(f"r={self.r} exceeds channel count c={c}")
        if h % self.t or w % self.t:
            raise ValueError(
                f"block size t={self.t} must divide spatial dims ({h}, {w})"
            )

    def main_shape(self, shape) -> tuple[int, int, int]:
        """Shape of ir_main for an input of the given shape."""
        c, h, w = shape
        return (c, (h // self.t) * self.t_prime, (w // self.t) * self.t_prime)


@dataclass
class DecompositionOutput:
    ir_main: np.ndarray     # c x (h/t)t' x (w/t)t'
    ir_res_raw: np.ndarray  # c x h x w, unclipped
    ir_res: np.ndarray      # c x h x w, l2 norm <= C
    factors: SvdFactors     # channel-flattened SVD of the input
    dct_coeffs: np.ndarray  # r x h x w blockwise coefficients of the principal channels


def _lowfreq_mask(h: int, w: int, t: int, t_prime: int) -> np.ndarray:
    """Boolean (h, w) mask of the top-left t' x t' corner of every t-block."""
    rows = (np.arange(h) % t) < t_prime
    cols = (np.arange(w) % t) < t_prime
    return rows[:, None] & cols[None, :]


def normalize_residual(ir_res_raw, C: float) -> np.ndarray:
    """Scale the residual into the l2 ball of radius C: x / max(1, |x|/C)."""
    if not (np.isfinite(C) and C > 0):
        raise ValueError(f"C must be positive and finite, got {C}")
    x = np.asarray(ir_res_raw, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    return x / max(1.0, norm / C)


def decompose(x, cfg: DecompositionConfig) -> DecompositionOutput:
    """Split x into the rank-r low-frequency main part and the residual.

    The channel-flattened (c, h*w) matrix is factored by SVD; the top-r
    right singular vectors are the principal channels.  Each is pushed
    through a blockwise DCT, and only the t' x t' low-frequency corner of
    every t-block survives into ir_main (inverted at reduced resolution).
    The residual collects the trailing singular directions plus the
    discarded high-frequency content of the principal channels, both at
    full resolution, so that the split is exactly additive.
    """
    x = as_tensor3(x)
    cfg.check_shape(x.shape)
    c, h, w = x.shape
    t, tp = cfg.t, cfg.t_prime

    factors = svd(x.reshape(c, h * w))
    u, s, vt = factors.left_vectors, factors.singular_values, factors.right_vectors
    r = min(cfg.r, s.size)

    principal = vt[:r].reshape(r, h, w)
    coeffs = dct_block_forward(principal, t)
    v_lf = idct_block(coeffs, t, tp)
    scaled_u = u[:, :r] * s[:r]
    ir_main = np.einsum("ci,i...->c...", scaled_u, v_lf, optimize=True)

    svd_res = ((u[:, r:] * s[r:]) @ vt[r:]).reshape(c, h, w)
    hf_coeffs = coeffs * ~_lowfreq_mask(h, w, t, tp)
    v_hf = idct_block(hf_coeffs, t, t)
    dct_res = np.einsum("ci,i...->c...", scaled_u, v_hf, optimize=True)
    raw = svd_res + dct_res

    return DecompositionOutput(
        ir_main=ir_main,
        ir_res_raw=raw,
        ir_res=normalize_residual(raw, cfg.C),
        factors=factors,
        dct_coeffs=coeffs,
    )


def _channel_basis_batch(flat: np.ndarray, r: int) -> np.ndarray:
    """Top-r left singular subspace of each (c, hw) matrix in the stack.

    Works on the c x c Gram matrix instead of the wide matrix itself --
    same leading subspace at a fraction of the cost, since c is tiny
    compared to hw on every path that batches.
    """
    gram = flat @ np.swapaxes(flat, 1, 2)
    _, vecs = np.linalg.eigh(gram)  # ascending eigenvalues
    return vecs[:, :, ::-1][:, :, :r]


def decompose_batch(xs, cfg: DecompositionConfig):
    """Batched decompose: (b, c, h, w) -> (ir_main, ir_res) sample by sample.

    Same split as :func:`decompose` without the per-sample factor
    bookkeeping.  With U_r the top-r channel basis and P = U_r^T X, the
    main part is U_r lowpass(P), the channel residual is X - U_r P, and
    the spatial residual is U_r highpass(P); their sum with the padded
    main part reconstructs X exactly.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 4:
        raise ValueError(f"expected a (b, c, h, w) batch, got shape {xs.shape}")
    cfg.check_shape(xs.shape[1:])
    b, c, h, w = xs.shape
    t, tp = cfg.t, cfg.t_prime

    flat = xs.reshape(b, c, h * w)
    basis = _channel_basis_batch(flat, min(cfg.r, c))
    proj = np.swapaxes(basis, 1, 2) @ flat  # (b, r, hw)
    principal = proj.reshape(b, -1, h, w)

    coeffs = dct_block_forward(principal, t)
    ir_main = np.einsum(
        "bci,bi...->bc...", basis, idct_block(coeffs, t, tp), optimize=True
    )

    svd_res = (flat - basis @ proj).reshape(b, c, h, w)
    hf_coeffs = coeffs * ~_lowfreq_mask(h, w, t, tp)
    raw = svd_res + np.einsum(
        "bci,bi...->bc...", basis, idct_block(hf_coeffs, t, t), optimize=True
    )

    norms = np.linalg.norm(raw.reshape(b, -1), axis=1)
    scale = np.maximum(1.0, norms / cfg.C)
    ir_res = raw / scale[:, None, None, None]
    return ir_main, ir_res


def decompose_main_batch(xs, cfg: DecompositionConfig):
    """IR_main for a batch plus the frozen channel bases for the adjoint.

    Returns (ir_main, basis) where basis[b] holds an orthonormal basis of
    sample b's top-r left singular subspace.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 4:
        raise ValueError(f"expected a (b, c, h, w) batch, got shape {xs.shape}")
    cfg.check_shape(xs.shape[1:])
    b, c, h, w = xs.shape

    flat = xs.reshape(b, c, h * w)
    basis = _channel_basis_batch(flat, min(cfg.r, c))
    principal = (np.swapaxes(basis, 1, 2) @ flat).reshape(b, -1, h, w)
    v_lf = idct_block(dct_block_forward(principal, cfg.t), cfg.t, cfg.t_prime)
    ir_main = np.einsum("bci,bi...->bc...", basis, v_lf, optimize=True)
    return ir_main, basis


def decompose_main_adjoint(grad_ir_main, basis, cfg: DecompositionConfig) -> np.ndarray:
    """Pull a gradient on ir_main back to the input, factors held frozen.

    With the sample's channel basis U_r and the spatial low-pass D treated
    as constants, ir_main = U_r D(U_r^T X), so the adjoint is
    gX = U_r D^T(U_r^T G).  D^T re-expands a reduced block to source size by
    zero-padding its DCT coefficients.
    """
    g = np.asarray(grad_ir_main, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    b, c, hr, wr = g.shape
    t, tp = cfg.t, cfg.t_prime
    if hr % tp or wr % tp:
        raise ValueError(
            f"gradient spatial dims ({hr}, {wr}) not divisible by t_prime={tp}"
        )
    h, w = hr // tp * t, wr // tp * t

    proj = np.einsum("bci,bc...->bi...", basis, g, optimize=True)
    # D^T: forward DCT at t', scatter into the low-frequency corner of
    # t-blocks, invert at t.
    small = dct_block_forward(proj, tp)
    padded = np.zeros((b, basis.shape[2], h, w))
    rows = np.flatnonzero((np.arange(h) % t) < tp)
    cols = np.flatnonzero((np.arange(w) % t) < tp)
    padded[..., rows[:, None], cols[None, :]] = small
    lifted = idct_block(padded, t, t)
    return np.einsum("bci,bi...->bc...", basis, lifted, optimize=True).reshape(
        b, c, h, w
    )


def spectrum(x, t: int, r_values, tprime_values):
    """Relative reconstruction error along each axis of the decomposition.

    For each r: |X - X_lr| / |X| with X_lr the rank-r channel reconstruction.
    For each t': |X - X_lf| / |X| with X_lf the blockwise DCT truncation of
    all channels, zero-padded and inverted at full resolution.
    Returns rows (kind, param, rel_error) with kind in {"svd", "dct"}.
    """
    x = as_tensor3(x)
    c, h, w = x.shape
    if h % t or w % t:
        raise ValueError(f"block size t={t} must divide spatial dims ({h}, {w})")
    norm = float(np.linalg.norm(x))
    factors = svd(x.reshape(c, h * w))
    coeffs = dct_block_forward(x, t)

    rows = []
    for r in r_values:
        if not 1 <= r <= c:
            raise ValueError(f"r={r} outside [1, {c}]")
        err = float(np.linalg.norm(x.reshape(c, h * w) - factors.reconstruct(r)))
        rows.append(("svd", int(r), err / norm if norm else 0.0))
    for tp in tprime_values:
        if not 1 <= tp <= t:
            raise ValueError(f"t_prime={tp} outside [1, {t}]")
        x_lf = idct_block(coeffs * _lowfreq_mask(h, w, t, tp), t, t)
        err = float(np.linalg.norm(x - x_lf))
        rows.append(("dct", int(tp), err / norm if norm else 0.0))
    return rows


def format_spectrum_csv(rows) -> str:
    """Render spectrum rows as CSV with header kind,param,rel_error."""
    lines = ["kind,param,rel_error"]
    for kind, param, err in rows:
        lines.append(f"{kind},{param},{err:.12g}")
    return "\n".join(lines) + "\n"

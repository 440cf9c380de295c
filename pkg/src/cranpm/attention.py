"""Physics-guided attention machinery.

Elevation-aware logit penalties, 16-sector wind quantization, upwind token
shuffling, wind-alignment cross-attention bias, and the biased / windowed
attention kernels that consume them.

Conventions (frozen here, used consistently by the model and the synthetic
world): the column axis points east (+u), the row axis points north (+v);
sector 0 is centered on due east and sectors advance counter-clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor

CALM_SPEED = 1e-6  # m/s; below this the wind direction is undefined
MASK_NEG = -1e9

ELEV_CLAMP_LO = -10.0


# -- elevation bias ------------------------------------------------------------


@dataclass
class ElevationBiasParams:
    """Learnable strength alpha plus the fixed reference elevation (meters)."""

    alpha: Tensor  # scalar, non-negative by construction of its use
    e0: float
    clamp_lo: float = ELEV_CLAMP_LO

    def __post_init__(self):
        if self.e0 <= 0:
            raise ParameterError(f"reference elevation must be > 0, got {self.e0}")


def elevation_penalty(elev: np.ndarray, e0: float) -> np.ndarray:
    """relu((E_j - E_i)/E0) for all token pairs; the constant part of the bias."""
    if e0 <= 0:
        raise ParameterError(f"reference elevation must be > 0, got {e0}")
    elev = np.asarray(elev, dtype=np.float64)
    return np.maximum(0.0, (elev[None, :] - elev[:, None]) / e0)


def elevation_bias_from_penalty(penalty: Tensor, alpha: Tensor,
                                clamp_lo: float = ELEV_CLAMP_LO) -> Tensor:
    """max(clamp_lo, -alpha * penalty); gradient flows to alpha."""
    return T.clamp_min(T.neg(T.mul(alpha, penalty)), clamp_lo)


def elevation_bias(elev: np.ndarray, params: ElevationBiasParams) -> Tensor:
    """Pairwise attention-logit penalty for attending to higher-elevation keys.

    B[i][j] = max(-10, -alpha * relu((E[j] - E[i]) / E0)). Always in [-10, 0]:
    downhill keys are never rewarded, only uphill ones penalized.
    """
    pen = elevation_penalty(elev, params.e0).astype(params.alpha.data.dtype)
    return elevation_bias_from_penalty(Tensor(pen), params.alpha, params.clamp_lo)


# -- wind sectors and upwind scan order ------------------------------------------


def wind_sector(u: float, v: float) -> tuple[int, bool]:
    """Quantize a wind vector into one of 16 sectors of 22.5 degrees.

    Returns (sector, calm). Sector 0 is centered on due east, counting
    counter-clockwise; calm winds land in sector 0 with the flag set.
    """
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ParameterError("wind components must be finite")
    if math.hypot(u, v) < CALM_SPEED:
        return 0, True
    deg = math.degrees(math.atan2(v, u))
    return int(((deg + 360.0 + 11.25) % 360.0) // 22.5) % 16, False


def sector_unit(sector: int) -> tuple[float, float]:
    ang = math.radians(sector * 22.5)
    return math.cos(ang), math.sin(ang)


@dataclass
class PermutationRecord:
    """Bijection on token indices with its precomputed inverse."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward: np.ndarray) -> "PermutationRecord":
        forward = np.asarray(forward, dtype=np.intp)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size, dtype=np.intp)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> "PermutationRecord":
        idx = np.arange(n, dtype=np.intp)
        return cls(idx, idx.copy())

    def is_identity(self) -> bool:
        return bool(np.all(self.forward == np.arange(self.forward.size)))

    def verify(self) -> None:
        n = self.forward.size
        if not np.array_equal(np.sort(self.forward), np.arange(n)):
            raise ShapeError("permutation forward is not a bijection")
        if not np.array_equal(self.forward[self.inverse], np.arange(n)):
            raise ShapeError("permutation inverse does not invert forward")


def wind_scan_order(rows: np.ndarray, cols: np.ndarray,
                    wind: tuple[float, float]) -> PermutationRecord:
    """Order patch slots upwind-to-downwind along the given wind vector.

    Sort key is the projection of each patch centroid onto the unit wind
    vector, ascending (most-upwind first); ties break by row-major index.
    Calm wind yields the identity permutation.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    n = rows.size
    u, v = wind
    speed = math.hypot(u, v)
    if speed < CALM_SPEED:
        return PermutationRecord.identity(n)
    key = (cols * u + rows * v) / speed
    order = np.lexsort((np.arange(n), key))
    return PermutationRecord.from_forward(order)


def group_shuffle(grid_h: int, grid_w: int, group: int,
                  group_winds: np.ndarray) -> PermutationRecord:
    """Per-group upwind reordering over a full token grid.

    The grid is tiled by non-overlapping group x group blocks; each block's
    tokens are reordered by the block's (quantized) mean wind. ``group_winds``
    is [n_groups, 2] in row-major group order.
    """
    if grid_h % group or grid_w % group:
        raise ShapeError(f"token grid {grid_h}x{grid_w} not divisible by group {group}")
    ngh, ngw = grid_h // group, grid_w // group
    group_winds = np.asarray(group_winds, dtype=np.float64)
    if group_winds.shape != (ngh * ngw, 2):
        raise ShapeError(f"expected {(ngh * ngw, 2)} group winds, got {group_winds.shape}")
    forward = np.arange(grid_h * grid_w, dtype=np.intp)
    gi = 0
    for gr in range(ngh):
        for gc in range(ngw):
            r0, c0 = gr * group, gc * group
            rr, cc = np.meshgrid(np.arange(group), np.arange(group), indexing="ij")
            slots = (r0 + rr.ravel()) * grid_w + (c0 + cc.ravel())
            sector, calm = wind_sector(*group_winds[gi])
            if not calm:
                perm = wind_scan_order(rr.ravel(), cc.ravel(), sector_unit(sector))
                forward[slots] = slots[perm.forward]
            gi += 1
    return PermutationRecord.from_forward(forward)


def apply_permutation(tokens: Tensor, perm: PermutationRecord) -> Tensor:
    return T.gather_rows(tokens, perm.forward)


def invert_permutation(tokens: Tensor, perm: PermutationRecord) -> Tensor:
    return T.gather_rows(tokens, perm.inverse)


# -- wind-alignment cross-attention bias ---------------------------------------------


def wind_alignment_gamma(p_local: np.ndarray, p_global: np.ndarray,
                         wind_at_local: np.ndarray) -> np.ndarray:
    """Cosine between key->query displacement and the query's wind vector.

    gamma[i][j] = unit(p_i - p_j) . unit(wind_i), in [-1, 1]. Coincident
    positions and calm winds contribute 0 (the neutral choice where the unit
    vectors are undefined). +1 means global token j lies exactly upwind of
    local token i.
    """
    p_local = np.asarray(p_local, dtype=np.float64)
    p_global = np.asarray(p_global, dtype=np.float64)
    wind = np.asarray(wind_at_local, dtype=np.float64)
    disp = p_local[:, None, :] - p_global[None, :, :]
    dist = np.linalg.norm(disp, axis=-1)
    unit = np.zeros_like(disp)
    ok = dist > 1e-12
    unit[ok] = disp[ok] / dist[ok][:, None]
    speed = np.linalg.norm(wind, axis=-1, keepdims=True)
    wunit = np.where(speed > CALM_SPEED, wind / np.maximum(speed, CALM_SPEED), 0.0)
    return np.einsum("ijk,ik->ij", unit, wunit)


def wind_alignment_bias(p_local: np.ndarray, p_global: np.ndarray,
                        wind_at_local: np.ndarray, beta: Tensor) -> Tensor:
    """[heads, Nl, Ng] additive cross-attention logits beta_h * gamma_ij."""
    gamma = wind_alignment_gamma(p_local, p_global, wind_at_local)
    return wind_bias_from_gamma(Tensor(gamma.astype(beta.data.dtype)), beta)


def wind_bias_from_gamma(gamma: Tensor, beta: Tensor) -> Tensor:
    heads = beta.data.shape[0]
    b3 = T.reshape(beta, (heads, 1, 1))
    return T.mul(b3, gamma)  # broadcasts to [heads, Nl, Ng]


# -- attention kernels ------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, d] -> [..., heads, N, d/heads]."""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    x = T.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, dh] -> [..., N, heads*dh]."""
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, n, h * dh))


def biased_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None,
                     heads: int) -> Tensor:
    """Multi-head scaled-dot-product attention with additive logit bias.

    q: [Nq, d], k/v: [Nk, d]; bias broadcastable to [heads, Nq, Nk] or None.
    Attention rows sum to 1; adding a constant to a bias row is a no-op.
    """
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    dh = qh.shape[-1]
    scale = np.asarray(1.0 / math.sqrt(dh), dtype=q.data.dtype)
    logits = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), Tensor(scale))
    if bias is not None:
        logits = T.add(logits, bias)
    attn = T.softmax_rows(logits)
    return merge_heads(T.matmul(attn, vh))


@dataclass
class WindowLayout:
    """Static bookkeeping to run attention over non-overlapping windows."""

    grid_h: int
    grid_w: int
    window: int
    shift: int
    pad_h: int
    pad_w: int
    mask: np.ndarray | None  # [n_windows, w*w, w*w] additive, or None

    @property
    def padded(self) -> tuple[int, int]:
        return self.grid_h + self.pad_h, self.grid_w + self.pad_w


def window_layout(grid_h: int, grid_w: int, window: int, shift: int,
                  dtype=np.float32) -> WindowLayout:
    """Precompute padding and the cross-window/pad attention mask."""
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    pad_h = (-grid_h) % window
    pad_w = (-grid_w) % window
    hp, wp = grid_h + pad_h, grid_w + pad_w

    ids = np.zeros((grid_h, grid_w), dtype=np.int64)
    if shift:
        cnt = 0
        for rs in (slice(0, hp - window), slice(hp - window, hp - shift), slice(hp - shift, hp)):
            for cs in (slice(0, wp - window), slice(wp - window, wp - shift), slice(wp - shift, wp)):
                full = np.full((hp, wp), -2, dtype=np.int64)
                full[rs, cs] = cnt
                sub = full[:grid_h, :grid_w]
                ids = np.where(sub >= 0, sub, ids)
                cnt += 1
    idp = np.full((hp, wp), -1, dtype=np.int64)  # -1 marks padding
    idp[:grid_h, :grid_w] = ids
    if shift:
        idp = np.roll(idp, (-shift, -shift), axis=(0, 1))
    win_ids = _partition_grid(idp[..., None], window)[..., 0]  # [nW, w*w]

    need_mask = shift > 0 or pad_h > 0 or pad_w > 0
    mask = None
    if need_mask:
        same = win_ids[:, :, None] == win_ids[:, None, :]
        real_key = win_ids[:, None, :] >= 0
        allowed = same & (real_key | (win_ids[:, :, None] < 0))
        mask = np.where(allowed, 0.0, MASK_NEG).astype(dtype)
    return WindowLayout(grid_h, grid_w, window, shift, pad_h, pad_w, mask)


def _partition_grid(grid: np.ndarray, window: int) -> np.ndarray:
    hp, wp, d = grid.shape
    nh, nw = hp // window, wp // window
    g = grid.reshape(nh, window, nw, window, d).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(g).reshape(nh * nw, window * window, d)


def partition_windows(tokens: Tensor, layout: WindowLayout) -> Tensor:
    """[N, d] row-major tokens -> [n_windows, w*w, d], shifted and padded."""
    gh, gw, w = layout.grid_h, layout.grid_w, layout.window
    x = T.reshape(tokens, (gh, gw, tokens.shape[-1]))
    if layout.pad_h or layout.pad_w:
        x = T.zero_pad(x, ((0, layout.pad_h), (0, layout.pad_w), (0, 0)))
    if layout.shift:
        x = T.roll(x, (-layout.shift, -layout.shift), (0, 1))
    hp, wp = layout.padded
    nh, nw = hp // w, wp // w
    x = T.reshape(x, (nh, w, nw, w, x.shape[-1]))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (nh * nw, w * w, x.shape[-1]))


def merge_windows(wins: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of partition_windows, cropping padding and undoing the shift."""
    w = layout.window
    hp, wp = layout.padded
    nh, nw = hp // w, wp // w
    d = wins.shape[-1]
    x = T.reshape(wins, (nh, nw, w, w, d))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (hp, wp, d))
    if layout.shift:
        x = T.roll(x, (layout.shift, layout.shift), (0, 1))
    if layout.pad_h or layout.pad_w:
        x = T.narrow(x, 0, 0, layout.grid_h)
        x = T.narrow(x, 1, 0, layout.grid_w)
    return T.reshape(x, (layout.grid_h * layout.grid_w, d))


class RelPosBias:
    """Swin-style learnable relative-position logits for a wh x ww window."""

    def __init__(self, table: Tensor, win_h: int, win_w: int):
        heads = table.shape[0]
        expect = (2 * win_h - 1) * (2 * win_w - 1)
        if table.shape != (heads, expect):
            raise ShapeError(f"rel-pos table {table.shape} != ({heads}, {expect})")
        self.table = table
        self.win_h = win_h
        self.win_w = win_w
        self.index = rel_pos_index(win_h, win_w)

    def bias(self) -> Tensor:
        n = self.win_h * self.win_w
        flat = T.gather_last(self.table, self.index.ravel())
        return T.reshape(flat, (self.table.shape[0], n, n))


def rel_pos_index(win_h: int, win_w: int) -> np.ndarray:
    """[n, n] flat indices into a (2wh-1)(2ww-1) relative-offset table."""
    rr, cc = np.meshgrid(np.arange(win_h), np.arange(win_w), indexing="ij")
    coords = np.stack([rr.ravel(), cc.ravel()], axis=-1)
    rel = coords[:, None, :] - coords[None, :, :]
    rel[..., 0] += win_h - 1
    rel[..., 1] += win_w - 1
    return rel[..., 0] * (2 * win_w - 1) + rel[..., 1]


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, layout: WindowLayout,
                       heads: int, rel_bias: RelPosBias | None = None,
                       extra_bias: Tensor | None = None) -> Tensor:
    """Attention restricted to non-overlapping windows over a token grid.

    q/k/v are [N, d] in row-major grid order. ``extra_bias`` is a per-window
    additive logit tensor broadcastable to [n_windows, heads, w*w, w*w].
    With a single window covering the whole grid this reduces exactly to
    ``biased_attention``.
    """
    qw = split_heads(partition_windows(q, layout), heads)  # [nW, h, T, dh]
    kw = split_heads(partition_windows(k, layout), heads)
    vw = split_heads(partition_windows(v, layout), heads)
    dh = qw.shape[-1]
    scale = np.asarray(1.0 / math.sqrt(dh), dtype=q.data.dtype)
    logits = T.mul(T.matmul(qw, T.transpose(kw, (0, 1, 3, 2))), Tensor(scale))
    if rel_bias is not None:
        logits = T.add(logits, rel_bias.bias())  # broadcast over windows
    if extra_bias is not None:
        logits = T.add(logits, extra_bias)
    if layout.mask is not None:
        logits = T.add(logits, Tensor(layout.mask[:, None, :, :].astype(q.data.dtype)))
    attn = T.softmax_rows(logits)
    out = merge_heads(T.matmul(attn, vw))  # [nW, T, d]
    return merge_windows(out, layout)

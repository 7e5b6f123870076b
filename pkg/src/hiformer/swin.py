"""Three-stage windowed-attention trunk with CNN-skip fusion.

Tokens live as (N, N_t, D) with an explicit (H_g, W_g) grid. Each stage
applies block pairs of plain and shifted window attention; between
stages a 2x2 patch merge halves the grid and doubles the dim, and the
matching 1x1-projected CNN map is added. The trunk exports the stage-1
map P_l (dim D', grid H/4) and the stage-3 map P_s (dim 4D', grid H/16).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import IndivisibleGrid, OddGrid, ShapeMismatch
from .nn import LayerNorm, Linear, Mlp, Module, ModuleList
from .tensor import Parameter, Tensor


@dataclass
class TokenMap:
    """Token matrix plus the spatial grid it flattens."""

    tokens: Tensor
    grid: tuple

    @property
    def dim(self):
        return self.tokens.shape[-1]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[-2] != h * w:
            raise ShapeMismatch(
                f"{self.tokens.shape[-2]} tokens for grid {h}x{w}"
            )


def tokens_from_map(x):
    """NCHW feature map -> TokenMap (row-major pixel order)."""
    N, C, H, W = x.shape
    return TokenMap(x.reshape(N, C, H * W).transpose(0, 2, 1), (H, W))


def map_from_tokens(tm):
    """TokenMap -> NCHW feature map. Inverse of tokens_from_map."""
    N, Nt, D = tm.tokens.shape
    H, W = tm.grid
    return tm.tokens.transpose(0, 2, 1).reshape(N, D, H, W)


# -- windows -----------------------------------------------------------------


def window_partition(tokens, grid, M):
    """(N, H*W, D) -> (N*nW, M*M, D); windows tile the grid row-major."""
    N, Nt, D = tokens.shape
    H, W = grid
    if H % M or W % M:
        raise IndivisibleGrid(f"grid {H}x{W} not divisible by window {M}")
    x = tokens.reshape(N, H // M, M, W // M, M, D)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N * (H // M) * (W // M), M * M, D)


def window_reverse(windows, grid, M):
    """Inverse of window_partition."""
    H, W = grid
    nW = (H // M) * (W // M)
    N = windows.shape[0] // nW
    D = windows.shape[-1]
    x = windows.reshape(N, H // M, W // M, M, M, D)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, H * W, D)


def region_ids(grid, M, shift):
    """Pre-shift region id of every token, grouped by window: (nW, M*M).

    After a cyclic shift by `shift`, a window may span up to nine bands of
    the original map; tokens may only attend within their own band.
    """
    H, W = grid
    img = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    slices = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
    for hs in slices:
        for ws in slices:
            img[hs, ws] = cnt
            cnt += 1
    img = img.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3)
    return img.reshape(-1, M * M)


_MASK_CACHE = {}


def shift_mask(grid, M, shift, dtype):
    """Additive (nW, M*M, M*M) mask: 0 within a region, -1e9 across."""
    key = (grid, M, shift, np.dtype(dtype).name)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        ids = region_ids(grid, M, shift)
        cached = np.where(ids[:, :, None] != ids[:, None, :], -1e9, 0.0).astype(dtype)
        _MASK_CACHE[key] = cached
    return cached


# -- attention ---------------------------------------------------------------


def _relative_index(M):
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0) + (M - 1)
    return (rel[:, :, 0] * (2 * M - 1) + rel[:, :, 1]).astype(np.int64)


class WindowAttention(Module):
    """Multi-head self-attention within M x M windows, with a learned
    relative-position bias shared across windows."""

    def __init__(self, dim, heads, window_size):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window_size = window_size
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.rel_bias = Parameter(((2 * window_size - 1) ** 2, heads))
        self._rel_index = _relative_index(window_size).reshape(-1)
        self.store_attn = False
        self.last_attn = None

    def _bias(self):
        Nw = self.window_size * self.window_size
        b = T.take_rows(self.rel_bias, self._rel_index)
        return b.reshape(Nw, Nw, self.heads).transpose(2, 0, 1).reshape(
            1, self.heads, Nw, Nw
        )

    def forward(self, windows, mask=None):
        B, Nw, D = windows.shape
        if D != self.dim:
            raise ShapeMismatch(f"attention dim {self.dim} got tokens of dim {D}")
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(windows).reshape(B, Nw, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(0, 1, 3, 2)
        attn = attn + self._bias()
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.reshape(B // nW, nW, h, Nw, Nw)
            attn = attn + Tensor(mask.reshape(1, nW, 1, Nw, Nw))
            attn = attn.reshape(B, h, Nw, Nw)
        attn = T.softmax_lastdim(attn)
        if self.store_attn:
            self.last_attn = attn.data.copy()
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Nw, D)
        return self.proj(out)


def windowed_attention(tokens, grid, attn, shift=0):
    """Partition, attend (masked when shifted), merge back.

    shift > 0 cyclically rolls the grid by -shift on both axes first and
    rolls back afterward, so windows straddle the original boundaries.
    """
    H, W = grid
    N, Nt, D = tokens.shape
    x = tokens
    if shift:
        x = x.reshape(N, H, W, D)
        x = T.roll(x, (-shift, -shift), axis=(1, 2))
        x = x.reshape(N, Nt, D)
    M = attn.window_size
    windows = window_partition(x, grid, M)
    mask = shift_mask(grid, M, shift, tokens.dtype) if shift else None
    out = attn(windows, mask)
    x = window_reverse(out, grid, M)
    if shift:
        x = x.reshape(N, H, W, D)
        x = T.roll(x, (shift, shift), axis=(1, 2))
        x = x.reshape(N, Nt, D)
    return x


# -- blocks ------------------------------------------------------------------


class SwinBlockPair(Module):
    """One plain and one shifted attention block with their MLPs.

    Residual chain: x += WA(LN(x)); x += MLP(LN(x)); x += SWA(LN(x));
    x += MLP(LN(x)). Shift is floor(M/2), dropped to 0 when the grid is
    a single window.
    """

    def __init__(self, dim, heads, window_size, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn1 = WindowAttention(dim, heads, window_size)
        self.norm2 = LayerNorm(dim)
        self.mlp1 = Mlp(dim, hidden)
        self.norm3 = LayerNorm(dim)
        self.attn2 = WindowAttention(dim, heads, window_size)
        self.norm4 = LayerNorm(dim)
        self.mlp2 = Mlp(dim, hidden)

    def shift_for(self, grid):
        M = self.attn1.window_size
        return 0 if min(grid) <= M else M // 2

    def forward(self, tm):
        x, grid = tm.tokens, tm.grid
        x = x + windowed_attention(self.norm1(x), grid, self.attn1, 0)
        x = x + self.mlp1(self.norm2(x))
        x = x + windowed_attention(self.norm3(x), grid, self.attn2, self.shift_for(grid))
        x = x + self.mlp2(self.norm4(x))
        return TokenMap(x, grid)


class SwinStage(Module):
    def __init__(self, dim, depth, heads, window_size):
        super().__init__()
        if depth % 2:
            raise ShapeMismatch(f"stage depth {depth} must be even")
        self.blocks = ModuleList(
            SwinBlockPair(dim, heads, window_size) for _ in range(depth // 2)
        )

    def forward(self, tm):
        for block in self.blocks:
            tm = block(tm)
        return tm


class PatchMerging(Module):
    """Concat 2x2 neighborhoods (dim 4D), LN, project to 2D."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, tm):
        N, Nt, D = tm.tokens.shape
        H, W = tm.grid
        if H % 2 or W % 2:
            raise OddGrid(f"patch merge needs an even grid, got {H}x{W}")
        x = tm.tokens.reshape(N, H, W, D)
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        merged = T.concat([x0, x1, x2, x3], axis=-1)
        merged = merged.reshape(N, (H // 2) * (W // 2), 4 * D)
        return TokenMap(self.reduction(self.norm(merged)), (H // 2, W // 2))


class SwinTrunk(Module):
    """The three stages plus merges, fused with the CNN skips.

    forward(C1, C2, C3) -> (P_l, P_s):
      t0  = tokens(C1); P_l = stage1(t0) + t0
      x2  = merge(P_l) + tokens(C2); m2 = stage2(x2) + x2
      x3  = merge(m2) + tokens(C3); P_s = stage3(x3) + x3
    The mid-level m2 is consumed only by the second merge.
    """

    def __init__(self, cfg):
        super().__init__()
        D = cfg.embed_dim
        M = cfg.window_size
        self.stage1 = SwinStage(D, cfg.stage_depths[0], cfg.stage_heads[0], M)
        self.merge1 = PatchMerging(D)
        self.stage2 = SwinStage(2 * D, cfg.stage_depths[1], cfg.stage_heads[1], M)
        self.merge2 = PatchMerging(2 * D)
        self.stage3 = SwinStage(4 * D, cfg.stage_depths[2], cfg.stage_heads[2], M)

    def forward(self, C1, C2, C3):
        t0 = tokens_from_map(C1)
        s1 = self.stage1(t0)
        P_l = TokenMap(s1.tokens + t0.tokens, t0.grid)

        m1 = self.merge1(P_l)
        t2 = tokens_from_map(C2)
        x2 = TokenMap(m1.tokens + t2.tokens, m1.grid)
        m2 = TokenMap(self.stage2(x2).tokens + x2.tokens, x2.grid)

        m2d = self.merge2(m2)
        t3 = tokens_from_map(C3)
        x3 = TokenMap(m2d.tokens + t3.tokens, m2d.grid)
        P_s = TokenMap(self.stage3(x3).tokens + x3.tokens, x3.grid)
        return P_l, P_s

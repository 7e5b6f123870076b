"""Two-scale token fusion between the trunk's shallow and deep maps.

Each level gets a class token (mean of its layer-normed tokens), a
learnable position embedding, and a short stack of full-attention
encoder blocks. The two class tokens are then swapped across levels
through single-query cross-attention: a projected class token queries
the other level's patch tokens, so the score matrix has one row and
cost stays linear in token count. Patch tokens leave the module
unchanged by the swap and are reshaped back to feature maps.
"""

from __future__ import annotations

from . import tensor as T
from .errors import EmptyTokens, ShapeMismatch
from .nn import LayerNorm, Linear, Mlp, Module, ModuleList
from .swin import TokenMap, map_from_tokens
from .tensor import Parameter


class FullAttention(Module):
    """Standard multi-head self-attention over a full token sequence."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)

    def forward(self, x):
        N, L, D = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x).reshape(N, L, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax_lastdim((q * self.scale) @ k.transpose(0, 1, 3, 2))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(N, L, D)
        return self.proj(out)


class EncoderBlock(Module):
    """Pre-norm transformer block: x += MHSA(LN(x)); x += MLP(LN(x))."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = FullAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LevelPath(Module):
    """One level's class token, position embedding, and encoder stack.

    The position embedding is sized for the configured token count;
    other counts are rejected rather than interpolated.
    """

    def __init__(self, dim, n_tokens, depth, heads, mlp_ratio):
        super().__init__()
        self.dim = dim
        self.n_tokens = n_tokens
        self.cls_norm = LayerNorm(dim)
        self.pos = Parameter((1, n_tokens + 1, dim), init="normal")
        self.blocks = ModuleList(
            EncoderBlock(dim, heads, mlp_ratio) for _ in range(depth)
        )

    def make_class_token(self, tokens):
        """Mean over tokens of their layer norm, kept as one token row."""
        if tokens.shape[-2] == 0:
            raise EmptyTokens("cannot pool a class token from zero tokens")
        return T.global_avg_pool(self.cls_norm(tokens))

    def forward(self, tokens):
        if tokens.shape[-2] != self.n_tokens:
            raise ShapeMismatch(
                f"position embedding holds {self.n_tokens} tokens, "
                f"got {tokens.shape[-2]}"
            )
        cls = self.make_class_token(tokens)
        x = T.concat([cls, tokens], axis=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return x


class CrossAttention(Module):
    """Single-query attention: a class token against [itself || patches].

    `score_entries` counts every allocated attention score (batch x heads
    x queries x keys) across calls; the single query row makes the count
    linear in sequence length.
    """

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.norm = LayerNorm(dim)
        self.wq = Linear(dim, dim)
        self.wk = Linear(dim, dim)
        self.wv = Linear(dim, dim)
        self.proj = Linear(dim, dim)
        self.score_entries = 0

    def forward(self, cls, patches):
        N, one, D = cls.shape
        if one != 1:
            raise ShapeMismatch(f"expected a single class-token row, got {one}")
        if patches.shape[-1] != D:
            raise ShapeMismatch(
                f"class token dim {D} vs patch dim {patches.shape[-1]}"
            )
        h, hd = self.heads, self.head_dim
        seq = self.norm(T.concat([cls, patches], axis=1))
        L = seq.shape[1]
        q = self.wq(seq[:, 0:1, :]).reshape(N, 1, h, hd).transpose(0, 2, 1, 3)
        k = self.wk(seq).reshape(N, L, h, hd).transpose(0, 2, 1, 3)
        v = self.wv(seq).reshape(N, L, h, hd).transpose(0, 2, 1, 3)
        attn = T.softmax_lastdim((q * self.scale) @ k.transpose(0, 1, 3, 2))
        self.score_entries += attn.size
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(N, 1, D)
        return cls + self.proj(out)


class DoubleLevelFusion(Module):
    """Encode both levels, swap class tokens via cross-attention, return
    the (unchanged) patch tokens as NCHW maps.

    The fused class tokens have no spatial consumer; they are kept on
    `last_cls` for inspection and otherwise dropped.
    """

    def __init__(self, cfg):
        super().__init__()
        d = cfg.dlf
        gs, gl = cfg.grid(2), cfg.grid(0)
        self.small = LevelPath(d.dim_small, gs[0] * gs[1],
                               d.depth_small, d.num_heads, d.mlp_ratio)
        self.large = LevelPath(d.dim_large, gl[0] * gl[1],
                               d.depth_large, d.num_heads, d.mlp_ratio)
        self.f_s = Linear(d.dim_small, d.dim_large)
        self.g_s = Linear(d.dim_large, d.dim_small)
        self.f_l = Linear(d.dim_large, d.dim_small)
        self.g_l = Linear(d.dim_small, d.dim_large)
        self.fuse_small = CrossAttention(d.dim_large, d.num_heads)
        self.fuse_large = CrossAttention(d.dim_small, d.num_heads)
        self.last_cls = None

    def forward(self, P_l, P_s):
        es = self.small(P_s.tokens)
        el = self.large(P_l.tokens)
        cls_s, pat_s = es[:, 0:1, :], es[:, 1:, :]
        cls_l, pat_l = el[:, 0:1, :], el[:, 1:, :]

        y_s = self.fuse_small(self.f_s(cls_s), pat_l)
        y_l = self.fuse_large(self.f_l(cls_l), pat_s)
        self.last_cls = (self.g_s(y_s).data, self.g_l(y_l).data)

        Ps_out = map_from_tokens(TokenMap(pat_s, P_s.grid))
        Pl_out = map_from_tokens(TokenMap(pat_l, P_l.grid))
        return Ps_out, Pl_out

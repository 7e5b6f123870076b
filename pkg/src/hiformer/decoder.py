"""Decoder: fuse the two recalibrated maps into full-resolution logits.

The deep map climbs from H/16 to H/4 through two conv-upsample stages,
meets the processed shallow map by addition, climbs to H x W through two
more stages, and a 3x3 head produces per-class scores. All stages share
one width D_dec = D' (the shallow-level dim).
"""

from __future__ import annotations

from . import tensor as T
from .errors import ShapeMismatch
from .nn import Conv2d, GroupNorm, Module, largest_group_count


class ConvUpStage(Module):
    """3x3 conv, 2x bilinear upsample, group norm, ReLU.

    `linear_mode` (tests only) skips norm and ReLU so the stage is affine.
    """

    def __init__(self, cin, cout):
        super().__init__()
        # Bias-free: the following norm subtracts any constant shift,
        # so a bias here would be a dead parameter.
        self.conv = Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm = GroupNorm(largest_group_count(cout), cout)
        self.linear_mode = False

    def forward(self, x):
        x = T.upsample_bilinear_2x(self.conv(x))
        if self.linear_mode:
            return x
        return T.relu(self.norm(x))


class ConvStage(Module):
    """3x3 conv, group norm, ReLU at constant resolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm = GroupNorm(largest_group_count(cout), cout)
        self.linear_mode = False

    def forward(self, x):
        x = self.conv(x)
        if self.linear_mode:
            return x
        return T.relu(self.norm(x))


class Decoder(Module):
    def __init__(self, cfg):
        super().__init__()
        D = cfg.embed_dim
        d_dec = D
        self.d_dec = d_dec
        self.up_s1 = ConvUpStage(4 * D, d_dec)
        self.up_s2 = ConvUpStage(d_dec, d_dec)
        self.block_l = ConvStage(D, d_dec)
        self.up_f1 = ConvUpStage(d_dec, d_dec)
        self.up_f2 = ConvUpStage(d_dec, d_dec)
        self.seg_head = Conv2d(d_dec, cfg.num_classes, 3, padding=1)

    def set_linear_mode(self, enabled):
        """Disable every norm and ReLU (affinity tests)."""
        for m in self.modules():
            if isinstance(m, (ConvUpStage, ConvStage)):
                m.linear_mode = enabled

    def forward(self, Ps_out, Pl_out):
        N, Cs, Hs, Ws = Ps_out.shape
        Nl, Cl, Hl, Wl = Pl_out.shape
        if (Hl, Wl) != (4 * Hs, 4 * Ws):
            raise ShapeMismatch(
                f"shallow grid {Hl}x{Wl} is not 4x the deep grid {Hs}x{Ws}"
            )
        deep = self.up_s2(self.up_s1(Ps_out))
        shallow = self.block_l(Pl_out)
        merged = deep + shallow
        full = self.up_f2(self.up_f1(merged))
        return self.seg_head(full)

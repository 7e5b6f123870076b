"""Full segmentation network: CNN pyramid, windowed-attention trunk,
optional two-scale fusion, decoder."""

from __future__ import annotations

from .cnn import CnnEncoder
from .config import build_config, validate_config
from .decoder import Decoder
from .dlf import DoubleLevelFusion
from .nn import Module, init_parameters
from .swin import SwinTrunk, map_from_tokens


class HiFormer(Module):
    """forward(x: (N, C, H, W)) -> logits (N, K, H, W).

    Child names (cnn / swin / dlf / decoder) are the checkpoint prefixes
    and the parameter-report grouping. With fusion disabled the trunk
    outputs feed the decoder directly; the dlf attribute is absent so
    its parameters never exist.
    """

    def __init__(self, cfg):
        super().__init__()
        validate_config(cfg)
        self.cfg = cfg
        self.cnn = CnnEncoder(cfg.cnn, cfg.embed_dim, cfg.freeze_bn)
        self.swin = SwinTrunk(cfg)
        if cfg.dlf.enabled:
            self.dlf = DoubleLevelFusion(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x):
        C1, C2, C3 = self.cnn(x)
        P_l, P_s = self.swin(C1, C2, C3)
        if self.cfg.dlf.enabled:
            Ps_out, Pl_out = self.dlf(P_l, P_s)
        else:
            Ps_out, Pl_out = map_from_tokens(P_s), map_from_tokens(P_l)
        return self.decoder(Ps_out, Pl_out)


def build_model(name_or_cfg, seed=0, **overrides):
    """Config (preset name, file path, or ModelConfig) -> initialized model."""
    if isinstance(name_or_cfg, str):
        cfg = build_config(name_or_cfg, **overrides)
    else:
        cfg = name_or_cfg
    model = HiFormer(cfg)
    init_parameters(model, seed)
    return model

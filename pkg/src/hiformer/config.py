"""Model configurations: named presets, JSON loading, validation.

A ModelConfig fully determines the architecture; every shape downstream
(token grids, attention tables, position embeddings, decoder widths) is
derived from it. Validation names the violated rule so config mistakes
fail loudly before any tensor is allocated.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .errors import InvalidConfig, UnknownModel

CNN_BACKBONES = (
    "resnet18",
    "resnet34",
    "resnet50",
    "resnet101",
    "densenet121",
    "densenet169",
    "densenet201",
    "tiny",
)


@dataclass(frozen=True)
class DlfConfig:
    """Two-scale token-fusion settings.

    The small path runs on the deep tokens (dim 4*D'), the large path on
    the shallow tokens (dim D'). depth_small/depth_large are the number
    of transformer blocks per path; mlp_ratio scales their MLP hidden
    width; num_heads is shared by both paths and the cross fusion.
    """

    dim_small: int
    dim_large: int
    depth_small: int
    depth_large: int
    mlp_ratio: float
    num_heads: int
    enabled: bool = True


@dataclass(frozen=True)
class ModelConfig:
    name: str
    cnn: str
    embed_dim: int
    stage_depths: tuple
    stage_heads: tuple
    window_size: int
    dlf: DlfConfig
    num_classes: int
    input_hw: tuple
    freeze_bn: bool = False

    def stage_dim(self, i):
        return self.embed_dim * (1 << i)

    def grid(self, i):
        """Token grid (rows, cols) at stage i (strides 4, 8, 16)."""
        h, w = self.input_hw
        s = 4 << i
        return (h // s, w // s)


def _fail(rule, detail):
    raise InvalidConfig(f"{rule}: {detail}")


def validate_config(cfg):
    """Check every structural invariant; raises InvalidConfig naming the rule."""
    if cfg.cnn not in CNN_BACKBONES:
        _fail("cnn-backbone", f"'{cfg.cnn}' not one of {CNN_BACKBONES}")
    if cfg.embed_dim <= 0:
        _fail("embed-dim-positive", f"embed_dim={cfg.embed_dim}")
    if len(cfg.stage_depths) != 3:
        _fail("stage-count", f"expected 3 stage depths, got {len(cfg.stage_depths)}")
    if len(cfg.stage_heads) != 3:
        _fail("stage-count", f"expected 3 stage head counts, got {len(cfg.stage_heads)}")
    for i, d in enumerate(cfg.stage_depths):
        if d <= 0 or d % 2 != 0:
            _fail("even-stage-depth",
                  f"stage {i} depth {d} must be positive and even "
                  "(blocks pair plain and shifted attention)")
    for i, h in enumerate(cfg.stage_heads):
        dim = cfg.stage_dim(i)
        if h <= 0 or dim % h != 0:
            _fail("heads-divide-dim", f"stage {i}: {h} heads do not divide dim {dim}")
    if cfg.window_size <= 0:
        _fail("window-size-positive", f"window_size={cfg.window_size}")
    h, w = cfg.input_hw
    if h <= 0 or w <= 0 or h % 16 != 0 or w % 16 != 0:
        _fail("input-divisible-by-16", f"input_hw={cfg.input_hw}")
    for i in range(3):
        gh, gw = cfg.grid(i)
        if gh % cfg.window_size != 0 or gw % cfg.window_size != 0:
            _fail("grid-divisible-by-window",
                  f"stage {i} grid {gh}x{gw} vs window {cfg.window_size}")
    if cfg.num_classes < 2:
        _fail("num-classes", f"need at least 2 classes, got {cfg.num_classes}")

    d = cfg.dlf
    if d.dim_large != cfg.embed_dim:
        _fail("fusion-large-dim", f"dim_large={d.dim_large} != embed_dim={cfg.embed_dim}")
    if d.dim_small != 4 * d.dim_large:
        _fail("fusion-dim-ratio", f"dim_small={d.dim_small} != 4*dim_large={4 * d.dim_large}")
    if d.num_heads <= 0 or d.dim_small % d.num_heads or d.dim_large % d.num_heads:
        _fail("fusion-heads-divide",
              f"{d.num_heads} heads do not divide dims {d.dim_small}/{d.dim_large}")
    if d.enabled and (d.depth_small < 1 or d.depth_large < 1):
        _fail("fusion-depth", f"depths {d.depth_small}/{d.depth_large} must be >= 1")
    if d.mlp_ratio <= 0:
        _fail("fusion-mlp-ratio", f"mlp_ratio={d.mlp_ratio}")
    return cfg


def _named(name, cnn, s, l, r, heads):
    return ModelConfig(
        name=name,
        cnn=cnn,
        embed_dim=96,
        stage_depths=(2, 2, 6),
        stage_heads=(3, 6, 12),
        window_size=7,
        dlf=DlfConfig(dim_small=384, dim_large=96, depth_small=s,
                      depth_large=l, mlp_ratio=r, num_heads=heads),
        num_classes=9,
        input_hw=(224, 224),
    )


def _tiny():
    return ModelConfig(
        name="hiformer-tiny",
        cnn="tiny",
        embed_dim=8,
        stage_depths=(2, 2, 2),
        stage_heads=(1, 2, 4),
        window_size=2,
        dlf=DlfConfig(dim_small=32, dim_large=8, depth_small=1,
                      depth_large=1, mlp_ratio=1.0, num_heads=2),
        num_classes=2,
        input_hw=(32, 32),
    )


PRESETS = {
    "hiformer-s": lambda: _named("hiformer-s", "resnet34", 1, 1, 1.0, 3),
    "hiformer-b": lambda: _named("hiformer-b", "resnet50", 2, 1, 2.0, 6),
    "hiformer-l": lambda: _named("hiformer-l", "resnet34", 4, 1, 4.0, 6),
    "hiformer-tiny": _tiny,
    "tiny": _tiny,
}


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        dlf = DlfConfig(**raw.pop("dlf"))
        cfg = ModelConfig(
            dlf=dlf,
            stage_depths=tuple(raw.pop("stage_depths")),
            stage_heads=tuple(raw.pop("stage_heads")),
            input_hw=tuple(raw.pop("input_hw")),
            **raw,
        )
    except (KeyError, TypeError) as exc:
        raise InvalidConfig(f"config file {path}: {exc}") from exc
    return validate_config(cfg)


def build_config(name_or_path, **overrides):
    """Resolve a preset name or a JSON config path, then apply overrides.

    Overrides accept ModelConfig field names plus the shorthands
    `hw` (square input side), `no_dlf` and `backbone`.
    """
    if name_or_path in PRESETS:
        cfg = PRESETS[name_or_path]()
    elif os.path.exists(name_or_path):
        cfg = load_config_file(name_or_path)
    else:
        raise UnknownModel(
            f"'{name_or_path}' is not a preset ({', '.join(sorted(PRESETS))}) "
            "or a config file"
        )

    if overrides.pop("no_dlf", False):
        cfg = dataclasses.replace(cfg, dlf=dataclasses.replace(cfg.dlf, enabled=False))
    backbone = overrides.pop("backbone", None)
    if backbone is not None:
        cfg = dataclasses.replace(cfg, cnn=backbone)
    hw = overrides.pop("hw", None)
    if hw is not None:
        cfg = dataclasses.replace(cfg, input_hw=(int(hw), int(hw)))
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return validate_config(cfg)


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    return d

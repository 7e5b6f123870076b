"""Hierarchical CNN backbones producing a stride-4/8/16 feature pyramid.

All backbones share the stem recipe (7x7 stride-2 conv, batch norm, ReLU,
3x3 stride-2 max pool) and stop at stride 16: the deepest token grid the
transformer trunk consumes is H/16, so the stride-32 stage of the
standard recipes is never built. A "tiny" backbone (16/32/64 channels,
one block per stage) exists for desk-scale tests.
"""

from __future__ import annotations

from . import tensor as T
from .errors import IndivisibleInput, UnknownModel
from .nn import BatchNorm2d, Conv2d, MaxPool2d, Module, ModuleList, Sequential


def _conv_bn(cin, cout, k, stride=1, frozen_bn=False):
    pad = k // 2
    return Sequential(
        Conv2d(cin, cout, k, stride=stride, padding=pad, bias=False),
        BatchNorm2d(cout, frozen=frozen_bn),
    )


class BasicBlock(Module):
    """Two 3x3 convs with identity (or projected) residual."""

    def __init__(self, cin, cout, stride=1, frozen_bn=False):
        super().__init__()
        self.conv1 = _conv_bn(cin, cout, 3, stride, frozen_bn)
        self.conv2 = _conv_bn(cout, cout, 3, 1, frozen_bn)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = _conv_bn(cin, cout, 1, stride, frozen_bn)

    def forward(self, x):
        out = self.conv2(T.relu(self.conv1(x)))
        skip = x if self.down is None else self.down(x)
        return T.relu(out + skip)


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand (x4) with residual."""

    expansion = 4

    def __init__(self, cin, planes, stride=1, frozen_bn=False):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = _conv_bn(cin, planes, 1, 1, frozen_bn)
        self.conv2 = _conv_bn(planes, planes, 3, stride, frozen_bn)
        self.conv3 = _conv_bn(planes, cout, 1, 1, frozen_bn)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = _conv_bn(cin, cout, 1, stride, frozen_bn)

    def forward(self, x):
        out = T.relu(self.conv1(x))
        out = T.relu(self.conv2(out))
        out = self.conv3(out)
        skip = x if self.down is None else self.down(x)
        return T.relu(out + skip)


class DenseLayer(Module):
    """BN-ReLU-1x1 (4g) then BN-ReLU-3x3 (g); output concatenated by caller."""

    def __init__(self, cin, growth, frozen_bn=False):
        super().__init__()
        self.bn1 = BatchNorm2d(cin, frozen=frozen_bn)
        self.conv1 = Conv2d(cin, 4 * growth, 1, bias=False)
        self.bn2 = BatchNorm2d(4 * growth, frozen=frozen_bn)
        self.conv2 = Conv2d(4 * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(T.relu(self.bn1(x)))
        out = self.conv2(T.relu(self.bn2(out)))
        return out


class DenseBlock(Module):
    def __init__(self, cin, growth, layers, frozen_bn=False):
        super().__init__()
        self.layers = ModuleList(
            DenseLayer(cin + i * growth, growth, frozen_bn) for i in range(layers)
        )
        self.out_channels = cin + layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = T.concat([x, layer(x)], axis=1)
        return x


def _avg_pool2(x):
    N, C, H, W = x.shape
    return x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


class Transition(Module):
    """BN-ReLU-1x1 halving channels, then 2x2 average pool."""

    def __init__(self, cin, frozen_bn=False):
        super().__init__()
        self.bn = BatchNorm2d(cin, frozen=frozen_bn)
        self.conv = Conv2d(cin, cin // 2, 1, bias=False)
        self.out_channels = cin // 2

    def forward(self, x):
        return _avg_pool2(self.conv(T.relu(self.bn(x))))


_RESNET_SPECS = {
    # kind: (block, per-stage block counts, stem width)
    "resnet18": (BasicBlock, (2, 2, 2), 64),
    "resnet34": (BasicBlock, (3, 4, 6), 64),
    "resnet50": (Bottleneck, (3, 4, 6), 64),
    "resnet101": (Bottleneck, (3, 4, 23), 64),
    "tiny": (BasicBlock, (1, 1, 1), 16),
}

_DENSENET_SPECS = {
    # kind: per-stage layer counts (growth rate 32, stem 64)
    "densenet121": (6, 12, 24),
    "densenet169": (6, 12, 32),
    "densenet201": (6, 12, 48),
}


class ResNetBackbone(Module):
    def __init__(self, kind, frozen_bn=False):
        super().__init__()
        block, counts, stem = _RESNET_SPECS[kind]
        self.kind = kind
        self.stem_conv = Conv2d(3, stem, 7, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(stem, frozen=frozen_bn)
        self.pool = MaxPool2d(3, 2, 1)

        widths = (stem, stem * 2, stem * 4)
        cin = stem
        stages = []
        out_channels = []
        for i, (n, w) in enumerate(zip(counts, widths)):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                if block is Bottleneck:
                    blocks.append(Bottleneck(cin, w, stride, frozen_bn))
                    cin = w * Bottleneck.expansion
                else:
                    blocks.append(BasicBlock(cin, w, stride, frozen_bn))
                    cin = w
            stages.append(Sequential(*blocks))
            out_channels.append(cin)
        self.stage1, self.stage2, self.stage3 = stages
        self.out_channels = tuple(out_channels)

    def forward(self, x):
        x = self.pool(T.relu(self.stem_bn(self.stem_conv(x))))
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return f1, f2, f3


class DenseNetBackbone(Module):
    def __init__(self, kind, frozen_bn=False):
        super().__init__()
        counts = _DENSENET_SPECS[kind]
        growth, stem = 32, 64
        self.kind = kind
        self.stem_conv = Conv2d(3, stem, 7, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(stem, frozen=frozen_bn)
        self.pool = MaxPool2d(3, 2, 1)

        self.block1 = DenseBlock(stem, growth, counts[0], frozen_bn)
        self.trans1 = Transition(self.block1.out_channels, frozen_bn)
        self.block2 = DenseBlock(self.trans1.out_channels, growth, counts[1], frozen_bn)
        self.trans2 = Transition(self.block2.out_channels, frozen_bn)
        self.block3 = DenseBlock(self.trans2.out_channels, growth, counts[2], frozen_bn)
        self.out_channels = (
            self.block1.out_channels,
            self.block2.out_channels,
            self.block3.out_channels,
        )

    def forward(self, x):
        x = self.pool(T.relu(self.stem_bn(self.stem_conv(x))))
        f1 = self.block1(x)
        f2 = self.block2(self.trans1(f1))
        f3 = self.block3(self.trans2(f2))
        return f1, f2, f3


def build_backbone(kind, frozen_bn=False):
    if kind in _RESNET_SPECS:
        return ResNetBackbone(kind, frozen_bn)
    if kind in _DENSENET_SPECS:
        return DenseNetBackbone(kind, frozen_bn)
    raise UnknownModel(f"unknown CNN backbone '{kind}'")


class CnnEncoder(Module):
    """Backbone plus the three 1x1 projections onto the trunk widths.

    Outputs C1 (D', H/4), C2 (2D', H/8), C3 (4D', H/16); these feed the
    transformer stages as additive skips.
    """

    def __init__(self, kind, embed_dim, frozen_bn=False):
        super().__init__()
        self.backbone = build_backbone(kind, frozen_bn)
        c1, c2, c3 = self.backbone.out_channels
        self.proj1 = Conv2d(c1, embed_dim, 1)
        self.proj2 = Conv2d(c2, 2 * embed_dim, 1)
        self.proj3 = Conv2d(c3, 4 * embed_dim, 1)

    def forward(self, x):
        N, C, H, W = x.shape
        if H % 16 or W % 16:
            raise IndivisibleInput(f"input {H}x{W} not divisible by 16")
        if C == 1:
            x = T.concat([x, x, x], axis=1)
        elif C != 3:
            raise IndivisibleInput(f"expected 1 or 3 input channels, got {C}")
        f1, f2, f3 = self.backbone(x)
        return self.proj1(f1), self.proj2(f2), self.proj3(f3)

"""Similarity networks (siamese baselines and SRPN), the generator and the 3-way head.

Every similarity model is a :class:`SimilarityModel`: a pair encoder that
maps ``(x, x_t)`` to one embedding vector per row, followed by a linear
head. One output gives a same/different logit; three outputs give the
discriminator's ``(diff, same, fake)`` logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ConfigError

# discriminator head class order; keeps y=0 (diff) and y=1 (same) as indices
DIFF, SAME, FAKE = 0, 1, 2

SIAM1_CHANNELS = (32, 32, 64, 64, 128)
SIAM1_STRIDES = (1, 2, 1, 2, 1)
# Siam-II / SRPN base widths before the k=2 widening
SIAM2_BASE_CHANNELS = (16, 16, 20, 20, 32)
SIAM2_STRIDES = (1, 1, 2, 2, 1)
STEM_CHANNELS = 16


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(conv3x3(cin, cout, stride), nn.BatchNorm2d(cout), nn.ReLU())


class ResidualBlock(nn.Module):
    """Pre-activation wide-residual block.

    The skip path is a 1x1 convolution whenever the shape changes (or
    ``projection=True``); the residual branch is two 3x3 convolutions.
    """

    def __init__(self, cin, cout, stride=1, projection=False):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        needs_proj = projection or cin != cout or stride != 1
        self.shortcut = (nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
                         if needs_proj else None)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(F.relu(self.bn2(o)))
        return skip + o


def _global_pool(x):
    return x.mean(dim=(2, 3))


class ConvTower(nn.Module):
    """Plain convolutional tower with global average pooling (Siam-I)."""

    def __init__(self, in_channels, channels=SIAM1_CHANNELS, strides=SIAM1_STRIDES):
        super().__init__()
        layers, cin = [], in_channels
        for cout, s in zip(channels, strides):
            layers.append(ConvBNReLU(cin, cout, s))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x):
        return _global_pool(self.features(x))


class ResidualTower(nn.Module):
    """Stem convolution, residual blocks, final BN-ReLU and global pooling."""

    def __init__(self, in_channels, channels, strides, stem=STEM_CHANNELS):
        super().__init__()
        self.stem = conv3x3(in_channels, stem)
        blocks, cin = [], stem
        for cout, s in zip(channels, strides):
            blocks.append(ResidualBlock(cin, cout, s))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)
        self.out_dim = cin

    def forward(self, x):
        return _global_pool(F.relu(self.bn(self.blocks(self.stem(x)))))


class SiameseEncoder(nn.Module):
    """Tied-weight towers merged by elementwise absolute difference."""

    symmetric = True

    def __init__(self, tower):
        super().__init__()
        self.tower = tower
        self.embedding_dim = tower.out_dim

    def forward(self, x, x_t):
        return (self.tower(x) - self.tower(x_t)).abs()


@dataclass
class SrpnConfig:
    """Layout of a skip residual pairwise network.

    ``channels`` and ``strides`` list the full-width residual blocks of the
    base tower (widening by ``width_factor`` already applied). The first
    ``shared_depth`` blocks run with tied weights on both inputs; the
    remaining ``split_blocks`` run as two cross-mixing pathways whose width
    is ``channels // split_divisor``.
    """

    in_channels: int = 1
    channels: tuple = tuple(c * 2 for c in SIAM2_BASE_CHANNELS)
    strides: tuple = SIAM2_STRIDES
    shared_depth: int = 2
    split_blocks: int = 3
    width_factor: int = 2
    stem_channels: int = STEM_CHANNELS
    split_divisor: int = 2
    embedding_dim: int = 128
    merge: str = "concatenate-then-project"

    def validate(self):
        if self.split_blocks < 1:
            raise ConfigError("SRPN needs at least one split block")
        if self.shared_depth < 0:
            raise ConfigError("shared_depth must be non-negative")
        n = self.shared_depth + self.split_blocks
        if len(self.channels) != n or len(self.strides) != n:
            raise ConfigError(
                f"channels/strides must list {n} blocks, got "
                f"{len(self.channels)}/{len(self.strides)}")
        if self.merge != "concatenate-then-project":
            raise ConfigError(f"unsupported merge {self.merge!r}")
        if any(c % self.split_divisor for c in self.channels[self.shared_depth:]):
            raise ConfigError("split block widths must be divisible by split_divisor")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")

    @classmethod
    def from_wrn(cls, depth=40, k=2, in_channels=3, embedding_dim=None):
        """SRPN variant of a WRN-depth-k tower: stage 1 shared, stages 2 and 3 split."""
        n = _wrn_blocks_per_stage(depth)
        widths = [16 * k] * n + [32 * k] * n + [64 * k] * n
        strides = [1] * n + ([2] + [1] * (n - 1)) * 2
        return cls(in_channels=in_channels, channels=tuple(widths), strides=tuple(strides),
                   shared_depth=n, split_blocks=2 * n, width_factor=k,
                   embedding_dim=embedding_dim or 64 * k)

    def to_dict(self):
        d = asdict(self)
        d["channels"], d["strides"] = list(self.channels), list(self.strides)
        return d


class SrpnEncoder(nn.Module):
    """Shared residual stage followed by two cross-mixing residual pathways.

    Each pathway block takes the channel concatenation of its own and the
    other pathway's previous output, so every block is a 1x1-projection
    residual block over both representations. The final pathway outputs
    are concatenated, pooled and projected to one embedding per pair.
    """

    symmetric = False

    def __init__(self, cfg: SrpnConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = conv3x3(cfg.in_channels, cfg.stem_channels)
        shared, cin = [], cfg.stem_channels
        for cout, s in zip(cfg.channels[:cfg.shared_depth], cfg.strides[:cfg.shared_depth]):
            shared.append(ResidualBlock(cin, cout, s))
            cin = cout
        self.shared = nn.Sequential(*shared)
        self.path_x, self.path_t = nn.ModuleList(), nn.ModuleList()
        for cout, s in zip(cfg.channels[cfg.shared_depth:], cfg.strides[cfg.shared_depth:]):
            width = cout // cfg.split_divisor
            self.path_x.append(ResidualBlock(2 * cin, width, s, projection=True))
            self.path_t.append(ResidualBlock(2 * cin, width, s, projection=True))
            cin = width
        self.bn = nn.BatchNorm2d(2 * cin)
        self.project = nn.Linear(2 * cin, cfg.embedding_dim)
        self.embedding_dim = cfg.embedding_dim

    def pathways(self, x, x_t):
        """Per-split-block ``(h_x, h_t)`` activations, for inspection."""
        hx = self.shared(self.stem(x))
        ht = self.shared(self.stem(x_t))
        out = []
        for bx, bt in zip(self.path_x, self.path_t):
            hx, ht = bx(torch.cat([hx, ht], 1)), bt(torch.cat([ht, hx], 1))
            out.append((hx, ht))
        return out

    def forward(self, x, x_t):
        hx, ht = self.pathways(x, x_t)[-1]
        h = F.relu(self.bn(torch.cat([hx, ht], 1)))
        return self.project(_global_pool(h))


class SimilarityModel(nn.Module):
    """Pair encoder plus linear head.

    ``forward`` returns ``(B,)`` logits for a one-output head and ``(B, n)``
    logits otherwise; ``embed`` returns the pre-head pair embedding.
    """

    def __init__(self, encoder, n_outputs=1, architecture_tag="", config=None):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.embedding_dim, n_outputs)
        self.n_outputs = n_outputs
        self.architecture_tag = architecture_tag
        self.config = dict(config or {})

    @property
    def embedding_dim(self):
        return self.encoder.embedding_dim

    @property
    def symmetric(self):
        return self.encoder.symmetric

    def embed(self, x, x_t):
        if x.shape != x_t.shape:
            raise ValueError(f"input shapes differ: {tuple(x.shape)} vs {tuple(x_t.shape)}")
        return self.encoder(x, x_t)

    def forward(self, x, x_t):
        out = self.head(self.embed(x, x_t))
        return out.squeeze(-1) if self.n_outputs == 1 else out

    def with_head(self, n_outputs):
        """A new model sharing this encoder (same parameter objects) with a fresh head."""
        m = SimilarityModel(self.encoder, n_outputs, self.architecture_tag, self.config)
        return m.to(dtype=next(self.parameters()).dtype)

    def spec(self):
        return {"architecture_tag": self.architecture_tag, "n_outputs": self.n_outputs,
                "config": self.config}


def _check_in_shape(in_shape):
    if len(in_shape) != 3 or min(in_shape) < 1:
        raise ConfigError(f"in_shape must be (channels, height, width), got {in_shape}")
    return tuple(int(v) for v in in_shape)


def build_siam1(in_shape=(1, 28, 28), channels=SIAM1_CHANNELS, n_outputs=1):
    """Siam-I: five conv-BN-ReLU layers, global pooling, |f(x) - f(x_t)|, linear scorer."""
    in_shape = _check_in_shape(in_shape)
    if len(channels) != 5:
        raise ConfigError(f"Siam-I needs 5 channel widths, got {len(channels)}")
    tower = ConvTower(in_shape[0], tuple(channels), SIAM1_STRIDES)
    return SimilarityModel(SiameseEncoder(tower), n_outputs, "siam1",
                           {"in_shape": list(in_shape), "channels": list(channels)})


def build_siam2(in_shape=(1, 28, 28), channels=None, k=2, n_outputs=1):
    """Siam-II: five wide-residual blocks (k=2) with global pooling."""
    in_shape = _check_in_shape(in_shape)
    channels = tuple(channels) if channels is not None else tuple(c * k for c in SIAM2_BASE_CHANNELS)
    if len(channels) != 5:
        raise ConfigError(f"Siam-II needs 5 block widths, got {len(channels)}")
    tower = ResidualTower(in_shape[0], channels, SIAM2_STRIDES)
    return SimilarityModel(SiameseEncoder(tower), n_outputs, "siam2",
                           {"in_shape": list(in_shape), "channels": list(channels), "k": k})


def _wrn_blocks_per_stage(depth):
    if depth < 10 or (depth - 4) % 6:
        raise ConfigError(f"wide-resnet depth must be 6n+4 with n >= 1, got {depth}")
    return (depth - 4) // 6


def build_wrn_siamese(depth=40, k=2, in_shape=(3, 84, 84), n_outputs=1):
    """Siamese net on a WRN-depth-k tower (three stages, strides 1, 2, 2)."""
    in_shape = _check_in_shape(in_shape)
    n = _wrn_blocks_per_stage(depth)
    if k < 1:
        raise ConfigError("widening factor k must be >= 1")
    widths = [16 * k] * n + [32 * k] * n + [64 * k] * n
    strides = [1] * n + ([2] + [1] * (n - 1)) * 2
    tower = ResidualTower(in_shape[0], widths, strides)
    return SimilarityModel(SiameseEncoder(tower), n_outputs, "wrn_siamese",
                           {"in_shape": list(in_shape), "depth": depth, "k": k})


def build_srpn(cfg: SrpnConfig = None, n_outputs=1):
    cfg = cfg or SrpnConfig()
    return SimilarityModel(SrpnEncoder(cfg), n_outputs, "srpn", cfg.to_dict())


def build_model(spec: dict) -> SimilarityModel:
    """Rebuild a model from :meth:`SimilarityModel.spec` output."""
    tag, cfg, n_out = spec["architecture_tag"], dict(spec["config"]), spec.get("n_outputs", 1)
    if tag == "siam1":
        return build_siam1(cfg["in_shape"], cfg["channels"], n_outputs=n_out)
    if tag == "siam2":
        return build_siam2(cfg["in_shape"], cfg["channels"], cfg.get("k", 2), n_outputs=n_out)
    if tag == "wrn_siamese":
        return build_wrn_siamese(cfg["depth"], cfg["k"], cfg["in_shape"], n_outputs=n_out)
    if tag == "srpn":
        cfg["channels"], cfg["strides"] = tuple(cfg["channels"]), tuple(cfg["strides"])
        return build_srpn(SrpnConfig(**cfg), n_outputs=n_out)
    raise ConfigError(f"unknown architecture_tag {tag!r}")


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------- generative regularizer

@dataclass
class CorruptionConfig:
    """Stochastic corruption applied to the generator's conditioning image."""

    mode: str = "both"
    sigma: float = 0.2
    dropout_p: float = 0.1

    def validate(self):
        if self.mode not in ("additive-gaussian", "pixel-dropout", "both"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0 <= self.dropout_p <= 1:
            raise ConfigError("dropout_p must lie in [0, 1]")
        return self

    @property
    def is_identity(self):
        return ((self.sigma == 0 or self.mode == "pixel-dropout")
                and (self.dropout_p == 0 or self.mode == "additive-gaussian"))


def corrupt(x_t: torch.Tensor, cfg: CorruptionConfig, generator: torch.Generator = None):
    """Additive Gaussian noise and/or pixel dropout, clipped to [0, 1]."""
    cfg.validate()
    if cfg.is_identity:
        return x_t.clone()
    out = x_t
    if cfg.mode in ("additive-gaussian", "both") and cfg.sigma > 0:
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
        out = (out + cfg.sigma * noise).clamp(0.0, 1.0)
    if cfg.mode in ("pixel-dropout", "both") and cfg.dropout_p > 0:
        keep = torch.rand(x_t.shape, generator=generator, dtype=x_t.dtype,
                          device=x_t.device) >= cfg.dropout_p
        out = out * keep
    return out


class Generator(nn.Module):
    """Convolutional auto-encoder mapping a corrupted image to a same-shape image.

    Three stride-2 convolutions down, three transposed convolutions back up
    to the exact input size, sigmoid output.
    """

    def __init__(self, in_shape=(1, 28, 28), widths=(32, 64, 128), corruption=None):
        super().__init__()
        self.in_shape = _check_in_shape(in_shape)
        self.widths = tuple(widths)
        self.corruption = corruption or CorruptionConfig()
        down, cin = [], self.in_shape[0]
        for w in self.widths:
            down.append(ConvBNReLU(cin, w, stride=2))
            cin = w
        self.down = nn.ModuleList(down)
        self.up = nn.ModuleList()
        self.up_bn = nn.ModuleList()
        outs = list(reversed(self.widths[:-1])) + [self.in_shape[0]]
        for w in outs:
            self.up.append(nn.ConvTranspose2d(cin, w, 3, stride=2, padding=1))
            cin = w
        for w in outs[:-1]:
            self.up_bn.append(nn.BatchNorm2d(w))
        h, w = self.in_shape[1:]
        self._sizes = [(h, w)]
        for _ in self.widths:
            h, w = (h + 1) // 2, (w + 1) // 2
            self._sizes.append((h, w))
        self.bottleneck_shape = (self.widths[-1], h, w)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"generator expects {self.in_shape}, got {tuple(x.shape[1:])}")
        for layer in self.down:
            x = layer(x)
        targets = list(reversed(self._sizes[:-1]))
        for i, layer in enumerate(self.up):
            x = layer(x, output_size=targets[i])
            if i < len(self.up_bn):
                x = F.relu(self.up_bn[i](x))
        return torch.sigmoid(x)

    def spec(self):
        return {"in_shape": list(self.in_shape), "widths": list(self.widths),
                "corruption": asdict(self.corruption)}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["in_shape"], spec["widths"], CorruptionConfig(**spec["corruption"]))


def generate(gen: Generator, x_tilde: torch.Tensor) -> torch.Tensor:
    return gen(x_tilde)


@dataclass
class DiscriminatorOutput:
    """Per-row probabilities over (same, different, fake); rows sum to one."""

    probs: torch.Tensor = field(repr=False)

    @property
    def p_same(self):
        return self.probs[:, SAME]

    @property
    def p_diff(self):
        return self.probs[:, DIFF]

    @property
    def p_fake(self):
        return self.probs[:, FAKE]

    def __len__(self):
        return self.probs.shape[0]

    @classmethod
    def from_logits(cls, logits):
        return cls(torch.softmax(logits, dim=-1))


def discriminate(disc: SimilarityModel, x, x_t) -> DiscriminatorOutput:
    if disc.n_outputs != 3:
        raise ValueError(f"discriminator needs a 3-output head, has {disc.n_outputs}")
    if x.shape != x_t.shape:
        raise ValueError(f"input shapes differ: {tuple(x.shape)} vs {tuple(x_t.shape)}")
    return DiscriminatorOutput.from_logits(disc(x, x_t))

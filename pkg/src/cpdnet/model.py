"""The two-branch saliency model: a five-block backbone that bifurcates at an
optimization level, multi-branch dilated context modules, multiplicative
level fusion, partial decoders, and the holistic attention map that refines
the detection branch's input feature.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import json
import numpy as np

from .tensor import (Tensor, ShapeError, add, concat_channels, maximum, mul,
                     relu, sigmoid, upsample_bilinear, maxpool2)
from .layers import (ConvLayer, GaussianBlurLayer, init_conv, init_gaussian_kernel,
                     blur_geometry_for_side, minmax_normalize, _as_rng)

FULL_DECODER = "full"
TOP_LEVEL = 5


@dataclass(frozen=True)
class ModelConfig:
    block_channels: tuple = (8, 16, 32, 32, 32)
    convs_per_block: tuple = (2, 2, 3, 3, 3)
    opt_level: object = 3            # 2, 3, 4, or FULL_DECODER
    context_channels: int = 32
    context_branches: int = 4
    input_side: int = 352

    def __post_init__(self):
        if len(self.block_channels) != TOP_LEVEL or len(self.convs_per_block) != TOP_LEVEL:
            raise ValueError("block_channels and convs_per_block must list all 5 blocks")
        if min(self.block_channels) < 1 or min(self.convs_per_block) < 1:
            raise ValueError("block channel/conv counts must be positive")
        if self.opt_level != FULL_DECODER and self.opt_level not in (2, 3, 4):
            raise ValueError(f"opt_level must be 2, 3, 4 or {FULL_DECODER!r}, got {self.opt_level}")
        if self.context_branches < 1:
            raise ValueError("context_branches must be >= 1")
        if self.input_side % 16:
            raise ValueError(f"input_side must be divisible by 16, got {self.input_side}")

    @classmethod
    def toy(cls, opt_level: object = 3, input_side: int = 64) -> "ModelConfig":
        """Desk-scale configuration (~2e5 parameters at the defaults)."""
        return cls(opt_level=opt_level, context_channels=8, input_side=input_side)

    @property
    def full_decoder(self) -> bool:
        return self.opt_level == FULL_DECODER

    @property
    def levels(self) -> tuple:
        """Backbone levels the decoder aggregates."""
        start = 1 if self.full_decoder else self.opt_level
        return tuple(range(start, TOP_LEVEL + 1))

    def to_json(self) -> str:
        return json.dumps({
            "block_channels": list(self.block_channels),
            "convs_per_block": list(self.convs_per_block),
            "opt_level": self.opt_level,
            "context_channels": self.context_channels,
            "context_branches": self.context_branches,
            "input_side": self.input_side,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        return cls(block_channels=tuple(d["block_channels"]),
                   convs_per_block=tuple(d["convs_per_block"]),
                   opt_level=d["opt_level"],
                   context_channels=d["context_channels"],
                   context_branches=d["context_branches"],
                   input_side=d["input_side"])


class ConvBlock:
    """A backbone block: a stack of 3x3 same-padded conv+relu layers."""

    def __init__(self, in_ch: int, out_ch: int, n_convs: int, rng):
        self.layers = []
        c = in_ch
        for _ in range(n_convs):
            self.layers.append(init_conv(out_ch, c, 3, 3, rng=rng))
            c = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = relu(layer(x))
        return x


class ContextModule:
    """Multi-branch receptive-field expander.  Branch m (1-based) reduces to
    the context width with a 1x1 conv; branches beyond the first add a
    (2m-1)x(2m-1) conv and a 3x3 conv with dilation (2m-1).  Branch outputs
    are concatenated, fused back to the context width by a 1x1 conv, and a
    1x1 shortcut of the input is added before the final relu."""

    def __init__(self, in_ch: int, ctx: int, branches: int, rng):
        self.reduces = [init_conv(ctx, in_ch, 1, 1, rng=rng) for _ in range(branches)]
        self.mids = []
        self.dils = []
        for m in range(2, branches + 1):
            k = 2 * m - 1
            self.mids.append(init_conv(ctx, ctx, k, k, rng=rng))
            self.dils.append(init_conv(ctx, ctx, 3, 3, rng=rng, dilation=k))
        self.fuse = init_conv(ctx, branches * ctx, 1, 1, rng=rng)
        self.shortcut = init_conv(ctx, in_ch, 1, 1, rng=rng)
        self.out_channels = ctx

    def __call__(self, f: Tensor) -> Tensor:
        outs = [self.reduces[0](f)]
        for m, (mid, dil) in enumerate(zip(self.mids, self.dils), start=2):
            y = self.reduces[m - 1](f)
            y = mid(y)
            y = dil(y)
            outs.append(y)
        fused = self.fuse(concat_channels(outs))
        return relu(add(fused, self.shortcut(f)))

    def named_layers(self) -> list:
        items = []
        for m, r in enumerate(self.reduces, start=1):
            items.append((f"b{m}.reduce", r))
        for m, (mid, dil) in enumerate(zip(self.mids, self.dils), start=2):
            items.append((f"b{m}.mid", mid))
            items.append((f"b{m}.dil", dil))
        items.append(("fuse", self.fuse))
        items.append(("shortcut", self.shortcut))
        return items


def context_forward(cm: ContextModule, f: Tensor) -> Tensor:
    return cm(f)


class PartialDecoder:
    """Aggregates the context-refined features of levels l..5 into a
    one-channel logit map at level l's grid."""

    def __init__(self, levels: Sequence[int], in_channels: Sequence[int],
                 ctx: int, branches: int, rng):
        if len(levels) != len(in_channels):
            raise ShapeError("one input width per decoded level is required")
        self.levels = tuple(levels)
        self.contexts = [ContextModule(c, ctx, branches, rng) for c in in_channels]
        self.fuse_convs = {}
        for ii, i in enumerate(self.levels):
            for k in self.levels[ii + 1:]:
                self.fuse_convs[(i, k)] = init_conv(ctx, ctx, 3, 3, rng=rng)
        self.head = init_conv(ctx, len(self.levels) * ctx, 3, 3, rng=rng)
        self.logit = init_conv(1, ctx, 1, 1, rng=rng)
        self.context_channels = ctx

    def named_layers(self) -> list:
        items = []
        for lvl, cm in zip(self.levels, self.contexts):
            for name, layer in cm.named_layers():
                items.append((f"ctx{lvl}.{name}", layer))
        for (i, k), conv in sorted(self.fuse_convs.items()):
            items.append((f"fuse_{i}_{k}", conv))
        items.append(("head", self.head))
        items.append(("logit", self.logit))
        return items


def fuse_levels(feats: Sequence[Tensor], fuse_convs: dict, levels: Sequence[int]) -> list:
    """Multiplicative fusion: each level's feature is multiplied by a 3x3
    convolution of every deeper level's feature upsampled onto its grid
    (factor 2**(k-i)); the top level passes through unchanged."""
    if len(feats) != len(levels):
        raise ShapeError("fuse_levels needs one feature per level")
    for a, b in zip(feats, feats[1:]):
        if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ShapeError(f"level resolutions must halve exactly: {a.shape} vs {b.shape}")
    out = []
    for ii, i in enumerate(levels):
        acc = feats[ii]
        for kk in range(ii + 1, len(levels)):
            k = levels[kk]
            up = upsample_bilinear(feats[kk], 2 ** (k - i))
            acc = mul(acc, fuse_convs[(i, k)](up))
        out.append(acc)
    return out


def decode(pd: PartialDecoder, feats: Sequence[Tensor]) -> Tensor:
    """context modules -> multiplicative fusion -> upsample-to-l-grid ->
    concat -> 3x3 conv + relu -> 1x1 conv -> one-channel logits."""
    c1 = [cm(f) for cm, f in zip(pd.contexts, feats)]
    c2 = fuse_levels(c1, pd.fuse_convs, pd.levels)
    base = pd.levels[0]
    ups = [upsample_bilinear(t, 2 ** (lvl - base)) if lvl != base else t
           for lvl, t in zip(pd.levels, c2)]
    cat = concat_channels(ups)
    return pd.logit(relu(pd.head(cat)))


def holistic_attention(s_i: Tensor, blur: GaussianBlurLayer) -> Tensor:
    """Pointwise max of the min-max-normalized blurred map and the map
    itself; never smaller than the input map."""
    blurred = blur(s_i)
    return maximum(minmax_normalize(blurred), s_i)


@dataclass
class SaliencyOutputs:
    """One forward pass: probability maps at the decoder grid plus the
    full-resolution logits the loss consumes.  The full-decoder ablation
    produces only the detection outputs."""
    s_d: Tensor
    logits_d: Tensor
    s_i: Optional[Tensor] = None
    s_h: Optional[Tensor] = None
    logits_i: Optional[Tensor] = None


class CpdModel:
    """All learnable state: shared blocks 1..l, independent attention and
    detection copies of blocks l+1..5, one partial decoder per branch, and
    the learnable blur kernel.  Construction order is fixed, so a seed fully
    determines every parameter."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = _as_rng(seed)
        ch = config.block_channels
        convs = config.convs_per_block
        widths = [3] + list(ch[:-1])

        if config.full_decoder:
            shared_upto = TOP_LEVEL
        else:
            shared_upto = config.opt_level
        self.shared_blocks = [ConvBlock(widths[i], ch[i], convs[i], rng)
                              for i in range(shared_upto)]
        if config.full_decoder:
            self.attn_blocks = []
            self.det_blocks = []
            self.blur = None
            self.decoder_a = None
            level_in = [ch[i - 1] for i in config.levels]
            self.decoder_d = PartialDecoder(config.levels, level_in,
                                            config.context_channels,
                                            config.context_branches, rng)
        else:
            l = config.opt_level
            self.attn_blocks = [ConvBlock(widths[i], ch[i], convs[i], rng)
                                for i in range(l, TOP_LEVEL)]
            self.det_blocks = [ConvBlock(widths[i], ch[i], convs[i], rng)
                               for i in range(l, TOP_LEVEL)]
            level_in = [ch[i - 1] for i in config.levels]
            self.decoder_a = PartialDecoder(config.levels, level_in,
                                            config.context_channels,
                                            config.context_branches, rng)
            self.decoder_d = PartialDecoder(config.levels, level_in,
                                            config.context_channels,
                                            config.context_branches, rng)
            size, sig = blur_geometry_for_side(config.input_side)
            self.blur = init_gaussian_kernel(size, sig)

    # -- parameter plumbing -------------------------------------------------

    def named_layers(self) -> list:
        items = []
        for i, blk in enumerate(self.shared_blocks, start=1):
            for j, layer in enumerate(blk.layers):
                items.append((f"shared.block{i}.conv{j}", layer))
        start = (self.config.opt_level + 1) if not self.config.full_decoder else None
        for branch, blocks in (("attn", self.attn_blocks), ("det", self.det_blocks)):
            for bi, blk in enumerate(blocks):
                for j, layer in enumerate(blk.layers):
                    items.append((f"{branch}.block{start + bi}.conv{j}", layer))
        if self.decoder_a is not None:
            for name, layer in self.decoder_a.named_layers():
                items.append((f"dec_a.{name}", layer))
        for name, layer in self.decoder_d.named_layers():
            items.append((f"dec_d.{name}", layer))
        return items

    def named_parameters(self) -> dict:
        params: dict[str, Tensor] = {}
        for name, layer in self.named_layers():
            params[f"{name}.weight"] = layer.weight
            if layer.bias is not None:
                params[f"{name}.bias"] = layer.bias
        if self.blur is not None:
            params["blur.kernel"] = self.blur.kernel
        return params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def promote_to_float64(self) -> None:
        """In-place cast of every parameter to float64 (gradient checking)."""
        for p in self.parameters():
            p.data = p.data.astype(np.float64)


def backbone_forward(model: CpdModel, image: Tensor) -> list:
    """Run the shared blocks: features f_1..f_l (f_1..f_5 in full-decoder
    mode), level i at stride 2**(i-1).  Spatial dims must divide by 16."""
    n, c, h, w = image.shape
    if h % 16 or w % 16:
        raise ShapeError(f"input spatial dims must be divisible by 16, got {h}x{w}")
    feats = []
    x = image
    for i, blk in enumerate(model.shared_blocks):
        if i > 0:
            x = maxpool2(x)
        x = blk(x)
        feats.append(x)
    return feats


def branch_forward(blocks: Sequence[ConvBlock], f_l: Tensor) -> list:
    """Continue from the bifurcation feature through one branch's blocks."""
    feats = []
    x = f_l
    for blk in blocks:
        x = blk(maxpool2(x))
        feats.append(x)
    return feats


def cpd_forward(model: CpdModel, image: Tensor,
                attention_override: Optional[Tensor] = None) -> SaliencyOutputs:
    """Full two-branch forward pass (or the single full-decoder pass).

    ``attention_override`` substitutes the holistic attention map before the
    detection-branch refinement; diagnostic use only.
    """
    cfg = model.config
    if cfg.full_decoder:
        feats = backbone_forward(model, image)
        logits = decode(model.decoder_d, feats)
        return SaliencyOutputs(s_d=sigmoid(logits), logits_d=logits)

    l = cfg.opt_level
    shared = backbone_forward(model, image)
    f_l = shared[-1]
    attn_feats = [f_l] + branch_forward(model.attn_blocks, f_l)
    logits_i = decode(model.decoder_a, attn_feats)
    s_i = sigmoid(logits_i)
    s_h = holistic_attention(s_i, model.blur)
    refined = mul(f_l, s_h if attention_override is None else attention_override)
    det_feats = [refined] + branch_forward(model.det_blocks, refined)
    logits_d = decode(model.decoder_d, det_feats)
    s_d = sigmoid(logits_d)

    up = 2 ** (l - 1)
    return SaliencyOutputs(
        s_d=s_d,
        logits_d=upsample_bilinear(logits_d, up),
        s_i=s_i,
        s_h=s_h,
        logits_i=upsample_bilinear(logits_i, up),
    )

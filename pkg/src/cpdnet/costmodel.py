"""Analytical FLOP and activation-memory model of the network's forward
pass, used to compare the full decoder against partial decoders and the
two-branch configuration without running anything.

Counting rules (exact integer arithmetic):
- convolution: 2*kh*kw*Cin*Cout*Hout*Wout, plus Cout*Hout*Wout when biased
- bilinear upsampling: 8 FLOPs per output element (4 taps, weighted sum)
- elementwise add/mul/max and relu/sigmoid: 1 FLOP per element
- 2x2 max pooling: 3 FLOPs per output element (three compares)
- min-max normalization: 3 FLOPs per element (subtract, scale, reduce share)
- concatenation and padding: 0 FLOPs
- activation memory: 4 bytes per output element
"""

from dataclasses import dataclass, field

from .model import ModelConfig, TOP_LEVEL, blur_geometry_for_side

MODES = ("full_decoder", "partial_l2", "partial_l3", "partial_l4", "cpd_two_branch")


@dataclass
class LayerCost:
    name: str
    flops: int
    activation_bytes: int
    output_shape: tuple
    group: str          # "backbone" | "decoder" | "attention"
    level: int | None = None


@dataclass
class CostModel:
    mode: str
    side: int
    layers: list = field(default_factory=list)

    def add(self, name: str, flops: int, shape: tuple, group: str, level=None) -> None:
        elems = 1
        for d in shape:
            elems *= d
        self.layers.append(LayerCost(name=name, flops=int(flops),
                                     activation_bytes=4 * elems,
                                     output_shape=tuple(shape), group=group, level=level))

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def backbone_flops(self) -> int:
        return sum(l.flops for l in self.layers if l.group == "backbone")

    @property
    def decoder_flops(self) -> int:
        return sum(l.flops for l in self.layers if l.group == "decoder")

    @property
    def attention_flops(self) -> int:
        return sum(l.flops for l in self.layers if l.group == "attention")

    @property
    def total_activation_bytes(self) -> int:
        return sum(l.activation_bytes for l in self.layers)

    def decoder_flops_at_level(self, level: int) -> int:
        return sum(l.flops for l in self.layers
                   if l.group in ("decoder", "attention") and l.level == level)

    def decoded_levels(self) -> list:
        lv = sorted({l.level for l in self.layers
                     if l.group in ("decoder", "attention") and l.level is not None})
        return lv


def _conv_cost(cin: int, cout: int, k: int, h: int, w: int, bias: bool = True) -> int:
    f = 2 * k * k * cin * cout * h * w
    if bias:
        f += cout * h * w
    return f


def _emit_backbone(cm: CostModel, cfg: ModelConfig, levels: range, prefix: str,
                   start_level: int = 1) -> None:
    ch = cfg.block_channels
    convs = cfg.convs_per_block
    side = cm.side
    widths = [3] + list(ch[:-1])
    for i in levels:
        h = side // (2 ** (i - 1))
        if i > start_level:
            cm.add(f"{prefix}.pool{i}", 3 * ch[i - 2] * h * h, (ch[i - 2], h, h), "backbone", level=i)
        cin = widths[i - 1]
        for j in range(convs[i - 1]):
            cm.add(f"{prefix}.block{i}.conv{j}", _conv_cost(cin, ch[i - 1], 3, h, h),
                   (ch[i - 1], h, h), "backbone", level=i)
            cm.add(f"{prefix}.block{i}.relu{j}", ch[i - 1] * h * h,
                   (ch[i - 1], h, h), "backbone", level=i)
            cin = ch[i - 1]


def _emit_context(cm: CostModel, cfg: ModelConfig, name: str, in_ch: int,
                  h: int, level: int) -> None:
    ctx = cfg.context_channels
    nb = cfg.context_branches
    hw = h * h
    for m in range(1, nb + 1):
        cm.add(f"{name}.b{m}.reduce", _conv_cost(in_ch, ctx, 1, h, h), (ctx, h, h),
               "decoder", level)
        if m > 1:
            k = 2 * m - 1
            cm.add(f"{name}.b{m}.mid", _conv_cost(ctx, ctx, k, h, h), (ctx, h, h),
                   "decoder", level)
            cm.add(f"{name}.b{m}.dil", _conv_cost(ctx, ctx, 3, h, h), (ctx, h, h),
                   "decoder", level)
    cm.add(f"{name}.fuse", _conv_cost(nb * ctx, ctx, 1, h, h), (ctx, h, h), "decoder", level)
    cm.add(f"{name}.shortcut", _conv_cost(in_ch, ctx, 1, h, h), (ctx, h, h), "decoder", level)
    cm.add(f"{name}.residual_add", ctx * hw, (ctx, h, h), "decoder", level)
    cm.add(f"{name}.relu", ctx * hw, (ctx, h, h), "decoder", level)


def _emit_decoder(cm: CostModel, cfg: ModelConfig, name: str, levels: tuple) -> None:
    ctx = cfg.context_channels
    ch = cfg.block_channels
    side = cm.side
    base = levels[0]
    h_base = side // (2 ** (base - 1))
    for i in levels:
        h = side // (2 ** (i - 1))
        _emit_context(cm, cfg, f"{name}.ctx{i}", ch[i - 1], h, i)
    for ii, i in enumerate(levels):
        h = side // (2 ** (i - 1))
        for k in levels[ii + 1:]:
            cm.add(f"{name}.fuse_{i}_{k}.up", 8 * ctx * h * h, (ctx, h, h), "decoder", i)
            cm.add(f"{name}.fuse_{i}_{k}.conv", _conv_cost(ctx, ctx, 3, h, h),
                   (ctx, h, h), "decoder", i)
            cm.add(f"{name}.fuse_{i}_{k}.mul", ctx * h * h, (ctx, h, h), "decoder", i)
    for i in levels[1:]:
        cm.add(f"{name}.up_to_base_{i}", 8 * ctx * h_base * h_base,
               (ctx, h_base, h_base), "decoder", i)
    width = len(levels) * ctx
    cm.add(f"{name}.head", _conv_cost(width, ctx, 3, h_base, h_base),
           (ctx, h_base, h_base), "decoder", base)
    cm.add(f"{name}.head_relu", ctx * h_base * h_base, (ctx, h_base, h_base), "decoder", base)
    cm.add(f"{name}.logit", _conv_cost(ctx, 1, 1, h_base, h_base),
           (1, h_base, h_base), "decoder", base)
    cm.add(f"{name}.sigmoid", h_base * h_base, (1, h_base, h_base), "decoder", base)
    if base > 1:
        hs = cm.side
        cm.add(f"{name}.logit_upsample", 8 * hs * hs, (1, hs, hs), "decoder", base)


def model_cost(cfg: ModelConfig, mode: str) -> CostModel:
    """Enumerate every layer the given mode's forward executes and price it."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    cm = CostModel(mode=mode, side=cfg.input_side)

    if mode == "full_decoder":
        _emit_backbone(cm, cfg, range(1, TOP_LEVEL + 1), "backbone")
        _emit_decoder(cm, cfg, "dec", tuple(range(1, TOP_LEVEL + 1)))
        return cm

    if mode.startswith("partial_l"):
        l = int(mode[-1])
        _emit_backbone(cm, cfg, range(1, TOP_LEVEL + 1), "backbone")
        _emit_decoder(cm, cfg, "dec", tuple(range(l, TOP_LEVEL + 1)))
        return cm

    # cpd_two_branch
    l = cfg.opt_level if not cfg.full_decoder else 3
    levels = tuple(range(l, TOP_LEVEL + 1))
    _emit_backbone(cm, cfg, range(1, l + 1), "shared")
    for branch in ("attn", "det"):
        ch_l = cfg.block_channels[l - 1]
        h_l = cfg.input_side // (2 ** (l - 1))
        _emit_backbone(cm, cfg, range(l + 1, TOP_LEVEL + 1), branch, start_level=l + 1)
        cm.add(f"{branch}.pool{l + 1}", 3 * ch_l * (h_l // 2) * (h_l // 2),
               (ch_l, h_l // 2, h_l // 2), "backbone", level=l + 1)
    _emit_decoder(cm, cfg, "dec_a", levels)
    _emit_decoder(cm, cfg, "dec_d", levels)

    h_l = cfg.input_side // (2 ** (l - 1))
    size, _sigma = blur_geometry_for_side(cfg.input_side)
    cm.add("attention.blur", _conv_cost(1, 1, size, h_l, h_l, bias=False),
           (1, h_l, h_l), "attention", l)
    cm.add("attention.normalize", 3 * h_l * h_l, (1, h_l, h_l), "attention", l)
    cm.add("attention.max", h_l * h_l, (1, h_l, h_l), "attention", l)
    ch_l = cfg.block_channels[l - 1]
    cm.add("attention.refine_mul", ch_l * h_l * h_l, (ch_l, h_l, h_l), "attention", l)
    return cm


@dataclass
class ComparisonRow:
    mode: str
    level: object                 # backbone level or "total"
    flops: int
    cumulative_flops: int
    over_backbone: float
    vs_first: float


def compare(models: list) -> list:
    """Per-level cumulative decode cost, normalized so each model's backbone
    equals 1 (deepest level first, mirroring how aggregation accumulates
    from the top of the backbone downward)."""
    if len(models) < 1:
        raise ValueError("compare needs at least one CostModel")
    rows: list[ComparisonRow] = []
    first_total = models[0].total_flops
    for cm in models:
        backbone = cm.backbone_flops
        cum = backbone
        for level in sorted(cm.decoded_levels(), reverse=True):
            lf = cm.decoder_flops_at_level(level)
            cum += lf
            rows.append(ComparisonRow(mode=cm.mode, level=level, flops=lf,
                                      cumulative_flops=cum,
                                      over_backbone=cum / backbone,
                                      vs_first=cum / first_total))
        rows.append(ComparisonRow(mode=cm.mode, level="total", flops=cm.total_flops,
                                  cumulative_flops=cm.total_flops,
                                  over_backbone=cm.total_flops / backbone,
                                  vs_first=cm.total_flops / first_total))
    return rows


def comparison_to_tsv(rows: list) -> str:
    lines = ["mode\tlevel\tflops\tcumulative_flops\tover_backbone\tvs_first"]
    for r in rows:
        lines.append(f"{r.mode}\t{r.level}\t{r.flops}\t{r.cumulative_flops}"
                     f"\t{r.over_backbone:.4f}\t{r.vs_first:.4f}")
    return "\n".join(lines) + "\n"


def comparison_to_text(rows: list) -> str:
    header = f"{'mode':<16} {'level':>6} {'GFLOPs':>10} {'cum GFLOPs':>11} {'x backbone':>11} {'x first':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.mode:<16} {str(r.level):>6} {r.flops / 1e9:>10.3f} "
                     f"{r.cumulative_flops / 1e9:>11.3f} {r.over_backbone:>11.3f} {r.vs_first:>8.3f}")
    return "\n".join(lines)

"""Synthetic saliency scenes (colored shapes over textured backgrounds),
bit-exact binary PPM/PGM image I/O, and TSV dataset manifests."""

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class BadHeaderError(CodecError):
    pass


class TruncatedDataError(CodecError):
    pass


class ManifestError(ValueError):
    pass


class GenerationError(RuntimeError):
    """Scene constraints still unsatisfied after the rejection budget."""


# ---------------------------------------------------------------------------
# samples and scene synthesis


@dataclass
class Sample:
    image: Tensor      # (1,3,h,w) in [0,1]
    mask: Tensor       # (1,1,h,w) in {0,1}
    id: str


@dataclass
class SceneConfig:
    side: int = 64
    min_objects: int = 1
    max_objects: int = 3
    shapes: tuple = ("ellipse", "rectangle", "triangle")
    min_contrast: float = 0.30
    max_contrast: float = 0.80
    noise_octaves: int = 3
    noise_amplitude: float = 0.12
    # object linear scale as a fraction of the image side
    object_scale: tuple = (0.10, 0.28)
    # small background speckle: salient-looking distractors that are NOT
    # part of the ground truth; colored like the foreground when
    # clutter_like_foreground is set
    min_clutter: int = 2
    max_clutter: int = 6
    clutter_radius: tuple = (0.8, 1.8)
    clutter_like_foreground: bool = False
    # ragged-boundary iterations: each flips ~half of the one-pixel boundary
    # rings, so the mask edge is uncertain at the pixel scale (like hand-drawn
    # ground truth); the soft-edge blur below then hides the exact flips
    boundary_roughness: int = 1
    # 3x3 binomial blur of the rendered image: object edges become gradual,
    # so the exact binary boundary is not recoverable from the image
    soft_edges: bool = True
    allow_occlusion: bool = True
    min_area_frac: float = 0.02
    max_area_frac: float = 0.60
    seed: int = 0

    def __post_init__(self):
        if self.min_objects < 1:
            raise ValueError("min_objects must be >= 1 (masks may never be empty)")
        if self.max_objects < self.min_objects:
            raise ValueError(f"object range {self.min_objects}..{self.max_objects} is empty")
        if self.max_clutter < self.min_clutter or self.min_clutter < 0:
            raise ValueError(f"clutter range {self.min_clutter}..{self.max_clutter} is empty")
        if not (0 < self.min_area_frac < self.max_area_frac <= 1):
            raise ValueError("area fractions must satisfy 0 < min < max <= 1")


_LUM = np.array([0.299, 0.587, 0.114])


def _resize_axis_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Dense bilinear resampling matrix with half-pixel mapping (data prep
    only; not differentiable)."""
    m = np.zeros((n_dst, n_src))
    src = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0, n_src - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = src - i0
    m[np.arange(n_dst), i0] += 1 - w
    m[np.arange(n_dst), i1] += w
    return m


def resize_bilinear(arr: np.ndarray, side: int) -> np.ndarray:
    """Resize (c,h,w) or (h,w) to side x side."""
    squeeze = arr.ndim == 2
    a = arr[None] if squeeze else arr
    ry = _resize_axis_matrix(a.shape[1], side)
    rx = _resize_axis_matrix(a.shape[2], side)
    out = np.einsum("oh,chw,pw->cop", ry, a.astype(np.float64), rx)
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def _value_noise(rng: np.random.Generator, side: int, octaves: int) -> np.ndarray:
    """Multi-octave value noise in [0,1]: coarse random grids, bilinearly
    upsampled and summed with halving amplitudes."""
    acc = np.zeros((side, side))
    total = 0.0
    res, amp = 4, 1.0
    for _ in range(max(octaves, 1)):
        grid = rng.random((res, res))
        acc += amp * resize_bilinear(grid, side).astype(np.float64)
        total += amp
        res = min(res * 2, side)
        amp *= 0.5
    return acc / total


def _ellipse_mask(side: int, rng, scale) -> np.ndarray:
    cy, cx = rng.uniform(0.25, 0.75, 2) * side
    a = rng.uniform(*scale) * side
    b = rng.uniform(*scale) * side
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _rectangle_mask(side: int, rng, scale) -> np.ndarray:
    cy, cx = rng.uniform(0.25, 0.75, 2) * side
    hh = rng.uniform(scale[0] * 0.9, scale[1] * 0.93) * side
    hw = rng.uniform(scale[0] * 0.9, scale[1] * 0.93) * side
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def _triangle_mask(side: int, rng, scale) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7, 2) * side
    angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
    radii = rng.uniform(scale[0] * 1.3, scale[1] * 1.2, 3) * side
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    yy, xx = np.mgrid[0:side, 0:side]
    inside = np.ones((side, side), dtype=bool)
    sign = 0.0
    for i in range(3):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        if i == 0:
            centroid_cross = (x1 - x0) * (pts[2][1] - y0) - (y1 - y0) * (pts[2][0] - x0)
            sign = 1.0 if centroid_cross >= 0 else -1.0
        inside &= sign * cross >= 0
    return inside


_SHAPE_FNS = {"ellipse": _ellipse_mask, "rectangle": _rectangle_mask,
              "triangle": _triangle_mask}


def _dilate3(m: np.ndarray) -> np.ndarray:
    h, w = m.shape
    p = np.pad(m, 1)
    out = np.zeros_like(m)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def _erode3(m: np.ndarray) -> np.ndarray:
    return ~_dilate3(~m)


def _roughen(mask: np.ndarray, rng: np.random.Generator, iterations: int) -> np.ndarray:
    """Flip roughly half of the one-pixel inner/outer boundary rings."""
    for _ in range(iterations):
        ring_out = _dilate3(mask) & ~mask
        ring_in = mask & ~_erode3(mask)
        noise = rng.random(mask.shape)
        mask = (mask | (ring_out & (noise < 0.5))) & ~(ring_in & (noise < 0.5))
    return mask


def _binomial_blur3(img: np.ndarray) -> np.ndarray:
    """Separable [1,2,1]/4 blur per axis with replicated edges, per channel."""
    p = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
    img = (p[:, :-2] + 2 * p[:, 1:-1] + p[:, 2:]) * 0.25
    p = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="edge")
    return (p[:, :, :-2] + 2 * p[:, :, 1:-1] + p[:, :, 2:]) * 0.25


def synth_sample(cfg: SceneConfig, index: int) -> Sample:
    """One deterministic scene for (cfg.seed, index): value-noise background
    plus 1..max_objects colored shapes; the mask is exactly the union of the
    rendered shapes.  Rejects and retries geometry/colors until the area and
    contrast constraints hold (100 attempts, then GenerationError)."""
    rng = np.random.default_rng([cfg.seed, index])
    side = cfg.side
    area = side * side
    for _ in range(100):
        bg_color = rng.uniform(0.08, 0.92, 3)
        noise = _value_noise(rng, side, cfg.noise_octaves)
        tint = rng.uniform(0.6, 1.0, 3)
        img = bg_color[:, None, None] + cfg.noise_amplitude * (noise - 0.5)[None] * tint[:, None, None]
        img = np.clip(img, 0.0, 1.0)

        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        masks = []
        ok = True
        for _ in range(count):
            shape = cfg.shapes[rng.integers(len(cfg.shapes))]
            m = _SHAPE_FNS[shape](side, rng, cfg.object_scale)
            if cfg.boundary_roughness:
                m = _roughen(m, rng, cfg.boundary_roughness)
            frac = m.sum() / area
            if frac < 0.5 * cfg.min_area_frac or frac > cfg.max_area_frac:
                ok = False
                break
            if not cfg.allow_occlusion and any((m & prev).any() for prev in masks):
                ok = False
                break
            masks.append(m)
        if not ok:
            continue
        union = np.zeros((side, side), dtype=bool)
        for m in masks:
            union |= m
        union_frac = union.sum() / area
        if not (cfg.min_area_frac <= union_frac <= cfg.max_area_frac):
            continue

        bg_lum = float(_LUM @ img.reshape(3, -1).mean(axis=1))
        target = rng.uniform(cfg.min_contrast, cfg.max_contrast)
        direction = 1.0 if bg_lum + target <= 0.98 else -1.0
        if bg_lum + direction * target < 0.02 or bg_lum + direction * target > 0.98:
            direction = -direction
        fg_colors = []
        for m in masks:
            fg = rng.uniform(0.0, 1.0, 3)
            shift = (bg_lum + direction * target) - float(_LUM @ fg)
            fg = np.clip(fg + shift, 0.02, 0.98)
            fg_colors.append(fg)
            texture = cfg.noise_amplitude * 0.3 * (rng.random(int(m.sum())) - 0.5)
            for ch in range(3):
                img[ch][m] = np.clip(fg[ch] + texture, 0.0, 1.0)

        # distractor speckle on the background only (never in the mask)
        n_clutter = int(rng.integers(cfg.min_clutter, cfg.max_clutter + 1))
        yy, xx = np.mgrid[0:side, 0:side]
        for _ in range(n_clutter):
            cy, cx = rng.uniform(0, side, 2)
            r = rng.uniform(*cfg.clutter_radius)
            spot = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & ~union
            if not spot.any():
                continue
            if cfg.clutter_like_foreground:
                col = np.clip(fg_colors[rng.integers(len(fg_colors))]
                              + rng.uniform(-0.05, 0.05, 3), 0.02, 0.98)
            else:
                col = rng.uniform(0.0, 1.0, 3)
                shift = (bg_lum + direction * target) - float(_LUM @ col)
                col = np.clip(col + shift + rng.uniform(-0.1, 0.1), 0.02, 0.98)
            for ch in range(3):
                img[ch][spot] = col[ch]

        if cfg.soft_edges:
            img = _binomial_blur3(img)

        fg_lum = float((_LUM @ img.reshape(3, -1))[union.reshape(-1)].mean())
        bg_lum_final = float((_LUM @ img.reshape(3, -1))[~union.reshape(-1)].mean())
        if abs(fg_lum - bg_lum_final) < cfg.min_contrast:
            continue

        image = Tensor(img[None].astype(np.float32))
        mask = Tensor(union[None, None].astype(np.float32))
        return Sample(image=image, mask=mask, id=f"{index:05d}")
    raise GenerationError(f"could not satisfy scene constraints for sample {index}")


def synth_dataset(cfg: SceneConfig, count: int) -> list:
    return [synth_sample(cfg, i) for i in range(count)]


# ---------------------------------------------------------------------------
# binary PPM (P6) / PGM (P5) codecs, maxval 255, round(v*255) quantization


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise CodecError(f"write_ppm expects (3,h,w), got {rgb.shape}")
    h, w = rgb.shape[1], rgb.shape[2]
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise CodecError(f"write_pgm expects (h,w), got {gray.shape}")
    h, w = gray.shape
    data = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _parse_netpbm_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if not raw.startswith(magic):
        raise BadMagicError(f"{path}: expected {magic.decode()} magic, got {raw[:2]!r}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise BadHeaderError(f"{path}: unterminated comment in header")
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token:
            raise BadHeaderError(f"{path}: header ended before width/height/maxval")
        try:
            fields.append(int(token))
        except ValueError:
            raise BadHeaderError(f"{path}: non-numeric header token {token!r}") from None
    pos += 1  # single whitespace byte separates maxval from pixel data
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise BadHeaderError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise BadHeaderError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _parse_netpbm_header(raw, b"P6", path)
    need = w * h * 3
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise TruncatedDataError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _parse_netpbm_header(raw, b"P5", path)
    need = w * h
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise TruncatedDataError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SampleLoader:
    """Lazy (image, mask) pair; masks binarize at 0.5 on load."""
    id: str
    image_path: str
    mask_path: str

    def load(self) -> Sample:
        rgb = read_ppm(self.image_path)
        gray = read_pgm(self.mask_path)
        mask = (gray >= 0.5).astype(np.float32)
        return Sample(image=Tensor(rgb[None]), mask=Tensor(mask[None, None]), id=self.id)


def write_dataset(out_dir, cfg: SceneConfig, count: int) -> str:
    """Emit count PPM/PGM pairs plus manifest.tsv; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        s = synth_sample(cfg, i)
        img_name = f"{i:05d}.ppm"
        msk_name = f"{i:05d}_mask.pgm"
        write_ppm(os.path.join(out_dir, img_name), s.image.data[0])
        write_pgm(os.path.join(out_dir, msk_name), s.mask.data[0, 0])
        rows.append(f"{img_name}\t{msk_name}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + ("\n" if rows else ""))
    return manifest


def load_manifest(path) -> list[SampleLoader]:
    """Parse TSV rows "image<TAB>mask" (paths relative to the manifest's
    directory); referenced files must exist."""
    base = os.path.dirname(os.path.abspath(path))
    loaders = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 tab-separated fields, "
                                    f"got {len(parts)}")
            img, msk = (os.path.join(base, p) for p in parts)
            for p in (img, msk):
                if not os.path.isfile(p):
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
            loaders.append(SampleLoader(id=f"{len(loaders):05d}", image_path=img, mask_path=msk))
    return loaders

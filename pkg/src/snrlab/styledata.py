"""Procedural style corpus and proxy style/content metrics.

Content is a stroked shape (fine structure); style is everything global and
low-frequency: background colour, stroke colour, an illumination ramp, and
stroke thickness. Images are float arrays in [-1, 1] with shape (3, H, W).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    background: tuple[float, float, float]
    palette: tuple[float, float, float]
    gradient_dir: tuple[float, float] = (1.0, 0.0)
    gradient_amp: float = 0.0
    thickness: int = 1
    name: str = ""

    def __post_init__(self):
        for col in (self.background, self.palette):
            if len(col) != 3 or any(not -1.0 <= c <= 1.0 for c in col):
                raise ValueError(f"colours must be RGB in [-1, 1]: {col}")
        if not 0.0 <= self.gradient_amp <= 0.5:
            raise ValueError("gradient amplitude must lie in [0, 0.5]")
        if self.thickness < 1:
            raise ValueError("stroke thickness must be >= 1")
        norm = float(np.hypot(*self.gradient_dir))
        if self.gradient_amp > 0 and not np.isclose(norm, 1.0):
            raise ValueError("gradient direction must be a unit vector")


@dataclass(frozen=True)
class ContentSpec:
    content_id: int
    shape: str
    size: float = 4.5  # radius-like half extent, pixels
    center_jitter: float = 1.5
    size_jitter: float = 0.15

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")


# Shipped styles. |colour| + gradient amplitude <= 1 per channel, so nothing clips.
STYLES = (
    StyleSpec(0, (0.6, 0.2, -0.3), (-0.6, -0.6, 0.3), (1.0, 0.0), 0.25, 2, "dawn"),
    StyleSpec(1, (-0.7, -0.7, -0.3), (0.8, 0.8, 0.2), (0.0, 1.0), 0.2, 1, "night"),
    StyleSpec(2, (-0.3, 0.5, -0.5), (0.6, -0.3, 0.5), (0.6, 0.8), 0.3, 2, "forest"),
    StyleSpec(3, (0.7, 0.7, 0.6), (-0.7, -0.7, -0.7), (0.0, -1.0), 0.1, 1, "paper"),
    StyleSpec(4, (-0.5, -0.1, 0.6), (0.7, 0.6, -0.6), (-1.0, 0.0), 0.3, 2, "ocean"),
    # held out of pre-training; flat monochrome background
    StyleSpec(5, (0.7, -0.6, 0.7), (-0.2, 0.8, -0.5), (1.0, 0.0), 0.0, 2, "magenta"),
)
HELD_OUT_STYLE = 5

CONTENTS = tuple(ContentSpec(i, s) for i, s in enumerate(SHAPES))


def _pixel_grid(size: int):
    c = np.arange(size) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx, yy


def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def shape_mask(shape: str, cx: float, cy: float, r: float, thickness: int, size: int) -> np.ndarray:
    """Boolean stroke mask; r <= 0 gives an empty mask."""
    xx, yy = _pixel_grid(size)
    if r <= 0:
        return np.zeros((size, size), dtype=bool)
    half = thickness / 2.0
    if shape == "circle":
        d = np.abs(np.hypot(xx - cx, yy - cy) - r)
    elif shape == "square":
        a = r
        corners = [(cx - a, cy - a), (cx + a, cy - a), (cx + a, cy + a), (cx - a, cy + a)]
        d = np.min([_seg_dist(xx, yy, *corners[i], *corners[(i + 1) % 4]) for i in range(4)], axis=0)
    elif shape == "triangle":
        ang = -np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]
        d = np.min([_seg_dist(xx, yy, *pts[i], *pts[(i + 1) % 3]) for i in range(3)], axis=0)
    elif shape == "cross":
        d = np.minimum(
            _seg_dist(xx, yy, cx - r, cy, cx + r, cy),
            _seg_dist(xx, yy, cx, cy - r, cx, cy + r),
        )
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return d <= half


def gradient_field(style: StyleSpec, size: int) -> np.ndarray:
    """Illumination ramp; zero-mean over the pixel grid by symmetry."""
    xx, yy = _pixel_grid(size)
    h = size / 2.0
    dx, dy = style.gradient_dir
    return style.gradient_amp * (dx * (xx - h) + dy * (yy - h)) / h


def render(content: ContentSpec, style: StyleSpec, rng: np.random.Generator | None = None, size: int = 16) -> np.ndarray:
    """Draw one (3, size, size) image. With ``rng=None`` no jitter is applied."""
    if rng is None:
        jx = jy = js = 0.0
    else:
        jx, jy = rng.uniform(-content.center_jitter, content.center_jitter, 2)
        js = rng.uniform(-content.size_jitter, content.size_jitter)
    r = content.size * (1.0 + js)
    # stroke edge must stop short of the outermost pixel centres (mask uses <=)
    margin = r + style.thickness / 2.0 + 0.5 + 1e-6
    cx = float(np.clip(size / 2.0 + jx, margin, size - margin)) if margin < size / 2 else size / 2.0
    cy = float(np.clip(size / 2.0 + jy, margin, size - margin)) if margin < size / 2 else size / 2.0
    mask = shape_mask(content.shape, cx, cy, r, style.thickness, size)
    bg = np.asarray(style.background, dtype=np.float64)[:, None, None]
    fg = np.asarray(style.palette, dtype=np.float64)[:, None, None]
    img = np.where(mask[None], fg, bg) + gradient_field(style, size)[None]
    return np.clip(img, -1.0, 1.0)


@dataclass
class StyleCorpus:
    images: np.ndarray  # (N, 3, H, W)
    content_ids: np.ndarray
    style_ids: np.ndarray
    contents: tuple[ContentSpec, ...]
    styles: tuple[StyleSpec, ...]
    seed: int
    held_out: tuple[int, ...] = ()

    def __len__(self):
        return len(self.images)

    def subset(self, mask) -> "StyleCorpus":
        mask = np.asarray(mask)
        return StyleCorpus(
            self.images[mask], self.content_ids[mask], self.style_ids[mask],
            self.contents, self.styles, self.seed, self.held_out,
        )

    def training_split(self) -> "StyleCorpus":
        return self.subset(~np.isin(self.style_ids, self.held_out))

    def style_split(self, style_id: int) -> "StyleCorpus":
        return self.subset(self.style_ids == style_id)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "held_out": list(self.held_out),
            "contents": [asdict(c) for c in self.contents],
            "styles": [asdict(s) for s in self.styles],
            "items": [
                {"file": f"{i:05d}.png", "content_id": int(c), "style_id": int(s)}
                for i, (c, s) in enumerate(zip(self.content_ids, self.style_ids))
            ],
        }

    def export(self, out_dir) -> Path:
        from PIL import Image

        from .generate import to_uint8

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(to_uint8(self.images)):
            Image.fromarray(img).save(out / f"{i:05d}.png")
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))
        return out


def gen_corpus(content_vocab=4, style_vocab=6, per_pair: int = 8, seed: int = 0, held_out=(), size: int = 16) -> StyleCorpus:
    """``per_pair`` jittered renders of every (content, style) pair.

    ``content_vocab``/``style_vocab`` are counts (taking the shipped specs) or
    explicit spec sequences. ``held_out`` style ids are still rendered but can
    be split off with :meth:`StyleCorpus.training_split`.
    """
    contents = CONTENTS[:content_vocab] if isinstance(content_vocab, int) else tuple(content_vocab)
    styles = STYLES[:style_vocab] if isinstance(style_vocab, int) else tuple(style_vocab)
    if not contents or not styles or per_pair < 1:
        raise ValueError("need at least one content, one style and per_pair >= 1")
    if isinstance(content_vocab, int) and content_vocab > len(CONTENTS):
        raise ValueError(f"only {len(CONTENTS)} shipped contents")
    if isinstance(style_vocab, int) and style_vocab > len(STYLES):
        raise ValueError(f"only {len(STYLES)} shipped styles")
    rng = np.random.default_rng(seed)
    imgs, cids, sids = [], [], []
    for c in contents:
        for s in styles:
            for _ in range(per_pair):
                imgs.append(render(c, s, rng, size))
                cids.append(c.content_id)
                sids.append(s.style_id)
    return StyleCorpus(
        np.stack(imgs), np.array(cids), np.array(sids), contents, styles, seed, tuple(held_out)
    )


# ---------------------------------------------------------------- metrics

K_LOWFREQ = 16


def _lowfreq_index(size: int, k: int):
    f = np.fft.fftfreq(size) * size
    fy, fx = np.meshgrid(f, f[: size // 2 + 1], indexing="ij")
    rad = np.hypot(fy, fx).ravel()
    order = np.lexsort((np.arange(rad.size), rad))
    order = order[rad[order] > 0]  # DC is the mean colour, handled separately
    return order[:k]


def _plane_basis(size: int) -> np.ndarray:
    xx, yy = _pixel_grid(size)
    h = size / 2.0
    return np.stack([np.ones(size * size), (xx.ravel() - h) / h, (yy.ravel() - h) / h], axis=1)


def _detrend(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split (..., C, H, W) into a zero-mean linear ramp and the remainder, per channel."""
    size = x.shape[-1]
    basis = _plane_basis(size)
    flat = x.reshape(-1, size * size)
    coef, *_ = np.linalg.lstsq(basis, flat.T, rcond=None)
    ramp = (basis[:, 1:] @ coef[1:]).T
    return (flat - ramp).reshape(x.shape[:-2] + (-1,)), ramp.reshape(x.shape[:-2] + (-1,))


def background_color(images) -> np.ndarray:
    """Per-channel median after removing the illumination ramp.

    Strokes cover well under half the canvas, so the median lands on the
    background.
    """
    x = np.asarray(images, dtype=np.float64)
    flat, _ = _detrend(x)
    return np.median(flat, axis=-1)


def lowfreq_magnitudes(images, k: int = K_LOWFREQ) -> np.ndarray:
    """|FFT| / (H*W) at the k lowest non-zero frequencies, per channel."""
    x = np.asarray(images, dtype=np.float64)
    size = x.shape[-1]
    spec = np.abs(np.fft.rfft2(x)) / (x.shape[-1] * x.shape[-2])
    flat = spec.reshape(spec.shape[:-2] + (-1,))
    return flat[..., _lowfreq_index(size, k)]


@dataclass(frozen=True)
class StyleMetric:
    k: int = K_LOWFREQ
    color_scale: float = 1.0
    freq_scale: float = 1.5
    weight_color: float = 0.5
    # combined distance at which the score reaches 0
    distance_scale: float = 0.5
    reference_jitter_seed: int = 1234
    reference_per_shape: int = 16
    _cache: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    def reference(self, style: StyleSpec, size: int):
        key = (style, size)
        if key not in self._cache:
            rng = np.random.default_rng(self.reference_jitter_seed)
            refs = np.stack([
                render(c, style, rng, size) for c in CONTENTS for _ in range(self.reference_per_shape)
            ])
            self._cache[key] = (background_color(refs).mean(axis=0), lowfreq_magnitudes(refs, self.k).mean(axis=0))
        return self._cache[key]

    def distances(self, samples, style: StyleSpec) -> tuple[np.ndarray, float]:
        """Per-sample background-colour distance and the set-level spectrum distance."""
        x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
        if x.ndim == 3:
            x = x[None]
        if len(x) == 0:
            raise ValueError("style_score needs at least one sample")
        ref_bg, ref_mag = self.reference(style, x.shape[-1])
        d_col = np.linalg.norm(background_color(x) - ref_bg, axis=-1) / self.color_scale
        # Spectra are compared as set averages: per-image spectra mostly encode
        # shape and jitter, the average keeps the global ramp and colour contrast.
        d_frq = float(np.linalg.norm(lowfreq_magnitudes(x, self.k).mean(axis=0) - ref_mag)) / self.freq_scale
        return d_col, d_frq

    def score(self, samples, style: StyleSpec) -> float:
        d_col, d_frq = self.distances(samples, style)
        d = self.weight_color * float(np.mean(d_col)) + (1.0 - self.weight_color) * d_frq
        return float(1.0 - min(1.0, (d / self.distance_scale) ** 2))


_DEFAULT_STYLE_METRIC = StyleMetric()


def style_score(samples, reference_style: StyleSpec, metric: StyleMetric = _DEFAULT_STYLE_METRIC) -> float:
    """Similarity in [0, 1] to a reference style's global statistics.

    ``d`` is a weighted sum of the mean background-colour error and the
    distance between average low-frequency spectra; the score is
    ``1 - min(1, (d / distance_scale)^2)``.
    """
    return metric.score(samples, reference_style)


_TEMPLATE_CACHE: dict = {}


def _whiten(a):
    a = a - a.mean(axis=(-2, -1), keepdims=True)
    s = np.sqrt((a * a).mean(axis=(-2, -1), keepdims=True))
    return a / np.where(s > 0, s, 1.0)


def _templates(size: int) -> np.ndarray:
    """Whitened centred masks, shape (n_shapes, variants, H, W), over sizes and stroke widths."""
    if size not in _TEMPLATE_CACHE:
        c = size / 2.0
        _TEMPLATE_CACHE[size] = np.stack([
            np.stack([
                _whiten(shape_mask(shape, c, c, CONTENTS[i].size * scale, th, size).astype(np.float64))
                for scale in (0.85, 1.0, 1.15)
                for th in (1, 2, 3)
            ])
            for i, shape in enumerate(SHAPES)
        ])
    return _TEMPLATE_CACHE[size]


def foreground_map(images) -> np.ndarray:
    """Style-whitened stroke map: remove the ramp and background, take the colour distance."""
    x = np.asarray(images, dtype=np.float64)
    size = x.shape[-1]
    flat, _ = _detrend(x)
    med = np.median(flat, axis=-1, keepdims=True)
    fg = np.linalg.norm(flat - med, axis=-2)
    return _whiten(fg.reshape(fg.shape[:-1] + (size, size)))


def classify_shape(images, max_shift: int = 2) -> np.ndarray:
    """Index into SHAPES of the best normalised cross-correlation over small shifts."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    fg = foreground_map(x)
    tmpl = _templates(x.shape[-1])
    best = np.full((len(x), tmpl.shape[0]), -np.inf)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            shifted = np.roll(tmpl, (dy, dx), axis=(-2, -1))
            ncc = np.einsum("nhw,kvhw->nkv", fg, shifted) / (x.shape[-1] * x.shape[-2])
            best = np.maximum(best, ncc.max(axis=-1))
    return np.argmax(best, axis=1)


def content_score(samples, expected_content: ContentSpec) -> float:
    """Fraction of samples whose best-matching shape template is the expected one."""
    x = np.asarray(samples)
    if x.ndim == 3:
        x = x[None]
    if len(x) == 0:
        raise ValueError("content_score needs at least one sample")
    return float(np.mean(classify_shape(x) == SHAPES.index(expected_content.shape)))

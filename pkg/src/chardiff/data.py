"""Synthetic design-sample generation: rendering, masks, captions, filters.

Each sample is a solid-background canvas with one or more words stamped
from the glyph atlas, one word per line. Because rendering is done
in-package, every character's exact pixel coverage is recorded as its
region mask, giving loss-grade ground truth for free.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .atlas import CHAR_SPACING, GLYPH_H, GLYPH_W, GlyphAtlas, default_atlas
from .errors import LayoutError, MaskAlignmentError, ScorerError
from .vocab import extract_render_words


@dataclass
class CharacterMaskSet:
    """Per-character binary region masks, in reading order.

    masks: (n_chars, H, W) boolean; word_boundaries: exclusive end index of
    each word's character run, e.g. ["HI", "OK"] -> [2, 4].
    """

    masks: np.ndarray
    word_boundaries: list[int]

    @property
    def n_chars(self) -> int:
        return int(self.masks.shape[0])

    def masks_for_word(self, word_idx: int) -> np.ndarray:
        start = 0 if word_idx == 0 else self.word_boundaries[word_idx - 1]
        return self.masks[start : self.word_boundaries[word_idx]]

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "CharacterMaskSet":
        return cls(masks=np.zeros((0,) + shape, dtype=bool), word_boundaries=[])


@dataclass
class SampleMeta:
    height: int
    width: int
    aspect_ratio: float
    text_length: int
    aesthetic_score: float | None = None
    style_seed: int | None = None
    scale: int | None = None


@dataclass
class DesignSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    caption: str
    render_words: list[str]
    char_masks: CharacterMaskSet
    meta: SampleMeta


@dataclass
class FilterConfig:
    """Quality gate thresholds; defaults follow the dataset curation rules."""

    max_text_chars: int = 150
    min_resolution: int = 768
    aspect_ratio_range: tuple[float, float] = (0.25, 4.0)
    min_aesthetic: float = 4.5

    def __post_init__(self):
        lo, hi = self.aspect_ratio_range
        if not lo < hi:
            raise ValueError("aspect_ratio_range must satisfy low < high")
        if self.max_text_chars < 0 or self.min_resolution < 0 or self.min_aesthetic < 0:
            raise ValueError("filter thresholds must be non-negative")


@dataclass
class FilterDecision:
    keep: bool
    reason: str | None  # first failing rule, None when kept
    aesthetic: float | None = None


class ConstantScorer:
    """Stand-in aesthetic scorer returning a fixed value for every sample."""

    def __init__(self, value: float = 5.0):
        self.value = value

    def __call__(self, sample: DesignSample) -> float:
        return self.value


def visual_text_length(render_words: list[str]) -> int:
    """Character count of the visual text, words joined by single spaces."""
    return len(" ".join(render_words))


def filter_sample(sample: DesignSample, cfg: FilterConfig, scorer) -> FilterDecision:
    """Apply the filter chain in fixed order; bounds are inclusive.

    Order: text length, resolution, aspect ratio, aesthetic score. The
    reason code names the first failing rule. A scorer exception is a
    ScorerError, not a reject.
    """
    if visual_text_length(sample.render_words) > cfg.max_text_chars:
        return FilterDecision(False, "text_length")
    h, w = sample.meta.height, sample.meta.width
    if min(h, w) < cfg.min_resolution:
        return FilterDecision(False, "resolution")
    lo, hi = cfg.aspect_ratio_range
    aspect = w / h
    if not (lo <= aspect <= hi):
        return FilterDecision(False, "aspect_ratio")
    try:
        score = float(scorer(sample))
    except Exception as e:
        raise ScorerError(f"aesthetic scorer failed: {e}") from e
    if score < cfg.min_aesthetic:
        return FilterDecision(False, "aesthetic", aesthetic=score)
    return FilterDecision(True, None, aesthetic=score)


# ---------------------------------------------------------------------------
# Caption assembly

CAPTION_BASES = [
    "A minimalist poster",
    "A vintage flyer",
    "A bold startup logo",
    "A colorful event banner",
    "A clean product label",
    "A retro concert poster",
    "A modern book cover",
    "An elegant invitation card",
]

CAPTION_TEMPLATES = [
    ' with a text of "{}"',
    ' with words saying "{}"',
    ' featuring the text "{}"',
    ' that reads "{}"',
]


def assemble_caption(base_caption: str, render_words: list[str], seed: int = 0) -> str:
    """Ensure the caption quotes the render text.

    Unchanged when there is nothing to render or when every render word
    already appears inside double quotes; otherwise one template from the
    fixed pool (selected by seed) is appended with the words joined by
    spaces.
    """
    if not render_words:
        return base_caption
    quoted = Counter(extract_render_words(base_caption))
    if not (Counter(render_words) - quoted):
        return base_caption
    template = CAPTION_TEMPLATES[seed % len(CAPTION_TEMPLATES)]
    return base_caption + template.format(" ".join(render_words))


# ---------------------------------------------------------------------------
# Rendering


@dataclass
class RenderStyle:
    """Seeded layout/color policy for synthetic samples."""

    scales: tuple[int, ...] = (2,)
    margin: int = 2  # minimum pixels between text and canvas edge
    line_gap: int = 3  # unscaled rows between lines
    h_jitter: int = 4  # max horizontal offset from centered, in pixels
    v_jitter: int = 4
    min_contrast: float = 0.35  # minimum |luma difference| in [0, 1]


def _luma(rgb: np.ndarray) -> float:
    return float(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) / 255.0


def _pick_colors(rng: np.random.Generator, n_words: int, min_contrast: float):
    """Background plus one contrasting text color per word, as uint8."""
    dark_bg = bool(rng.integers(0, 2))
    bg = rng.integers(0, 70, size=3) if dark_bg else rng.integers(185, 256, size=3)
    bg = bg.astype(np.uint8)
    fg = []
    for _ in range(n_words):
        for _attempt in range(64):
            c = (rng.integers(160, 256, size=3) if dark_bg else rng.integers(0, 96, size=3)).astype(np.uint8)
            if abs(_luma(c) - _luma(bg)) >= min_contrast:
                fg.append(c)
                break
        else:  # pragma: no cover - ranges above always clear the gap
            fg.append(np.array([255, 255, 255] if dark_bg else [0, 0, 0], dtype=np.uint8))
    return bg, fg


def render_sample(
    words: list[str],
    style_seed: int,
    canvas: tuple[int, int],
    style: RenderStyle | None = None,
    atlas: GlyphAtlas | None = None,
    caption_base: str | None = None,
) -> DesignSample:
    """Rasterize words onto a seeded canvas with exact per-character masks.

    One word per line; position, scale, and colors all derive from
    style_seed, so identical inputs give identical samples. Raises
    LayoutError when the words cannot fit at the smallest allowed scale.
    """
    if not words:
        raise LayoutError("render_sample needs at least one word")
    h, w = canvas
    if h < 32 or w < 32:
        raise LayoutError(f"canvas {canvas} is below the 32x32 minimum")
    style = style or RenderStyle()
    atlas = atlas or default_atlas()
    rng = np.random.Generator(np.random.Philox(key=style_seed))

    def fits(scale):
        width_ok = all(
            GlyphAtlas.word_width(word, scale) <= w - 2 * style.margin for word in words
        )
        text_h = len(words) * GLYPH_H * scale + (len(words) - 1) * style.line_gap * scale
        return width_ok and text_h <= h - 2 * style.margin

    usable = [s for s in sorted(style.scales) if fits(s)]
    if not usable:
        raise LayoutError(
            f"words {words} cannot fit a {h}x{w} canvas at scales {style.scales}"
        )
    scale = int(rng.choice(usable))

    bg, fg = _pick_colors(rng, len(words), style.min_contrast)
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = bg

    text_h = len(words) * GLYPH_H * scale + (len(words) - 1) * style.line_gap * scale
    v_free = h - 2 * style.margin - text_h
    y = style.margin + v_free // 2
    y += int(rng.integers(-style.v_jitter, style.v_jitter + 1)) if v_free > 0 else 0
    y = int(np.clip(y, style.margin, h - style.margin - text_h))

    masks = []
    boundaries = []
    for wi, word in enumerate(words):
        ww = GlyphAtlas.word_width(word, scale)
        h_free = w - 2 * style.margin - ww
        x = style.margin + h_free // 2
        x += int(rng.integers(-style.h_jitter, style.h_jitter + 1)) if h_free > 0 else 0
        x = int(np.clip(x, style.margin, w - style.margin - ww))
        for ci, ch in enumerate(word):
            gx = x + ci * (GLYPH_W + CHAR_SPACING) * scale
            bm = atlas.rendered(ch, scale)
            gh, gw = bm.shape
            mask = np.zeros((h, w), dtype=bool)
            mask[y : y + gh, gx : gx + gw] = bm
            image[mask] = fg[wi]
            masks.append(mask)
        boundaries.append(len(masks))
        y += (GLYPH_H + style.line_gap) * scale

    caption_seed = int(rng.integers(0, 2**31))
    if caption_base is None:
        caption_base = CAPTION_BASES[int(rng.integers(0, len(CAPTION_BASES)))]
    caption = assemble_caption(caption_base, words, seed=caption_seed)

    return DesignSample(
        image=image.astype(np.float32) / 255.0,
        caption=caption,
        render_words=list(words),
        char_masks=CharacterMaskSet(
            masks=np.stack(masks) if masks else np.zeros((0, h, w), dtype=bool),
            word_boundaries=boundaries,
        ),
        meta=SampleMeta(
            height=h,
            width=w,
            aspect_ratio=w / h,
            text_length=visual_text_length(words),
            style_seed=style_seed,
            scale=scale,
        ),
    )


# ---------------------------------------------------------------------------
# Connected-component mask extraction


def _components_4(nonzero: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean grid, as boolean masks."""
    h, w = nonzero.shape
    seen = np.zeros_like(nonzero, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if not nonzero[i, j] or seen[i, j]:
                continue
            mask = np.zeros_like(nonzero, dtype=bool)
            queue = deque([(i, j)])
            seen[i, j] = True
            while queue:
                y, x = queue.popleft()
                mask[y, x] = True
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and nonzero[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(mask)
    return comps


def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def connected_component_masks(segmentation: np.ndarray, annotation: list[str]) -> CharacterMaskSet:
    """Turn a character segmentation into per-character masks.

    Components are 4-connected regions of nonzero pixels; pieces whose
    horizontal bounding boxes overlap by at least half the narrower width
    are merged (dots of 'i', split strokes). Merged groups are ordered by
    leftmost bounding-box column (ties by topmost row) and assigned to the
    annotated characters in order; a count mismatch raises
    MaskAlignmentError.
    """
    segmentation = np.asarray(segmentation)
    chars = "".join(annotation)
    comps = _components_4(segmentation != 0)

    parent = list(range(len(comps)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    boxes = [_bbox(c) for c in comps]
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            _, _, il, ir = boxes[i]
            _, _, jl, jr = boxes[j]
            overlap = min(ir, jr) - max(il, jl) + 1
            narrower = min(ir - il + 1, jr - jl + 1)
            if overlap >= 0.5 * narrower:
                parent[find(i)] = find(j)

    groups: dict[int, np.ndarray] = {}
    for i, comp in enumerate(comps):
        root = find(i)
        groups[root] = groups.get(root, np.zeros_like(comp)) | comp

    merged = sorted(groups.values(), key=lambda m: (_bbox(m)[2], _bbox(m)[0]))
    if len(merged) != len(chars):
        raise MaskAlignmentError(
            f"{len(merged)} merged components vs {len(chars)} annotated characters"
        )
    boundaries = list(np.cumsum([len(word) for word in annotation]).astype(int)) if annotation else []
    masks = (
        np.stack(merged)
        if merged
        else np.zeros((0,) + segmentation.shape, dtype=bool)
    )
    return CharacterMaskSet(masks=masks, word_boundaries=boundaries)

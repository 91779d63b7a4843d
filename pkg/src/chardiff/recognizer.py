"""Template-matching text recognizer for atlas-rendered images.

Slides every atlas glyph over the image at the configured scales, scores
windows by normalized cross-correlation (absolute value, so dark-on-light
and light-on-dark both match), applies greedy non-maximum suppression,
and groups surviving detections into lines and words by position. Stands
in for an external OCR model on the synthetic corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlas import GLYPH_H, GLYPH_W, GlyphAtlas, default_atlas
from .errors import RecognizerError

DEFAULT_MIN_SCORE = 0.55


@dataclass
class RecognitionResult:
    words: list[str]
    per_word_confidence: list[float]


@dataclass
class _Detection:
    glyph: str
    score: float
    y: int  # top-left
    x: int
    h: int
    w: int
    scale: int
    ink: int  # template ink pixels; breaks score ties toward specificity

    @property
    def cx(self):
        return self.x + self.w / 2

    @property
    def cy(self):
        return self.y + self.h / 2


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def _ink(image: np.ndarray) -> np.ndarray:
    """Polarity-free ink intensity: distance from the median (background)
    luma, so dark-on-light and light-on-dark text score identically."""
    gray = _gray(image)
    return np.abs(gray - np.median(gray))


def _scan_scale(gray, atlas, charset, scale, min_score):
    wh, ww = GLYPH_H * scale, GLYPH_W * scale
    H, W = gray.shape
    if wh > H or ww > W:
        return []
    windows = np.lib.stride_tricks.sliding_window_view(gray, (wh, ww))
    ny, nx = windows.shape[:2]
    flat = windows.reshape(ny * nx, wh * ww).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(flat, axis=1)
    ok = norms > 1e-6

    raw = np.stack(
        [atlas.rendered(g, scale).astype(np.float64).ravel() for g in charset]
    )
    inks = raw.sum(axis=1).astype(int)
    templates = raw - raw.mean(axis=1, keepdims=True)
    templates /= np.linalg.norm(templates, axis=1, keepdims=True)

    scores = np.zeros((ny * nx, len(charset)))
    if ok.any():
        scores[ok] = (flat[ok] @ templates.T) / norms[ok, None]
    best = scores.argmax(axis=1)
    best_score = scores[np.arange(len(best)), best]
    hits = np.flatnonzero(best_score >= min_score)
    return [
        _Detection(
            glyph=charset[best[i]],
            score=float(best_score[i]),
            y=int(i // nx),
            x=int(i % nx),
            h=wh,
            w=ww,
            scale=scale,
            ink=int(inks[best[i]]),
        )
        for i in hits
    ]


def _nms(detections):
    """Greedy suppression around kept detections.

    Adjacent characters sit one advance apart horizontally and well over a
    glyph height apart vertically (separate lines), so anything nearer than
    0.7x those distances to a stronger detection is an offset echo of it.
    """
    kept = []
    # a sub-pattern glyph can tie a perfect score against a shifted window
    # of a larger glyph; quantize away float noise so the larger (more ink)
    # template wins the tie
    for d in sorted(detections, key=lambda d: (-round(d.score, 6), -d.ink, d.y, d.x)):
        crowded = False
        for k in kept:
            s = max(d.scale, k.scale)
            if (
                abs(d.cx - k.cx) < 0.7 * (GLYPH_W + 1) * s
                and abs(d.cy - k.cy) < (GLYPH_H + 1) * s
            ):
                crowded = True
                break
        if not crowded:
            kept.append(d)
    return kept


def _group(detections):
    """Detections -> (words, confidences) in reading order."""
    if not detections:
        return [], []
    rest = sorted(detections, key=lambda d: d.cy)
    lines = []
    for d in rest:
        if lines and abs(d.cy - np.mean([e.cy for e in lines[-1]])) <= 0.6 * d.h:
            lines[-1].append(d)
        else:
            lines.append([d])
    words, confs = [], []
    for line in lines:
        line.sort(key=lambda d: d.cx)
        current = [line[0]]
        for prev, d in zip(line, line[1:]):
            gap = d.x - (prev.x + prev.w)
            if gap > 0.75 * GLYPH_W * max(prev.scale, d.scale):
                words.append("".join(e.glyph for e in current))
                confs.append(float(np.mean([e.score for e in current])))
                current = [d]
            else:
                current.append(d)
        words.append("".join(e.glyph for e in current))
        confs.append(float(np.mean([e.score for e in current])))
    return words, confs


def recognize_template(
    image: np.ndarray,
    atlas: GlyphAtlas | None = None,
    scales: tuple[int, ...] = (2,),
    charset: str | None = None,
    min_score: float = DEFAULT_MIN_SCORE,
) -> RecognitionResult:
    """Recognize atlas-rendered text; an empty result is valid output."""
    atlas = atlas or default_atlas()
    charset = charset if charset is not None else atlas.charset
    ink = _ink(image)
    detections = []
    for scale in scales:
        detections.extend(_scan_scale(ink, atlas, charset, scale, min_score))
    words, confs = _group(_nms(detections))
    return RecognitionResult(words=words, per_word_confidence=confs)


class TemplateRecognizer:
    """Configured recognizer callable: image -> RecognitionResult."""

    def __init__(self, atlas=None, scales=(2,), charset=None, min_score=DEFAULT_MIN_SCORE):
        self.atlas = atlas or default_atlas()
        self.scales = tuple(scales)
        self.charset = charset
        self.min_score = min_score

    def __call__(self, image) -> RecognitionResult:
        try:
            return recognize_template(
                image, self.atlas, self.scales, self.charset, self.min_score
            )
        except RecognizerError:
            raise
        except Exception as e:  # surfaced as a recognizer failure, not a crash
            raise RecognizerError(f"recognition failed: {e}") from e

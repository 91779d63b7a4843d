"""Corpus persistence and deterministic corpus generation.

Layout on disk (schema chardiff-corpus/v1):

    <dir>/corpus.json          manifest: schema, config echo, counts, hash
    <dir>/samples/000000.png   lossless RGB image
    <dir>/samples/000000.json  sidecar record for the image next to it

Sidecar record fields: schema, image (file name), caption, render_words,
word_boundaries, mask_shape [H, W], char_masks_rle (per character, a flat
[start, length, start, length, ...] run list over the row-major flattened
mask), and meta. All integers, so records round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    CharacterMaskSet,
    ConstantScorer,
    DesignSample,
    FilterConfig,
    RenderStyle,
    SampleMeta,
    render_sample,
)
from .errors import ValidationError

CORPUS_SCHEMA = "chardiff-corpus/v1"
SAMPLE_SCHEMA = "chardiff-corpus-sample/v1"


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean grid: flat [start, length, ...] pairs."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if not flat.any():
        return []
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    out = np.empty(2 * len(starts), dtype=np.int64)
    out[::2] = starts
    out[1::2] = ends - starts
    return out.tolist()


def rle_to_mask(rle: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in zip(rle[::2], rle[1::2]):
        flat[start : start + length] = True
    return flat.reshape(shape)


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Encode a [0,1] float image as PNG bytes (lossless, no timestamps)."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
    return arr.astype(np.float32) / 255.0


def sample_record(sample: DesignSample, image_name: str) -> dict:
    h, w = sample.meta.height, sample.meta.width
    return {
        "schema": SAMPLE_SCHEMA,
        "image": image_name,
        "caption": sample.caption,
        "render_words": sample.render_words,
        "word_boundaries": sample.char_masks.word_boundaries,
        "mask_shape": [h, w],
        "char_masks_rle": [mask_to_rle(m) for m in sample.char_masks.masks],
        "meta": {
            "height": h,
            "width": w,
            "aspect_ratio": sample.meta.aspect_ratio,
            "text_length": sample.meta.text_length,
            "aesthetic_score": sample.meta.aesthetic_score,
            "style_seed": sample.meta.style_seed,
            "scale": sample.meta.scale,
        },
    }


def record_to_sample(record: dict, image: np.ndarray) -> DesignSample:
    if record.get("schema") != SAMPLE_SCHEMA:
        raise ValidationError(f"unknown sample schema {record.get('schema')!r}")
    shape = tuple(record["mask_shape"])
    masks = np.stack([rle_to_mask(r, shape) for r in record["char_masks_rle"]]) if record[
        "char_masks_rle"
    ] else np.zeros((0,) + shape, dtype=bool)
    meta = record["meta"]
    return DesignSample(
        image=image,
        caption=record["caption"],
        render_words=list(record["render_words"]),
        char_masks=CharacterMaskSet(masks=masks, word_boundaries=list(record["word_boundaries"])),
        meta=SampleMeta(
            height=meta["height"],
            width=meta["width"],
            aspect_ratio=meta["aspect_ratio"],
            text_length=meta["text_length"],
            aesthetic_score=meta["aesthetic_score"],
            style_seed=meta["style_seed"],
            scale=meta["scale"],
        ),
    )


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class GenReport:
    kept: int
    rejected: dict[str, int]
    corpus_hash: str


def random_words(rng: np.random.Generator, charset: str, word_count: tuple[int, int],
                 word_len: tuple[int, int], exclude: set[str] | None = None) -> list[str]:
    """Draw a word list; rejects words in `exclude` (resampled per word)."""
    n = int(rng.integers(word_count[0], word_count[1] + 1))
    words = []
    for _ in range(n):
        for _attempt in range(1000):
            k = int(rng.integers(word_len[0], word_len[1] + 1))
            word = "".join(charset[i] for i in rng.integers(0, len(charset), size=k))
            if exclude is None or word not in exclude:
                words.append(word)
                break
        else:
            raise ValidationError("could not draw a word outside the excluded set")
    return words


def generate_corpus(
    out_dir,
    n_samples: int,
    canvas: tuple[int, int],
    charset: str,
    word_count: tuple[int, int],
    word_len: tuple[int, int],
    seed: int,
    style: RenderStyle | None = None,
    filter_cfg: FilterConfig | None = None,
    scorer=None,
    exclude_words: set[str] | None = None,
    config_echo: dict | None = None,
) -> GenReport:
    """Generate and persist a filtered corpus, fully determined by `seed`.

    Over-generates until n_samples pass the filter chain (candidate i uses
    style seed derived from (seed, i), so the corpus is reproducible
    regardless of how many candidates get rejected).
    """
    from .data import filter_sample  # local import keeps module load light

    out_dir = Path(out_dir)
    samples_dir = out_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    style = style or RenderStyle()
    filter_cfg = filter_cfg or FilterConfig(
        max_text_chars=150, min_resolution=32, aspect_ratio_range=(0.25, 4.0), min_aesthetic=4.5
    )
    scorer = scorer or ConstantScorer()

    kept = 0
    rejected: dict[str, int] = {}
    sha = hashlib.sha256()
    candidate = 0
    max_candidates = max(100, n_samples * 50)
    while kept < n_samples:
        if candidate >= max_candidates:
            raise ValidationError(
                f"filter chain rejected too many candidates ({candidate}); check config"
            )
        word_rng = np.random.Generator(np.random.Philox(key=[seed, candidate, 0]))
        words = random_words(word_rng, charset, word_count, word_len, exclude=exclude_words)
        style_seed = seed * 1_000_003 + candidate
        sample = render_sample(words, style_seed, canvas, style=style)
        decision = filter_sample(sample, filter_cfg, scorer)
        candidate += 1
        if not decision.keep:
            rejected[decision.reason] = rejected.get(decision.reason, 0) + 1
            continue
        sample.meta.aesthetic_score = decision.aesthetic
        name = f"{kept:06d}"
        png = image_to_png_bytes(sample.image)
        record = canonical_json(sample_record(sample, f"{name}.png"))
        (samples_dir / f"{name}.png").write_bytes(png)
        (samples_dir / f"{name}.json").write_bytes(record)
        sha.update(png)
        sha.update(record)
        kept += 1

    corpus_hash = sha.hexdigest()
    manifest = {
        "schema": CORPUS_SCHEMA,
        "n_samples": n_samples,
        "seed": seed,
        "canvas": list(canvas),
        "kept": kept,
        "rejected": rejected,
        "corpus_hash": corpus_hash,
        "config": config_echo or {},
    }
    (out_dir / "corpus.json").write_bytes(canonical_json(manifest))
    return GenReport(kept=kept, rejected=rejected, corpus_hash=corpus_hash)


def corpus_lexicon(corpus_dir) -> set[str]:
    """All render words appearing in a corpus."""
    return {w for s in iter_records(corpus_dir) for w in s["render_words"]}


def iter_records(corpus_dir):
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "corpus.json").exists():
        raise ValidationError(f"{corpus_dir} has no corpus.json manifest")
    for path in sorted((corpus_dir / "samples").glob("*.json")):
        yield json.loads(path.read_text())


def load_corpus(corpus_dir, with_masks: bool = True) -> list[DesignSample]:
    """Load every sample; masks can be skipped for evaluation-only use."""
    corpus_dir = Path(corpus_dir)
    out = []
    for record in iter_records(corpus_dir):
        image = png_bytes_to_image((corpus_dir / "samples" / record["image"]).read_bytes())
        if not with_masks:
            record = dict(record, char_masks_rle=[])
        out.append(record_to_sample(record, image))
    return out


def corpus_hash(corpus_dir) -> str:
    """Recompute the content hash from the files on disk."""
    corpus_dir = Path(corpus_dir)
    sha = hashlib.sha256()
    for path in sorted((corpus_dir / "samples").glob("*.json")):
        sha.update((corpus_dir / "samples" / path.stem).with_suffix(".png").read_bytes())
        sha.update(path.read_bytes())
    return sha.hexdigest()

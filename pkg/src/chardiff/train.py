"""Stage-1 training loop, evaluation pass, and run orchestration helpers.

All stochastic draws in the training loop are keyed by (seed, step), so a
resumed run continues exactly where an uninterrupted one would be, and
reruns with the same config produce identical loss traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig, TrainSection
from .losses import (
    CharLossInputs,
    char_localization_loss,
    denoise_loss,
    downsample_mask,
    total_stage1_loss,
)
from .metrics import (
    DownsampleFeatures,
    extract_feature_stats,
    frechet_distance,
    ned_similarity,
    ocr_metrics,
)
from .model import DiffusionModel, ModelConfig, sample_for_prompts
from .schedule import NoiseSchedule, make_schedule, q_sample
from .spdpo import derive_seed
from .vocab import build_vocabulary, enhance_prompt


def build_model(cfg: RunConfig) -> DiffusionModel:
    m = cfg.model
    return DiffusionModel(
        ModelConfig(
            image_size=m.image_size,
            base_channels=m.base_channels,
            channel_mults=tuple(m.channel_mults),
            cond_dim=m.cond_dim,
            caption_buckets=m.caption_buckets,
            max_tokens=m.max_tokens,
            prompt_enhancement=m.prompt_enhancement,
            init_seed=m.init_seed,
        ),
        vocab=build_vocabulary(),
    )


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


@dataclass
class TrainData:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    tokens: list  # PromptTokens per sample
    masks: list  # per sample: {resolution: (n_chars, r, r) float tensor}


def attention_resolutions(model: DiffusionModel) -> list[int]:
    size = model.cfg.image_size
    return [size // 2, size // 4]


def prepare_training_data(samples, model: DiffusionModel) -> TrainData:
    """Tokenize prompts and pre-downsample character masks once."""
    resolutions = attention_resolutions(model)
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).astype(np.float32)
    ).permute(0, 3, 1, 2) * 2.0 - 1.0
    tokens = []
    masks = []
    for s in samples:
        ep = enhance_prompt(s.caption, s.render_words, model.vocab)
        tok = model.tokenize(ep)
        tokens.append(tok)
        per_res = {}
        if tok.char_positions:
            if len(tok.char_positions) != s.char_masks.n_chars:
                raise ValueError(
                    f"{len(tok.char_positions)} char tokens vs {s.char_masks.n_chars} masks"
                )
            for r in resolutions:
                down = np.stack([downsample_mask(m, (r, r)) for m in s.char_masks.masks])
                per_res[r] = torch.from_numpy(down.astype(np.float32))
        masks.append(per_res)
    return TrainData(images=images, tokens=tokens, masks=masks)


@dataclass
class StepLoss:
    total: float
    denoise: float
    char: float | None


def _char_layer_names(record, configured) -> list[str]:
    if configured is not None:
        return list(configured)
    return record.lowest_resolution_layers()


def train_stage1(
    model: DiffusionModel,
    sched: NoiseSchedule,
    data: TrainData,
    cfg: TrainSection,
    start_step: int = 0,
    opt: torch.optim.Optimizer | None = None,
    on_step=None,
) -> tuple[torch.optim.Optimizer, list[StepLoss]]:
    """Denoising + weighted localization loss with condition dropout.

    The localization term is computed (and logged) whenever character
    tokens exist, and scaled by lambda_char in the total; samples whose
    conditioning was dropped for guidance training are excluded from it.
    """
    if opt is None:
        opt = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
    n = data.images.shape[0]
    size = model.cfg.image_size
    trace = []
    for step in range(start_step, cfg.steps):
        rng = np.random.Generator(np.random.Philox(key=[cfg.seed, step, 0x51]))
        idx = rng.integers(0, n, size=cfg.batch_size)
        ts = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        us = rng.random(size=cfg.batch_size)
        eps = torch.from_numpy(
            rng.standard_normal((cfg.batch_size, 3, size, size), dtype=np.float32)
        )

        by_len: dict[int, list[int]] = {}
        for j, i in enumerate(idx):
            by_len.setdefault(len(data.tokens[i]), []).append(j)

        opt.zero_grad()
        dn_total = 0.0
        char_terms = []
        losses = []
        for positions in by_len.values():
            sel = [int(idx[j]) for j in positions]
            x0 = data.images[sel]
            e = eps[positions]
            t_sel = ts[positions]
            x_t = q_sample(x0, t_sel, e, sched)
            ids = torch.from_numpy(np.stack([data.tokens[i].ids for i in sel]))
            cond = model.encode_tokens(ids)
            dropped = torch.from_numpy((us[positions] < cfg.cond_dropout))
            null = model.null_cond(len(sel), ids.shape[1])
            cond = torch.where(dropped[:, None, None], null, cond)
            pred, record = model.denoise(x_t, torch.from_numpy(t_sel), cond)
            dn = denoise_loss(e, pred)
            layer_names = _char_layer_names(record, cfg.char_loss_layers)
            for j_local, i in enumerate(sel):
                tok = data.tokens[i]
                if not tok.char_positions or bool(dropped[j_local]):
                    continue
                inputs = CharLossInputs(
                    attention={name: record.maps[name][j_local] for name in layer_names},
                    masks={
                        name: data.masks[i][record.resolutions[name]]
                        for name in layer_names
                    },
                    char_positions=tok.char_positions,
                    lambda_char=cfg.lambda_char,
                )
                char_terms.append(char_localization_loss(inputs))
            weight = len(sel) / cfg.batch_size
            losses.append((dn, weight))
            dn_total += float(dn.detach()) * weight

        dn_loss = sum(l * w for l, w in losses)
        if char_terms:
            char_loss = torch.stack(char_terms).mean()
            total = total_stage1_loss(dn_loss, char_loss, cfg.lambda_char)
            char_val = float(char_loss.detach())
        else:
            total = dn_loss
            char_val = None
        total.backward()
        opt.step()
        loss = StepLoss(total=float(total.detach()), denoise=dn_total, char=char_val)
        trace.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return opt, trace


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_model(
    model: DiffusionModel,
    sched: NoiseSchedule,
    test_samples,
    recognizer,
    n_images: int,
    seed: int,
    guidance_scale: float,
    sample_steps: int,
    use_gt: bool = False,
) -> dict:
    """Generate one image per test prompt and score the corpus.

    With use_gt=True the ground-truth images are scored instead (a
    recognizer/metrics self-check). Returns OCR metrics, sentence accuracy,
    mean normalized-edit-distance similarity, and the desk-scale Frechet
    proxy against the ground-truth test images.
    """
    subset = test_samples[:n_images]
    if use_gt:
        images = [s.image for s in subset]
    else:
        prompts = [
            enhance_prompt(s.caption, s.render_words, model.vocab) for s in subset
        ]
        seeds = [derive_seed(seed, i) for i in range(len(subset))]
        images = sample_for_prompts(
            model, sched, prompts, guidance_scale, sample_steps, seeds
        )
    preds = [recognizer(im).words for im in images]
    gts = [s.render_words for s in subset]
    ocr = ocr_metrics(preds, gts)
    neds = [
        ned_similarity(" ".join(p), " ".join(g)) for p, g in zip(preds, gts)
    ]
    extractor = DownsampleFeatures()
    fid = frechet_distance(
        extract_feature_stats([s.image for s in test_samples], extractor),
        extract_feature_stats(images, extractor),
    )
    return {
        "ocr_precision": ocr.precision,
        "ocr_recall": ocr.recall,
        "ocr_f_score": ocr.f_score,
        "ocr_accuracy": ocr.accuracy,
        "sentence_accuracy": ocr.accuracy,
        "mean_ned": float(np.mean(neds)) if neds else 0.0,
        "fid": fid,
    }

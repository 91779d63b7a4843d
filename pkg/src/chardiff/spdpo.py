"""Self-play preference fine-tuning.

Pair construction: for each dataset prompt, the frozen reference model
generates K candidates; the candidate with the worst text-accuracy score
becomes the losing image and the dataset's ground-truth image always wins.
Fine-tuning then minimizes the preference loss against the frozen
reference, one shared timestep per pair.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import RecognizerError
from .losses import DPOBatch, dpo_loss
from .metrics import ned_similarity
from .model import DiffusionModel
from .schedule import NoiseSchedule, q_sample
from .vocab import EnhancedPrompt, enhance_prompt


@dataclass
class SPDPOConfig:
    K: int = 10
    beta: float = 5.0
    T: int = 1000
    pair_budget: int = 96  # desk-scale stand-in for the 1.5k-pair budget
    skip_threshold: float | None = None
    learning_rate: float = 1e-5
    steps: int = 300
    seed: int = 0
    batch_pairs: int = 4
    gen_steps: int = 24  # sampler steps when generating candidates
    guidance_scale: float = 7.5

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass
class PreferencePair:
    prompt: EnhancedPrompt
    winner: np.ndarray  # ground-truth image (H, W, 3) in [0, 1]
    loser: np.ndarray  # worst-scoring generated candidate
    loser_score: float
    loser_index: int
    seed: int  # candidate-generation seed for this prompt


def derive_seed(seed: int, k: int) -> int:
    """Deterministic child seed for the k-th draw under a parent seed."""
    return (seed * 1_000_003 + k) % (2**31)


def generate_candidates(
    ref_model: DiffusionModel,
    sched: NoiseSchedule,
    prompt: EnhancedPrompt,
    K: int,
    seed: int,
    scale: float = 7.5,
    steps: int = 24,
) -> np.ndarray:
    """K guided samples from the frozen reference; candidate k uses the seed
    derived from (seed, k), so each candidate is independent of K."""
    toks = ref_model.tokenize(prompt)
    ids = np.repeat(toks.ids[None], K, axis=0)
    seeds = [derive_seed(seed, k) for k in range(K)]
    return ref_model.sample_tokens(sched, ids, scale, steps, seeds)


def score_text_accuracy(image: np.ndarray, target_words: list[str], recognizer) -> float:
    """Normalized-edit-distance similarity between recognized and target text.

    Both sides are joined by single spaces; 1.0 is a perfect read. The
    recognizer is any callable image -> RecognitionResult.
    """
    result = recognizer(image)
    return ned_similarity(" ".join(result.words), " ".join(target_words))


@dataclass
class PairBuildLog:
    pairs: list[PreferencePair]
    skipped: list[dict] = field(default_factory=list)


def build_pairs(
    dataset,
    ref_model: DiffusionModel,
    sched: NoiseSchedule,
    cfg: SPDPOConfig,
    recognizer,
) -> PairBuildLog:
    """Construct preference pairs until the budget is met.

    Per prompt: generate K candidates, score each, select the argmin (ties
    go to the lowest candidate index). A prompt is skipped when the
    skip_threshold is set and even the worst candidate scores above it, or
    when the recognizer fails (logged, never fatal).
    """
    log = PairBuildLog(pairs=[])
    for i, sample in enumerate(dataset):
        if len(log.pairs) >= cfg.pair_budget:
            break
        prompt = enhance_prompt(sample.caption, sample.render_words, ref_model.vocab)
        prompt_seed = derive_seed(cfg.seed, i)
        candidates = generate_candidates(
            ref_model, sched, prompt, cfg.K, prompt_seed,
            scale=cfg.guidance_scale, steps=cfg.gen_steps,
        )
        try:
            scores = [
                score_text_accuracy(c, sample.render_words, recognizer) for c in candidates
            ]
        except RecognizerError as e:
            log.skipped.append({"index": i, "reason": f"recognizer: {e}"})
            continue
        worst = int(np.argmin(scores))
        if cfg.skip_threshold is not None and scores[worst] > cfg.skip_threshold:
            log.skipped.append({"index": i, "reason": "above skip_threshold"})
            continue
        if np.array_equal(sample.image, candidates[worst]):
            log.skipped.append({"index": i, "reason": "winner equals loser"})
            continue
        log.pairs.append(
            PreferencePair(
                prompt=prompt,
                winner=sample.image,
                loser=candidates[worst],
                loser_score=float(scores[worst]),
                loser_index=worst,
                seed=prompt_seed,
            )
        )
    return log


def params_digest(model: torch.nn.Module) -> str:
    sha = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        sha.update(name.encode())
        sha.update(p.detach().numpy().tobytes())
    return sha.hexdigest()


def _to_model_space(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1) * 2.0 - 1.0


@dataclass
class DPOResult:
    loss_trace: list[float]
    ref_digest_before: str
    ref_digest_after: str


def dpo_finetune(
    model: DiffusionModel,
    pairs: list[PreferencePair],
    sched: NoiseSchedule,
    cfg: SPDPOConfig,
    on_step=None,
) -> DPOResult:
    """Fine-tune `model` in place against a frozen copy of itself.

    Per step: draw batch_pairs pairs, one timestep and one noise pair each
    (winner and loser share the timestep), evaluate trainable and reference
    predictions, and step AdamW on the preference loss. Step randomness is
    keyed by (cfg.seed, step), so runs are reproducible. Raises
    FloatingPointError via dpo_loss on non-finite predictions.
    """
    if not pairs:
        raise ValueError("dpo_finetune needs at least one pair")
    ref = copy.deepcopy(model)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    ref_before = params_digest(ref)

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
    tokens = [model.tokenize(p.prompt) for p in pairs]
    winners = [_to_model_space(p.winner) for p in pairs]
    losers = [_to_model_space(p.loser) for p in pairs]

    trace = []
    for step in range(cfg.steps):
        rng = np.random.Generator(np.random.Philox(key=[cfg.seed, step, 0xD90]))
        idx = rng.integers(0, len(pairs), size=cfg.batch_pairs)
        ts = rng.integers(1, sched.T + 1, size=cfg.batch_pairs)
        shape = winners[0].shape
        eps_w = torch.from_numpy(
            rng.standard_normal((cfg.batch_pairs,) + shape, dtype=np.float32)
        )
        eps_l = torch.from_numpy(
            rng.standard_normal((cfg.batch_pairs,) + shape, dtype=np.float32)
        )

        # group selected pairs by token length so each forward is rectangular
        by_len: dict[int, list[int]] = {}
        for j, i in enumerate(idx):
            by_len.setdefault(len(tokens[i]), []).append(j)

        opt.zero_grad()
        total = 0.0
        logged = 0.0
        for positions in by_len.values():
            sel = [int(idx[j]) for j in positions]
            xw = torch.stack([winners[i] for i in sel])
            xl = torch.stack([losers[i] for i in sel])
            t_sel = ts[positions]
            ew = eps_w[positions]
            el = eps_l[positions]
            xw_t = q_sample(xw, t_sel, ew, sched)
            xl_t = q_sample(xl, t_sel, el, sched)
            ids = torch.from_numpy(np.stack([tokens[i].ids for i in sel]))
            cond = model.encode_tokens(ids)
            t_both = torch.from_numpy(np.concatenate([t_sel, t_sel]))
            x_both = torch.cat([xw_t, xl_t])
            cond_both = torch.cat([cond, cond])
            pred, _ = model.denoise(x_both, t_both, cond_both)
            with torch.no_grad():
                ref_cond = ref.encode_tokens(ids)
                ref_pred, _ = ref.denoise(x_both, t_both, torch.cat([ref_cond, ref_cond]))
            n = len(sel)
            batch = DPOBatch(
                eps_w=ew, eps_l=el,
                pred_theta_w=pred[:n], pred_theta_l=pred[n:],
                pred_ref_w=ref_pred[:n], pred_ref_l=ref_pred[n:],
                beta=cfg.beta, T=cfg.T, omega=1.0,
            )
            loss = dpo_loss(batch)
            weight = n / cfg.batch_pairs
            (loss * weight).backward()
            total += float(loss.detach()) * weight
            logged += weight
        opt.step()
        trace.append(total)
        if on_step is not None:
            on_step(step, total)

    ref_after = params_digest(ref)
    return DPOResult(loss_trace=trace, ref_digest_before=ref_before, ref_digest_after=ref_after)

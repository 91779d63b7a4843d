"""Training objectives: denoising MSE, character localization, preference loss.

The localization term rewards each character token's attention map for
concentrating inside that character's region mask:

    s_i = mean(A_i * M_i) - mean(A_i * (1 - M_i))
    L_char = -(1/c') * sum_i s_i        (averaged over the layer subset)

The preference loss compares the trainable model against a frozen
reference on a winner/loser image pair sharing one timestep:

    dw = |e_w - eps_theta(x_t^w)|^2 - |e_w - eps_ref(x_t^w)|^2
    dl = |e_l - eps_theta(x_t^l)|^2 - |e_l - eps_ref(x_t^l)|^2
    L = -log sigmoid(-beta * T * omega * (dw - dl))

with squared norms summed over all elements and omega a constant weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import CharacterMaskSet
from .model import CrossAttentionRecord


def denoise_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return torch.mean((eps - eps_hat) ** 2)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block max-pool a binary mask: output cell is 1 iff any covered pixel is.

    Source pixel (i, j) belongs to output cell (i*h//H, j*w//W); the cells
    partition the source, so a single hot pixel stays a single hot cell.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    h, w = target
    if h > H or w > W:
        raise ValueError(f"target {target} exceeds source {(H, W)}")
    if (H, W) == (h, w):
        return mask.copy()
    rows = np.arange(H) * h // H
    cols = np.arange(W) * w // W
    out = np.zeros((h, w), dtype=bool)
    np.maximum.at(out, (rows[:, None], cols[None, :]), mask)
    return out


@dataclass
class CharLossInputs:
    """Attention maps and matching masks for the participating char tokens.

    attention: layer name -> (h, w, L) map (one sample); masks: layer name
    -> (n_chars, h, w) boolean arrays downsampled to that layer;
    char_positions: the n_chars token indices into L, flag tokens and
    maskless tokens excluded. lambda_char is carried for bookkeeping.
    """

    attention: dict[str, torch.Tensor]
    masks: dict[str, torch.Tensor]
    char_positions: list[int]
    lambda_char: float = 0.05


def build_char_loss_inputs(
    record: CrossAttentionRecord,
    mask_set: CharacterMaskSet,
    char_positions: list[int],
    layers: list[str] | None = None,
    batch_index: int = 0,
    lambda_char: float = 0.05,
) -> CharLossInputs:
    """Pair one sample's attention record with its downsampled masks.

    layers defaults to every cross-attention layer at the two lowest
    resolutions. Mask k corresponds to char_positions[k] (both follow the
    prompt alignment order).
    """
    if len(char_positions) != mask_set.n_chars:
        raise ValueError(
            f"{len(char_positions)} char positions vs {mask_set.n_chars} masks"
        )
    names = layers if layers is not None else record.lowest_resolution_layers()
    attention = {}
    masks = {}
    for name in names:
        maps = record.maps[name][batch_index]
        h, w = maps.shape[0], maps.shape[1]
        attention[name] = maps
        down = np.stack([downsample_mask(m, (h, w)) for m in mask_set.masks]) if mask_set.n_chars else np.zeros((0, h, w), dtype=bool)
        masks[name] = torch.from_numpy(down.astype(np.float32))
    return CharLossInputs(
        attention=attention, masks=masks, char_positions=list(char_positions),
        lambda_char=lambda_char,
    )


def char_localization_loss(inputs: CharLossInputs) -> torch.Tensor:
    """Average the in-mask vs out-of-mask attention contrast, negated.

    Raises ValueError on an empty participating set; callers skip the term
    for text-free samples. Differentiable with respect to the attention
    entries; ranges over [-1, 1] for maps with entries in [0, 1].
    """
    if not inputs.char_positions:
        raise ValueError("char_localization_loss needs at least one participating token")
    if not inputs.attention:
        raise ValueError("char_localization_loss needs at least one layer")
    per_layer = []
    for name, maps in inputs.attention.items():
        masks = inputs.masks[name]
        a = maps[:, :, inputs.char_positions].permute(2, 0, 1)  # (n_chars, h, w)
        if masks.shape != a.shape:
            raise ValueError(
                f"layer {name}: masks {tuple(masks.shape)} vs attention {tuple(a.shape)}"
            )
        s = (a * masks).mean(dim=(1, 2)) - (a * (1.0 - masks)).mean(dim=(1, 2))
        per_layer.append(-s.mean())
    return torch.stack(per_layer).mean()


@dataclass
class DPOBatch:
    """Inputs for the preference loss; tensors may carry a batch dimension.

    The winner and loser branches of each pair share the same conditioning
    and the same timestep (enforced upstream where the pair is noised).
    """

    eps_w: torch.Tensor
    eps_l: torch.Tensor
    pred_theta_w: torch.Tensor
    pred_theta_l: torch.Tensor
    pred_ref_w: torch.Tensor
    pred_ref_l: torch.Tensor
    beta: float = 5.0
    T: int = 1000
    omega: float = 1.0


def _sq_norm(x: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of squares; scalar for unbatched (3D or less) input."""
    if x.dim() <= 3:
        return (x ** 2).sum()
    return (x ** 2).reshape(x.shape[0], -1).sum(dim=1)


def dpo_loss(batch: DPOBatch) -> torch.Tensor:
    """-log sigmoid(-beta*T*omega*(dw - dl)), averaged over the batch.

    Exactly log(2) whenever the trainable predictions equal the reference
    predictions; strictly decreasing in (dl - dw); always positive.
    """
    for name in ("pred_theta_w", "pred_theta_l", "pred_ref_w", "pred_ref_l"):
        t = getattr(batch, name)
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"non-finite values in {name}")
    dw = _sq_norm(batch.eps_w - batch.pred_theta_w) - _sq_norm(batch.eps_w - batch.pred_ref_w)
    dl = _sq_norm(batch.eps_l - batch.pred_theta_l) - _sq_norm(batch.eps_l - batch.pred_ref_l)
    arg = batch.beta * batch.T * batch.omega * (dw - dl)
    # -log sigmoid(-x) == softplus(x), stable at both tails
    return F.softplus(arg).mean()


def total_stage1_loss(denoise, char, lambda_char: float):
    """denoise + lambda_char * char."""
    return denoise + lambda_char * char

"""Miniature text-conditioned denoising diffusion model.

Pixel-space eps-prediction UNet at 64px-class resolutions with three
resolution levels and five single-head cross-attention layers (enc_32,
enc_16, mid_16, dec_16, dec_32). Every cross-attention layer records its
post-softmax token attention maps so localization losses can hook in.

The text encoder hashes caption words into a bucketed embedding table and
looks rendered-character tokens up in a dedicated trainable table; one
self-attention block mixes the sequence. Classifier-free guidance uses a
learned null embedding broadcast over the sequence, which is exactly
equivalent to a single learned null token (uniform attention over
identical keys returns the shared value).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, TruncationError
from .schedule import NoiseSchedule, make_schedule
from .vocab import VOCAB_SIZE, CharVocabulary, EnhancedPrompt, build_vocabulary

SUFFIX_PREFIX_WORDS = ["Rendered", "characters:"]


@dataclass
class ModelConfig:
    image_size: int = 64
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 3)
    cond_dim: int = 64
    caption_buckets: int = 512
    max_tokens: int = 77
    time_dim: int = 64
    prompt_enhancement: bool = True
    char_embed_std: float = 0.01
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % (2 ** (len(self.channel_mults) - 1)) != 0:
            raise ValueError("image_size must be divisible by the downsampling factor")


def hash_word(word: str, buckets: int) -> int:
    """Stable word -> bucket id (crc32); no fitted vocabulary needed."""
    return zlib.crc32(word.encode("utf-8")) % buckets


@dataclass
class PromptTokens:
    """Integer token ids for one prompt, ready for batched embedding.

    ids: caption-word hash ids followed (when prompt enhancement is on) by
    the offset character-token ids. char_positions index the non-flag
    character tokens within ids; alignment is carried over from the
    EnhancedPrompt.
    """

    ids: np.ndarray
    char_positions: list[int]
    alignment: list[tuple]

    def __len__(self):
        return len(self.ids)


@dataclass
class ConditioningSequence:
    embeddings: torch.Tensor  # (L, D)
    char_token_positions: list[int]
    alignment: list[tuple]


@dataclass
class CrossAttentionRecord:
    """Per-layer post-softmax attention maps, shape (B, h, w, L)."""

    maps: dict[str, torch.Tensor] = field(default_factory=dict)
    resolutions: dict[str, int] = field(default_factory=dict)

    def layer_names(self) -> list[str]:
        return list(self.maps)

    def lowest_resolution_layers(self, n_resolutions: int = 2) -> list[str]:
        """Names of all layers at the n lowest distinct resolutions."""
        res = sorted(set(self.resolutions.values()))[:n_resolutions]
        return [name for name, r in self.resolutions.items() if r in res]


def condition_dropout(cond, u: float, p: float, null_cond):
    """Return null conditioning when the uniform draw u falls below p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    return null_cond if u < p else cond


def combine_guidance(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """(1 - s) * uncond + s * cond; exact at s = 0 and s = 1."""
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Descending 1-indexed timesteps for strided ancestral sampling."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def _sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(ch):
    return nn.GroupNorm(min(4, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim):
        super().__init__()
        self.n1 = _norm(cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(time_dim, cout)
        self.n2 = _norm(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, t_emb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.emb(F.silu(t_emb))[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from pixels to conditioning tokens."""

    def __init__(self, channels, cond_dim):
        super().__init__()
        self.norm = _norm(channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(cond_dim, channels)
        self.v = nn.Linear(cond_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        q = self.q(self.norm(x)).reshape(b, c, h * w).transpose(1, 2)  # (B, hw, c)
        k = self.k(cond)  # (B, L, c)
        v = self.v(cond)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)  # (B, hw, L)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        maps = attn.reshape(b, h, w, -1)
        return x + self.proj(out), maps


class TextEncoder(nn.Module):
    """Hashed caption embeddings + dedicated character-token table + 1 MHA block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.cond_dim
        self.caption_table = nn.Embedding(cfg.caption_buckets, d)
        self.char_table = nn.Embedding(VOCAB_SIZE, d)
        self.pos = nn.Parameter(torch.zeros(cfg.max_tokens, d))
        self.attn = nn.MultiheadAttention(d, num_heads=4, batch_first=True)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))
        self.buckets = cfg.caption_buckets
        nn.init.normal_(self.caption_table.weight, std=0.02)
        nn.init.normal_(self.char_table.weight, std=cfg.char_embed_std)
        nn.init.normal_(self.pos, std=0.01)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: (B, L) with caption ids < buckets, char ids >= buckets."""
        is_char = ids >= self.buckets
        emb = torch.where(
            is_char[..., None],
            self.char_table((ids - self.buckets).clamp(min=0)),
            self.caption_table(ids.clamp(max=self.buckets - 1)),
        )
        x = emb + self.pos[: ids.shape[1]]
        a, _ = self.attn(self.ln1(x), self.ln1(x), self.ln1(x), need_weights=False)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = [cfg.base_channels * m for m in cfg.channel_mults]
        td, cd = cfg.time_dim, cfg.cond_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.time_dim = td

        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, td)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, td)
        self.ca_enc_32 = CrossAttention(c1, cd)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, td)
        self.ca_enc_16 = CrossAttention(c2, cd)
        self.mid1 = ResBlock(c2, c2, td)
        self.ca_mid_16 = CrossAttention(c2, cd)
        self.mid2 = ResBlock(c2, c2, td)
        self.dec2 = ResBlock(2 * c2, c2, td)
        self.ca_dec_16 = CrossAttention(c2, cd)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, td)
        self.ca_dec_32 = CrossAttention(c1, cd)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, td)
        self.out_norm = _norm(c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, cond):
        """x: (B,3,H,W); t: (B,) 1-indexed; cond: (B,L,D)."""
        record = CrossAttentionRecord()

        def ca(layer, name, h):
            h, maps = layer(h, cond)
            record.maps[name] = maps
            record.resolutions[name] = maps.shape[1]
            return h

        t_emb = self.time_mlp(_sinusoidal(t, self.time_dim))
        h0 = self.enc0(self.conv_in(x), t_emb)
        h1 = self.enc1(self.down0(h0), t_emb)
        h1 = ca(self.ca_enc_32, "enc_32", h1)
        h2 = self.enc2(self.down1(h1), t_emb)
        h2 = ca(self.ca_enc_16, "enc_16", h2)
        m = self.mid1(h2, t_emb)
        m = ca(self.ca_mid_16, "mid_16", m)
        m = self.mid2(m, t_emb)
        d2 = self.dec2(torch.cat([m, h2], dim=1), t_emb)
        d2 = ca(self.ca_dec_16, "dec_16", d2)
        d1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([d1, h1], dim=1), t_emb)
        d1 = ca(self.ca_dec_32, "dec_32", d1)
        d0 = self.up0(F.interpolate(d1, scale_factor=2, mode="nearest"))
        d0 = self.dec0(torch.cat([d0, h0], dim=1), t_emb)
        eps = self.conv_out(F.silu(self.out_norm(d0)))
        return eps, record


class DiffusionModel(nn.Module):
    """Text encoder + UNet + learned null conditioning, built from a config."""

    def __init__(self, cfg: ModelConfig, vocab: CharVocabulary | None = None):
        super().__init__()
        torch.manual_seed(cfg.init_seed)
        self.cfg = cfg
        self.vocab = vocab or build_vocabulary()
        self.encoder = TextEncoder(cfg)
        self.unet = UNet(cfg)
        self.null_embedding = nn.Parameter(torch.randn(cfg.cond_dim) * 0.02)

    # -- prompt handling ---------------------------------------------------

    def tokenize(self, ep: EnhancedPrompt) -> PromptTokens:
        """Caption word-hash ids plus (when enabled) offset character ids."""
        words = ep.base_caption.split()
        ids = [hash_word(wd, self.cfg.caption_buckets) for wd in words]
        char_positions = []
        alignment = []
        if self.cfg.prompt_enhancement and ep.suffix_tokens:
            for wd in SUFFIX_PREFIX_WORDS:
                ids.append(hash_word(wd, self.cfg.caption_buckets))
            base = len(ids)
            for k, tok in enumerate(ep.suffix_tokens):
                ids.append(self.cfg.caption_buckets + tok)
                if ep.alignment[k][0] == "char":
                    char_positions.append(base + k)
            alignment = ep.alignment
        if len(ids) > self.cfg.max_tokens:
            raise TruncationError(
                f"prompt needs {len(ids)} tokens, max is {self.cfg.max_tokens}"
            )
        return PromptTokens(
            ids=np.asarray(ids, dtype=np.int64),
            char_positions=char_positions,
            alignment=alignment,
        )

    def encode_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.encoder(ids)

    def encode_prompt(self, ep: EnhancedPrompt) -> ConditioningSequence:
        toks = self.tokenize(ep)
        emb = self.encode_tokens(torch.from_numpy(toks.ids)[None])[0]
        return ConditioningSequence(
            embeddings=emb,
            char_token_positions=toks.char_positions,
            alignment=toks.alignment,
        )

    def null_cond(self, batch: int, length: int) -> torch.Tensor:
        """Learned null conditioning broadcast to (batch, length, D)."""
        return self.null_embedding[None, None, :].expand(batch, length, -1)

    # -- denoising ----------------------------------------------------------

    def denoise(self, x_t: torch.Tensor, t, cond: torch.Tensor):
        """Predict eps and return the cross-attention record."""
        if x_t.dim() != 4 or x_t.shape[1] != 3 or x_t.shape[2] != self.cfg.image_size:
            raise ValueError(f"x_t shape {tuple(x_t.shape)} does not match config")
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        return self.unet(x_t, t, cond)

    # -- sampling -----------------------------------------------------------

    @torch.no_grad()
    def sample_tokens(
        self,
        sched: NoiseSchedule,
        token_ids: np.ndarray,
        scale: float,
        steps: int,
        seeds: list[int],
    ) -> np.ndarray:
        """Strided ancestral CFG sampling for a batch sharing one token length.

        token_ids: (B, L); seeds: one RNG seed per sample (independent noise
        streams, so results do not depend on batch composition). Returns
        float32 images (B, H, W, 3) in [0, 1].
        """
        if scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {scale}")
        b = token_ids.shape[0]
        size = self.cfg.image_size
        rngs = [np.random.Generator(np.random.Philox(key=[s, 0xD1F])) for s in seeds]

        def draw():
            return torch.from_numpy(
                np.stack([r.standard_normal((3, size, size), dtype=np.float32) for r in rngs])
            )

        cond = self.encode_tokens(torch.from_numpy(token_ids))
        uncond = self.null_cond(b, token_ids.shape[1])
        x = draw()
        ts = timestep_sequence(sched.T, steps)
        for i, t_now in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            eps_c, _ = self.denoise(x, t_now, cond)
            eps_u, _ = self.denoise(x, t_now, uncond)
            eps = combine_guidance(eps_u, eps_c, scale)
            abar_now = float(sched.alpha_bar_at(t_now))
            abar_next = float(sched.alpha_bar_at(t_next))
            x0 = (x - math.sqrt(1.0 - abar_now) * eps) / math.sqrt(abar_now)
            x0 = x0.clamp(-1.0, 1.0)
            if t_next == 0:
                x = x0
                break
            var = (1.0 - abar_next) / (1.0 - abar_now) * (1.0 - abar_now / abar_next)
            coef = math.sqrt(max(1.0 - abar_next - var, 0.0))
            x = math.sqrt(abar_next) * x0 + coef * eps + math.sqrt(var) * draw()
        images = ((x + 1.0) / 2.0).clamp(0.0, 1.0)
        return images.permute(0, 2, 3, 1).numpy()

    @torch.no_grad()
    def cfg_sample(
        self,
        prompt: EnhancedPrompt,
        scale: float,
        steps: int,
        seed: int,
        sched: NoiseSchedule,
    ) -> np.ndarray:
        """Sample one image for one prompt; deterministic for a fixed seed."""
        toks = self.tokenize(prompt)
        return self.sample_tokens(sched, toks.ids[None], scale, steps, [seed])[0]


def sample_for_prompts(model, sched, prompts, scale, steps, seeds, batch_size=64):
    """Sample one image per prompt, bucketing by token length internally.

    Returns images in prompt order regardless of bucketing.
    """
    token_lists = [model.tokenize(p) for p in prompts]
    by_len: dict[int, list[int]] = {}
    for i, t in enumerate(token_lists):
        by_len.setdefault(len(t), []).append(i)
    out = [None] * len(prompts)
    for indices in by_len.values():
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo : lo + batch_size]
            ids = np.stack([token_lists[i].ids for i in chunk])
            images = model.sample_tokens(sched, ids, scale, steps, [seeds[i] for i in chunk])
            for j, i in enumerate(chunk):
                out[i] = images[j]
    return out


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_SCHEMA = "chardiff-checkpoint/v1"


def save_checkpoint(path, model: DiffusionModel, sched: NoiseSchedule, step: int,
                    config_echo: dict | None = None, opt=None):
    """Write a single-file npz checkpoint.

    Contents: '__meta__' (JSON: schema, step, model/schedule config, extra
    config echo, optimizer hyperparameters), 'vocab' (text table),
    'sched/beta', one 'param/<name>' array per parameter, and, when an
    optimizer is given, 'opt/<name>/{step,exp_avg,exp_avg_sq}' arrays for
    resumable training. float32 arrays round-trip bit-exactly.
    """
    arrays = {}
    named = list(model.named_parameters())
    for name, p in named:
        arrays[f"param/{name}"] = p.detach().numpy()
    for name, buf in model.named_buffers():
        arrays[f"buffer/{name}"] = buf.detach().numpy()
    arrays["sched/beta"] = sched.beta

    opt_meta = None
    if opt is not None:
        opt_meta = {
            "lr": opt.param_groups[0]["lr"],
            "betas": list(opt.param_groups[0]["betas"]),
            "eps": opt.param_groups[0]["eps"],
            "weight_decay": opt.param_groups[0]["weight_decay"],
        }
        for name, p in named:
            state = opt.state.get(p)
            if not state:
                continue
            arrays[f"opt/{name}/step"] = np.asarray(
                state["step"].item() if isinstance(state["step"], torch.Tensor) else state["step"]
            )
            arrays[f"opt/{name}/exp_avg"] = state["exp_avg"].numpy()
            arrays[f"opt/{name}/exp_avg_sq"] = state["exp_avg_sq"].numpy()

    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "step": int(step),
        "model": {**asdict(model.cfg), "channel_mults": list(model.cfg.channel_mults)},
        "schedule": {"T": sched.T},
        "config": config_echo or {},
        "optimizer": opt_meta,
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    arrays["vocab"] = np.array(model.vocab.to_table())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


@dataclass
class CheckpointBundle:
    model: DiffusionModel
    sched: NoiseSchedule
    step: int
    config: dict
    opt_meta: dict | None
    opt_arrays: dict


def load_checkpoint(path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as z:
        try:
            meta = json.loads(str(z["__meta__"]))
        except KeyError as e:
            raise CheckpointError(f"{path} is not a chardiff checkpoint") from e
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        vocab = CharVocabulary.from_table(str(z["vocab"]))
        mc = dict(meta["model"])
        mc["channel_mults"] = tuple(mc["channel_mults"])
        model = DiffusionModel(ModelConfig(**mc), vocab=vocab)
        state = {}
        opt_arrays = {}
        for key in z.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.from_numpy(z[key])
            elif key.startswith("buffer/"):
                state[key[len("buffer/"):]] = torch.from_numpy(z[key])
            elif key.startswith("opt/"):
                opt_arrays[key[len("opt/"):]] = z[key].copy()
        model.load_state_dict(state)
        beta = z["sched/beta"]
        sched = NoiseSchedule(
            T=len(beta),
            beta=beta,
            alpha_bar=np.cumprod(1.0 - beta),
            lambda_t=np.log(np.cumprod(1.0 - beta) / (1.0 - np.cumprod(1.0 - beta))),
        )
    return CheckpointBundle(
        model=model,
        sched=sched,
        step=meta["step"],
        config=meta["config"],
        opt_meta=meta.get("optimizer"),
        opt_arrays=opt_arrays,
    )


def restore_optimizer(bundle: CheckpointBundle, model: DiffusionModel):
    """Rebuild AdamW with its moments from a checkpoint, for exact resume."""
    if bundle.opt_meta is None:
        raise CheckpointError("checkpoint has no optimizer state to restore")
    m = bundle.opt_meta
    opt = torch.optim.AdamW(
        model.parameters(), lr=m["lr"], betas=tuple(m["betas"]),
        eps=m["eps"], weight_decay=m["weight_decay"],
    )
    for name, p in model.named_parameters():
        key = f"{name}/exp_avg"
        if key in bundle.opt_arrays:
            opt.state[p] = {
                "step": torch.tensor(float(bundle.opt_arrays[f"{name}/step"])),
                "exp_avg": torch.from_numpy(bundle.opt_arrays[key]).clone(),
                "exp_avg_sq": torch.from_numpy(bundle.opt_arrays[f"{name}/exp_avg_sq"]).clone(),
            }
    return opt

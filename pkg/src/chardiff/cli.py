"""Command-line shell: gen-data, train-stage1, dpo, sample, eval, report.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_io
from .config import RunConfig, load_config
from .data import FilterConfig, RenderStyle
from .errors import (
    ChardiffError,
    CheckpointError,
    ConfigError,
    NonFiniteLossError,
    UsageError,
    ValidationError,
)
from .manifest import RunManifest, RunLock
from .metrics import write_metric_report
from .model import load_checkpoint, restore_optimizer, save_checkpoint, sample_for_prompts
from .recognizer import TemplateRecognizer
from .spdpo import SPDPOConfig, build_pairs, dpo_finetune, derive_seed, params_digest
from .train import build_model, build_schedule, evaluate_model, prepare_training_data, train_stage1
from .vocab import enhance_prompt, extract_render_words


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _recognizer(cfg: RunConfig) -> TemplateRecognizer:
    return TemplateRecognizer(
        scales=tuple(cfg.data.scales),
        charset=cfg.data.charset,
        min_score=cfg.eval.recognizer_min_score,
    )


def _checkpoint_echo(cfg: RunConfig) -> dict:
    return {"run_config": cfg.to_dict(), "config_hash": cfg.config_hash()}


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.run.out_dir)
    with RunLock(out):
        manifest = RunManifest(out / "manifest.jsonl")
        manifest.append("config", command="gen-data", config=cfg.to_dict(),
                        config_hash=cfg.config_hash())
        d = cfg.data
        style = RenderStyle(scales=tuple(d.scales))
        fc = FilterConfig(
            max_text_chars=d.filter.max_text_chars,
            min_resolution=d.filter.min_resolution,
            aspect_ratio_range=tuple(d.filter.aspect_ratio_range),
            min_aesthetic=d.filter.min_aesthetic,
        )
        t0 = time.time()
        train_rep = corpus_io.generate_corpus(
            out / "corpus" / "train", d.n_train, tuple(d.canvas), d.charset,
            tuple(d.word_count), tuple(d.word_len), seed=d.seed,
            style=style, filter_cfg=fc, config_echo=cfg.to_dict()["data"],
        )
        lexicon = corpus_io.corpus_lexicon(out / "corpus" / "train")
        test_rep = corpus_io.generate_corpus(
            out / "corpus" / "test", d.n_test, tuple(d.canvas), d.charset,
            tuple(d.word_count), tuple(d.word_len), seed=d.seed + 1,
            style=style, filter_cfg=fc, exclude_words=lexicon,
            config_echo=cfg.to_dict()["data"],
        )
        for split, rep in (("train", train_rep), ("test", test_rep)):
            manifest.append("corpus", split=split, kept=rep.kept,
                            rejected=rep.rejected, corpus_hash=rep.corpus_hash)
            rej = ", ".join(f"{k}={v}" for k, v in sorted(rep.rejected.items())) or "none"
            print(f"{split}: kept {rep.kept}, rejected: {rej}, hash {rep.corpus_hash[:12]}")
        manifest.append("timing", command="gen-data", wall_seconds=time.time() - t0)
    return 0


def cmd_train_stage1(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.run.out_dir)
    with RunLock(out):
        manifest = RunManifest(out / "manifest.jsonl")
        manifest.append("config", command="train-stage1", config=cfg.to_dict(),
                        config_hash=cfg.config_hash())
        samples = corpus_io.load_corpus(out / "corpus" / "train")
        start_step = 0
        if args.resume:
            bundle = load_checkpoint(args.resume)
            if bundle.config.get("config_hash") != cfg.config_hash():
                raise ConfigError("resume checkpoint was written under a different config")
            model = bundle.model
            sched = bundle.sched
            opt = restore_optimizer(bundle, model)
            start_step = bundle.step
        else:
            model = build_model(cfg)
            sched = build_schedule(cfg)
            opt = torch.optim.AdamW(
                model.parameters(), lr=cfg.train.learning_rate,
                weight_decay=cfg.train.weight_decay,
            )
        data = prepare_training_data(samples, model)
        ckpt_dir = out / "checkpoints"

        def on_step(step, loss):
            manifest.append("step", stage="stage1", step=step, loss=loss.total,
                            denoise=loss.denoise, char=loss.char)
            if (step + 1) % 100 == 0 or step == 0:
                print(f"step {step}: loss {loss.total:.4f} denoise {loss.denoise:.4f}"
                      + (f" char {loss.char:.4f}" if loss.char is not None else ""))
            if cfg.train.snapshot_every and (step + 1) % cfg.train.snapshot_every == 0:
                snap = ckpt_dir / f"stage1_step{step + 1:06d}.npz"
                save_checkpoint(snap, model, sched, step + 1, _checkpoint_echo(cfg), opt)
                manifest.append("checkpoint", stage="stage1", step=step + 1, path=str(snap))

        t0 = time.time()
        train_stage1(model, sched, data, cfg.train, start_step=start_step,
                     opt=opt, on_step=on_step)
        final = ckpt_dir / "stage1.npz"
        save_checkpoint(final, model, sched, cfg.train.steps, _checkpoint_echo(cfg), opt)
        manifest.append("checkpoint", stage="stage1", step=cfg.train.steps, path=str(final))
        manifest.append("timing", command="train-stage1", wall_seconds=time.time() - t0)
        print(f"stage-1 checkpoint: {final}")
    return 0


def _persist_pairs(pairs_dir: Path, log) -> None:
    pairs_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, pair in enumerate(log.pairs):
        wname, lname = f"pair_{i:05d}_winner.png", f"pair_{i:05d}_loser.png"
        (pairs_dir / wname).write_bytes(corpus_io.image_to_png_bytes(pair.winner))
        (pairs_dir / lname).write_bytes(corpus_io.image_to_png_bytes(pair.loser))
        record = {
            "schema": "chardiff-pair/v1",
            "winner": wname,
            "loser": lname,
            "caption": pair.prompt.base_caption,
            "render_words": pair.prompt.render_words,
            "loser_score": pair.loser_score,
            "loser_index": pair.loser_index,
            "seed": pair.seed,
        }
        (pairs_dir / f"pair_{i:05d}.json").write_bytes(corpus_io.canonical_json(record))
        index.append(record)
    (pairs_dir / "pairs.json").write_bytes(
        corpus_io.canonical_json({"schema": "chardiff-pairs/v1", "count": len(index),
                                  "skipped": log.skipped})
    )


def cmd_dpo(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.run.out_dir)
    with RunLock(out):
        manifest = RunManifest(out / "manifest.jsonl")
        manifest.append("config", command="dpo", config=cfg.to_dict(),
                        config_hash=cfg.config_hash())
        bundle = load_checkpoint(args.checkpoint)
        model, sched = bundle.model, bundle.sched
        dcfg = SPDPOConfig(
            K=cfg.dpo.K, beta=cfg.dpo.beta, T=sched.T,
            pair_budget=cfg.dpo.pair_budget, skip_threshold=cfg.dpo.skip_threshold,
            learning_rate=cfg.dpo.learning_rate, steps=cfg.dpo.steps,
            seed=cfg.dpo.seed, batch_pairs=cfg.dpo.batch_pairs,
            gen_steps=cfg.dpo.gen_steps, guidance_scale=cfg.sample.guidance_scale,
        )
        samples = corpus_io.load_corpus(out / "corpus" / "train", with_masks=False)
        t0 = time.time()
        log = build_pairs(samples, model, sched, dcfg, _recognizer(cfg))
        _persist_pairs(out / "pairs", log)
        manifest.append("pairs", count=len(log.pairs), skipped=len(log.skipped))
        print(f"built {len(log.pairs)} pairs ({len(log.skipped)} prompts skipped)")

        ckpt_path = out / "checkpoints" / "dpo.npz"
        if dcfg.steps > 0:
            def on_step(step, loss):
                manifest.append("step", stage="dpo", step=step, loss=loss)
                if (step + 1) % 50 == 0 or step == 0:
                    print(f"dpo step {step}: loss {loss:.6f}")

            try:
                result = dpo_finetune(model, log.pairs, sched, dcfg, on_step=on_step)
            except FloatingPointError as e:
                snap = out / "checkpoints" / "dpo_diagnostic.npz"
                save_checkpoint(snap, model, sched, bundle.step, _checkpoint_echo(cfg))
                manifest.append("abort", stage="dpo", reason=str(e), snapshot=str(snap))
                raise NonFiniteLossError(f"{e}; diagnostic snapshot at {snap}") from e
            manifest.append("dpo_reference", digest_before=result.ref_digest_before,
                            digest_after=result.ref_digest_after,
                            frozen=result.ref_digest_before == result.ref_digest_after)
        save_checkpoint(ckpt_path, model, sched, bundle.step + dcfg.steps,
                        _checkpoint_echo(cfg))
        manifest.append("checkpoint", stage="dpo", step=bundle.step + dcfg.steps,
                        path=str(ckpt_path))
        manifest.append("timing", command="dpo", wall_seconds=time.time() - t0)
        print(f"dpo checkpoint: {ckpt_path}")
    return 0


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model, sched = bundle.model, bundle.sched
    words = extract_render_words(args.prompt)
    ep = enhance_prompt(args.prompt, words, model.vocab)
    prompts = [ep] * args.n
    seeds = [derive_seed(args.seed, k) for k in range(args.n)]
    images = sample_for_prompts(model, sched, prompts, args.scale, args.steps, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, image in enumerate(images):
        path = out / f"sample_{k:03d}.png"
        path.write_bytes(corpus_io.image_to_png_bytes(image))
        print(path)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.run.out_dir)
    with RunLock(out):
        manifest = RunManifest(out / "manifest.jsonl")
        bundle = load_checkpoint(args.checkpoint)
        test_dir = out / "corpus" / "test"
        samples = corpus_io.load_corpus(test_dir, with_masks=False)
        test_manifest = json.loads((test_dir / "corpus.json").read_text())
        t0 = time.time()
        metrics = evaluate_model(
            bundle.model, bundle.sched, samples, _recognizer(cfg),
            n_images=cfg.eval.n_images, seed=cfg.eval.seed,
            guidance_scale=cfg.sample.guidance_scale, sample_steps=cfg.sample.steps,
            use_gt=args.use_gt,
        )
        tag = args.tag or Path(args.checkpoint).stem
        report_path = out / "reports" / f"eval_{tag}.json"
        report = write_metric_report(
            report_path, metrics, corpus_hash=test_manifest["corpus_hash"],
            config_hash=cfg.config_hash(),
        )
        manifest.append("metrics", checkpoint=str(args.checkpoint), report=str(report_path),
                        **report["metrics"])
        manifest.append("timing", command="eval", wall_seconds=time.time() - t0)
        for name, value in sorted(metrics.items()):
            print(f"{name}: {value:.4f}")
        print(f"report: {report_path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest(run_dir / "manifest.jsonl")
    records = manifest.records()
    if not records:
        raise ValidationError(f"{run_dir} has no manifest")
    for r in records:
        if r["kind"] == "config":
            print(f"[{r['command']}] config {r['config_hash'][:12]}")
        elif r["kind"] == "corpus":
            print(f"corpus/{r['split']}: kept {r['kept']} hash {r['corpus_hash'][:12]}")
        elif r["kind"] == "checkpoint":
            print(f"checkpoint ({r['stage']}, step {r['step']}): {r['path']}")
        elif r["kind"] == "pairs":
            print(f"preference pairs: {r['count']} built, {r['skipped']} skipped")
        elif r["kind"] == "metrics":
            vals = {k: v for k, v in r.items() if k not in ("kind", "checkpoint", "report")}
            print(f"metrics for {r['checkpoint']}:")
            for name, value in sorted(vals.items()):
                print(f"  {name}: {value:.4f}")
    steps = [r for r in records if r["kind"] == "step"]
    if steps:
        last = steps[-1]
        print(f"last logged step: {last['stage']} step {last['step']} loss {last['loss']:.4f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="chardiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/test corpora")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="denoising + localization training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("dpo", help="self-play preference fine-tuning (stage 2)")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("-n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=7.5)
    p.add_argument("--steps", type=int, default=36)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="generate per test prompt and score")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--use-gt", action="store_true",
                   help="score ground-truth images instead of generating")
    p.add_argument("--tag", help="report file suffix (default: checkpoint stem)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except (ChardiffError, FloatingPointError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

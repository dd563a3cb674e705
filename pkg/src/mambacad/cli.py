"""``mambacad`` command line: dataset tooling, training, inference, evaluation."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from mambacad import __version__, codec, config, corpus, geometry
from mambacad.checkpoint import CheckpointError
from mambacad.codec import QuantizedSequence

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _provenance(cfg: config.ExperimentConfig, seed: int, command: str) -> dict:
    return {"config_hash": cfg.digest(), "seed": seed, "version": __version__, "command": command}


def _write_json(path: str | Path, payload: dict, provenance: dict) -> None:
    Path(path).write_text(json.dumps({"provenance": provenance, **payload}, sort_keys=True, indent=2) + "\n")


def _read_records(path: str | Path) -> list[dict]:
    try:
        return codec.read_corpus(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON line ({exc})") from None


def _tokens(records: list[dict]) -> list[QuantizedSequence]:
    from mambacad.train import tokenize

    return tokenize(records)


def _prediction_record(rid: str, pred) -> dict:
    rec = {
        "id": rid,
        "valid": pred.valid,
        "reason": pred.reason,
        "raw_length": pred.tokens.raw_length,
        "command_ids": pred.tokens.command_ids.tolist(),
        "param_bins": pred.tokens.param_bins.tolist(),
    }
    if pred.sequence is not None:
        rec["commands"] = codec.to_record(pred.sequence, rid)["commands"]
    return rec


def _read_predictions(path: str | Path):
    from mambacad.train import check_tokens

    out = []
    for rec in _read_records(path):
        if "command_ids" not in rec or "param_bins" not in rec:
            raise DataError(f"{path}: record {rec.get('id')!r} has no tokens")
        q = QuantizedSequence.from_arrays(rec["command_ids"], rec["param_bins"])
        out.append((rec["id"], check_tokens(q)))
    return out


# --- subcommands ------------------------------------------------------------------

def cmd_synth(args, cfg):
    count = args.count if args.count is not None else cfg.synth.count
    lo = args.min_len if args.min_len is not None else cfg.synth.min_len
    hi = args.max_len if args.max_len is not None else cfg.synth.max_len
    dist = args.distribution or cfg.synth.distribution
    records = corpus.synthesize(count, (lo, hi), args.seed, corpus.REFERENCE_DISTRIBUTION if dist == "reference" else None)
    codec.write_corpus(args.out, records, _provenance(cfg, args.seed, "synth"))
    print(f"wrote {len(records)} records to {args.out}")


def cmd_filter(args, cfg):
    kept, stats = corpus.filter_corpus(_read_records(args.data))
    codec.write_corpus(args.out, kept, _provenance(cfg, args.seed, "filter"))
    if args.stats:
        _write_json(args.stats, stats.to_dict(), _provenance(cfg, args.seed, "filter"))
    print(json.dumps(stats.to_dict(), sort_keys=True))


def cmd_split(args, cfg):
    try:
        parts = corpus.split(_read_records(args.data), args.seed)
    except corpus.TooFewRecords as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        codec.write_corpus(out / f"{name}.jsonl", part, _provenance(cfg, args.seed, "split"))
    print(" / ".join(str(len(p)) for p in parts))


def _train_cfg(args, cfg):
    tc = replace(cfg.train, seed=args.seed)
    if args.steps is not None:
        tc = replace(tc, max_steps=args.steps)
    if args.batch is not None:
        tc = replace(tc, batch_size=args.batch)
    return tc


def _pretrain(args, cfg, model_cfg, command):
    from mambacad.train import pretrain, save_model

    seqs = _tokens(_read_records(args.data))
    if not seqs:
        raise DataError("training corpus is empty")
    tc = _train_cfg(args, cfg)
    model, hist = pretrain(seqs, model_cfg, tc, log_path=args.log)
    prov = _provenance(cfg, args.seed, command)
    save_model(args.out, model, {"provenance": prov, "train": tc.to_dict()})
    print(f"{len(hist.steps)} steps, final loss {hist.losses[-1]:.4f}; checkpoint {args.out}")
    return hist


def cmd_pretrain(args, cfg):
    _pretrain(args, cfg, cfg.model, "pretrain")


ABLATIONS = {
    "A": {"block_type": "attention"},
    "B": {"compress_type": "mlp"},
    "C": {"bottleneck": True},
}


def cmd_ablate(args, cfg):
    hist = _pretrain(args, cfg, replace(cfg.model, **ABLATIONS[args.variant]), f"ablate-{args.variant}")
    if args.summary:
        _write_json(
            args.summary,
            {"variant": args.variant, "final_loss": hist.losses[-1], "epoch_loss": hist.epoch_loss},
            _provenance(cfg, args.seed, f"ablate-{args.variant}"),
        )


def _load_model(path):
    from mambacad.train import load_model

    try:
        return load_model(path)[0]
    except FileNotFoundError:
        raise DataError(f"{path}: no such checkpoint") from None


def cmd_train_gan(args, cfg):
    from mambacad import checkpoint
    from mambacad.gan import encode_corpus, train_gan

    model = _load_model(args.model)
    codes = encode_corpus(model, _tokens(_read_records(args.data)))
    gc = replace(cfg.gan, seed=args.seed)
    if args.steps is not None:
        gc = replace(gc, steps=args.steps)
    if args.batch is not None:
        gc = replace(gc, batch_size=args.batch)
    gen, critic, hist = train_gan(codes, gc)
    state = {f"generator.{k}": v for k, v in gen.state_dict().items()}
    state.update({f"critic.{k}": v for k, v in critic.state_dict().items()})
    checkpoint.save(args.out, state, {"gan": gc.to_dict(), "provenance": _provenance(cfg, args.seed, "train-gan")})
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("step,wasserstein,critic_loss,generator_loss\n")
            for i, (w, d, g) in enumerate(zip(hist.wasserstein, hist.critic_loss, hist.generator_loss)):
                fh.write(f"{i * gc.log_every},{w:.6f},{d:.6f},{g:.6f}\n")
    print(f"{gc.steps} generator steps; final Wasserstein estimate {hist.wasserstein[-1]:.4f}")


def _load_generator(path):
    from mambacad import checkpoint
    from mambacad.gan import Generator

    try:
        state, meta = checkpoint.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such checkpoint") from None
    gen = Generator(dropout=meta["gan"]["dropout"])
    ref = gen.state_dict()
    gen.load_state_dict({k[len("generator."):]: v.to(ref[k[len("generator."):]].dtype)
                         for k, v in state.items() if k.startswith("generator.")})
    gen.eval()
    return gen


def _write_predictions(path, ids, preds, prov):
    codec.write_corpus(path, [_prediction_record(rid, p) for rid, p in zip(ids, preds)], prov)


def cmd_generate(args, cfg):
    from mambacad.evaluate import point_cloud
    from mambacad.gan import sample_sequences

    preds = sample_sequences(_load_generator(args.gan), _load_model(args.model), args.count, args.seed)
    ids = [f"gen-{args.seed}-{i:05d}" for i in range(len(preds))]
    _write_predictions(args.out, ids, preds, _provenance(cfg, args.seed, "generate"))
    if args.ply_dir:
        out = Path(args.ply_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rid, p in zip(ids, preds):
            pts = point_cloud(p, cfg.eval.n_points, args.seed)
            if pts is not None:
                geometry.write_ply(out / f"{rid}.ply", pts)
    print(f"{sum(p.valid for p in preds)}/{len(preds)} valid samples written to {args.out}")


def _inference(args, cfg, masked: bool):
    from mambacad.train import complete, reconstruct

    records = _read_records(args.data)
    seqs = _tokens(records)
    model = _load_model(args.model)
    if masked:
        ratio = args.mask if args.mask is not None else cfg.eval.mask_ratio
        preds = complete(model, seqs, ratio, args.seed)
        if args.dump_mask:
            masks = {
                r["id"]: codec.mask_positions(q.raw_length, ratio, args.seed + i).tolist()
                for i, (r, q) in enumerate(zip(records, seqs))
            }
            _write_json(args.dump_mask, {"ratio": ratio, "masks": masks}, _provenance(cfg, args.seed, "complete"))
    else:
        preds = reconstruct(model, seqs)
    _write_predictions(args.out, [r["id"] for r in records], preds,
                       _provenance(cfg, args.seed, "complete" if masked else "reconstruct"))
    print(f"{sum(p.valid for p in preds)}/{len(preds)} valid outputs written to {args.out}")


def cmd_reconstruct(args, cfg):
    _inference(args, cfg, masked=False)


def cmd_complete(args, cfg):
    _inference(args, cfg, masked=True)


def cmd_eval(args, cfg):
    from mambacad.evaluate import run_report

    preds = [p for _, p in _read_predictions(args.pred)]
    truth = _tokens(_read_records(args.truth)) if args.truth else None
    train = _tokens(_read_records(args.train)) if args.train else None
    if args.task != "gen" and truth is None:
        raise DataError("--truth is required for recon/complete evaluation")
    if args.task != "gen" and len(truth) != len(preds):
        raise DataError(f"{len(preds)} predictions but {len(truth)} ground-truth records")
    report = run_report(args.task, preds, truth, train, n_points=cfg.eval.n_points, export_res=cfg.eval.export_res)
    payload = json.loads(report.to_json())
    if args.out:
        _write_json(args.out, {"report": payload, "display": report.display()}, _provenance(cfg, args.seed, "eval"))
    print(json.dumps(report.display(), sort_keys=True))


def cmd_export(args, cfg):
    from mambacad.train import check_tokens

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ok = total = 0
    for rec in _read_records(args.data):
        total += 1
        if "command_ids" in rec:
            q = QuantizedSequence.from_arrays(rec["command_ids"], rec["param_bins"])
        else:
            try:
                q = codec.quantize(codec.normalize(codec.parse_corpus_record(rec)[1]))
            except codec.CodecError:
                continue
        pred = check_tokens(q)
        if not pred.valid:
            continue
        try:
            scene = geometry.build_scene(pred.sequence)
            if args.format == "obj":
                geometry.export_mesh(scene, out / f"{rec['id']}.obj", cfg.eval.export_res)
            else:
                geometry.write_ply(out / f"{rec['id']}.ply", geometry.sample_surface(scene, cfg.eval.n_points, args.seed))
            ok += 1
        except geometry.GeometryError:
            continue
    print(f"exported {ok}/{total} models to {out}")


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mambacad", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (flags override it)")
    common.add_argument("--preset", choices=sorted(config.PRESETS), default="desk")
    common.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--count", type=int)
    s.add_argument("--min-len", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--distribution", choices=["reference", "uniform"])
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("filter", parents=[common], help="length/grammar filter")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stats")
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("split", parents=[common], help="80/10/10 split")
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_split)

    for name, fn, helptext in (("pretrain", cmd_pretrain, "train the autoencoder"),
                               ("ablate", cmd_ablate, "train an ablation variant")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--log", help="per-step CSV log")
        s.add_argument("--steps", type=int)
        s.add_argument("--batch", type=int)
        if name == "ablate":
            s.add_argument("--variant", choices=sorted(ABLATIONS), required=True)
            s.add_argument("--summary", help="JSON summary with the final loss")
        s.set_defaults(fn=fn)

    s = sub.add_parser("train-gan", parents=[common], help="train the latent GAN on frozen-encoder codes")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.set_defaults(fn=cmd_train_gan)

    s = sub.add_parser("generate", parents=[common], help="sample sequences from the latent GAN")
    s.add_argument("--model", required=True)
    s.add_argument("--gan", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ply-dir")
    s.set_defaults(fn=cmd_generate)

    for name, fn in (("reconstruct", cmd_reconstruct), ("complete", cmd_complete)):
        s = sub.add_parser(name, parents=[common], help=f"{name} sequences with a trained model")
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if name == "complete":
            s.add_argument("--mask", type=float)
            s.add_argument("--dump-mask", help="write the masked positions per record as JSON")
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", parents=[common], help="metric report")
    s.add_argument("--task", choices=["recon", "complete", "gen"], required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--truth")
    s.add_argument("--train")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export", parents=[common], help="export meshes or point clouds")
    s.add_argument("--data", required=True)
    s.add_argument("--format", choices=["obj", "ply"], default="obj")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load(args.config, args.preset)
        if args.seed is None:
            args.seed = cfg.seed
        if getattr(args, "mask", None) is not None and not 0.0 <= args.mask <= 1.0:
            raise config.ConfigError("--mask must lie in [0, 1]")
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = os.environ.get("MCAD_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    from mambacad.train import DivergedLoss

    try:
        args.fn(args, cfg)
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, codec.CodecError, CheckpointError, geometry.GeometryError, corpus.GenerationBudgetExceeded) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

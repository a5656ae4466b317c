"""Command line entry point.

    kovae make-data  --config sines_regular --out runs/data
    kovae train      --config sines_regular --out runs/sines
    kovae generate   --checkpoint runs/sines/checkpoint.pt --out runs/gen
    kovae evaluate   --checkpoint runs/sines/checkpoint.pt --out runs/eval
    kovae spectrum   --checkpoint runs/sines/checkpoint.pt --out runs/spec
    kovae reconstruct --checkpoint runs/sines/checkpoint.pt --out runs/recon
    kovae sweep      --config stocks_regular --alphas 0.009 --betas 0.0009 --out runs/sweep

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 invalid config.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

from . import __version__
from .config import SWEEP_GRID, ConfigError, ExperimentConfig, dump_config, load_config

log = logging.getLogger("kovae")

VERBS = ("make-data", "train", "generate", "evaluate", "spectrum", "sweep", "reconstruct")


def _hash_inputs(cfg: ExperimentConfig | None, files, extra: dict) -> str:
    h = hashlib.sha256()
    h.update(__version__.encode())
    if cfg is not None:
        h.update(cfg.to_json().encode())
    h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    for f in files:
        if f and Path(f).is_file():
            h.update(Path(f).read_bytes())
    return h.hexdigest()


def _manifest(out: Path, verb: str, cfg: ExperimentConfig | None, files, extra: dict, force: bool) -> bool:
    """Write the run manifest; returns False if an identical finished run exists."""
    out.mkdir(parents=True, exist_ok=True)
    digest = _hash_inputs(cfg, files, extra)
    mpath = out / "manifest.json"
    if mpath.is_file() and not force:
        old = json.loads(mpath.read_text())
        if old.get("hash") == digest and old.get("verb") == verb and old.get("complete"):
            return False
    manifest = {"verb": verb, "hash": digest, "version": __version__, "complete": False,
                "config": cfg.to_dict() if cfg is not None else None,
                "inputs": [str(f) for f in files if f], "args": extra}
    mpath.write_text(json.dumps(manifest, indent=2, default=str))
    return True


def _finish(out: Path) -> None:
    mpath = out / "manifest.json"
    m = json.loads(mpath.read_text())
    m["complete"] = True
    mpath.write_text(json.dumps(m, indent=2, default=str))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kovae", description="Koopman VAE for time-series generation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    def common(sp, config=True, checkpoint=False):
        if config:
            sp.add_argument("--config", help="config file path or built-in name")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="recompute even if the manifest matches")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("make-data", help="build and save the dataset archive"))
    common(sub.add_parser("train", help="train a model"))
    g = common(sub.add_parser("generate", help="sample sequences from a checkpoint"), config=False, checkpoint=True)
    g.add_argument("-n", type=int, help="number of sequences (default: dataset size)")
    g.add_argument("--length", type=int, help="sequence length (default: training length)")
    e = common(sub.add_parser("evaluate", help="discriminative/predictive scores and plots"), config=False,
               checkpoint=True)
    e.add_argument("--runs", type=int)
    e.add_argument("--no-plots", action="store_true")
    common(sub.add_parser("spectrum", help="eigenvalues of the prior operator"), config=False, checkpoint=True)
    r = common(sub.add_parser("reconstruct", help="reconstruction / inference plots"), config=False, checkpoint=True)
    r.add_argument("-n", type=int, default=1000, help="sequences to reconstruct")
    s = common(sub.add_parser("sweep", help="alpha/beta grid search"))
    s.add_argument("--alphas", help="comma-separated alpha grid (default: full grid)")
    s.add_argument("--betas", help="comma-separated beta grid (default: full grid)")
    s.add_argument("--workers", type=int, default=1)
    return p


def _grid(text):
    return list(SWEEP_GRID) if not text else [float(v) for v in text.split(",") if v.strip()]


def _load_ckpt(args):
    from .training import load_checkpoint

    model, cfg, payload = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return model, cfg, payload


def run(args) -> int:
    import torch

    from .training import build_dataset, stream_seed

    out = Path(args.out)
    verb = args.verb

    if verb in ("make-data", "train", "sweep"):
        cfg = load_config(args.config, args.overrides, seed=args.seed, out_dir=str(out))
        extra = {k: v for k, v in vars(args).items() if k in ("alphas", "betas")}
        if not _manifest(out, verb, cfg, [args.config], extra, args.force):
            log.info("up to date: %s (use --force to recompute)", out)
            return 0
        (out / "config.cfg").write_text(dump_config(cfg))
        if verb == "make-data":
            ds = build_dataset(cfg)
            ds.train.save(out / "train.npz")
            ds.real.save(out / "real.npz")
        elif verb == "train":
            from .koopman import plot_spectrum, spectral_report, write_spectrum_csv
            from .training import train

            res = train(cfg, out, progress=args.verbose)
            gen = torch.Generator().manual_seed(stream_seed(cfg.seed, "spectrum"))
            with torch.no_grad():
                prior = res.model.prior_rollout(cfg.batch_size, cfg.seq_len, gen)
            rows = spectral_report(prior.op)
            write_spectrum_csv(rows, out / "spectrum.csv")
            plot_spectrum(rows, out / "spectrum.png")
        else:
            from .training import sweep

            rows = sweep(cfg, _grid(args.alphas), _grid(args.betas), out, workers=args.workers)
            failed = [r for r in rows if r["error"]]
            for r in failed:
                log.error("cell alpha=%g beta=%g failed: %s", r["alpha"], r["beta"], r["error"])
        _finish(out)
        return 0

    model, cfg, _ = _load_ckpt(args)
    extra = {k: v for k, v in vars(args).items() if k not in ("out", "force", "verbose", "func")}
    if not _manifest(out, verb, cfg, [args.checkpoint], extra, args.force):
        log.info("up to date: %s (use --force to recompute)", out)
        return 0

    from .model import generate

    if verb == "generate":
        n = args.n or cfg.n_samples
        t_len = args.length or cfg.seq_len
        batch = generate(model, n, t_len, seed=stream_seed(cfg.seed, "generate"))
        batch.save(out / "generated.npz")
    elif verb == "evaluate":
        from .evaluation import evaluate

        ds = build_dataset(cfg)
        real = ds.real
        fake = generate(model, real.n, real.t_len, seed=stream_seed(cfg.seed, "generate"), normalized=True)
        report = evaluate(real, fake, seed=cfg.seed, runs=args.runs or cfg.eval_runs, steps=cfg.eval_steps,
                          out_dir=out, plots=not args.no_plots)
        print(report.to_json())
    elif verb == "spectrum":
        from .koopman import plot_spectrum, spectral_report, write_spectrum_csv

        gen = torch.Generator().manual_seed(stream_seed(cfg.seed, "spectrum"))
        with torch.no_grad():
            prior = model.prior_rollout(cfg.batch_size, cfg.seq_len, gen)
        rows = spectral_report(prior.op)
        write_spectrum_csv(rows, out / "spectrum.csv")
        plot_spectrum(rows, out / "spectrum.png")
        for r in rows:
            print(f"|lambda|={r['modulus']:.4f} arg={r['phase']:+.4f} {r['class']}")
    elif verb == "reconstruct":
        from .evaluation import reconstruction_report

        ds = build_dataset(cfg)
        n = min(args.n, ds.train.n)
        res = reconstruction_report(model, ds.train.subset(slice(0, n)), out,
                                    truth=ds.real.subset(slice(0, n)))
        print(json.dumps(res["table"], indent=2))
    _finish(out)
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if getattr(args, "verbose", False):
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tryonlab <command> [--config F] [--data D] [--out O]``."""
import argparse
import json
import logging
import sys

from .config import load_config
from .errors import TryOnError

COMMANDS = ("gen-data", "train-autoencoder", "train-warp", "train-flatten", "train-diffusion",
            "sample", "eval", "ablate")


def _parser():
    p = argparse.ArgumentParser(prog="tryonlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--data", help="dataset directory (default <out>/data)")
    common.add_argument("--out", help="output root (overrides config and $TRYONLAB_OUT)")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train-diffusion":
            sp.add_argument("--prior-branch", choices=("on", "off"))
            sp.add_argument("--cons-loss", choices=("on", "off"))
            sp.add_argument("--global-cond", choices=("on", "off"))
        if name == "sample":
            sp.add_argument("--person", required=True, help="sample id or sample directory")
            sp.add_argument("--garment", required=True, help="sample id or flat-garment PNG")
            sp.add_argument("--init", choices=("gaussian", "posterior"))
            sp.add_argument("--steps", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--freeu", choices=("on", "off"))
            sp.add_argument("--guidance", type=float)
            sp.add_argument("--variant", help="diffusion variant directory name")
            sp.add_argument("--trace", help="directory for per-step x0 decodes")
            sp.add_argument("--output", help="output PNG path")
        if name == "eval":
            sp.add_argument("--setting", choices=("paired", "unpaired"), default="paired")
            sp.add_argument("--variant")
            sp.add_argument("--init", choices=("gaussian", "posterior"))
    return p


def _onoff(v):
    return None if v is None else v == "on"


def run(args):
    from .pipeline import Pipeline  # torch import deferred until a command runs
    cfg = load_config(args.config)
    pipe = Pipeline(cfg, root=args.out, data=args.data)
    cmd = args.command
    if cmd == "gen-data":
        man = pipe.gen_data()
        print(f"wrote {man.count} samples to {pipe.data_dir}")
    elif cmd == "train-autoencoder":
        _, meta = pipe.train_autoencoder()
        print(json.dumps({"loss": meta["loss"], "heldout_l1": meta["heldout_l1"]}, sort_keys=True))
    elif cmd in ("train-warp", "train-flatten"):
        role = cmd.split("-")[1]
        _, meta = pipe.train_flow(role)
        print(json.dumps({"loss": meta["loss"], "test_l1": meta["test_l1"],
                          "test_baseline_l1": meta["test_baseline_l1"]}, sort_keys=True))
    elif cmd == "train-diffusion":
        flags = {k: _onoff(getattr(args, k)) for k in ("prior_branch", "cons_loss", "global_cond")}
        _, _, meta = pipe.train_diffusion({k: v for k, v in flags.items() if v is not None})
        print(json.dumps({"loss": meta["loss"], "flags": meta["flags"]}, sort_keys=True))
    elif cmd == "sample":
        over = {}
        if args.init:
            over["init_mode"] = "clothes_posterior" if args.init == "posterior" else "gaussian"
        if args.steps is not None:
            over["steps"] = args.steps
        if args.seed is not None:
            over["seed"] = args.seed
        if args.guidance is not None:
            over["guidance_scale"] = args.guidance
        if args.freeu == "off":
            over["freeu"] = None
        elif args.freeu == "on" and not cfg.sampler.freeu:
            from .diffusion.freeu import FreeUFactors
            s = cfg.sampler
            over["freeu"] = FreeUFactors(s.b1, s.b2, s.s1, s.s2)
        path = pipe.sample_pair(args.person, args.garment, args.variant, args.trace, args.output, **over)
        print(f"wrote {path}")
    elif cmd == "eval":
        init = None if args.init is None else ("clothes_posterior" if args.init == "posterior" else "gaussian")
        report = pipe.evaluate(args.setting, args.variant, init)
        print(json.dumps(report["aggregates"], sort_keys=True))
    elif cmd == "ablate":
        rows = pipe.ablate()
        cols = list(rows[0])
        print("\t".join(cols))
        for r in rows:
            print("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except TryOnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``fewbit`` command line: train, sweep, verify.

Exit codes: 0 ok, 1 configuration error, 2 training diverged,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import SWEEP_KEYS, TRAIN_KEYS, ConfigError, load_config, write_manifest
from .harness import BER_METHODS, NMSE_METHODS, export_csv, run_ber_sweep, run_nmse_sweep
from .networks import NET_KINDS, init_cenet_params, init_detnet_params, load_checkpoint, save_checkpoint
from .training import TrainingDiverged, train_cenet, train_detnet, write_loss_csv
from .verify import CHECKS, DEFAULT_TOLERANCES, run_checks

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("fewbit")


def _csv_list(text: str) -> list[str]:
    return [s for s in text.replace(" ", "").split(",") if s]


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's default 2 means divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewbit", description="Few-bit massive MIMO estimation/detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one network and write <name>.ckpt and <name>_loss.csv")
    t.add_argument("--config", required=True, help="key-value config file")
    t.add_argument("--net", choices=NET_KINDS, help="network kind (overrides net.kind)")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--seed", type=int, help="override seed")
    t.add_argument("--out-dir", default=".", help="output directory (default: current)")
    t.add_argument("--name", help="output stem (default: config file stem)")

    s = sub.add_parser("sweep", help="Monte-Carlo NMSE or BER sweep to CSV")
    s.add_argument("metric", choices=("nmse", "ber"))
    s.add_argument("--config", required=True)
    s.add_argument("--snrs", type=_floats, help="comma-separated SNRs in dB (overrides sweep.snrs)")
    s.add_argument("--methods", type=_csv_list, help="comma-separated methods (overrides sweep.methods)")
    s.add_argument("--trials", type=int, help="trials per point (overrides sweep.trials)")
    s.add_argument("--csi", choices=("perfect", "estimated"), help="CSI for BER sweeps (overrides sweep.csi)")
    s.add_argument("--checkpoints", nargs="*", default=[], help="checkpoints of learned methods")
    s.add_argument("--seed", type=int, help="override seed")
    s.add_argument("--out", default="results.csv", help="output CSV path")
    s.add_argument("--gnuplot", action="store_true", help="write a whitespace-separated wide table instead")

    v = sub.add_parser("verify", help="run the built-in invariant checks")
    v.add_argument("--only", type=_csv_list, help=f"comma-separated subset of: {', '.join(CHECKS)}")
    v.add_argument("--list", action="store_true", help="list check names and exit")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--grad-tol", type=float, default=DEFAULT_TOLERANCES["fd_backprop"],
                   help="relative tolerance for backprop adjoints")
    v.add_argument("--fd-tol", type=float, default=DEFAULT_TOLERANCES["fd_likelihood"],
                   help="relative tolerance for likelihood gradients")
    v.add_argument("--equiv-tol", type=float, default=DEFAULT_TOLERANCES["unfolding"],
                   help="absolute tolerance for unfolding equivalence")
    v.add_argument("--exact-tol", type=float, default=DEFAULT_TOLERANCES["exact"],
                   help="absolute tolerance for algebraic identities")
    v.add_argument("--sigma-tol", type=float, default=DEFAULT_TOLERANCES["sigmas"],
                   help="Monte-Carlo tolerance in standard errors")
    v.add_argument("--sigmoid-tol", type=float, default=DEFAULT_TOLERANCES["sigmoid"])
    return p


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.net:
        cfg.values["net.kind"] = args.net
    if args.epochs is not None:
        cfg.values["train.epochs"] = args.epochs
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    cfg.require(TRAIN_KEYS)
    kind = cfg["net.kind"]
    if kind not in NET_KINDS:
        raise ConfigError(f"{cfg.where('net.kind')}: unknown network kind {kind!r}")
    system, tcfg = cfg.system(), cfg.train()
    L = cfg["net.layers"]
    if L < 1:
        raise ConfigError(f"{cfg.where('net.layers')}: net.layers must be >= 1")
    if kind == "fbm-cenet":
        try:
            params0 = init_cenet_params(system, L, trainable_pilot=tcfg.trainable_pilot)
        except ValueError as e:
            raise ConfigError(f"{cfg.where('system.Tt')}: {e}") from None
        params, trace = train_cenet(system, tcfg, params0, seed=cfg["seed"])
    else:
        params, trace = train_detnet(system, tcfg, init_detnet_params(system, kind, L), seed=cfg["seed"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or Path(args.config).stem
    ckpt = out / f"{name}.ckpt"
    meta = {
        "N": system.N, "K": system.K, "Tt": system.Tt, "bits": system.bits, "snr_db": repr(float(system.snr_db)),
        "constellation": system.constellation, "seed": cfg["seed"], "epochs": tcfg.epochs,
    }
    save_checkpoint(ckpt, params, meta)
    write_loss_csv(trace, out / f"{name}_loss.csv")
    write_manifest(out / f"{name}_manifest.cfg", cfg, "train", out, [ckpt])
    final = f"{trace[-1][2]:.6g}" if trace else "n/a"
    print(f"trained {kind} for {tcfg.epochs} epochs (final loss {final}); wrote {ckpt}")
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def _load_models(paths, system) -> dict:
    """{kind: {snr_db: params}} keyed by checkpoint metadata."""
    models: dict = {}
    for path in paths:
        try:
            params, meta = load_checkpoint(path)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"{path}: cannot load checkpoint: {e}") from None
        kind = "fbm-cenet" if not hasattr(params, "kind") else params.kind
        try:
            snr = float(meta["snr_db"])
            dims = {k: int(meta[k]) for k in ("N", "K", "bits")}
        except (KeyError, ValueError):
            raise ConfigError(f"{path}: checkpoint lacks system metadata (N, K, bits, snr_db)") from None
        want = {"N": system.N, "K": system.K, "bits": system.bits}
        if dims != want:
            raise ConfigError(f"{path}: checkpoint was trained for {dims}, sweep config has {want}")
        models.setdefault(kind, {})[snr] = params
    return models


def _require_models(models, kind, snrs):
    have = models.get(kind, {})
    for snr in snrs:
        if float(snr) not in have:
            raise ConfigError(f"missing checkpoint for {kind} at {snr:g} dB (pass it via --checkpoints)")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    if args.snrs is not None:
        cfg.values["sweep.snrs"] = args.snrs
    if args.methods is not None:
        cfg.values["sweep.methods"] = args.methods
    if args.trials is not None:
        cfg.values["sweep.trials"] = args.trials
    if args.csi is not None:
        cfg.values["sweep.csi"] = args.csi
    cfg.require(SWEEP_KEYS + ("sweep.snrs", "sweep.methods"))
    system = cfg.system(snr_db=0.0)
    snrs, methods = cfg["sweep.snrs"], cfg["sweep.methods"]
    allowed = NMSE_METHODS if args.metric == "nmse" else BER_METHODS
    bad = [m for m in methods if m not in allowed]
    if bad:
        raise ConfigError(f"{cfg.where('sweep.methods')}: unknown {args.metric} method(s) {', '.join(bad)}; "
                          f"choose from {', '.join(allowed)}")
    models = _load_models(args.checkpoints, system)
    csi = cfg.get("sweep.csi", "perfect")
    learned = [m for m in methods if m in ("fbm-cenet", "b-detnet", "fbm-detnet")]
    if args.metric == "ber" and csi == "estimated":
        learned.append("fbm-cenet")
    for m in learned:
        _require_models(models, m, snrs)
    kw = {"seed": cfg["seed"]}
    if "sweep.trials" in cfg.values:
        kw["trials"] = cfg["sweep.trials"]
    if "sweep.chunk" in cfg.values:
        kw["chunk"] = cfg["sweep.chunk"]
    try:
        if args.metric == "nmse":
            result = run_nmse_sweep(system, snrs, methods, models=models.get("fbm-cenet"), **kw)
        else:
            if csi not in ("perfect", "estimated"):
                raise ConfigError(f"{cfg.where('sweep.csi')}: sweep.csi must be perfect or estimated")
            result = run_ber_sweep(system, snrs, methods, models=models, csi=csi,
                                   cenet_models=models.get("fbm-cenet"), **kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(result, out, gnuplot=args.gnuplot)
    write_manifest(out.with_name(out.stem + "_manifest.cfg"), cfg, f"sweep {args.metric}", out.parent,
                   args.checkpoints)
    print(f"wrote {len(result.rows)} rows to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.list:
        print("\n".join(CHECKS))
        return EXIT_OK
    tol = {
        "fd_backprop": args.grad_tol, "fd_likelihood": args.fd_tol, "unfolding": args.equiv_tol,
        "exact": args.exact_tol, "sigmas": args.sigma_tol, "sigmoid": args.sigmoid_tol,
    }
    try:
        results = run_checks(args.only, tol, seed=args.seed)
    except KeyError as e:
        raise ConfigError(e.args[0]) from None
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"train": cmd_train, "sweep": cmd_sweep, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"fewbit: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"fewbit: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: gen-data, train, transfer, eval, gradcheck.

Exit codes: 0 success, 1 a result check failed, 2 bad input or environment.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .losses import DEFAULT_LAMBDA
from .mesh import Mesh, MeshError, add_vertex_noise, load_obj, normalize_mesh, save_obj
from .model import ConfigError, ModelConfig, check_params, init_params, transfer
from .synthetic import (BENCHMARK, Triple, gen_identity, gen_pose, make_dataset, make_triple,
                        read_dataset, write_dataset)
from .training import TrainConfig, evaluate, sample_loss, prepare, train

log = logging.getLogger("dsffnet")

PRESETS = {
    # 500 steps at 8 steps per epoch; wider decoder than the default ladder
    "overfit": {"epochs": 63, "max_steps": 500, "batch_size": 8, "dec_widths": [128, 256, 128]},
    "smoke": {"epochs": 2, "batch_size": 8, "enc_widths": [8, 16], "code_dim": 32,
              "dec_widths": [8, 16, 8]},
}

ABLATIONS = {
    "spadain": {"variant": "spadain"},
    "no-target-side": {"variant": "no-target-side"},
    "no-edge": {"lam": 0.0},
}

SCALES = {"pmd": 1e-4, "cd": 1e-4, "emd": 1e-3}


class UsageError(Exception):
    """Bad input or environment; maps to exit code 2."""


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _print_config(name: str, cfg: Dict) -> None:
    print(f"[{name}] resolved config: {json.dumps(cfg, sort_keys=True)}")


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

def cmd_gendata(args) -> int:
    if not 0.0 <= args.unseen_frac < 1.0:
        raise UsageError(f"--unseen-frac must be in [0, 1), got {args.unseen_frac}")
    if args.identities < 1 or args.poses < 1:
        raise UsageError("--identities and --poses must be >= 1")
    if len(args.resolution) != 2 or args.resolution[0] < 3 or args.resolution[1] < 2:
        raise UsageError("--resolution must be AROUND,ALONG with AROUND >= 3 and ALONG >= 2")
    if args.bones < 2:
        raise UsageError("--bones must be >= 2")
    _print_config("gen-data", {k: v for k, v in vars(args).items() if k != "func"})
    try:
        triples, manifest = make_dataset(args.identities, args.poses, args.seed,
                                         tuple(args.resolution), args.bones, args.unseen_frac)
    except ValueError as e:
        raise UsageError(str(e))
    try:
        os.makedirs(args.out, exist_ok=True)
        write_dataset(triples, manifest, args.out)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}")
    counts = {s: sum(1 for t in triples if t.split == s) for s in ("train", "seen", "unseen")}
    print(f"wrote {len(manifest['variants'])} skinned variants, {len(triples)} triples "
          f"({counts}) to {args.out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_FLAGS = ("lr0", "decay_factor", "decay_every", "epochs", "batch_size", "lam",
               "weight_decay", "seed", "max_steps", "enc_widths", "code_dim", "dec_widths",
               "variant")


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then preset, then --config JSON, then ablation, then explicit flags."""
    merged = TrainConfig().to_dict()
    if args.preset:
        merged.update(PRESETS[args.preset])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overlay = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        if isinstance(overlay, dict) and "lambda" in overlay:
            overlay["lam"] = overlay.pop("lambda")
        if not isinstance(overlay, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
        unknown = sorted(set(overlay) - set(merged))
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {unknown}")
        merged.update(overlay)
    if args.ablate:
        merged.update(ABLATIONS[args.ablate])
    for key in TRAIN_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    try:
        cfg = TrainConfig.from_dict(merged)
        cfg.validate()
    except (ConfigError, TypeError) as e:
        raise UsageError(f"invalid training config: {e}")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    _print_config("train", cfg.to_dict())
    if not os.path.isfile(os.path.join(args.data, "manifest.json")):
        raise UsageError(f"no dataset manifest in {args.data}")
    try:
        triples, _ = read_dataset(args.data)
    except (OSError, MeshError, KeyError) as e:
        raise UsageError(f"cannot read dataset {args.data}: {e}")
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, CheckpointFormatError) as e:
            raise UsageError(f"cannot resume from {args.resume}: {e}")
    try:
        result = train(cfg, triples, resume=resume,
                       on_epoch=lambda r: print("epoch %d lr %.6g train_loss %.6g val_pmd %.6g "
                                                "val_cd %.6g" % r, flush=True))
    except ConfigError as e:
        raise UsageError(str(e))
    try:
        save_checkpoint(result.checkpoint, args.out)
        log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(result.log_csv())
    except OSError as e:
        raise UsageError(f"cannot write outputs: {e}")
    if result.log_rows:
        print(f"final val PMD {result.log_rows[-1][3]:.6g}")
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return 0


# --------------------------------------------------------------------------
# transfer
# --------------------------------------------------------------------------

def _load_model(path):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(path)
    except (OSError, CheckpointFormatError, ValueError) as e:
        raise UsageError(f"cannot load checkpoint {path}: {e}")
    model_cfg = ckpt.config.model_config()
    try:
        check_params(ckpt.params, model_cfg)
    except ConfigError as e:
        raise UsageError(f"checkpoint width mismatch: {e}")
    return ckpt, model_cfg


def cmd_transfer(args) -> int:
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be >= 0")
    _print_config("transfer", {k: v for k, v in vars(args).items() if k != "func"})
    ckpt, model_cfg = _load_model(args.ckpt)
    try:
        source = normalize_mesh(load_obj(args.source))
        target = normalize_mesh(load_obj(args.target))
    except (OSError, MeshError) as e:
        raise UsageError(f"cannot read input mesh: {e}")
    source = add_vertex_noise(source, args.noise_sigma, args.noise_seed)
    try:
        out = transfer(ckpt.params, model_cfg, source, target)
    except ad.DimensionError as e:
        raise UsageError(f"input incompatible with checkpoint: {e}")
    try:
        save_obj(out, args.out)
    except OSError as e:
        raise UsageError(f"cannot write {args.out}: {e}")
    print(f"wrote {args.out}: {out.n_vertices} vertices, {len(out.faces)} faces "
          f"(source had {source.n_vertices})")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    _print_config("eval", {k: v for k, v in vars(args).items() if k != "func"})
    if not os.path.isfile(os.path.join(args.data, "manifest.json")):
        raise UsageError(f"no dataset manifest in {args.data}")
    splits = ["seen", "unseen"] if args.split == "both" else [args.split]
    triples, _ = read_dataset(args.data)
    chosen = [t for t in triples if t.split in splits]
    if not chosen:
        raise UsageError(f"split {args.split!r} is empty in {args.data}")
    if args.oracle_gt:
        params, model_cfg, predictor = None, None, (lambda item: item.gt)
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --oracle-gt is given")
        ckpt, model_cfg = _load_model(args.ckpt)
        params, predictor = ckpt.params, None
    res = evaluate(params, model_cfg, chosen, predictor)
    print(f"{'split':<8} {'PMD(x1e-4)':>12} {'CD(x1e-4)':>12} {'EMD(x1e-3)':>12}")
    rows = []
    for split in splits:
        if split not in res:
            continue
        m = res[split]
        print(f"{split:<8} {m.pmd / SCALES['pmd']:12.4f} {m.cd / SCALES['cd']:12.4f} "
              f"{m.emd / SCALES['emd']:12.4f}")
        rows.append((split, m.pmd, m.cd, m.emd))
    out = args.out or "eval.csv"
    try:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("split", "pmd", "cd", "emd"))
            for r in rows:
                w.writerow([r[0]] + [repr(x) for x in r[1:]])
    except OSError as e:
        raise UsageError(f"cannot write {out}: {e}")
    print(f"raw metrics: {out}")
    return 0


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def gradcheck_instance(model_cfg: ModelConfig, n_vertices: int, seed: int, lam: float):
    """A triple with ``n_vertices`` vertices plus perturbed initial params.

    Uses a two-bone tube when ``n_vertices`` is a valid tube size, otherwise
    random points with a fan topology.
    """
    around = 4
    along = max(2, (n_vertices // around - 1) // 2)
    ident = gen_identity(seed, 2, (around, along))
    if ident.n_vertices != n_vertices:
        # not a tube size: use raw random points for the source/target and a fan topology
        rng = np.random.default_rng(seed)
        faces = np.array([(0, i, i + 1) for i in range(1, n_vertices - 1)], dtype=np.int64)
        triple = Triple(*(normalize_mesh(Mesh(rng.normal(size=(n_vertices, 3)), faces))
                          for _ in range(3)))
    else:
        triple = make_triple(ident, gen_pose(seed + 1, 2), gen_identity(seed + 2, 2, (around, along)),
                             gen_pose(seed + 3, 2), seed)
    params = init_params(model_cfg, seed)
    rng = np.random.default_rng(seed + 7)
    for k in params:
        # move alpha/beta, biases and the zero-initialized residual convs off
        # their init so every path carries gradient
        if not k.endswith(".W") or k.endswith(".conv.1.W"):
            params[k] = params[k] + rng.normal(0.0, 0.3, size=np.shape(params[k]))
    item = prepare(triple)
    return item, params


def run_gradcheck(model_cfg: ModelConfig, n_vertices: int, seed: int, lam: float,
                  max_entries: Optional[int], h: float = 1e-5) -> Dict[str, float]:
    item, params = gradcheck_instance(model_cfg, n_vertices, seed, lam)

    def f(p):
        return sample_loss(p, model_cfg, item, lam)[0]

    return ad.grad_check_report(f, params, h=h, max_entries=max_entries, seed=seed)


def cmd_gradcheck(args) -> int:
    if args.vertices < 3:
        raise UsageError(f"--vertices must be >= 3 (got {args.vertices})")
    if args.vertices > 64:
        raise UsageError(f"--vertices must be <= 64 (got {args.vertices})")
    model_cfg = ModelConfig(tuple(args.enc_widths), args.code_dim, tuple(args.dec_widths),
                            variant=args.variant)
    try:
        model_cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e))
    _print_config("gradcheck", {k: v for k, v in vars(args).items() if k != "func"})
    t0 = time.time()
    max_entries = args.max_entries if args.max_entries > 0 else None
    if args.corrupt_adjoint:
        with ad.corrupted_adjoint(args.corrupt_adjoint, 1.5):
            report = run_gradcheck(model_cfg, args.vertices, args.seed, args.lam, max_entries)
    else:
        report = run_gradcheck(model_cfg, args.vertices, args.seed, args.lam, max_entries)
    groups: Dict[str, float] = {}
    for name, err in report.items():
        group = name.rsplit(".", 1)[0] if not name.endswith((".alpha", ".beta")) else name
        groups[group] = max(groups.get(group, 0.0), err)
    for g, err in groups.items():
        print(f"{g:<28} max_rel_err {err:.3e}")
    worst = max(report.values())
    print(f"overall max_rel_err {worst:.3e} over {len(report)} arrays in {time.time() - t0:.1f}s")
    bad = [k for k, v in report.items() if v > args.tol]
    if bad:
        print(f"FAIL: tolerance {args.tol:g} exceeded for: {', '.join(bad)}")
        return 1
    print(f"PASS: all parameters within {args.tol:g}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = ArgParser(prog="dsffnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    g = sub.add_parser("gen-data", help="generate a synthetic triple dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--identities", type=int, default=BENCHMARK["n_identities"])
    g.add_argument("--poses", type=int, default=BENCHMARK["n_poses"])
    g.add_argument("--resolution", type=_ints, default=list(BENCHMARK["resolution"]),
                   help="AROUND,ALONG")
    g.add_argument("--bones", type=int, default=BENCHMARK["k"])
    g.add_argument("--seed", type=int, default=BENCHMARK["seed"])
    g.add_argument("--unseen-frac", type=float, default=0.5)
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="JSON overlay with TrainConfig field names")
    t.add_argument("--log", help="CSV log path (default: next to the checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--ablate", choices=sorted(ABLATIONS))
    t.add_argument("--lr0", type=float)
    t.add_argument("--decay-factor", type=float)
    t.add_argument("--decay-every", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lam", "--lambda", dest="lam", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--enc-widths", type=_ints)
    t.add_argument("--code-dim", type=int)
    t.add_argument("--dec-widths", type=_ints)
    t.add_argument("--variant", choices=["full", "spadain", "no-target-side"])
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="transfer the pose of SOURCE onto TARGET")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--source", required=True)
    x.add_argument("--target", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--noise-sigma", type=float, default=0.0)
    x.add_argument("--noise-seed", type=int, default=0)
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="PMD / CD / EMD on a dataset split")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["seen", "unseen", "both"], default="both")
    e.add_argument("--out", help="CSV output path (default eval.csv)")
    e.add_argument("--oracle-gt", action="store_true", help="score the ground truth itself")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    c.add_argument("--enc-widths", type=_ints, default=[8, 16])
    c.add_argument("--code-dim", type=int, default=32)
    c.add_argument("--dec-widths", type=_ints, default=[8, 16, 8])
    c.add_argument("--variant", choices=["full", "spadain", "no-target-side"], default="full")
    c.add_argument("--vertices", type=int, default=16)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--lam", "--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=12,
                   help="finite-difference probes per array (0 = every entry)")
    c.add_argument("--corrupt-adjoint", metavar="OP", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0, usage errors exit 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

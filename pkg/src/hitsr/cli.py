"""Command-line shell around the library.

Subcommands: train, eval, robustness, gradcheck, inspect-checkpoint,
export-attn. Every subcommand accepts --config (a line-oriented
``key = value`` file with ``#`` comments; unknown keys are hard errors),
--seed, --out-dir, --device-threads and --precision.

Exit codes: 0 success, 1 contract error (bad flags, bad config, bad
files), 2 numeric failure. BLAS thread pinning must happen before numpy
loads, so every numeric import in this module is deferred until after
argument parsing; the package __init__ is lazy for the same reason.

Config keys:
    model.<field>      any ModelConfig field, e.g. model.window = 8
    train.<field>      any TrainConfig field, e.g. train.max_steps = 500
    data.root          dataset directory (default: bundled fixture set)
    data.random_ref    draw refs from other samples (default: false)
    data.eval_root     separate eval dataset for train/eval runs
    eval.mode          full | center_crop (default: full)
    checkpoint         model file for eval/robustness/export-attn
    resume             checkpoint to resume training from
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .errors import (CapabilityError, ConfigurationError, ContractError,
                     DimensionError, FormatError, NumericError)

# acceptance thresholds for the 64-bit gradient suite
GRADCHECK_OP_TOL = 1e-6
GRADCHECK_MODEL_TOL = 1e-5

_TOP_LEVEL_KEYS = {"data.root", "data.random_ref", "data.eval_root",
                   "eval.mode", "checkpoint", "resume"}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="hitsr",
                description="reference-based 4x super-resolution with "
                            "gated double attention")
    sub = p.add_subparsers(dest="command", metavar="command",
                           parser_class=_Parser, required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="key = value file; # starts a comment; "
                             "unknown keys are errors")
        sp.add_argument("--seed", type=int, default=None,
                        help="override train.seed / the model build seed")
        sp.add_argument("--out-dir", metavar="DIR", default="hitsr_out",
                        help="where reports and checkpoints go")
        sp.add_argument("--device-threads", type=int, default=1,
                        help="BLAS thread count; 1 gives bitwise "
                             "deterministic runs")
        sp.add_argument("--precision", choices=("f32", "f64"),
                        default="f32", help="default tensor dtype")
        return sp

    common(sub.add_parser("train", help="run the Adam training loop"))
    common(sub.add_parser("eval", help="PSNR/SSIM table with bicubic "
                                       "baseline"))
    common(sub.add_parser("robustness",
                          help="reference-warp sweep: scale and rotation "
                               "at four severities"))
    common(sub.add_parser("gradcheck",
                          help="finite-difference audit of every op and "
                               "of the end-to-end tiny model"))
    ins = common(sub.add_parser("inspect-checkpoint",
                                help="print a checkpoint's header"))
    ins.add_argument("path", help="checkpoint file")
    common(sub.add_parser("export-attn",
                          help="dump gate values and attention row sums "
                               "from an audited forward pass"))
    return p


# ----------------------------------------------------------------------
# config file grammar
# ----------------------------------------------------------------------

def read_config(path) -> dict:
    """Parse ``key = value`` lines into {key: raw string}.

    ``#`` starts a comment (full-line or trailing); blank lines are
    skipped; duplicate keys and lines without ``=`` are errors.
    """
    text = Path(path).read_text(encoding="utf-8")
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str, like):
    """Convert a raw string to the type of a dataclass default."""
    if isinstance(like, bool):  # bool before int: bool subclasses int
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(
            f"{key}: expected {type(like).__name__}, got {value!r}")
    return value


def _typed(cls, prefix: str, d: dict):
    """Build a config dataclass from raw strings, coercing by field type."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    typed = {}
    for k, v in d.items():
        if k not in defaults:
            raise ConfigurationError(f"unknown config key {prefix + k!r}")
        if k == "milestones":
            typed[k] = (None if v.lower() == "none"
                        else tuple(int(x) for x in v.split(",")))
        else:
            typed[k] = _coerce(prefix + k, v, defaults[k])
    return cls.from_dict(typed)


def _split(raw: dict):
    """Partition raw config keys into model.*, train.* and top-level."""
    model_d, train_d, rest = {}, {}, {}
    for key, val in raw.items():
        if key.startswith("model."):
            model_d[key[len("model."):]] = val
        elif key.startswith("train."):
            train_d[key[len("train."):]] = val
        elif key in _TOP_LEVEL_KEYS:
            rest[key] = val
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return model_d, train_d, rest


def _load_configs(args):
    """Resolve the three config layers plus flag overrides."""
    from .model import ModelConfig
    from .train import TrainConfig

    raw = read_config(args.config) if args.config else {}
    model_d, train_d, rest = _split(raw)
    model_cfg = _typed(ModelConfig, "model.", model_d)
    train_cfg = _typed(TrainConfig, "train.", train_d)
    overrides = {"device_threads": args.device_threads}
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    train_cfg.validate()
    rest_bool = rest.get("data.random_ref", "false")
    rest["data.random_ref"] = _coerce("data.random_ref", rest_bool, True)
    return model_cfg, train_cfg, rest


def _load_dataset(rest: dict, seed: int):
    from . import data as D

    root = rest.get("data.root")
    return D.load_dataset(Path(root) if root else D.fixture_root(),
                          random_ref=rest["data.random_ref"], seed=seed)


def _resolve_model(args, model_cfg, rest, seed: int):
    """checkpoint key wins: architecture and weights come from the file."""
    from .model import build, load_checkpoint

    if rest.get("checkpoint"):
        return load_checkpoint(rest["checkpoint"]).model
    return build(model_cfg, seed=seed)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def _cmd_train(args) -> int:
    from .model import build
    from .train import train

    model_cfg, train_cfg, rest = _load_configs(args)
    model = build(model_cfg, seed=train_cfg.seed)
    dataset = _load_dataset(rest, train_cfg.seed)
    eval_ds = None
    if rest.get("data.eval_root"):
        from . import data as D
        eval_ds = D.load_dataset(Path(rest["data.eval_root"]),
                                 random_ref=rest["data.random_ref"],
                                 seed=train_cfg.seed)
    report = train(model, dataset, train_cfg, args.out_dir,
                   resume_from=rest.get("resume"), eval_dataset=eval_ds)
    last = report.loss_rows[-1] if report.loss_rows else {}
    print(f"trained to step {report.steps_done}; "
          f"final total loss {last.get('total', 'n/a')}; "
          f"reports in {args.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .train import RunReport, evaluate, write_csv

    model_cfg, train_cfg, rest = _load_configs(args)
    model = _resolve_model(args, model_cfg, rest, train_cfg.seed)
    root = {"data.root": rest.get("data.eval_root") or rest.get("data.root"),
            "data.random_ref": rest["data.random_ref"]}
    dataset = _load_dataset(root, train_cfg.seed)
    rep = evaluate(model, dataset, mode=rest.get("eval.mode", "full"))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # one row per sample; the mean goes to stdout, keeping the CSV row
    # count equal to the dataset size
    write_csv(out / "eval.csv", RunReport.EVAL_COLS, rep.rows)
    for e in rep.events:
        print(e)
    m = rep.mean_row
    print(f"{len(rep.rows)} samples; mean psnr {m['psnr']:.4f} "
          f"ssim {m['ssim']:.6f} (bicubic {m['psnr_bicubic']:.4f} / "
          f"{m['ssim_bicubic']:.6f}); wrote {out / 'eval.csv'}")
    return 0


def _cmd_robustness(args) -> int:
    from .train import ROBUSTNESS_COLS, robustness_run, write_csv

    model_cfg, train_cfg, rest = _load_configs(args)
    model = _resolve_model(args, model_cfg, rest, train_cfg.seed)
    dataset = _load_dataset(rest, train_cfg.seed)
    rows = robustness_run(model, dataset)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "robustness.csv", ROBUSTNESS_COLS, rows)
    for r in rows:
        if r["id"] == "mean":
            print(f"{r['transform']:<8s} {r['level']:<6s} "
                  f"psnr {r['psnr']:.4f} ssim {r['ssim']:.6f}")
    print(f"wrote {out / 'robustness.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_model_check, run_op_suite

    if args.precision != "f64":
        print("note: gradcheck always runs in f64; central differences "
              "cannot certify tighter than ~1e-3 in f32")
    seed = args.seed if args.seed is not None else 0
    ops = run_op_suite(seed=seed)
    worst_op = 0.0
    for name in sorted(ops):
        print(f"{name:<20s} max_rel_err {ops[name]:.3e}")
        worst_op = max(worst_op, ops[name])
    model_err = run_model_check(seed=seed)
    print(f"{'model':<20s} max_rel_err {model_err:.3e}")
    ok = worst_op < GRADCHECK_OP_TOL and model_err < GRADCHECK_MODEL_TOL
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} "
          f"(op tolerance {GRADCHECK_OP_TOL:.0e}, "
          f"model tolerance {GRADCHECK_MODEL_TOL:.0e})")
    return 0 if ok else 2


def _prod(shape) -> int:
    out = 1
    for s in shape:
        out *= int(s)
    return out


def _cmd_inspect(args) -> int:
    from .model import CKPT_VERSION, read_header

    h = read_header(args.path)
    tensors = h.get("tensors", [])
    n_param = sum(1 for t in tensors if t["name"].startswith("param."))
    total = sum(_prod(t["shape"]) for t in tensors
                if t["name"].startswith("param."))
    print(f"container version {CKPT_VERSION}")
    print(f"step {h['step']}  seed {h['seed']}")
    print("config " + " ".join(f"{k}={v}" for k, v in
                               sorted(h["config"].items())))
    print(f"model tensors {n_param}  parameters {total}")
    print(f"optimizer t {h.get('optimizer_t')}  "
          f"rng {'present' if h.get('rng') else 'absent'}")
    for group, meta in sorted((h.get("extra") or {}).items()):
        names = [t["name"] for t in tensors
                 if t["name"].startswith(f"extra.{group}.")]
        print(f"extra group {group!r}: {len(names)} tensors, "
              f"t {meta.get('t')}")
    return 0


def _cmd_export_attn(args) -> int:
    import numpy as np

    from . import trace
    from .tensor import Tensor
    from .train import write_csv

    model_cfg, train_cfg, rest = _load_configs(args)
    model = _resolve_model(args, model_cfg, rest, train_cfg.seed)
    dataset = _load_dataset(rest, train_cfg.seed)
    s = dataset[0]
    lr = Tensor(np.moveaxis(s.lr, -1, 0)[None])
    ref = Tensor(np.moveaxis(s.ref, -1, 0)[None])
    with trace.capture() as events:
        model.forward(lr, ref, training=False)

    gate_rows = [{"block": b, "head": i, "sigma": float(v)}
                 for b, vals in sorted(model.gate_sigmas().items())
                 for i, v in enumerate(vals)]
    attn_rows = [{"label": e["label"], "rowsum_min": e["rowsum_min"],
                  "rowsum_max": e["rowsum_max"]}
                 for e in events if e["kind"] == "attention"]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "gates.csv", ["block", "head", "sigma"], gate_rows)
    write_csv(out / "attention.csv", ["label", "rowsum_min", "rowsum_max"],
              attn_rows)
    lo = min(r["rowsum_min"] for r in attn_rows)
    hi = max(r["rowsum_max"] for r in attn_rows)
    print(f"sample {s.id}: {len(gate_rows)} gates, {len(attn_rows)} "
          f"attention matrices; row sums in [{lo:.6f}, {hi:.6f}]")
    print(f"wrote {out / 'gates.csv'} and {out / 'attention.csv'}")
    return 0


_DISPATCH = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "robustness": _cmd_robustness,
    "gradcheck": _cmd_gradcheck,
    "inspect-checkpoint": _cmd_inspect,
    "export-attn": _cmd_export_attn,
}


def _pin_threads(n: int) -> None:
    """Cap BLAS pools via the environment.

    Effective only while numpy is not yet imported in this process; the
    lazy package __init__ and the deferred imports above keep that true
    for console entry.
    """
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.device_threads < 1:
        print(f"hitsr: error: --device-threads must be >= 1, "
              f"got {args.device_threads}", file=sys.stderr)
        return 1
    _pin_threads(args.device_threads)

    from . import tensor as T  # first numpy-touching import

    T.set_precision(args.precision)
    try:
        return _DISPATCH[args.command](args)
    except NumericError as e:
        print(f"hitsr: numeric failure: {e}", file=sys.stderr)
        return 2
    except (ConfigurationError, ContractError, DimensionError,
            FormatError, CapabilityError) as e:
        print(f"hitsr: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"hitsr: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

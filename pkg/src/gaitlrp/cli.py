"""Command-line entry point: ``gaitlrp {synth,crossval,train,explain,plot}``.

Exit codes: 0 success, 1 internal error, 2 input/usage error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .data import (
    DEFAULT_T,
    AgeGroup,
    CohortSpec,
    Dataset,
    NormParams,
    build_inputs,
    channel_names,
    fit_norm_params,
    load_dataset,
    synth_generate,
    write_dataset,
)
from .errors import DivergenceError, FoldError, InputError
from .eval import export_report, format_metrics, run_cross_validation
from .lrp import (
    ClassRelevanceProfile,
    LrpConfig,
    conservation_report,
    lrp_explain,
    read_relevance_csv,
    write_relevance_csv,
)
from .plotting import render_figures

log = logging.getLogger("gaitlrp")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(InputError):
    pass


@dataclass
class RunConfig:
    """Serializable run settings; JSON keys mirror the field names."""

    T: int = DEFAULT_T
    k: int = 10
    seed: int = 0
    layout: str = "channels"
    sides: str = "both"
    use_bias: bool = True
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    lrp: LrpConfig = field(default_factory=LrpConfig)

    def __post_init__(self):
        if self.T < 2:
            raise UsageError("T must be >= 2")
        if self.k < 2:
            raise UsageError("k must be >= 2")
        if self.layout not in ("channels", "flat"):
            raise UsageError("layout must be 'channels' or 'flat'")
        if self.sides not in ("both", "average"):
            raise UsageError("sides must be 'both' or 'average'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "train" in d:
                d["train"] = nn.TrainConfig(**d["train"])
            if "lrp" in d:
                d["lrp"] = LrpConfig(**d["lrp"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(raw)


# --------------------------------------------------------------------------
# argument types


def _int_at_least(lo):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
        if value < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {value}")
        return value
    return parse


def _nonneg_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not value >= 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return value


def _class_arg(text):
    names = {g.name.lower(): g for g in AgeGroup}
    if text.lower() in names:
        return int(names[text.lower()])
    try:
        value = int(text)
    except ValueError:
        value = -1
    if not 0 <= value < len(AgeGroup):
        raise argparse.ArgumentTypeError(
            f"class must be 0..{len(AgeGroup) - 1} or one of {[g.name for g in AgeGroup]}")
    return value


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = CohortSpec(args.per_class, args.trials, args.T, args.noise)
    ds = synth_generate(spec, args.seed)
    write_dataset(ds, args.out)
    print(f"subjects={len(ds.subjects)}")
    print(f"trials={len(ds)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    return load_config(args.config, {"T": args.T, "k": getattr(args, "k", None), "seed": args.seed})


def cmd_crossval(args) -> int:
    cfg = _run_config(args)
    ds = load_dataset(args.data, cfg.T)
    result = run_cross_validation(ds, cfg.k, cfg.train, cfg.lrp, cfg.seed, cfg.layout, cfg.sides,
                                  cfg.use_bias)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    export_report(result, out)
    sys.stdout.write(format_metrics(result))
    return EXIT_OK


def _model_inputs(ds: Dataset, indices, meta: dict):
    params = NormParams.from_dict(meta["norm"])
    return build_inputs(ds, indices, params, meta["layout"], meta["sides"])


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = load_dataset(args.data, cfg.T)
    params = fit_norm_params(ds, ds.subjects)
    x = build_inputs(ds, range(len(ds)), params, cfg.layout, cfg.sides)
    y = ds.label_array()
    net = nn.default_network(x.shape[1], x.shape[2], seed=cfg.seed, use_bias=cfg.use_bias)
    net, hist = nn.train(net, x, y, nn.TrainConfig(**{**asdict(cfg.train), "seed": cfg.seed}))
    pred, _ = nn.predict(net, x)
    meta = {"norm": params.to_dict(), "layout": cfg.layout, "sides": cfg.sides, "T": cfg.T,
            "channels": [list(c) for c in channel_names(cfg.sides)], "config": cfg.to_dict(),
            "final_loss": hist.loss[-1]}
    nn.save_model(net, args.out, meta)
    print(f"final_loss={hist.loss[-1]!r}")
    print(f"train_accuracy={float(np.mean(pred == y))!r}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    try:
        net, meta = nn.load_model(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {args.model}: {exc}") from None
    ds = load_dataset(args.data, meta["T"])
    if not 0 <= args.trial < len(ds):
        raise UsageError(f"trial {args.trial} out of range (dataset has {len(ds)} trials)")
    x = _model_inputs(ds, [args.trial], meta)[0]
    trace = nn.forward(net, x)
    truth = int(ds.labels[args.trial])
    target = truth if args.target is None else args.target
    cfg = LrpConfig(rule=args.rule, epsilon=args.epsilon)
    rmap = lrp_explain(net, trace, target, cfg)
    channels = tuple(tuple(c) for c in meta["channels"])
    shape = (len(channels), -1)
    profile = ClassRelevanceProfile(AgeGroup(target), channels,
                                    rmap.input_relevance.reshape(shape), x.reshape(shape),
                                    np.zeros_like(x).reshape(shape), 1)
    write_relevance_csv(args.out, {profile.group: profile})
    report = conservation_report(rmap)
    print(f"trial={args.trial} subject={ds.trials[args.trial].subject_id} "
          f"true_class={AgeGroup(truth).name} explained_class={AgeGroup(target).name}")
    print(f"predicted_class={AgeGroup(int(np.argmax(trace.logits))).name}")
    for line in report.lines():
        print(line)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        profiles, total = read_relevance_csv(args.relevance)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read relevance file {args.relevance}: {exc}") from None
    if not profiles:
        raise UsageError(f"{args.relevance} holds no class profiles")
    paths = render_figures(profiles, total, args.out)
    print(f"wrote {len(paths)} figures to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitlrp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic GRF cohort as CSV")
    s.add_argument("--per-class", type=_int_at_least(1), required=True)
    s.add_argument("--trials", type=_int_at_least(1), required=True)
    s.add_argument("--T", type=_int_at_least(2), default=DEFAULT_T)
    s.add_argument("--noise", type=_nonneg_float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def run_opts(q, with_k):
        q.add_argument("--data", required=True)
        q.add_argument("--config", help="JSON config; flags override its values")
        q.add_argument("--seed", type=int)
        q.add_argument("--T", type=_int_at_least(2))
        if with_k:
            q.add_argument("--k", type=_int_at_least(2))

    c = sub.add_parser("crossval", help="stratified k-fold CV with LRP report")
    run_opts(c, True)
    c.add_argument("--out", required=True, help="report directory")
    c.set_defaults(func=cmd_crossval)

    t = sub.add_parser("train", help="train on the whole dataset and save a checkpoint")
    run_opts(t, False)
    t.add_argument("--out", required=True, help="checkpoint path (.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="LRP relevance for a single trial")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--trial", type=_int_at_least(0), required=True)
    e.add_argument("--class", dest="target", type=_class_arg,
                   help="class to explain (default: the trial's true class)")
    e.add_argument("--rule", choices=["epsilon", "alphabeta"], default="epsilon")
    e.add_argument("--epsilon", type=_nonneg_float, default=1e-6)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_explain)

    g = sub.add_parser("plot", help="render SVG figures from a relevance CSV")
    g.add_argument("--relevance", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, DivergenceError):
            return EXIT_DIVERGED
        return EXIT_INPUT if isinstance(exc.cause, InputError) else EXIT_INTERNAL
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""``evflow`` command line: gen, partition, landscape, estimate, train, eval, activity.

Every subcommand writes its outputs plus a ``config.json`` snapshot of the
resolved arguments into ``--out-dir`` (which must exist), prints
``key=value`` summary lines, and on failure prints a single
``evflow: error: <message>`` line with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, tools
from .events import (EventPartition, format_events, parse_events, partition_fixed_count,
                     rasterize_counts, synth_translating_scene)
from .network import VARIANTS, Network, build_toy_firenet
from .neurons import SurrogateConfig
from .train import TrainConfig, train_loop
from .warp import WEIGHTINGS

SEED_ENV = "EVFLOW_SEED"


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _pair(text, kind=float):
    parts = text.replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    try:
        return kind(parts[0]), kind(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid pair {text!r}") from None


def _int_pair(text):
    return _pair(text, int)


def _default_seed():
    value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    if not out.is_dir():
        raise CliError(f"output directory does not exist: {out}")
    return out


def _snapshot(args, out: Path, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        cfg.update(extra)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=str)


def _emit(**items):
    for k, v in items.items():
        if isinstance(v, float):
            v = "undefined" if np.isnan(v) else repr(v)
        print(f"{k}={v}")


def _load_events(path, sensor_size=None) -> EventPartition:
    try:
        with open(path) as fh:
            return parse_events(fh, sensor_size)
    except FileNotFoundError:
        raise CliError(f"no such events file: {path}") from None


def _select(stream: EventPartition, args) -> EventPartition:
    """The partition addressed by ``--n/--index`` or ``--window``; the whole stream otherwise."""
    if getattr(args, "window", None) is not None:
        t0, t1 = args.window
        m = (stream.t >= t0) & (stream.t <= t1)
        return EventPartition(stream.t[m], stream.x[m], stream.y[m], stream.p[m], stream.sensor_size)
    if getattr(args, "n", None):
        parts = partition_fixed_count(stream, args.n)
        if not 0 <= args.index < len(parts):
            raise CliError(f"partition index {args.index} out of range ({len(parts)} partitions)")
        return parts[args.index]
    return stream


def _gt_for(partition, gt_flow, gt_meta, from_rate=False):
    """Ground truth for one partition; with ``from_rate`` it is rebuilt from the
    file's px/s metadata and the partition's own duration."""
    if from_rate:
        if "flow_px_s" not in gt_meta:
            raise CliError("--gt-from-rate needs a flow_px_s entry in the ground-truth file")
        u, v = (float(s) for s in gt_meta["flow_px_s"].split(","))
        h, w = partition.sensor_size
        out = np.empty((2, h, w))
        out[0], out[1] = u * partition.duration, v * partition.duration
        return out
    return gt_flow


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(args):
    out = _out_dir(args)
    scene = synth_translating_scene(args.seed, args.flow, args.duration, tuple(args.size),
                                    events_per_edge=args.events_per_edge, n_dots=args.n_dots)
    (out / "events.csv").write_text(format_events(scene.events))
    u, v = scene.mean_partition_flow(args.n)
    h, w = scene.events.sensor_size
    gt = np.empty((2, h, w))
    gt[0], gt[1] = u, v
    meta = {"flow_px_s": f"{args.flow[0]!r},{args.flow[1]!r}", "seed": args.seed, "n": args.n}
    tools.write_flow(out / "gt_flow.csv", gt, meta)
    _snapshot(args, out)
    _emit(events=len(scene.events), gt_u=u, gt_v=v, out=str(out))


def cmd_partition(args):
    out = _out_dir(args)
    stream = _load_events(args.events)
    parts = partition_fixed_count(stream, args.n)
    for i, part in enumerate(parts):
        (out / f"partition_{i:04d}.csv").write_text(format_events(part))
    _snapshot(args, out)
    _emit(partitions=len(parts), dropped=len(stream) - len(parts) * args.n)


def cmd_landscape(args):
    out = _out_dir(args)
    part = _select(_load_events(args.events), args)
    modes = [True, False] if args.compare else [not args.unscaled]
    for scaled in modes:
        grid = tools.loss_landscape(part, args.d, args.samples, scaled, args.weighting)
        name = f"landscape_{'scaled' if scaled else 'unscaled'}"
        grid.write_csv(out / f"{name}.csv")
        if args.plot:
            from .plotting import plot_landscape

            plot_landscape(grid, out / f"{name}.png")
        u, v = grid.argmin_flow()
        tag = "scaled" if scaled else "unscaled"
        _emit(**{f"{tag}_argmin_u": u, f"{tag}_argmin_v": v, f"{tag}_on_boundary": grid.argmin_on_boundary()})
    _snapshot(args, out)


def cmd_estimate(args):
    out = _out_dir(args)
    part = _select(_load_events(args.events), args)
    est = tools.estimate_flow_cm(part, args.d, args.samples, args.levels, weighting=args.weighting)
    if est.degenerate:
        raise CliError("degenerate partition: no events or a single timestamp")
    flow = est.flow_field(part.sensor_size)
    tools.write_flow(out / "flow.csv", flow, {"loss": repr(est.loss)})
    if args.plot:
        from .plotting import plot_flow

        plot_flow(flow * (rasterize_counts(part).sum(axis=0) > 0), out / "flow.png", rasterize_counts(part))
    _snapshot(args, out)
    _emit(u=est.u, v=est.v, loss=est.loss)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    overrides = {"N": args.N, "K": args.K, "lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs,
                 "clip_norm": args.clip, "lam": args.lam, "f_desired": args.f_desired, "max_steps": args.max_steps,
                 "weighting": args.weighting}
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["seed"] = args.seed
    if args.no_augment:
        base["augment"] = False
    return TrainConfig.from_dict(base)


def cmd_train(args):
    out = _out_dir(args)
    cfg = _train_config(args)
    streams = [_load_events(p) for p in args.events]
    sizes = {s.sensor_size for s in streams}
    if len(sizes) != 1:
        raise CliError("all training sequences must share one sensor size")
    size = sizes.pop()
    if args.checkpoint:
        net = Network.load(args.checkpoint)
    else:
        net = build_toy_firenet(args.variant, size, seed=args.seed, channels=args.channels,
                                encoders=args.encoders, recurrent=args.recurrent,
                                surrogate=SurrogateConfig(args.surrogate, args.gamma))
    result = train_loop(net, streams, cfg, log_path=out / "train_log.csv",
                        checkpoint_path=out / "checkpoint.npz")
    cfg.save(out / "train_config.json")
    if args.plot and result.log:
        from .plotting import plot_training

        plot_training(result.log, out / "training.png")
    _snapshot(args, out, {"resolved_train_config": cfg.to_dict(), "network": net.config.to_dict()})
    last = result.log[-1] if result.log else {}
    _emit(steps=result.steps, final_contrast=last.get("contrast_total", float("nan")),
          final_total=last.get("total", float("nan")))


def cmd_eval(args):
    out = _out_dir(args)
    stream = _load_events(args.events)
    parts = partition_fixed_count(stream, args.n)
    if not parts:
        raise CliError(f"fewer than N={args.n} events")
    gt_flow, gt_meta = tools.read_flow(args.gt) if args.gt else (None, {})
    if args.checkpoint:
        net = Network.load(args.checkpoint)
        ctx = net.new_context()
        preds = [net.forward(rasterize_counts(p), ctx, record=False)[0] for p in parts]
    elif args.pred:
        pred, _ = tools.read_flow(args.pred)
        preds = [pred] * len(parts)
    else:
        raise CliError("eval needs --checkpoint or --pred")
    reports = []
    for i, (part, pred) in enumerate(zip(parts, preds)):
        gt = _gt_for(part, gt_flow, gt_meta, args.gt_from_rate) if gt_flow is not None else None
        reports.append(metrics.evaluate_partition(i, part, pred, gt, dt_gt=args.dt_gt, dt_input=args.dt_input))
    metrics.write_reports(reports, out / "eval.csv")
    _snapshot(args, out)
    _emit(**metrics.summarize(reports))


def _read_record(path):
    with open(path) as fh:
        rows = [ln.strip().split(",") for ln in fh if ln.strip() and not ln.startswith("#")]
    header = rows[0]
    if header[0] != "step":
        raise CliError(f"{path}: activity record must start with a 'step' column")
    layers = [h for h in header[1:] if h != "flow_magnitude"]
    data = [[float(v) for v in r[1:1 + len(layers)]] for r in rows[1:] if r[0] != "mean"]
    return layers, data


def cmd_activity(args):
    out = _out_dir(args)
    ops = None
    if args.record:
        layers, records = _read_record(args.record)
        report = tools.activity_report(records, layers)
    else:
        if not (args.checkpoint and args.events):
            raise CliError("activity needs --record or both --checkpoint and --events")
        net = Network.load(args.checkpoint)
        stream = _load_events(args.events)
        ctx = net.new_context()
        records, flows, masks = [], [], []
        for part in partition_fixed_count(stream, args.n):
            counts = rasterize_counts(part)
            flow, act = net.forward(counts, ctx, record=False)
            records.append(act)
            flows.append(flow)
            masks.append(counts.sum(axis=0) > 0)
        layers = net.hidden_layer_names
        report = tools.activity_report(records, layers, flows, masks)
        all_ops = tools.synaptic_ops(net)
        ops = [all_ops[name] for name in layers]
    report.write_csv(out / "activity.csv")
    energy = tools.energy_estimate(report.layer_means, ops, args.mac_factor, layers=layers)
    energy.write_csv(out / "energy.csv")
    if args.plot and len(report.per_step):
        from .plotting import plot_activity

        plot_activity(report, out / "activity.png")
    _snapshot(args, out)
    _emit(mean_activity=report.mean_activity, efficiency_ratio=energy.efficiency_ratio)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evflow", description="Self-supervised event-based optical flow toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, plot=True):
        sp.add_argument("--out-dir", required=True, help="existing directory for outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
        if plot:
            sp.add_argument("--plot", action="store_true", help="also render PNG figures")

    def selector(sp):
        sp.add_argument("--n", type=int, default=None, help="fixed-count partition size")
        sp.add_argument("--index", type=int, default=0, help="partition index when --n is given")
        sp.add_argument("--window", type=_pair, default=None, help="time window t0,t1 (inclusive)")
        sp.add_argument("--weighting", choices=WEIGHTINGS, default="proximity")

    g = sub.add_parser("gen", help="synthesise a translating-pattern event stream")
    g.add_argument("--flow", type=_pair, required=True, help="u,v in px/s")
    g.add_argument("--duration", type=float, default=1.0)
    g.add_argument("--size", type=_int_pair, default=(32, 32), help="H,W")
    g.add_argument("--n-dots", type=int, default=10)
    g.add_argument("--events-per-edge", type=int, default=1)
    g.add_argument("--n", type=int, default=1000, help="partition size used for the GT flow file")
    common(g, plot=False)
    g.set_defaults(func=cmd_gen)

    pt = sub.add_parser("partition", help="split an event file into fixed-count partitions")
    pt.add_argument("--events", required=True)
    pt.add_argument("--n", type=int, required=True)
    common(pt, seed=False, plot=False)
    pt.set_defaults(func=cmd_partition)

    ls = sub.add_parser("landscape", help="contrast-loss grid over constant flows")
    ls.add_argument("--events", required=True)
    ls.add_argument("--d", type=float, default=128.0)
    ls.add_argument("--samples", type=int, default=tools.DEFAULT_SAMPLES)
    ls.add_argument("--unscaled", action="store_true")
    ls.add_argument("--compare", action="store_true", help="write both scaled and unscaled grids")
    selector(ls)
    common(ls, seed=False)
    ls.set_defaults(func=cmd_landscape)

    es = sub.add_parser("estimate", help="constant flow by coarse-to-fine contrast maximisation")
    es.add_argument("--events", required=True)
    es.add_argument("--d", type=float, default=16.0)
    es.add_argument("--samples", type=int, default=33)
    es.add_argument("--levels", type=int, default=6)
    selector(es)
    common(es, seed=False)
    es.set_defaults(func=cmd_estimate)

    tr = sub.add_parser("train", help="train a toy FireNet variant")
    tr.add_argument("--events", nargs="+", required=True, help="one event file per sequence")
    tr.add_argument("--config", help="JSON training config (flags override it)")
    tr.add_argument("--checkpoint", help="resume from a checkpoint")
    tr.add_argument("--variant", choices=VARIANTS, default="lif")
    tr.add_argument("--channels", type=int, default=8)
    tr.add_argument("--encoders", type=int, default=3)
    tr.add_argument("--recurrent", type=int, default=1)
    tr.add_argument("--surrogate", choices=("atan", "superspike"), default="atan")
    tr.add_argument("--gamma", type=float, default=10.0)
    tr.add_argument("--N", type=int)
    tr.add_argument("--K", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--clip", type=float)
    tr.add_argument("--lam", type=float)
    tr.add_argument("--f-desired", type=float)
    tr.add_argument("--weighting", choices=WEIGHTINGS)
    tr.add_argument("--no-augment", action="store_true")
    common(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="AEE / outliers / FWL / RSAT per partition")
    ev.add_argument("--events", required=True)
    ev.add_argument("--n", type=int, default=1000)
    ev.add_argument("--checkpoint")
    ev.add_argument("--pred", help="flow CSV applied to every partition")
    ev.add_argument("--gt", help="ground-truth flow CSV")
    ev.add_argument("--gt-from-rate", action="store_true",
                    help="rebuild per-partition GT from the file's px/s rate and each partition's duration")
    ev.add_argument("--dt-gt", type=float)
    ev.add_argument("--dt-input", type=float)
    common(ev, seed=False, plot=False)
    ev.set_defaults(func=cmd_eval)

    ac = sub.add_parser("activity", help="activity record and energy estimate")
    ac.add_argument("--record", help="activity CSV (step, one column per layer)")
    ac.add_argument("--checkpoint")
    ac.add_argument("--events")
    ac.add_argument("--n", type=int, default=1000)
    ac.add_argument("--mac-factor", type=float, default=tools.DEFAULT_MAC_FACTOR)
    common(ac, seed=False)
    ac.set_defaults(func=cmd_activity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"evflow: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

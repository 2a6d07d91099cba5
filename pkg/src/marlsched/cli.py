"""Command-line entry point: ``marlsched <command> [options]``."""
import argparse
import csv
import json
import logging
import os
import sys

from . import interference, runner
from .config import POLICIES, desk_config, load_config
from .topology import build as build_topology

log = logging.getLogger("marlsched")

# strictly positive slowdowns keep relative errors meaningful
SYNTHETIC_TRUTH = [0.05, 0.12, 0.05, 0.02, 0.004, 0.002, 0.01]


def _config(args, **extra):
    over = {"seed": args.seed, "out": getattr(args, "out", None), **extra}
    if args.config:
        return load_config(args.config, **over)
    return desk_config(**over)


def _out_dir(args, cfg):
    return args.out or cfg.out or "runs"


def _checkpoint_path(out, mode):
    return os.path.join(out, f"checkpoint-{mode}.npz")


def _progress(row):
    log.info("%s epoch %d: train JCT %.3f, eval JCT %.3f", row["mode"], row["epoch"],
             row["train_jct"], row["eval_jct"])


def cmd_train(args):
    cfg = _config(args)
    world = runner.build_world(cfg)
    out = _out_dir(args, cfg)
    res = runner.run_training(world, args.mode, args.epochs, progress=_progress)
    policy = "marl" if args.mode == "multi" else "single"
    runner.write_outputs(out, cfg, policy, res.final_eval, res.convergence)
    runner.write_gnuplot(out)
    res.system.save(_checkpoint_path(out, args.mode))
    print(json.dumps({"mode": args.mode, "final_eval_jct": res.final_eval.avg_jct,
                      "best_epoch": res.best_epoch, "seconds": round(res.wall_seconds, 1)}))
    return 0


def _load_system(world, mode, path):
    if not os.path.exists(path):
        raise SystemExit(f"missing checkpoint {path}; run `marlsched train` first")
    system = runner.make_system(world, mode)
    system.load(path)
    return system


def cmd_eval(args):
    cfg = _config(args)
    world = runner.build_world(cfg)
    out = _out_dir(args, cfg)
    policy = args.policy or cfg.policy
    system = None
    if policy in ("marl", "single"):
        mode = "multi" if policy == "marl" else "single"
        system = _load_system(world, mode, args.checkpoint or _checkpoint_path(out, mode))
    res = runner.run_eval(world, policy, system, args.split)
    runner.write_outputs(out, cfg, policy, res)
    print(json.dumps({"policy": policy, "avg_jct": res.avg_jct, "censored": res.censored}))
    return 0


def cmd_compare(args):
    cfg = _config(args)
    world = runner.build_world(cfg)
    out = _out_dir(args, cfg)
    policies = args.policies
    system = None
    learned = [p for p in policies if p in ("marl", "single")]
    if len(learned) > 1:
        raise SystemExit("compare takes one learned policy at a time")
    if learned:
        mode = "multi" if learned[0] == "marl" else "single"
        system = _load_system(world, mode, args.checkpoint or _checkpoint_path(out, mode))
    results = runner.run_compare(world, policies, system)
    for p, res in results.items():
        runner.write_outputs(out, cfg, p, res)
        print(f"{p:>8}  avg JCT {res.avg_jct:.3f}  jobs {len(res.jobs)}  censored {res.censored}")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    world = runner.build_world(cfg)
    out = _out_dir(args, cfg)
    res = runner.run_ablation(world, args.epochs, progress=_progress)
    os.makedirs(out, exist_ok=True)
    h = cfg.config_hash()
    for mode, r in res.items():
        runner._write_csv(os.path.join(out, f"convergence-{mode}.csv"), r.convergence,
                          runner.CONV_HEADER, h)
        print(json.dumps({"mode": mode, "best_epoch": r.best_epoch,
                          "final_eval_jct": r.final_eval.avg_jct}))
    return 0


def cmd_interf_fit(args):
    if args.samples:
        samples = interference.read_samples(args.samples)
    else:
        truth = interference.InterferenceCoefficients.from_array(args.truth)
        samples = interference.synthesize_samples(truth, args.synthetic, args.seed or 0)
    coeffs, report = interference.fit(samples, seed=args.seed or 0)
    variants = interference.ablated_models(samples, seed=args.seed or 0)
    print(json.dumps({"coefficients": coeffs.as_dict(), "errors": dict(report),
                      "variants": variants}, indent=2))
    return 0


def cmd_topo_dump(args):
    cfg = _config(args)
    topo = build_topology(cfg.topology.as_build_spec())
    info = topo.summary()
    if args.links:
        info["link_list"] = [[l.u, l.v, l.capacity] for l in topo.links]
    print(json.dumps(info, indent=2))
    return 0


def cmd_trace_dump(args):
    cfg = _config(args)
    world = runner.build_world(cfg)
    if args.out:
        world.trace.to_csv(args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["job_id", "scheduler", "interval", "type", "workers", "ps", "epochs"])
        for j in world.trace.jobs:
            w.writerow([j.job_id, j.home_scheduler, j.arrival_interval, j.model_type_id,
                        j.num_workers, j.num_ps, j.max_epochs])
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: bundled desk scenario)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="marlsched", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train agents on the training split")
    t.add_argument("--mode", choices=("multi", "single"), default="multi")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate one policy greedily")
    e.add_argument("--policy", choices=POLICIES)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", parents=[common], help="evaluate several policies")
    c.add_argument("--policies", nargs="+", choices=POLICIES, default=["tetris", "lb", "lif"])
    c.add_argument("--checkpoint")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("ablate", parents=[common], help="multi-agent vs single-agent training")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    i = sub.add_parser("interf", help="interference model tools")
    isub = i.add_subparsers(dest="action", required=True)
    f = isub.add_parser("fit", parents=[common], help="fit coefficients to slowdown samples")
    f.add_argument("--samples", help="sample CSV (default: synthetic samples)")
    f.add_argument("--synthetic", type=int, default=480, help="number of synthetic samples")
    f.add_argument("--truth", type=float, nargs=7, default=SYNTHETIC_TRUTH,
                   help="coefficients that label the synthetic samples")
    f.set_defaults(fn=cmd_interf_fit)

    tp = sub.add_parser("topo", help="topology tools")
    tsub = tp.add_subparsers(dest="action", required=True)
    d = tsub.add_parser("dump", parents=[common], help="print topology counts as JSON")
    d.add_argument("--links", action="store_true", help="include the link list")
    d.set_defaults(fn=cmd_topo_dump)

    tr = sub.add_parser("trace", help="workload tools")
    trsub = tr.add_subparsers(dest="action", required=True)
    dd = trsub.add_parser("dump", parents=[common], help="write the generated trace as CSV")
    dd.add_argument("--out")
    dd.set_defaults(fn=cmd_trace_dump)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

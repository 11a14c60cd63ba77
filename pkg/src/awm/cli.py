"""Command-line entry point: ``awm {gen,train,eval,mpc,gradcheck,render}``.

Options resolve as defaults <- TOML config file (``--config``) <- flags; the
resolved values are echoed into ``<out>/config.toml``. Exit codes: 0 success,
1 internal failure, 2 usage error (bad flags or paths).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import checks, evaluate, mpc, nn, render, scenario, train
from .dynamics import SimConfig

log = logging.getLogger("awm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution


def default_seed() -> int:
    raw = os.environ.get("AWM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"AWM_SEED must be an integer, got {raw!r}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return tomli.loads(p.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from None


def _dataclass_from(cls, base: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(base) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _clean(d):
    """Drop None values (TOML has no null) recursively."""
    if isinstance(d, dict):
        return {k: _clean(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def echo_config(out: Path, section: str, values: dict):
    """Merge this command's resolved options into ``out/config.toml``."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.toml"
    doc = tomli.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    doc[section] = _clean(values)
    path.write_text(tomli_w.dumps(doc), encoding="utf-8")


def run_dirs(out) -> dict:
    root = Path(out)
    dirs = {k: root / k for k in ("checkpoints", "logs", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _existing(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _sim_cfg(conf) -> SimConfig:
    return _dataclass_from(SimConfig, conf.get("sim", {}), {})


def _route(value):
    if value not in nn.ROUTE_MODES:
        raise UsageError(f"unknown route conditioning {value!r}")
    return value


def _chunks(n, size):
    return [list(range(i, min(n, i + size))) for i in range(0, n, size)]


def _parallel(fn, jobs, workers):
    """Run ``fn`` over ``jobs`` in order; the chunking is fixed, so results do not depend on ``workers``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, conf):
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in scenario.KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown scenario kinds {bad}; choose from {list(scenario.KINDS)}")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = scenario.generate_dataset(kinds, args.count, seed)
    scenario.save_dataset(data, out, {"kinds": kinds, "count": args.count, "seed": seed})
    print(f"wrote {len(data)} scenarios to {out}")
    return 0


def cmd_train(args, conf):
    data = scenario.load_dataset(_existing(args.data, "data"))
    heldout = scenario.load_dataset(_existing(args.heldout, "heldout")) if args.heldout else None
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    flags = {
        "lr": args.lr, "awm_lr": args.awm_lr, "apg_epochs": args.apg_epochs, "awm_epochs": args.awm_epochs,
        "batch_size": args.batch_size, "odometry_mode": args.odometry_mode, "seed": seed,
        "route": _route(args.route_conditioning) if args.route_conditioning else None, "wta": args.wta,
    }
    tcfg = _dataclass_from(train.TrainConfig, conf.get("train", {}), flags)
    if tcfg.odometry_mode not in ("diffsim", "inverse", "regression"):
        raise UsageError(f"unknown odometry mode {tcfg.odometry_mode!r}")
    ncfg = _dataclass_from(nn.NetConfig, conf.get("net", {}), {})
    sim = _sim_cfg(conf)
    out = Path(args.out)
    dirs = run_dirs(out)
    echo_config(out, "train", {"data": str(args.data), "heldout": args.heldout, **asdict(tcfg)})
    echo_config(out, "net", asdict(ncfg))
    echo_config(out, "sim", asdict(sim))
    res = train.train(data, tcfg, sim, net_cfg=ncfg, heldout=heldout, log_path=dirs["logs"] / "train.csv",
                      checkpoint_dir=dirs["checkpoints"])
    last = res.log[-1] if res.log else {}
    print(f"trained {len(res.log)} epochs; final {last}")
    if res.diverged:
        print(f"error: training diverged ({res.diverged}); kept last good parameters", file=sys.stderr)
        return 1
    return 0


def _load_ckpt(path):
    return nn.load_checkpoint(_existing(path, "ckpt"))


def _eval_chunk(ckpt, data_path, idx, rollouts, route, seed, replay):
    params = nn.load_checkpoint(ckpt)
    data = scenario.load_dataset(data_path)
    chunk = [data[i] for i in idx]
    actions = np.stack([sc.expert.actions for sc in chunk]) if replay else None
    return evaluate.reactive_eval(params, chunk, rollouts, route, seed, scenario_ids=idx, actions=actions)


def cmd_eval(args, conf):
    data_path = _existing(args.data, "data")
    ckpt = _existing(args.ckpt, "ckpt")
    ev = conf.get("eval", {})
    rollouts = args.rollouts if args.rollouts is not None else ev.get("rollouts", 1)
    route = _route(args.route_conditioning or ev.get("route", "heading"))
    if rollouts < 1:
        raise UsageError("--rollouts must be >= 1")
    if rollouts > 1 and route != "none":
        raise UsageError("route conditioning realizes a single trajectory; use --rollouts 1 or --route-conditioning none")
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    n = len(scenario.load_dataset(data_path))
    nn.load_checkpoint(ckpt)  # validate before forking workers
    jobs = [(str(ckpt), str(data_path), idx, rollouts, route, seed, args.replay_expert) for idx in _chunks(n, 16)]
    rows = [r for part in _parallel(_eval_chunk, jobs, args.workers) for r in part]
    out = Path(args.out)
    dirs = run_dirs(out)
    echo_config(out, "eval", {"data": str(data_path), "ckpt": str(ckpt), "rollouts": rollouts, "route": route,
                              "seed": seed, "replay_expert": args.replay_expert})
    evaluate.write_rows(rows, dirs["reports"] / "eval.csv")
    metric = "ade" if rollouts == 1 else "min_ade"
    if rows:
        agg = {k: float(np.mean([r[k] for r in rows])) for k in ("ade", "overlap", "offroad")}
        print(f"{metric}={agg['ade']:.4f} overlap_rate={agg['overlap']:.3f} offroad_rate={agg['offroad']:.3f} "
              f"scenarios={len(rows)} rollouts={rollouts}")
    return 0


def _mpc_chunk(ckpt, data_path, idx, cell, reward, seed, route):
    params = nn.load_checkpoint(ckpt)
    data = scenario.load_dataset(data_path)
    return mpc.mpc_eval(params, [data[i] for i in idx], mpc.MpcConfig(*cell, reward=reward, seed=seed), route=route,
                        scenario_ids=idx)


def cmd_mpc(args, conf):
    data_path = _existing(args.data, "data")
    ckpt = _existing(args.ckpt, "ckpt")
    mc = conf.get("mpc", {})
    try:
        grid = mpc.parse_grid(args.grid or mc.get("grid", "1,1,1;8,3,10"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reward = args.reward or mc.get("reward", "neg-dist-to-log")
    if reward not in mpc.REWARDS:
        raise UsageError(f"unknown reward {reward!r}; choose from {list(mpc.REWARDS)}")
    for cell in grid:
        try:
            mpc.MpcConfig(*cell, reward=reward)
        except ValueError as exc:
            raise UsageError(f"grid cell {cell}: {exc}") from None
    route = _route(args.route_conditioning or mc.get("route", "heading"))
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    n = len(scenario.load_dataset(data_path))
    nn.load_checkpoint(ckpt)
    rows = []
    for cell in grid:
        jobs = [(str(ckpt), str(data_path), idx, cell, reward, seed, route) for idx in _chunks(n, 16)]
        cell_rows = [r for part in _parallel(_mpc_chunk, jobs, args.workers) for r in part]
        rows += cell_rows
        if cell_rows:
            print(f"N={cell[0]} k={cell[1]} H={cell[2]} reward={reward} "
                  f"ade={np.mean([r['ade'] for r in cell_rows]):.4f}")
    out = Path(args.out)
    dirs = run_dirs(out)
    echo_config(out, "mpc", {"data": str(data_path), "ckpt": str(ckpt), "grid": ";".join(",".join(map(str, c)) for c in grid),
                             "reward": reward, "route": route, "seed": seed})
    mpc.write_report(rows, dirs["reports"] / "mpc.csv")
    return 0


def cmd_gradcheck(args, conf):
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    tol = args.tol if args.tol is not None else checks.PRIMITIVE_TOL
    results = checks.run_suite(seed, points=args.points, tol=tol, episode_tol=max(tol, checks.EPISODE_TOL))
    failed = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(r.line())
    names = sorted({r.name for r in results})
    for name in names:
        mine = [r for r in results if r.name == name]
        worst = max(r.report.max_error for r in mine)
        ok = all(r.passed for r in mine)
        print(f"{'PASS' if ok else 'FAIL'} {name} points={len(mine)} max_rel_err={worst:.3e}")
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_render(args, conf):
    data = scenario.load_dataset(_existing(args.data, "data"))
    params = _load_ckpt(args.ckpt)
    if not 0 <= args.scenario_id < len(data):
        raise UsageError(f"--scenario-id must be in [0, {len(data)})")
    route = _route(args.route_conditioning or "heading")
    seed = args.seed if args.seed is not None else conf.get("seed", default_seed())
    sc = data[args.scenario_id]
    rows = render.trajectory_rows(params, sc, seed, route, scenario_id=args.scenario_id)
    out = Path(args.out)
    dirs = run_dirs(out)
    echo_config(out, "render", {"data": str(args.data), "ckpt": str(args.ckpt), "scenario_id": args.scenario_id,
                                "route": route, "seed": seed})
    stem = dirs["reports"] / f"render_{args.scenario_id}"
    render.write_csv(rows, stem.with_suffix(".csv"))
    render.write_svg(rows, sc, stem.with_suffix(".svg"), title=f"scenario {args.scenario_id} ({sc.kind})")
    print(f"wrote {stem.with_suffix('.csv')} and {stem.with_suffix('.svg')}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="awm", description="Differentiable driving simulator and world-model tools.")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="TOML file with option defaults")
    shared.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True, ckpt=False, out=True):
        p.add_argument("--seed", type=int, default=None, help="run seed (default: config, then $AWM_SEED, then 0)")
        p.add_argument("--workers", type=int, default=1, help="parallel scenario workers (1 = bit-reproducible)")
        if data:
            p.add_argument("--data", required=True, help="dataset file (JSON lines)")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("gen", parents=[shared], help="generate a scenario dataset")
    p.add_argument("--kinds", default=",".join(scenario.KINDS))
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[shared], help="train policy and world-model heads")
    common(p)
    p.add_argument("--heldout", help="dataset for the per-epoch eval_ade column")
    p.add_argument("--lr", type=float)
    p.add_argument("--awm-lr", type=float)
    p.add_argument("--apg-epochs", type=int)
    p.add_argument("--awm-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--odometry-mode", choices=("diffsim", "inverse", "regression"))
    p.add_argument("--route-conditioning", choices=nn.ROUTE_MODES)
    p.add_argument("--wta", choices=("xy", "state"), help="state channels that pick the winning mixture component")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="reactive closed-loop evaluation (ADE / minADE)")
    common(p, ckpt=True)
    p.add_argument("--rollouts", type=int, default=None, help="K sampled rollouts (minADE when K > 1)")
    p.add_argument("--route-conditioning", choices=nn.ROUTE_MODES)
    p.add_argument("--replay-expert", action="store_true", help="execute the logged actions instead of the policy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mpc", parents=[shared], help="model-predictive control grid")
    common(p, ckpt=True)
    p.add_argument("--grid", help='cells "N,k,H;N,k,H"')
    p.add_argument("--reward", choices=mpc.REWARDS)
    p.add_argument("--route-conditioning", choices=nn.ROUTE_MODES)
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", parents=[shared], help="export realized/expert/imagined trajectories as CSV + SVG")
    common(p, ckpt=True)
    p.add_argument("--scenario-id", type=int, default=0)
    p.add_argument("--route-conditioning", choices=nn.ROUTE_MODES)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        conf = load_config(args.config)
        return args.func(args, conf)
    except UsageError as exc:
        print(f"awm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"awm {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

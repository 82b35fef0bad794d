"""Command-line entry points: ``geoflow {gen,train,rollout,eval,snr,gradcheck,forcing}``.

Exit codes: 0 success, 2 validation error, 3 numeric abort, 4 I/O failure.
"""

from __future__ import annotations

import os

# BLAS pools must be sized before numpy is imported anywhere.
_THREADS = os.environ.get("VGW_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod, exports
from . import numerics as nx
from .curriculum import LOG_COLUMNS, Dataset, sample_stage1_batch, stage1_loss, train_stage1, train_stage2
from .errors import CheckpointError, NonFiniteError, TrainingAborted, ValidationError
from .evalmetrics import absrel_delta1, ate_rte_rre, point_metrics
from .experiments import run_forcing_ablation, run_snr_study
from .flowformer import init_params
from .rollout import RolloutPlan, assemble_full, flow_chunk_fn, joint_decode, rollout
from .toyworld import WorldConfig, generate_trajectory

log = logging.getLogger("geoflow")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4
GRADCHECK_WORLD = {"d": 64, "n_patch": 4}


def _seeded(cfg: cfgmod.RunConfig, seed: int | None) -> cfgmod.RunConfig:
    if seed is None:
        return cfg
    return cfg.replace(train=dataclasses.replace(cfg.train, seed=seed),
                       rollout=dataclasses.replace(cfg.rollout, seed=seed))


def _load_cfg(args) -> cfgmod.RunConfig:
    return _seeded(cfgmod.load(args.config), args.seed)


def _header(cfg, **extra) -> dict:
    return cfgmod.header(cfg, threads=int(_THREADS), **extra)


def _episode_dir(root: Path, i: int) -> Path:
    return root / f"episode_{i:04d}"


# ----------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    if args.frames < 2:
        raise ValidationError(f"--frames {args.frames}: trajectories need at least 2 frames")
    if args.episodes < 1:
        raise ValidationError("--episodes must be >= 1")
    out = Path(args.out)
    base = args.seed or 0
    seeds = [base + i for i in range(args.episodes)]
    hdr = _header(cfg)
    for i, s in enumerate(seeds):
        traj = generate_trajectory(cfg.world, s, args.frames)
        geo = exports.GeometryExport(np.arange(args.frames), traj.depths, traj.points,
                                     traj.rotations, traj.translations)
        exports.write_trajectory(_episode_dir(out, i), hdr, traj.states, geo,
                                 {"episode_seed": s, "world": cfg.world.to_dict(), "frames": args.frames})
    exports.write_json(out / "manifest.json", hdr,
                       {"seeds": seeds, "frames": args.frames, "world": cfg.world.to_dict(),
                        "episodes": [_episode_dir(Path("."), i).name for i in range(len(seeds))]})
    print(f"wrote {len(seeds)} episode(s) to {out}")
    return EXIT_OK


def load_dataset(root) -> tuple[Dataset, WorldConfig, dict]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{root}: missing manifest.json")
    man = json.loads(path.read_text(encoding="utf-8"))
    world = WorldConfig(**man["world"])
    eps = []
    for name in man["episodes"]:
        states = exports.read_states(root / name / "states.bin")
        eps.append(np.stack([s.tokens for s in states]))
    return Dataset(eps, world.grid, list(man["seeds"])), world, man


# --------------------------------------------------------------------- train

def _ckpt_config(cfg: cfgmod.RunConfig, stage: int, step: int) -> dict:
    return {"run": cfg.to_dict(), "stage": stage, "step": step}


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        key = "steps_stage1" if args.stage == 1 else "steps_stage2"
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, **{key: args.steps}))
    if args.ckpt_every is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, ckpt_every=args.ckpt_every))
    if args.stage == 2 and not args.resume:
        raise ValidationError("stage 2 needs a stage-1 checkpoint via --resume")
    if args.dataset:
        data, world, _ = load_dataset(args.dataset)
        if world != cfg.world:
            raise ValidationError(f"dataset world config {world} differs from config world {cfg.world}")
    else:
        data = Dataset.generate(cfg.world, range(cfg.train.n_episodes), cfg.train.episode_frames)
    world = cfg.world
    params = init_params(cfg.model, world.d, world.n_tokens, cfg.train.seed)
    if args.resume:
        ck = checkpoint.load(args.resume, expected_names=params.keys())
        _check_compatible(ck.config["run"], cfg.to_dict(), ("world", "model"))
        params = {n: np.array(a, dtype=np.float64) for n, a in ck.tensors.items()}
    out = Path(args.out)
    log_path = out.parent / "train_log.csv"
    hdr = _header(cfg, stage=args.stage)

    def ckpt_fn(step, p):
        checkpoint.save(out.with_name(f"{out.stem}.step{step:06d}{out.suffix}"),
                        _ckpt_config(cfg, args.stage, step), p)

    train = train_stage1 if args.stage == 1 else train_stage2
    t0 = time.time()
    try:
        params, rows = train(params, cfg.model, cfg.train, data, ckpt_fn=ckpt_fn,
                             log_fn=lambda r: log.debug("step %(step)d loss %(loss).5g", r))
    except TrainingAborted as exc:
        dump = out.with_name(f"{out.stem}.aborted{out.suffix}")
        checkpoint.save(dump, _ckpt_config(cfg, args.stage, exc.step), exc.params)
        print(f"{exc}; parameters from before the failing step saved to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    steps = len(rows)
    checkpoint.save(out, _ckpt_config(cfg, args.stage, steps), params)
    exports.write_csv(log_path, hdr, LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in rows))
    last = f", final loss {rows[-1]['loss']:.5g}" if rows else ""
    print(f"stage {args.stage}: {steps} steps in {time.time() - t0:.1f}s{last}; checkpoint {out}")
    return EXIT_OK


def _check_compatible(saved: dict, live: dict, sections) -> None:
    diffs = [f"{s}.{k}: checkpoint {saved[s].get(k)!r} vs config {v!r}"
             for s in sections for k, v in live[s].items() if saved.get(s, {}).get(k) != v]
    if diffs:
        raise ValidationError("checkpoint incompatible with config: " + "; ".join(diffs))


# ------------------------------------------------------------------- rollout

def cmd_rollout(args) -> int:
    ck = checkpoint.load(args.ckpt)
    run = cfgmod.from_dict(ck.config["run"])
    run = _seeded(run, args.seed)
    data, world, man = load_dataset(args.dataset)
    latent = ck.tensors["in.w"].shape[0] if "in.w" in ck.tensors else None
    if latent != world.d:
        raise ValidationError(f"model.d_model (latent width {latent}) does not match world.d ({world.d})")
    if ck.tensors["slot"].shape[0] != world.n_tokens:
        raise ValidationError(f"model token count {ck.tensors['slot'].shape[0]} does not match "
                              f"world n_tokens ({world.n_tokens})")
    diffs = [k for k, v in world.to_dict().items() if run.world.to_dict()[k] != v]
    if diffs:
        raise ValidationError("checkpoint world differs from dataset world in: " +
                              ", ".join(f"world.{k}" for k in diffs))
    expected = init_params(run.model, world.d, world.n_tokens, 0).keys()
    if set(expected) != set(ck.tensors):
        raise CheckpointError(f"{args.ckpt}: tensor names do not match the configured model")
    k = run.model.k
    context = args.context if args.context is not None else k
    if context != k:
        raise ValidationError(f"--context {context} must equal model.k={k}")
    if not 0 <= args.episode < len(data.episodes):
        raise ValidationError(f"--episode {args.episode} outside [0, {len(data.episodes)})")
    horizon = run.rollout.horizon if args.horizon is None else args.horizon
    plan = dataclasses.replace(run.rollout, horizon=horizon)
    states = exports.read_states(Path(args.dataset) / man["episodes"][args.episode] / "states.bin")
    start = args.start
    if start < 0 or start + k > len(states):
        raise ValidationError(f"--start {start}: episode has {len(states)} frames")
    ctx = states[start:start + k]
    params = {n: np.array(a, dtype=np.float64) for n, a in ck.tensors.items()}
    trace: list = []
    pred = rollout(flow_chunk_fn(params, run.model, world.grid, plan.steps), ctx, plan, trace)
    full = assemble_full(ctx, pred)
    depths, points, rots, trans = joint_decode(world, full)
    frames = np.array([s.frame_index for s in full])
    out = Path(args.out)
    hdr = _header(run, checkpoint=Path(args.ckpt).name)
    geo = exports.GeometryExport(frames, depths, points, rots, trans)
    exports.write_trajectory(out, hdr, full, geo,
                             {"context_frames": [s.frame_index for s in ctx], "horizon": horizon,
                              "world": world.to_dict(), "episode": args.episode})
    exports.write_states(out / "predicted_latents.bin", hdr, pred)
    exports.write_json(out / "rollout.json", hdr,
                       {"plan": plan.to_dict(), "windows": trace,
                        "predicted_frames": [s.frame_index for s in pred]})
    print(f"rolled out {horizon} frame(s) after frames {[s.frame_index for s in ctx]} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval

def _horizons(pred_dir: Path, frames: np.ndarray) -> np.ndarray:
    man = pred_dir / "manifest.json"
    last_ctx = None
    if man.is_file():
        ctx = json.loads(man.read_text(encoding="utf-8")).get("context_frames")
        if ctx:
            last_ctx = max(ctx)
    if last_ctx is None:
        last_ctx = int(frames.min()) - 1
    return frames - last_ctx


def evaluate_dirs(pred_dir, gt_dir, suite: str = "all", ecfg: cfgmod.EvalConfig | None = None) -> dict:
    ecfg = ecfg or cfgmod.EvalConfig()
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    missing = [str(d / f) for d in (pred_dir, gt_dir) for f in exports.missing_files(d)]
    if missing:
        raise FileNotFoundError("missing input files: " + ", ".join(missing))
    pred = exports.read_geometry(pred_dir)
    gt = exports.read_geometry(gt_dir)
    gt_index = {int(f): i for i, f in enumerate(gt.frames)}
    common = [i for i, f in enumerate(pred.frames) if int(f) in gt_index]
    if not common:
        raise ValidationError("pred and gt share no frame indices")
    pi = np.array(common)
    gi = np.array([gt_index[int(pred.frames[i])] for i in common])
    hz = _horizons(pred_dir, pred.frames[pi])
    out: dict = {}
    if suite in ("depth", "all"):
        res = {}
        for h, a, b in zip(hz, pi, gi):
            ar, d1 = absrel_delta1(pred.depths[a], gt.depths[b], ecfg.delta_threshold)
            res[str(int(h))] = {"absrel": ar, "delta1": d1}
        ar, d1 = absrel_delta1(pred.depths[pi], gt.depths[gi], ecfg.delta_threshold)
        res["all"] = {"absrel": ar, "delta1": d1}
        out["depth"] = res
    if suite in ("points", "all"):
        res = {}
        for h, a, b in zip(hz, pi, gi):
            acc, comp, cd = point_metrics(pred.points[a], gt.points[b], ecfg.fps_samples, ecfg.align)
            res[str(int(h))] = {"accuracy": acc, "completeness": comp, "chamfer": cd}
        acc, comp, cd = point_metrics(pred.points[pi].reshape(-1, 3), gt.points[gi].reshape(-1, 3),
                                      ecfg.fps_samples, ecfg.align)
        res["all"] = {"accuracy": acc, "completeness": comp, "chamfer": cd}
        out["points"] = res
    if suite in ("traj", "all"):
        if len(pi) < 2:
            raise ValidationError("trajectory metrics need at least 2 poses")
        res = {}
        # metrics at horizon h use every common frame up to and including h
        for j in range(1, len(pi)):
            sel = slice(0, j + 1)
            ate, rte, rre = ate_rte_rre(pred.rotations[pi][sel], pred.translations[pi][sel],
                                        gt.rotations[gi][sel], gt.translations[gi][sel], ecfg.align)
            res[str(int(hz[j]))] = {"ate": ate, "rte": rte, "rre_deg": rre}
        res["all"] = res[str(int(hz[-1]))]
        out["traj"] = res
    return out


def cmd_eval(args) -> int:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    metrics = evaluate_dirs(args.pred, args.gt, args.suite, cfg.eval)
    out = Path(args.out) if args.out else Path(args.pred) / "metrics.json"
    exports.write_json(out, _header(cfg, suite=args.suite), {"metrics": metrics})
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------- snr

def cmd_snr(args) -> int:
    cfg = _load_cfg(args)
    dims = [int(x) for x in args.dims.split(",") if x.strip()]
    if not dims or any(d < cfg.world.manifold_dim for d in dims):
        raise ValidationError(f"--dims {args.dims}: every dim must be >= {cfg.world.manifold_dim}")
    params = ("z", "v") if args.param == "both" else (args.param,)
    res = run_snr_study(cfg.world, cfg.model, cfg.train, dims, args.iters, args.log_every, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hdr = _header(cfg, snr="10*log10(sum Z^2 / sum (Zhat - Z)^2) after full 20-step denoising",
                  iters=args.iters, dims=dims)
    exports.write_csv(out / "snr_curve.csv", hdr, ["iteration", "parameterization", "dim", "snr_db"],
                      ([r["iteration"], r["parameterization"], r["dim"], float(r["snr_db"])]
                       for r in res.rows))
    exports.write_json(out / "batch_hashes.json", hdr,
                       {"hashes": {f"{p}/{d}": h for (p, d), h in sorted(res.batch_hashes.items())}})
    for r in res.rows:
        if r["iteration"] == args.iters:
            print(f"d={r['dim']} {r['parameterization']}-pred final SNR {float(r['snr_db']):.2f} dB")
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck

def gradcheck_report(cfg: cfgmod.RunConfig, probes: int, params=None, batch: int = 2) -> dict:
    world, mcfg = cfg.world, cfg.model
    seed = cfg.train.seed
    data = Dataset.generate(world, [seed, seed + 1], mcfg.k + mcfg.m + 2)
    b = sample_stage1_batch(data, np.random.default_rng(seed), batch, mcfg.k, mcfg.m)
    if params is None:
        params = init_params(mcfg, world.d, world.n_tokens, seed, zero_init=False)
    t0 = time.time()
    rep = nx.finite_difference_check(lambda L: stage1_loss(L, mcfg, b, world.grid), params, probes,
                                     np.random.default_rng(seed + 1))
    rep = {n: float(v) for n, v in rep.items()}
    worst = max(rep.values()) if rep else 0.0
    return {"probes": probes, "max_rel_error": worst, "per_tensor": rep,
            "tolerance": GRADCHECK_TOL, "passed": bool(worst <= GRADCHECK_TOL),
            "seconds": time.time() - t0}


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = _load_cfg(args)
    else:
        cfg = _seeded(cfgmod.RunConfig(world=WorldConfig(**GRADCHECK_WORLD)), args.seed)
    params = None
    if args.ckpt:
        ck = checkpoint.load(args.ckpt, expected_names=init_params(
            cfg.model, cfg.world.d, cfg.world.n_tokens, 0).keys())
        params = {n: np.array(a, dtype=np.float64) for n, a in ck.tensors.items()}
    if args.probes < 0:
        raise ValidationError("--probes must be >= 0")
    rep = gradcheck_report(cfg, args.probes, params)
    if args.out:
        exports.write_json(Path(args.out), _header(cfg), {"report": rep})
    if not rep["per_tensor"]:
        print("gradcheck: empty report (no probes)")
        return EXIT_OK
    print(f"gradcheck: {rep['probes']} probes, max rel error {rep['max_rel_error']:.3e} "
          f"(tolerance {GRADCHECK_TOL:g}) in {rep['seconds']:.1f}s")
    return EXIT_OK if rep["passed"] else EXIT_NUMERIC


# ------------------------------------------------------------------- forcing

def cmd_forcing(args) -> int:
    cfg = _load_cfg(args)
    res = run_forcing_ablation(cfg.world, cfg.model, cfg.train, args.horizon, args.heldout,
                               rollout_steps=cfg.rollout.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hdr = _header(cfg, horizon=args.horizon, heldout=args.heldout)
    base = res.mse["stage1_only"]
    exports.write_json(out / "ablation.json", hdr,
                       {"horizon_mse": res.mse,
                        "relative_to_stage1_only": {k: v / base for k, v in res.mse.items()}})
    for name, rows in res.logs.items():
        exports.write_csv(out / f"train_log_{name}.csv", hdr, LOG_COLUMNS,
                          ([r[c] for c in LOG_COLUMNS] for r in rows))
    for name, v in res.mse.items():
        print(f"{name:>12}: horizon-{args.horizon} latent MSE {v:.5f} ({v / base:.3f}x stage-1 only)")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoflow", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed (training, rollout, episodes)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="RunConfig JSON")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        return sp

    g = common(sub.add_parser("gen", help="generate toy-world episodes"))
    g.add_argument("--episodes", type=int, default=1)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = common(sub.add_parser("train", help="train stage 1 or 2"))
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--resume", default=None, help="checkpoint to start from (required for stage 2)")
    t.add_argument("--dataset", default=None, help="dataset directory from `gen` (default: generate)")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--ckpt-every", type=int, default=None)
    t.add_argument("--out", required=True, help="final checkpoint path")
    t.set_defaults(func=cmd_train)

    r = common(sub.add_parser("rollout", help="autoregressive forecast + joint decode"), config=False)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--episode", type=int, default=0)
    r.add_argument("--context", type=int, default=None, help="context frames (must equal model.k)")
    r.add_argument("--start", type=int, default=0, help="first context frame")
    r.add_argument("--horizon", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    e = common(sub.add_parser("eval", help="depth / point / trajectory metrics"))
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--suite", choices=("depth", "points", "traj", "all"), default="all")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("snr", help="z- vs v-prediction latent SNR study"))
    s.add_argument("--param", choices=("z", "v", "both"), default="both")
    s.add_argument("--dims", default="64,256")
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--log-every", type=int, default=30)
    s.add_argument("--out", default="snr_out")
    s.set_defaults(func=cmd_snr)

    c = common(sub.add_parser("gradcheck", help="finite-difference check of the stage-1 loss"))
    c.add_argument("--probes", type=int, default=256)
    c.add_argument("--ckpt", default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_gradcheck)

    f = common(sub.add_parser("forcing", help="flow-forcing ablation"))
    f.add_argument("--horizon", type=int, default=8)
    f.add_argument("--heldout", type=int, default=20)
    f.add_argument("--out", default="forcing_out")
    f.set_defaults(func=cmd_forcing)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if "cannot" in str(exc) else EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Environment overrides: AOIFUSION_OUTPUT_DIR replaces the run config's output
directory and AOIFUSION_THREADS sets the torch thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment, bilstm, evaluation, fusionnet, neural, pipeline, scenarios, sim, trilat
from .akf import AkfConfig
from .fusionnet import Trajectory
from .grid import corrected_accel, resample
from .imuprep import integrate


def _vec3(text: str) -> np.ndarray:
    v = np.array([float(x) for x in text.split(",")])
    if v.shape != (3,):
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return v


def _run_config(path) -> pipeline.RunConfig:
    return pipeline.RunConfig.load(path) if path else pipeline.RunConfig()


def _start(args, log: sim.MeasurementLog) -> np.ndarray:
    if args.start is not None:
        return args.start
    if not log.has_truth:
        raise ValueError("log has no truth; pass --start")
    return log.truth_pos[0]


def _grid(args, log):
    return resample(log, x_ref=getattr(args, "x_ref", None))


def cmd_simulate(args):
    cfg = _run_config(args.config)
    if args.scenario:
        cfg.scenario = args.scenario
    scn = scenarios.reference_scenario(args.run, args.seed, pipeline.scenario_template(cfg))
    sim.write_log(sim.generate(scn), args.out)
    print(f"wrote {args.out}")


def cmd_trilaterate(args):
    log = sim.read_log(args.log)
    fixes = trilat.trilaterate_log(log, args.window, args.min_anchors)
    with open(args.out, "w") as fh:
        fh.write("t,x,y,z,gdop,n_anchors,residual_mse,converged\n")
        for t, f in fixes:
            x, y, z = f.position
            fh.write(f"{t!r},{x!r},{y!r},{z!r},{f.gdop!r},{f.n_anchors},{f.residual_mse!r},{int(f.converged)}\n")
    print(f"{len(fixes)} fixes written to {args.out}")


def cmd_imu_integrate(args):
    log = sim.read_log(args.log)
    acc, corr = corrected_accel(log, "auto" if not args.no_bias else None, args.x_ref)
    dt = 1.0 / log.imu_rate
    _, p = integrate(acc + sim.GRAVITY_VECTOR, None, dt)  # integrate() removes gravity again
    p = p + _start(args, log)
    t = np.r_[log.imu_t, log.imu_t[-1] + dt] if len(log.imu_t) else np.zeros(1)
    pipeline.write_trajectory(Trajectory(t=t, position=p), args.out)
    if corr is not None:
        print(f"bias a0={corr.a0.tolist()} a1={corr.a1.tolist()}")
    print(f"wrote {args.out}")


def cmd_fuse_akf(args):
    log = sim.read_log(args.log)
    seq = _grid(args, log)
    akf_cfg = AkfConfig(**json.loads(args.akf)) if args.akf else None
    traj = evaluation.akf_baseline(seq, _start(args, log), akf_cfg, args.min_anchors)
    pipeline.write_trajectory(traj, args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    cfg = _run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    data = pipeline.SeedData(cfg, seed)
    if args.model == "bilstm":
        bcfg = bilstm.BilstmConfig.from_dict(dict(cfg.bilstm, seed=seed))
        tr = [w for s in data.split("train") for w in bilstm.make_windows(s, bcfg.window, bcfg.stride)]
        va = [w for s in data.split("val") for w in bilstm.make_windows(s, bcfg.window)]
        ckpt = bilstm.train(tr, va, bcfg, log=print if args.verbose else None)
    else:
        fcfg = pipeline._fusion_cfg(cfg, seed, args.variant)
        aug = None
        if args.generator:
            aset = pipeline.AugmentSettings.from_dict(cfg.augment)
            gen = augment.DiffusionGenerator(augment.load_diffusion(args.generator))
            aug = augment.make_augmenter(gen, aset.alpha_gan, aset.subset_frac)
        tr = [w for s in data.split("train") for w in fusionnet.make_windows(s, fcfg.window, fcfg.stride)]
        va = [w for s in data.split("val") for w in fusionnet.make_windows(s, fcfg.window)]
        ckpt = fusionnet.train(tr, va, fcfg, augmenter=aug, log=print if args.verbose else None)
    neural.save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out} (config {ckpt['config_hash']}, best epoch {ckpt['best_epoch']})")


def cmd_infer(args):
    log = sim.read_log(args.log)
    ckpt = neural.load_checkpoint(args.checkpoint)
    seq = _grid(args, log)
    runner = {"fusionnet": fusionnet.infer, "bilstm": bilstm.infer}.get(ckpt.get("model"))
    if runner is None:
        raise ValueError(f"cannot run inference with a {ckpt.get('model')!r} checkpoint")
    traj = runner(seq, ckpt, start=_start(args, log), mode=args.mode)
    pipeline.write_trajectory(traj, args.out)
    print(f"wrote {args.out}")


def cmd_checkpoint_inspect(args):
    ckpt = neural.load_checkpoint(args.path)
    n_params = sum(int(np.prod(v["shape"])) for v in ckpt.get("tensors", {}).values())
    info = {k: ckpt.get(k) for k in ("model", "version", "config_hash", "best_epoch", "n_anchors")}
    info["stored_values"] = n_params
    info["config"] = ckpt.get("config")
    info["hash_ok"] = neural.config_hash(ckpt.get("config", {})) == ckpt.get("config_hash")
    print(json.dumps(info, indent=2))


def _residual_corpus(cfg, seed, split, length):
    data = pipeline.SeedData(cfg, seed)
    parts = [augment.residual_windows(s, length) for s in data.split(split)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def cmd_augment_train(args):
    cfg = _run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    aset = pipeline.AugmentSettings.from_dict(cfg.augment)
    dcfg = augment.DiffusionConfig.from_dict(dict(aset.diffusion, seed=aset.diffusion.get("seed", seed)))
    X, C = _residual_corpus(cfg, seed, "train", dcfg.length)
    model = augment.train_diffusion(X, C, dcfg, log=print if args.verbose else None)
    augment.save_diffusion(model, args.out)
    if args.residuals:
        data = pipeline.SeedData(cfg, seed)
        augment.write_residuals([r for i in data.run_ids("train") for r in augment.extract_residuals(data.log(i))],
                                args.residuals)
    print(f"wrote {args.out}")


def cmd_augment_compare(args):
    cfg = _run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    model = augment.load_diffusion(args.generator)
    X, _ = _residual_corpus(cfg, seed, "train", model.cfg.length)
    real, conds = _residual_corpus(cfg, seed, "test", model.cfg.length)
    rng = np.random.default_rng([seed, 7])
    rows = augment.compare_generators(real, {
        "diffusion": augment.DiffusionGenerator(model).sample(conds, rng),
        "gaussian": augment.GaussianGenerator(X).sample(conds, rng),
        "bootstrap": augment.BootstrapGenerator(X).sample(conds, rng),
    })
    print(evaluation.markdown_table(rows), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")


def cmd_evaluate(args):
    log = sim.read_log(args.log)
    traj = pipeline.read_trajectory(args.estimate)
    report = evaluation.error_stats(traj.t, traj.position, log.truth_t, log.truth_pos, args.method)
    print(evaluation.markdown_table([report.row()]), end="")
    if args.out:
        evaluation.write_table_csv([report], args.out)
    if args.cdf:
        evaluation.write_cdf_data(report, args.cdf)


def _pipeline_summary(res: pipeline.PipelineResult):
    print((res.output_dir / "summary.md").read_text())


def cmd_ablate(args):
    cfg = _run_config(args.config)
    cfg = pipeline.RunConfig.from_dict(cfg.to_dict() | {"methods": ["fusionnet"], "ablation": True})
    res = pipeline.run_pipeline(cfg, force=args.force)
    for s in res.seeds:
        rows = [{"seed": s.seed, "variant": a.name} | a.report.row() | {"d_rmse": a.d_rmse, "d_p95": a.d_p95}
                for a in s.ablation]
        print(evaluation.markdown_table(rows))


def cmd_report(args):
    res = pipeline.run_pipeline(_run_config(args.config), force=args.force)
    _pipeline_summary(res)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aoifusion", description="UWB/IMU fusion workbench")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def log_args(sp, start=True):
        sp.add_argument("--log", required=True, help="measurement log (JSON-Lines)")
        sp.add_argument("--out", required=True)
        if start:
            sp.add_argument("--start", type=_vec3, default=None, help="x,y,z start (default: first truth)")
            sp.add_argument("--x-ref", type=_vec3, default=None,
                            help="start-to-end displacement for bias fitting (default: truth)")

    sp = sub.add_parser("simulate", help="simulate one run of the reference scenario")
    sp.add_argument("--config", help="run config JSON (scenario and overrides)")
    sp.add_argument("--scenario", help="scenario template JSON instead of the shipped reference")
    sp.add_argument("--run", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("trilaterate", help="per-epoch multilateration fixes")
    log_args(sp, start=False)
    sp.add_argument("--window", type=float, default=0.05, help="epoch width in s (default 0.05)")
    sp.add_argument("--min-anchors", type=int, default=4)
    sp.set_defaults(func=cmd_trilaterate)

    sp = sub.add_parser("imu-integrate", help="bias-corrected inertial dead reckoning")
    log_args(sp)
    sp.add_argument("--no-bias", action="store_true", help="skip the bias fit")
    sp.set_defaults(func=cmd_imu_integrate)

    sp = sub.add_parser("fuse-akf", help="adaptive Kalman filter on the 20 Hz grid")
    log_args(sp)
    sp.add_argument("--akf", help="JSON object of AKF settings")
    sp.add_argument("--min-anchors", type=int, default=4)
    sp.set_defaults(func=cmd_fuse_akf)

    sp = sub.add_parser("train", help="train a fusion or Bi-LSTM model on the configured runs")
    sp.add_argument("--model", choices=["fusionnet", "bilstm"], default="fusionnet")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--seed", type=int, default=None, help="default: first seed of the config")
    sp.add_argument("--variant", choices=list(evaluation.ABLATIONS), default="full",
                    help="ATT/AoI knockout for the fusion model")
    sp.add_argument("--generator", help="diffusion checkpoint enabling residual augmentation")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run a trained model over a log")
    log_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=["chain", "window"], default="chain")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("checkpoint", help="checkpoint utilities")
    csub = sp.add_subparsers(dest="action", required=True)
    cp = csub.add_parser("inspect", help="print checkpoint metadata")
    cp.add_argument("path")
    cp.set_defaults(func=cmd_checkpoint_inspect)

    sp = sub.add_parser("augment", help="residual generator utilities")
    asub = sp.add_subparsers(dest="action", required=True)
    ap = asub.add_parser("train-generator", help="fit the diffusion residual sampler")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--residuals", help="also write the training residual corpus (JSON-Lines)")
    ap.add_argument("--out", required=True)
    ap.set_defaults(func=cmd_augment_train)
    ap = asub.add_parser("compare", help="KS and quantile deviations against held-out residuals")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--generator", required=True)
    ap.add_argument("--out")
    ap.set_defaults(func=cmd_augment_compare)

    sp = sub.add_parser("evaluate", help="error statistics of a trajectory against a log's truth")
    sp.add_argument("--estimate", required=True, help="trajectory CSV")
    sp.add_argument("--log", required=True)
    sp.add_argument("--method", default="estimate")
    sp.add_argument("--out", help="CSV table")
    sp.add_argument("--cdf", help="CDF plot-data file")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and score the four ATT/AoI variants")
    sp.add_argument("--config")
    sp.add_argument("--force", action="store_true", help="recompute stages with matching stamps")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="full benchmark over all configured methods and seeds")
    sp.add_argument("--config")
    sp.add_argument("--force", action="store_true", help="recompute stages with matching stamps")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    pipeline.apply_thread_override()
    try:
        args.func(args)
    except pipeline.ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except pipeline.StageError as exc:
        print(json.dumps({"error": "stage", "stage": exc.stage, "seed": exc.seed,
                          "type": type(exc.cause).__name__, "message": str(exc.cause)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

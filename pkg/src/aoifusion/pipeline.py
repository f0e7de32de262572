"""End-to-end benchmark runs: simulate, fit every selected method, score and report.

Each seed gets its own directory.  Every artifact is written next to a
``.stamp.json`` holding the stage name, seed and config hash; a stage whose
stamp matches is loaded instead of recomputed unless ``force`` is set.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment, bilstm, evaluation, fusionnet, neural, scenarios, sim
from .akf import AkfConfig
from .fusionnet import FusionConfig, Trajectory
from .grid import GridSequence, resample

log = logging.getLogger("aoifusion")

METHODS = ("uwb-only", "akf", "bilstm", "fusionnet", "fusionnet-dgan")
ENV_OUTPUT_DIR = "AOIFUSION_OUTPUT_DIR"
ENV_THREADS = "AOIFUSION_THREADS"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {type(cause).__name__}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


@dataclass
class AugmentSettings:
    alpha_gan: float = 0.5
    subset_frac: float = 0.10
    diffusion: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSettings":
        _strict(cls, d, "augment")
        out = cls(**d)
        augment.DiffusionConfig.from_dict(out.diffusion)
        return out


@dataclass
class RunConfig:
    """Everything a benchmark run depends on.  Unknown keys are rejected."""

    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    scenario: str = "reference"
    scenario_overrides: dict = field(default_factory=dict)
    train_runs: int = 8
    val_runs: int = 1
    output_dir: str = "runs"
    mode: str = "chain"
    ablation: bool = False
    fusion: dict = field(default_factory=dict)
    bilstm: dict = field(default_factory=dict)
    akf: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if self.train_runs < 1 or self.val_runs < 1:
            raise ConfigError("train_runs and val_runs must be >= 1")
        if self.mode not in ("chain", "window"):
            raise ConfigError(f"unknown inference mode {self.mode!r}")
        for key in ("seed", "use_att", "use_aoi"):
            if key in self.fusion:
                raise ConfigError(f"fusion.{key} is set by the pipeline")
        if "seed" in self.bilstm:
            raise ConfigError("bilstm.seed is set by the pipeline")
        try:
            FusionConfig.from_dict(self.fusion)
            bilstm.BilstmConfig.from_dict(self.bilstm)
            AkfConfig(**self.akf)
            AugmentSettings.from_dict(self.augment)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _strict(cls, d, "run")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_output(self) -> Path:
        return Path(os.environ.get(ENV_OUTPUT_DIR) or self.output_dir)


def _strict(cls, d: dict, what: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{what} config must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


def apply_thread_override() -> None:
    n = os.environ.get(ENV_THREADS)
    if n:
        import torch
        torch.set_num_threads(int(n))


# --- scenario data -------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def scenario_template(cfg: RunConfig) -> dict:
    tpl = scenarios.load_template() if cfg.scenario == "reference" else json.loads(Path(cfg.scenario).read_text())
    return _merge(tpl, cfg.scenario_overrides)


@dataclass
class SeedData:
    """Simulated runs for one seed: run 0 is the test run, then training, then validation."""

    cfg: RunConfig
    seed: int
    _cache: dict = field(default_factory=dict)

    def run_ids(self, split: str) -> list[int]:
        n = self.cfg.train_runs
        return {"test": [0], "train": list(range(1, n + 1)),
                "val": list(range(n + 1, n + 1 + self.cfg.val_runs))}[split]

    def log(self, run: int) -> sim.MeasurementLog:
        key = ("log", run)
        if key not in self._cache:
            scn = scenarios.reference_scenario(run, self.seed, scenario_template(self.cfg))
            self._cache[key] = sim.generate(scn)
        return self._cache[key]

    def seq(self, run: int) -> GridSequence:
        key = ("seq", run)
        if key not in self._cache:
            self._cache[key] = resample(self.log(run))
        return self._cache[key]

    def split(self, name: str) -> list[GridSequence]:
        return [self.seq(r) for r in self.run_ids(name)]


# --- artifacts -----------------------------------------------------------------------------

def write_trajectory(traj: Trajectory, path) -> None:
    cols = {"t": traj.t, "x": traj.position[:, 0], "y": traj.position[:, 1], "z": traj.position[:, 2]}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols) + (["alpha", "q_raw"] if len(traj.alpha) else []))
        for i in range(len(traj.t)):
            row = [repr(float(cols[c][i])) for c in cols]
            if len(traj.alpha):
                row += ["", ""] if i >= len(traj.alpha) else [repr(float(traj.alpha[i])), repr(float(traj.q_raw[i]))]
            w.writerow(row)


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    num = np.array([[float(v) for v in r[:4]] for r in body]).reshape(-1, 4)
    traj = Trajectory(t=num[:, 0], position=num[:, 1:4].copy())
    if "alpha" in head:
        ext = [r[4:6] for r in body if r[4] != ""]
        arr = np.array([[float(a), float(q)] for a, q in ext]).reshape(-1, 2)
        traj.alpha, traj.q_raw = arr[:, 0].copy(), arr[:, 1].copy()
    return traj


class Stages:
    """Stamp-checked artifact cache rooted at one seed directory."""

    def __init__(self, root: Path, seed: int, force: bool = False):
        self.root, self.seed, self.force = root, seed, force
        self.root.mkdir(parents=True, exist_ok=True)
        self.skipped: list[str] = []
        self.ran: list[str] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def run(self, stage: str, name: str, key: dict, build: Callable, save: Callable, load: Callable):
        path = self.path(name)
        stamp_path = path.with_name(path.name + ".stamp.json")
        stamp = {"stage": stage, "seed": self.seed, "config_hash": neural.config_hash(key)}
        if not self.force and path.exists() and stamp_path.exists():
            if json.loads(stamp_path.read_text()) == stamp:
                self.skipped.append(stage)
                return load(path)
        try:
            obj = build()
        except Exception as exc:
            raise StageError(stage, self.seed, exc) from exc
        save(obj, path)
        stamp_path.write_text(json.dumps(stamp, sort_keys=True) + "\n")
        self.ran.append(stage)
        return obj


def _json_save(obj, path):
    Path(path).write_text(json.dumps(obj))


def _json_load(path):
    return json.loads(Path(path).read_text())


# --- pipeline ------------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    reports: dict                  # method -> ErrorReport
    timings: dict                  # stage -> seconds
    checkpoints: dict              # name -> checkpoint dict
    generators: list = field(default_factory=list)
    gate: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)


@dataclass
class PipelineResult:
    config: RunConfig
    config_hash: str
    seeds: list                    # SeedResult per seed
    output_dir: Path

    def table(self) -> list[dict]:
        return [{"seed": s.seed} | r.row() for s in self.seeds for r in s.reports.values()]


def _fusion_cfg(cfg: RunConfig, seed: int, variant: str = "full") -> FusionConfig:
    base = FusionConfig.from_dict(dict(cfg.fusion, seed=seed))
    return evaluation.ablation_config(base, variant)


def _data_key(cfg: RunConfig) -> dict:
    return {"scenario": cfg.scenario, "overrides": cfg.scenario_overrides,
            "train_runs": cfg.train_runs, "val_runs": cfg.val_runs}


def run_seed(cfg: RunConfig, seed: int, out: Path, force: bool = False) -> SeedResult:
    data = SeedData(cfg, seed)
    st = Stages(out / f"seed_{seed}", seed, force)
    dkey = _data_key(cfg)
    timings: dict = {}
    ckpts: dict = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        res = fn()
        timings[name] = time.perf_counter() - t0
        return res

    test_log = timed("simulate", lambda: st.run(
        "simulate", "test_log.jsonl", dkey, lambda: data.log(0), sim.write_log, sim.read_log))
    test = resample(test_log)
    start = test.P[0]
    trajs: dict[str, Trajectory] = {}

    def trajectory(method, key, build):
        return st.run(f"infer:{method}", f"{method}.traj.csv", key, build, write_trajectory, read_trajectory)

    if "uwb-only" in cfg.methods:
        trajs["uwb-only"] = trajectory("uwb-only", dkey, lambda: evaluation.uwb_only(test, start))
    if "akf" in cfg.methods:
        akey = dkey | {"akf": cfg.akf}
        trajs["akf"] = timed("akf", lambda: trajectory(
            "akf", akey, lambda: evaluation.akf_baseline(test, start, AkfConfig(**cfg.akf))))

    if "bilstm" in cfg.methods:
        bcfg = bilstm.BilstmConfig.from_dict(dict(cfg.bilstm, seed=seed))
        bkey = dkey | {"bilstm": asdict(bcfg)}

        def fit_bilstm():
            tr = [w for s in data.split("train") for w in bilstm.make_windows(s, bcfg.window, bcfg.stride)]
            va = [w for s in data.split("val") for w in bilstm.make_windows(s, bcfg.window)]
            return bilstm.train(tr, va, bcfg)

        ck = timed("train:bilstm", lambda: st.run(
            "train:bilstm", "bilstm.ckpt.json", bkey, fit_bilstm, neural.save_checkpoint, neural.load_checkpoint))
        ckpts["bilstm"] = ck
        trajs["bilstm"] = trajectory("bilstm", bkey | {"mode": cfg.mode},
                                     lambda: bilstm.infer(test, ck, start=start, mode=cfg.mode))

    def fit_fusion(fcfg: FusionConfig, augmenter=None):
        tr = [w for s in data.split("train") for w in fusionnet.make_windows(s, fcfg.window, fcfg.stride)]
        va = [w for s in data.split("val") for w in fusionnet.make_windows(s, fcfg.window)]
        return fusionnet.train(tr, va, fcfg, augmenter=augmenter)

    variants = ["full"] if "fusionnet" in cfg.methods or cfg.ablation else []
    if cfg.ablation:
        variants += ["aoi-off", "att-off", "both-off"]
    for v in variants:
        fcfg = _fusion_cfg(cfg, seed, v)
        name = "fusionnet" if v == "full" else f"fusionnet-{v}"
        fkey = dkey | {"fusion": asdict(fcfg)}
        ck = timed(f"train:{name}", lambda: st.run(
            f"train:{name}", f"{name}.ckpt.json", fkey, lambda: fit_fusion(fcfg),
            neural.save_checkpoint, neural.load_checkpoint))
        ckpts[name] = ck
        traj = trajectory(name, fkey | {"mode": cfg.mode},
                          lambda: fusionnet.infer(test, ck, start=start, mode=cfg.mode))
        if name == "fusionnet" and "fusionnet" in cfg.methods:
            trajs["fusionnet"] = traj

    generators: list = []
    if "fusionnet-dgan" in cfg.methods:
        aset = AugmentSettings.from_dict(cfg.augment)
        dcfg = augment.DiffusionConfig.from_dict(dict(aset.diffusion, seed=aset.diffusion.get("seed", seed)))
        gkey = dkey | {"diffusion": asdict(dcfg)}

        def corpus(split):
            parts = [augment.residual_windows(s, dcfg.length) for s in data.split(split)]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

        def fit_diffusion():
            X, C = corpus("train")
            return augment.train_diffusion(X, C, dcfg)

        diff = timed("train:diffusion", lambda: st.run(
            "train:diffusion", "diffusion.ckpt.json", gkey, fit_diffusion,
            augment.save_diffusion, augment.load_diffusion))
        gen = augment.DiffusionGenerator(diff)

        def compare():
            X, _ = corpus("train")
            real, conds = augment.residual_windows(test, dcfg.length)
            rng = np.random.default_rng([seed, 7])
            fakes = {
                "diffusion": gen.sample(conds, rng),
                "gaussian": augment.GaussianGenerator(X).sample(conds, rng),
                "bootstrap": augment.BootstrapGenerator(X).sample(conds, rng),
            }
            return augment.compare_generators(real, fakes)

        generators = st.run("compare", "generators.json", gkey, compare, _json_save, _json_load)
        fcfg = _fusion_cfg(cfg, seed)
        xkey = dkey | {"fusion": asdict(fcfg), "diffusion": asdict(dcfg), "augment": asdict(aset)}
        aug = augment.make_augmenter(gen, aset.alpha_gan, aset.subset_frac)
        ck = timed("train:fusionnet-dgan", lambda: st.run(
            "train:fusionnet-dgan", "fusionnet-dgan.ckpt.json", xkey, lambda: fit_fusion(fcfg, aug),
            neural.save_checkpoint, neural.load_checkpoint))
        ckpts["fusionnet-dgan"] = ck
        trajs["fusionnet-dgan"] = trajectory("fusionnet-dgan", xkey | {"mode": cfg.mode},
                                             lambda: fusionnet.infer(test, ck, start=start, mode=cfg.mode))

    reports = {m: evaluation.grid_report(trajs[m], test, m) for m in METHODS if m in trajs}
    for m, r in reports.items():
        evaluation.write_cdf_data(r, st.path(f"cdf_{m}.dat"))

    gate: dict = {}
    if "fusionnet" in ckpts:
        ga = evaluation.gate_analysis(ckpts["fusionnet"], test, start)
        gate = ga.summary()
        evaluation.write_plot_data(st.path("gate_alpha.dat"), {"t": ga.t, "alpha": ga.alpha, "visible": ga.visible})
        _json_save(gate, st.path("gate_summary.json"))

    ablation: list = []
    if cfg.ablation:
        names = {"full": "fusionnet", "aoi-off": "fusionnet-aoi-off",
                 "att-off": "fusionnet-att-off", "both-off": "fusionnet-both-off"}
        ablation = evaluation.ablate({k: ckpts[v] for k, v in names.items()}, test, start, cfg.mode)
        rows = [{"variant": a.name, "att": a.use_att, "aoi": a.use_aoi} | a.report.row()
                | {"d_rmse": a.d_rmse, "d_p95": a.d_p95} for a in ablation]
        with open(st.path("ablation.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    log.info("seed %d: ran %s, reused %s", seed, st.ran, st.skipped)
    return SeedResult(seed, reports, timings, ckpts, generators, gate, ablation)


def run_pipeline(cfg: RunConfig, force: bool = False) -> PipelineResult:
    apply_thread_override()
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    # where results land does not change them
    chash = neural.config_hash({k: v for k, v in cfg.to_dict().items() if k != "output_dir"})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    results = [run_seed(cfg, s, out, force) for s in cfg.seeds]
    res = PipelineResult(cfg, chash, results, out)
    write_report(res)
    return res


def write_report(res: PipelineResult) -> None:
    out = res.output_dir
    rows = [r | {"config_hash": res.config_hash} for r in res.table()]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    methods = [m for m in METHODS if any(m in s.reports for s in res.seeds)]
    summary = []
    for m in methods:
        reps = [s.reports[m] for s in res.seeds if m in s.reports]
        summary.append({"method": m} | {k: float(np.mean([r.row()[k] for r in reps]))
                                        for k in ("rmse", "mae", "p50", "p95", "p99")})
    first = res.seeds[0]
    evaluation.write_bar_data([first.reports[m] for m in methods if m in first.reports], out / "bar.dat")
    evaluation.write_box_data([first.reports[m] for m in methods if m in first.reports], out / "box.dat")
    lines = [f"# Benchmark summary (config {res.config_hash})", "",
             f"Seeds: {', '.join(str(s.seed) for s in res.seeds)}. Errors in metres, mean over seeds.", "",
             evaluation.markdown_table(summary), "## Per seed", "",
             evaluation.markdown_table(res.table(), ["seed", "method", "rmse", "mae", "p50", "p95", "p99"])]
    (out / "summary.md").write_text("\n".join(lines))

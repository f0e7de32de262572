import numpy as np
import pytest

from aoifusion import sim


def line_scenario(length=100.0, speed=10.0, anchors=((50.0, 0.0, 0.0),), seed=0, **kw):
    """Straight path along x at constant speed, noiseless unless overridden."""
    channel = kw.pop("channel", sim.ChannelModel(los_range_sigma=0.0, quantize=False))
    return sim.Scenario(
        anchors=[list(a) for a in anchors],
        trajectory=sim.TrajectorySpec(waypoints=[[0.0, 0.0, 0.0], [length, 0.0, 0.0]], cruise_speed=speed),
        seed=seed,
        channel=channel,
        **kw,
    )


def static_scenario(duration=6.0, anchors=((10.0, 0.0, 0.0),), **kw):
    channel = kw.pop("channel", sim.ChannelModel(los_range_sigma=0.0, quantize=False))
    return sim.Scenario(
        anchors=[list(a) for a in anchors],
        trajectory=sim.TrajectorySpec(waypoints=[[0.0, 0.0, 0.0]], duration=duration),
        channel=channel,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sequence(rng, K=64, A=4, p_visible=0.5, rate=20.0):
    """Small synthetic grid sequence: smooth truth, noisy ranges, random visibility."""
    from aoifusion.grid import GridSequence

    dt = 1.0 / rate
    t = np.arange(K + 1) * dt
    accel = np.cumsum(rng.normal(scale=0.3, size=(K, 3)), axis=0) * 0.1
    vel = np.vstack([rng.normal(size=3), rng.normal(size=3) + np.cumsum(accel, axis=0) * dt])
    P = np.vstack([np.zeros(3), np.cumsum(vel[:-1] * dt, axis=0)])
    anchors = rng.uniform(-20, 20, size=(A, 3))
    mid = 0.5 * (P[:-1] + P[1:])
    G = np.linalg.norm(mid[:, None, :] - anchors[None], axis=-1)
    M = (rng.random((K, A)) < p_visible).astype(float)
    D = np.where(M == 1, G + rng.normal(scale=0.05, size=G.shape), np.nan)
    return GridSequence(t=t, U=accel, D=D, M=M, P=P, G=G, anchors=anchors, rate=rate)


def tiny_run_config(tmp_path, **kw):
    """Short route, small models and two epochs: a full pipeline run in seconds."""
    from aoifusion.pipeline import RunConfig

    d = dict(
        seeds=[0],
        scenario_overrides={"waypoints": [[0.0, 0.0, 343.0], [150.0, 6.0, 268.0], [320.0, 12.0, 178.0]],
                            "rates": {"imu": 100.0}, "full_outages": {"count": 1}},
        train_runs=2,
        val_runs=1,
        output_dir=str(tmp_path / "runs"),
        fusion={"hidden": 8, "window": 32, "stride": 16, "epochs": 2},
        bilstm={"hidden": 4, "layers": 1, "window": 32, "stride": 16, "epochs": 2},
        augment={"diffusion": {"hidden": 8, "steps": 10, "epochs": 1}},
    )
    d.update(kw)
    return RunConfig.from_dict(d)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)

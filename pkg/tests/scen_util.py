"""Scenario builders shared across test modules."""
import numpy as np

from etplan.et_filter import FilterParams
from etplan.numerics import GaussianBelief
from etplan.scenario import (
    ControlSettings,
    HyperRect,
    ModeSwitchSettings,
    Scenario,
    TerminationParams,
)


def line_scenario(
    waypoints=((0.0, 0.0), (1.0, 0.0)),
    obstacles=(),
    q=0.07**2,
    r=0.03**2,
    p0=1e-4,
    target_half=0.3,
    deltas=(0.5, 2.0),
    eps_x=0.05,
    k_max=60,
    eps_kf=0.3,
    eps_p=1e-5,
    u_max=0.5,
    comm_cost=1.0,
    name="line",
    target_center=None,
):
    """Single-integrator scenario along an explicit waypoint list."""
    waypoints = np.asarray(waypoints, dtype=float)
    n = waypoints.shape[1]
    eye = np.eye(n)
    goal = waypoints[-1] if target_center is None else np.asarray(target_center, float)
    return Scenario(
        name=name,
        params=FilterParams(F=eye, G=eye, H=eye, Q=q * eye, R=r * eye),
        x0=GaussianBelief(waypoints[0], p0 * eye),
        waypoints=waypoints,
        obstacles=[HyperRect(lo, hi) for lo, hi in obstacles],
        target=HyperRect(goal - target_half, goal + target_half),
        deltas=list(deltas),
        comm_cost=comm_cost,
        term=TerminationParams(eps_x=eps_x, k_max=k_max),
        mode_switch=ModeSwitchSettings(eps_kf=eps_kf, eps_p=eps_p),
        control=ControlSettings(u_max=u_max),
    )


def noiseless_scenario(**kwargs):
    """Deterministic plant: no process or measurement noise, exact start."""
    kwargs.setdefault("q", 0.0)
    kwargs.setdefault("r", 0.0)
    kwargs.setdefault("p0", 0.0)
    return line_scenario(**kwargs)

"""Equivalence-class exploration by Euler steps along metric eigendirections.

SiMEC steps follow eigenvectors of the numerically null part of the pullback
metric, staying inside one equivalence class to first order; SiMExp follows
non-null eigenvectors to hop between classes. Both auto step sizes come from
the largest eigenvalue: 1/sqrt(lambda_max) for SiMEC and 2/sqrt(lambda_max)
for SiMExp. A pixel-space random-walk baseline is included for contrast.

When a segment selection is given, the metric is the diagonal sub-block over
the selected segments' coordinates (the pullback of the map with all other
coordinates frozen) and the update touches only those coordinates.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import format_csv, write_text_atomic
from .geometry import MetricError, eigen_split
from .network import Network, NetworkError, evaluate, jvp_block
from .seeding import rng_stream

Array = np.ndarray

TRAJECTORY_FORMAT = "fiberwalk-trajectory/1"


class ExplorationError(RuntimeError):
    """Raised when a step cannot be taken; carries a short machine tag."""

    def __init__(self, tag: str, message: str):
        super().__init__(message)
        self.tag = tag


@dataclass(frozen=True)
class FeasibleBounds:
    """Per-dimension envelope used to cap explored points."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be two equal-length vectors")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound somewhere")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size


def project_feasible(p, bounds: FeasibleBounds) -> Array:
    """Clamp a point into the feasible envelope; idempotent."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != bounds.dim:
        raise ValueError("point and bounds dimensions differ")
    return np.clip(p, bounds.lower, bounds.upper)


MODES = ("simec", "simexp", "baseline")


@dataclass(frozen=True)
class ExplorationConfig:
    mode: str
    max_iters: int
    null_tol: float = 1e-6
    delta: float | None = None  # None = auto policy
    seed: int = 0
    selection: tuple[int, ...] | None = None
    record_every: int = 1
    bounds: FeasibleBounds | None = None
    project: str = "end"  # end | step | none
    reinit_prob: float = 0.2  # baseline only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("fixed delta must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.project not in ("end", "step", "none"):
            raise ValueError("project must be 'end', 'step' or 'none'")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ValueError("reinit_prob must lie in [0, 1]")
        if self.selection is not None:
            sel = tuple(int(s) for s in self.selection)
            if len(set(sel)) != len(sel) or any(s < 0 for s in sel):
                raise ValueError("selection must be distinct non-negative indices")
            object.__setattr__(self, "selection", sel)


@dataclass(frozen=True)
class StepRecord:
    """One Euler step: which eigendirection, its sign, and the step length.

    The baseline reuses the container with eig_index = -1 and sign = a_t.
    """

    eig_index: int
    sign: float
    delta: float
    lambda_max: float
    null_count: int


@dataclass
class Trajectory:
    mode: str
    seed: int
    points: Array        # (recorded, d)
    outputs: Array       # (recorded, d_out)
    iters: list[int]     # iteration number of each recorded point
    deltas: list[float]  # one entry per step taken
    chosen: list[tuple[int, float]]  # (eig_index, sign) per step taken
    selection: tuple[int, ...] | None = None
    error: str | None = None
    run_id: str = ""
    config: dict | None = None  # serializable run parameters

    def __post_init__(self):
        if not self.run_id:
            self.run_id = f"{self.mode}-seed{self.seed}"

    @property
    def n_steps(self) -> int:
        return len(self.deltas)


def _config_dict(cfg: ExplorationConfig) -> dict:
    return {
        "mode": cfg.mode, "max_iters": cfg.max_iters, "null_tol": cfg.null_tol,
        "delta": cfg.delta, "seed": cfg.seed,
        "selection": list(cfg.selection) if cfg.selection is not None else None,
        "record_every": cfg.record_every, "project": cfg.project,
        "bounded": cfg.bounds is not None, "reinit_prob": cfg.reinit_prob,
    }


def simec_delta(lambda_max: float) -> float:
    """Auto step length along null directions: 1 / sqrt(lambda_max)."""
    return 1.0 / np.sqrt(lambda_max)


def simexp_delta(lambda_max: float) -> float:
    """Auto step length along non-null directions: 2 / sqrt(lambda_max)."""
    return 2.0 / np.sqrt(lambda_max)


def segment_coords(net: Network, selection) -> Array:
    """Flat coordinate indices of the selected segments' embedding rows."""
    if net.embed_shape is None:
        raise NetworkError("network has no (tokens, hidden) embedding layout")
    tokens, hidden = net.embed_shape
    sel = range(tokens) if selection is None else selection
    coords = []
    for s in sel:
        if not 0 <= s < tokens:
            raise ValueError(f"segment index {s} outside [0, {tokens})")
        coords.extend(range(s * hidden, (s + 1) * hidden))
    return np.asarray(coords, dtype=np.intp)


def _restricted_split(net: Network, p: Array, cfg: ExplorationConfig):
    """Eigen-split of the pullback metric, restricted to the selected
    coordinates when a selection is set. Exactly one eigendecomposition."""
    eb = net.embed_boundary
    if cfg.selection is None:
        basis = np.eye(p.size)
        coords = None
    else:
        coords = segment_coords(net, cfg.selection)
        if coords.size == 0:
            raise ExplorationError("empty-selection", "selection has no coordinates")
        basis = np.zeros((coords.size, p.size))
        basis[np.arange(coords.size), coords] = 1.0
    cols = jvp_block(net, p, basis, from_layer=eb)  # rows: J restricted columns
    g = cols @ cols.T
    g = 0.5 * (g + g.T)
    return eigen_split(g, cfg.null_tol), coords


def _metric_step(net, p, cfg, rng, want_null: bool):
    dec, coords = _restricted_split(net, p, cfg)
    pool = dec.null_indices if want_null else dec.nonnull_indices
    if not pool:
        which = "null" if want_null else "non-null"
        raise ExplorationError(
            f"empty-{which}-space",
            f"no {which} eigendirection at this point "
            f"(rank {dec.rank} of {dec.dim})",
        )
    idx = pool[int(rng.integers(len(pool)))]
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if cfg.delta is not None:
        delta = cfg.delta
    else:
        delta = simec_delta(dec.lambda_max) if want_null else simexp_delta(dec.lambda_max)
    direction = dec.eigenvectors[:, idx]
    p_next = p.copy()
    if coords is None:
        p_next += delta * sign * direction
    else:
        p_next[coords] += delta * sign * direction
    rec = StepRecord(eig_index=int(idx), sign=sign, delta=float(delta),
                     lambda_max=dec.lambda_max, null_count=len(dec.null_indices))
    return p_next, rec


def simec_step(net: Network, p, cfg: ExplorationConfig, rng) -> tuple[Array, StepRecord]:
    """One null-direction Euler step from p in the embedding space."""
    p = np.asarray(p, dtype=np.float64)
    return _metric_step(net, p, cfg, rng, want_null=True)


def simexp_step(net: Network, p, cfg: ExplorationConfig, rng) -> tuple[Array, StepRecord]:
    """One non-null-direction Euler step from p in the embedding space."""
    p = np.asarray(p, dtype=np.float64)
    return _metric_step(net, p, cfg, rng, want_null=False)


def run_exploration(net: Network, p0, cfg: ExplorationConfig) -> Trajectory:
    """Iterate the configured step from p0 with a seeded stream.

    Step errors abort the run and leave a partial trajectory with the error
    tag set. With bounds and project="end" only the final recorded point is
    capped; project="step" caps after every step. A single trajectory is
    inherently sequential, but distinct trajectories over one shared network
    are independent and can run concurrently.
    """
    if cfg.mode == "baseline":
        eta = cfg.delta if cfg.delta is not None else 0.05
        return perturbation_baseline(net, p0, cfg.max_iters, eta=eta,
                                     reinit_prob=cfg.reinit_prob, seed=cfg.seed,
                                     record_every=cfg.record_every)
    p = np.asarray(p0, dtype=np.float64).copy()
    eb = net.embed_boundary
    if p.size != net.dims[eb]:
        raise NetworkError(
            f"start point has dim {p.size}, embedding space has dim {net.dims[eb]}"
        )
    rng = rng_stream(cfg.seed, "explore", cfg.mode)
    step = simec_step if cfg.mode == "simec" else simexp_step
    points, outputs, iters = [p.copy()], [evaluate(net, p, eb)], [0]
    deltas: list[float] = []
    chosen: list[tuple[int, float]] = []
    error = None
    for k in range(cfg.max_iters):
        try:
            p, rec = step(net, p, cfg, rng)
        except (ExplorationError, MetricError) as exc:
            error = getattr(exc, "tag", "degenerate-metric")
            break
        if cfg.bounds is not None and cfg.project == "step":
            p = project_feasible(p, cfg.bounds)
        deltas.append(rec.delta)
        chosen.append((rec.eig_index, rec.sign))
        if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.max_iters:
            points.append(p.copy())
            outputs.append(evaluate(net, p, eb))
            iters.append(k + 1)
    if cfg.bounds is not None and cfg.project == "end":
        points[-1] = project_feasible(points[-1], cfg.bounds)
        outputs[-1] = evaluate(net, points[-1], eb)
    return Trajectory(mode=cfg.mode, seed=cfg.seed, points=np.asarray(points),
                      outputs=np.asarray(outputs), iters=iters, deltas=deltas,
                      chosen=chosen, selection=cfg.selection, error=error,
                      config=_config_dict(cfg))


def perturbation_baseline(net: Network, x0, max_iters: int, eta: float,
                          reinit_prob: float = 0.2, seed: int = 0,
                          record_every: int = 1, clamp: bool = True) -> Trajectory:
    """Pixel-space semi-random walk used as a contrast method.

    The perturbation direction evolves as v <- a*v + eta*eps with eps a fresh
    standard-normal vector orthogonalized against v, and a = +1 while the
    predicted label is unchanged from the previous step, -1 otherwise. With
    probability reinit_prob the direction is redrawn from a standard normal.
    Images stay clamped to [0, 1] by default.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not 0.0 <= reinit_prob <= 1.0:
        raise ValueError("reinit_prob must lie in [0, 1]")
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.size != net.d_in:
        raise NetworkError("baseline start point must live in the input space")
    rng = rng_stream(seed, "explore", "baseline")
    out = evaluate(net, x, 0)
    points, outputs, iters = [x.copy()], [out], [0]
    deltas: list[float] = []
    chosen: list[tuple[int, float]] = []
    v = np.zeros_like(x)
    label_prev = label_curr = int(np.argmax(out))
    for t in range(max_iters):
        a = 1.0 if label_curr == label_prev else -1.0
        if rng.random() < reinit_prob:
            v = rng.standard_normal(x.size)
        else:
            eps = rng.standard_normal(x.size)
            norm = np.linalg.norm(v)
            if norm > 0.0:
                vhat = v / norm
                eps = eps - (eps @ vhat) * vhat
            v = a * v + eta * eps
        x = x + v
        if clamp:
            np.clip(x, 0.0, 1.0, out=x)
        out = evaluate(net, x, 0)
        label_prev, label_curr = label_curr, int(np.argmax(out))
        deltas.append(float(np.linalg.norm(v)))
        chosen.append((-1, a))
        if (t + 1) % record_every == 0 or t + 1 == max_iters:
            points.append(x.copy())
            outputs.append(out)
            iters.append(t + 1)
    return Trajectory(mode="baseline", seed=seed, points=np.asarray(points),
                      outputs=np.asarray(outputs), iters=iters, deltas=deltas,
                      chosen=chosen, selection=None, error=None,
                      config={"mode": "baseline", "max_iters": max_iters,
                              "eta": eta, "reinit_prob": reinit_prob,
                              "seed": seed, "record_every": record_every,
                              "clamp": clamp})


def save_trajectory(traj: Trajectory, directory, points_format: str = "csv") -> Path:
    """Persist a trajectory as manifest + CSV tables (points optionally as a
    little-endian float32 blob for large runs)."""
    if points_format not in ("csv", "f32"):
        raise ValueError("points_format must be 'csv' or 'f32'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, d = traj.points.shape
    if points_format == "csv":
        points_file = "points.csv"
        header = ["iter"] + [f"x{i}" for i in range(d)]
        rows = [[traj.iters[r]] + list(traj.points[r]) for r in range(n)]
        write_text_atomic(directory / points_file, format_csv(header, rows))
    else:
        points_file = "points.f32"
        from .fileio import write_bytes_atomic
        write_bytes_atomic(directory / points_file,
                           np.ascontiguousarray(traj.points, dtype="<f4").tobytes())
    q = traj.outputs.shape[1]
    out_rows = [[traj.iters[r]] + list(traj.outputs[r]) for r in range(n)]
    write_text_atomic(directory / "outputs.csv",
                      format_csv(["iter"] + [f"y{i}" for i in range(q)], out_rows))
    step_rows = [[k + 1, traj.deltas[k], traj.chosen[k][0], traj.chosen[k][1]]
                 for k in range(len(traj.deltas))]
    write_text_atomic(directory / "steps.csv",
                      format_csv(["step", "delta", "eig_index", "sign"], step_rows))
    manifest = {
        "format": TRAJECTORY_FORMAT,
        "mode": traj.mode,
        "seed": traj.seed,
        "run_id": traj.run_id,
        "config": traj.config,
        "selection": list(traj.selection) if traj.selection is not None else None,
        "error": traj.error,
        "iters": traj.iters,
        "points": {"file": points_file, "layout": points_format, "shape": [n, d]},
        "outputs": {"file": "outputs.csv", "shape": [n, q]},
        "steps": {"file": "steps.csv", "count": len(traj.deltas)},
    }
    write_text_atomic(directory / "trajectory.json",
                      json.dumps(manifest, indent=2) + "\n")
    return directory / "trajectory.json"


def load_trajectory(directory) -> Trajectory:
    directory = Path(directory)
    manifest = json.loads((directory / "trajectory.json").read_text())
    if manifest.get("format") != TRAJECTORY_FORMAT:
        raise ValueError("not a trajectory directory")
    n, d = manifest["points"]["shape"]
    if manifest["points"]["layout"] == "csv":
        points = _read_csv_matrix(directory / manifest["points"]["file"], d)
    else:
        raw = (directory / manifest["points"]["file"]).read_bytes()
        points = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, d)
    outputs = _read_csv_matrix(directory / manifest["outputs"]["file"],
                               manifest["outputs"]["shape"][1])
    deltas, chosen = [], []
    steps_path = directory / manifest["steps"]["file"]
    lines = steps_path.read_text().strip().splitlines()[1:]
    for line in lines:
        _, delta, eig_index, sign = line.split(",")
        deltas.append(float(delta))
        chosen.append((int(eig_index), float(sign)))
    selection = manifest["selection"]
    return Trajectory(
        mode=manifest["mode"], seed=manifest["seed"], points=points,
        outputs=outputs, iters=list(manifest["iters"]), deltas=deltas,
        chosen=chosen,
        selection=tuple(selection) if selection is not None else None,
        error=manifest["error"], run_id=manifest["run_id"],
        config=manifest.get("config"),
    )


def _read_csv_matrix(path, width) -> Array:
    rows = []
    for line in Path(path).read_text().strip().splitlines()[1:]:
        cells = line.split(",")
        rows.append([float(c) for c in cells[1 : 1 + width]])
    return np.asarray(rows, dtype=np.float64)

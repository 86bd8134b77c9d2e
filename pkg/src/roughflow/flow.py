"""Davie-scheme particle flows on the torus driven by level-2 rough paths.

One step of the scheme moves every particle by

    ``x ← x + u(s, x)·(t−s) + ε·σ_j(x) Z^j_{s,t} + (σ_i·∇σ_j)(x) 𝕫^{i,j}_{s,t}``

with ``ε`` the driver's sign convention (the second-level term carries ``ε²``,
so it never flips; solving with ``ε = −1`` is the same as flipping the first
level of the driver).  Guards reject steps whose noise displacement could wrap
around the torus or leave the small-threshold regime of the localized
estimates.

Drifts are pluggable: ``None``, a catalog :class:`~roughflow.fields.VectorField`,
a plain callable ``fn(t, positions)``, or time-stamped grid snapshots
(:class:`GridDrift`).  Grid drifts report their sup norm and a sampled
log-Lipschitz constant against the modulus γ.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GridError, HypothesisError, StepSizeError
from .fields import (
    VectorField,
    VorticityGrid,
    _interp_cubic,
    _spectral_upsample,
    biot_savart,
    deposit,
    gamma,
    interpolate,
    interpolate_velocity,
    mollify,
)
from .roughpath import DriverPair, difference_variation_control, \
    reverse_rough_path, variation_control
from .variation import Control, Localization, _as_times, locate_nodes, \
    localized_p_variation

__all__ = [
    "ZeroDrift", "SteadyDrift", "CallableDrift", "GridDrift", "as_drift",
    "ParticleFlow", "save_particles_csv", "load_particles_csv",
    "save_particles_binary", "load_particles_binary",
    "FlowProblem", "davie_step", "FlowTrajectory", "FlowDiagnostics",
    "solve_flow", "InverseFlowResult", "solve_inverse_flow",
    "solve_nonlocal_flow", "OccupancyResult", "occupancy_statistic",
    "lagrangian_stability_bound", "LAGRANGIAN_STABILITY_CONSTANT",
]

TWO_PI = 2.0 * math.pi


def _wrap(x: np.ndarray) -> np.ndarray:
    out = np.mod(x, TWO_PI)
    # np.mod rounds 2π−ε up to 2π itself for tiny negative inputs; keep the
    # documented half-open fundamental domain [0, 2π)
    return np.where(out >= TWO_PI, 0.0, out)


def _nearest_image(delta: np.ndarray) -> np.ndarray:
    return (delta + math.pi) % TWO_PI - math.pi


# ---------------------------------------------------------------------------
# drift wrappers
# ---------------------------------------------------------------------------

# Periodic Catmull-Rom can leave the node range: per axis the negative weight
# mass is at most f(1−f)/2 ≤ 1/8, so Σ|w| ≤ 5/4 per axis and ≤ 25/16 for the
# tensor product — interpolated drifts may exceed their grid max by that much.
_INTERP_OVERSHOOT = 25.0 / 16.0


class ZeroDrift:
    """No drift."""

    sup_norm = 0.0
    log_lipschitz = 0.0
    sup_overshoot = 1.0

    def velocity(self, t, positions):
        return np.zeros_like(np.asarray(positions, dtype=float))


class SteadyDrift:
    """A time-independent catalog field with analytic norms.

    The log-Lipschitz constant comes from ``|u(x)−u(y)| ≤ min(‖∇u‖d, 2‖u‖)``
    together with ``γ(d) ≥ d`` on ``d ≤ 1`` and ``γ ≥ 2/e`` past ``1/e``.
    """

    sup_overshoot = 1.0

    def __init__(self, field: VectorField):
        self.field = field
        self.sup_norm = field.c_norm(0)
        self.log_lipschitz = max(field.c_norm(1), math.e * field.c_norm(0))

    def velocity(self, t, positions):
        return self.field(np.asarray(positions, dtype=float))


class CallableDrift:
    """An arbitrary ``fn(t, positions) -> velocities`` drift.

    Unknown norms are estimated by sampling (and are therefore lower bounds);
    pass them explicitly when they are known.
    """

    sup_overshoot = 1.0

    def __init__(self, fn, sup_norm: float | None = None,
                 log_lipschitz: float | None = None, *, time_span=(0.0, 1.0),
                 seed: int = 0):
        self.fn = fn
        if sup_norm is None or log_lipschitz is None:
            rng = np.random.default_rng(seed)
            pts = rng.uniform(0.0, TWO_PI, size=(512, 2))
            sup, lip = 0.0, 0.0
            for t in np.linspace(time_span[0], time_span[1], 5):
                u = np.asarray(fn(t, pts), dtype=float)
                sup = max(sup, float(np.abs(u).max()))
                d = np.sqrt((_nearest_image(pts[:256] - pts[256:]) ** 2).sum(axis=1))
                du = np.sqrt(((u[:256] - u[256:]) ** 2).sum(axis=1))
                lip = max(lip, float((du / gamma(np.maximum(d, 1e-12))).max()))
            # sampled values are lower bounds; pad them so contract checks on
            # fresh samples do not trip on the sampling gap
            if sup_norm is None:
                sup_norm = 1.25 * sup + 1e-12
            if log_lipschitz is None:
                log_lipschitz = 1.25 * lip + 1e-12
        self.sup_norm = float(sup_norm)
        self.log_lipschitz = float(log_lipschitz)

    def velocity(self, t, positions):
        return np.asarray(self.fn(t, np.asarray(positions, dtype=float)), dtype=float)


class GridDrift:
    """Snapshot velocity fields ``u(t_k, ·)``, held constant on ``[t_k, t_{k+1})``.

    A single snapshot is treated as a steady field (no time range); with two
    or more, evaluation outside ``[t_0, t_last]`` is an error.

    Spatial evaluation is periodic cubic interpolation on an FFT-upsampled
    grid (cached per snapshot) or exact trigonometric interpolation with
    ``interpolation="spectral"``.  An optional ``mollify_eta`` convolves every
    snapshot with the compact bump on construction — the mollified-drift
    variant used by the existence-proof convergence experiment.

    ``sup_norm`` reports the grid max; between nodes the interpolant may
    exceed it by up to the documented overshoot factor, which contract checks
    take into account.
    """

    sup_overshoot = _INTERP_OVERSHOOT

    def __init__(self, times, snapshots, *, interpolation: str = "cubic",
                 upsample: int = 4, mollify_eta: float | None = None):
        self.times = _as_times(times)
        snaps = [np.asarray(s, dtype=float) for s in snapshots]
        if len(snaps) != self.times.size:
            raise GridError(f"{len(snaps)} snapshots for {self.times.size} times")
        for s in snaps:
            if s.ndim != 3 or s.shape[0] != 2 or s.shape[1] != s.shape[2]:
                raise GridError("drift snapshots must have shape (2, N, N)")
        if mollify_eta is not None:
            snaps = [np.stack([mollify(c, mollify_eta) for c in s]) for s in snaps]
        self.snapshots = snaps
        self.interpolation = interpolation
        self.upsample = int(upsample)
        self.mollify_eta = mollify_eta
        self.sup_norm = max(float(np.abs(s).max()) for s in snaps)
        self.log_lipschitz: float | None = None
        self._fine: dict[int, np.ndarray] = {}

    def _fine_snapshot(self, k: int) -> np.ndarray:
        if k not in self._fine:
            snap = self.snapshots[k]
            if self.upsample > 1:
                snap = np.stack([_spectral_upsample(c, self.upsample) for c in snap])
            self._fine[k] = snap
        return self._fine[k]

    def _index(self, t: float) -> int:
        if self.times.size == 1:
            return 0  # a single snapshot is a steady field, valid at all times
        span = self.times[-1] - self.times[0]
        tol = 1e-9 * max(span, 1.0)
        if t < self.times[0] - tol or t > self.times[-1] + tol:
            raise GridError(f"drift interpolation out of range: t = {t:g} outside "
                            f"[{self.times[0]:g}, {self.times[-1]:g}]")
        return min(int(np.searchsorted(self.times, t + tol, side="right") - 1),
                   self.times.size - 1)

    def velocity(self, t, positions):
        k = self._index(float(t))
        pts = np.asarray(positions, dtype=float)
        if self.interpolation == "spectral":
            return interpolate_velocity(self.snapshots[k], pts, method="spectral")
        fine = self._fine_snapshot(k)
        flat = pts.reshape(-1, 2) % TWO_PI
        out = np.stack([_interp_cubic(fine[0], flat, 1),
                        _interp_cubic(fine[1], flat, 1)], axis=-1)
        return out.reshape(pts.shape)

    def measure_log_lipschitz(self, n_pairs: int = 512, seed: int = 0) -> float:
        """Sampled sup of ``|u(t,x)−u(t,y)| / γ(d(x,y))``; cached on the instance."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(len(self.snapshots)):
            x = rng.uniform(0.0, TWO_PI, size=(n_pairs, 2))
            # bias half the sample toward short separations, where γ bites
            y = x + rng.normal(scale=0.05, size=x.shape)
            y[n_pairs // 2:] = rng.uniform(0.0, TWO_PI, size=(n_pairs - n_pairs // 2, 2))
            t = self.times[k]
            du = self.velocity(t, x) - self.velocity(t, _wrap(y))
            du = np.sqrt((du ** 2).sum(axis=1))
            d = np.sqrt((_nearest_image(x - y) ** 2).sum(axis=1))
            keep = d > 1e-9
            worst = max(worst, float((du[keep] / gamma(d[keep])).max()))
        self.log_lipschitz = worst
        return worst


def as_drift(obj):
    """Normalize the accepted drift flavors to the drift interface."""
    if obj is None:
        return ZeroDrift()
    if isinstance(obj, (ZeroDrift, SteadyDrift, CallableDrift, GridDrift)):
        return obj
    if isinstance(obj, VectorField):
        return SteadyDrift(obj)
    if callable(obj):
        return CallableDrift(obj)
    raise GridError(f"cannot interpret {type(obj).__name__} as a drift")


# ---------------------------------------------------------------------------
# particle ensembles
# ---------------------------------------------------------------------------

class ParticleFlow:
    """Labeled particles with transported weights.

    ``labels`` are the initial positions (the Lagrangian markers), ``positions``
    the current ones (wrapped to ``[0, 2π)²``), and ``weights`` the carried
    field samples — immutable along trajectories, because transport moves
    values without changing them.
    """

    def __init__(self, labels, positions, weights, *, direction: str = "forward",
                 time: float = 0.0):
        self.labels = np.array(labels, dtype=float)
        self.positions = _wrap(np.array(positions, dtype=float))
        if self.labels.shape != self.positions.shape or self.labels.ndim != 2 \
                or self.labels.shape[1] != 2:
            raise GridError("labels and positions must both have shape (n, 2)")
        n = self.labels.shape[0]
        w = np.broadcast_to(np.asarray(weights, dtype=float).ravel(), (n,)).copy()
        w.flags.writeable = False
        self.weights = w
        if direction not in ("forward", "backward"):
            raise GridError(f"direction must be forward or backward, got {direction!r}")
        self.direction = direction
        self.time = float(time)

    @classmethod
    def lattice(cls, n_side: int, weight_source=0.0, *, time: float = 0.0,
                direction: str = "forward") -> "ParticleFlow":
        """A regular n×n lattice; weights sampled from a grid, callable, or scalar."""
        x = np.arange(n_side) * (TWO_PI / n_side)
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        pos = np.stack([X1.ravel(), X2.ravel()], axis=-1)
        if isinstance(weight_source, VorticityGrid):
            w = interpolate(weight_source, pos, method="spectral")
        elif callable(weight_source):
            w = np.asarray(weight_source(pos[:, 0], pos[:, 1]), dtype=float)
        else:
            w = np.full(n_side * n_side, float(weight_source))
        return cls(pos, pos, w, time=time, direction=direction)

    @property
    def n_particles(self) -> int:
        return self.labels.shape[0]

    def with_positions(self, positions, *, time: float) -> "ParticleFlow":
        out = ParticleFlow.__new__(ParticleFlow)
        out.labels = self.labels
        out.positions = _wrap(np.array(positions, dtype=float))
        out.weights = self.weights
        out.direction = self.direction
        out.time = float(time)
        return out

    def deposit(self, resolution: int) -> VorticityGrid:
        return deposit(self.positions, self.weights, resolution)

    def displacement_from(self, reference=None) -> np.ndarray:
        """Torus distance of each particle from ``reference`` (default: labels)."""
        ref = self.labels if reference is None else np.asarray(reference, dtype=float)
        return np.sqrt((_nearest_image(self.positions - ref) ** 2).sum(axis=1))

    def __repr__(self):
        return (f"ParticleFlow(n={self.n_particles}, t={self.time:g}, "
                f"{self.direction})")


def save_particles_csv(flow: ParticleFlow, path: str) -> None:
    """Snapshot as CSV rows ``t, id, x1, x2, weight`` (ids in storage order)."""
    n = flow.n_particles
    data = np.column_stack([np.full(n, flow.time), np.arange(n),
                            flow.positions, flow.weights])
    np.savetxt(path, data, delimiter=",", header="t,id,x1,x2,weight",
               comments="", fmt=["%.17g", "%d", "%.17g", "%.17g", "%.17g"])


def load_particles_csv(path: str, labels=None) -> ParticleFlow:
    """Load a CSV snapshot; ids must be contiguous in storage order.

    The column format does not carry labels, so they default to the loaded
    positions unless provided (ids preserve lattice order, so callers that
    know the original layout can rebuild them).
    """
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise GridError(f"malformed particle CSV: {exc}") from exc
    if data.shape[1] != 5:
        raise GridError(f"particle CSV needs 5 columns, found {data.shape[1]}")
    if not np.array_equal(data[:, 1], np.arange(data.shape[0])):
        raise GridError("particle ids must be 0..n-1 in order")
    pos = data[:, 2:4]
    return ParticleFlow(pos if labels is None else labels, pos, data[:, 4],
                        time=float(data[0, 0]))


_BINARY_MAGIC = b"RFPB"
_BINARY_VERSION = 1


def save_particles_binary(flow: ParticleFlow, path: str) -> None:
    """Little-endian snapshot: header (magic, version, n, time, record width),
    then ``n`` float64 records ``(x1, x2, weight)``."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<IQdI", _BINARY_VERSION, flow.n_particles,
                             flow.time, 3))
        rec = np.column_stack([flow.positions, flow.weights]).astype("<f8")
        fh.write(rec.tobytes())


def load_particles_binary(path: str, labels=None) -> ParticleFlow:
    with open(path, "rb") as fh:
        if fh.read(4) != _BINARY_MAGIC:
            raise GridError("not a particle snapshot file")
        version, n, time, width = struct.unpack("<IQdI", fh.read(24))
        if version != _BINARY_VERSION or width != 3:
            raise GridError(f"unsupported snapshot layout (version {version}, "
                            f"width {width})")
        rec = np.frombuffer(fh.read(), dtype="<f8")
    if rec.size != n * 3:
        raise GridError(f"truncated snapshot: expected {n * 3} floats, "
                        f"got {rec.size}")
    rec = rec.reshape(n, 3)
    pos = rec[:, :2]
    return ParticleFlow(pos if labels is None else labels, pos, rec[:, 2], time=time)


# ---------------------------------------------------------------------------
# flow problems and the Davie step
# ---------------------------------------------------------------------------

@dataclass
class FlowProblem:
    """A flow RDE: drift + rough driver + initial particles + step grid.

    The step grid must refine the driver's grid (every rough-path node inside
    the solve window is a step node); steps between nodes query the driver's
    Chen-exact partial increments.
    """

    drift: object
    driver: DriverPair
    initial: ParticleFlow
    step_times: np.ndarray
    q_exponent: float | None = None

    def __post_init__(self):
        self.drift = as_drift(self.drift)
        self.step_times = _as_times(self.step_times)
        if np.any(np.diff(self.step_times) <= 0):
            raise GridError("step grid must be strictly increasing")
        rp = self.driver.rough_path
        span = rp.times[-1] - rp.times[0]
        tol = 1e-9 * max(span, 1.0)
        if self.step_times[0] < rp.times[0] - tol or self.step_times[-1] > rp.times[-1] + tol:
            raise GridError("step grid leaves the driver's time span")
        inside = rp.times[(rp.times >= self.step_times[0] - tol)
                          & (rp.times <= self.step_times[-1] + tol)]
        matched = np.abs(inside[:, None] - self.step_times[None, :]).min(axis=1)
        if np.any(matched > tol):
            raise GridError("step grid must refine the driver grid "
                            "(every rough-path node is a step node)")
        if self.q_exponent is None:
            self.q_exponent = max(rp.p_exponent, min(2.9, rp.p_exponent + 0.25))

    def check(self, *, n_pairs: int = 128, seed: int = 0, tol: float = 1.05):
        """Verify the drift contract by sampling.

        Confirms the sup norm is finite and honest, and that the sampled
        log-Lipschitz ratio ``|u(t,x)−u(t,y)|/γ(d)`` stays within ``tol``
        times the declared constant.  Raises ``HypothesisError`` otherwise.
        """
        drift = self.drift
        if not np.isfinite(drift.sup_norm):
            raise HypothesisError("drift sup norm must be finite")
        declared = drift.log_lipschitz
        measured_now = False
        if declared is None:
            if isinstance(drift, GridDrift):
                declared = drift.measure_log_lipschitz(seed=seed)
                measured_now = True
            else:  # pragma: no cover - all bundled drifts declare a constant
                raise HypothesisError("drift declares no log-Lipschitz constant")
        overshoot = getattr(drift, "sup_overshoot", 1.0)
        sup_allowed = drift.sup_norm * overshoot * (1 + 1e-9) + 1e-12
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, TWO_PI, size=(n_pairs, 2))
        y = _wrap(x + rng.normal(scale=0.1, size=x.shape))
        d = np.sqrt((_nearest_image(x - y) ** 2).sum(axis=1))
        keep = d > 1e-9
        for t in np.linspace(self.step_times[0], self.step_times[-1], 3):
            u = drift.velocity(t, x)
            if not np.all(np.isfinite(u)):
                raise HypothesisError("drift produced non-finite velocities")
            # componentwise max, matching the C^0 convention of the catalog
            if float(np.abs(u).max()) > sup_allowed:
                raise HypothesisError("drift exceeds its declared sup norm")
            if measured_now:
                continue  # the measurement is the declaration; nothing to verify
            du = np.sqrt(((u - drift.velocity(t, y)) ** 2).sum(axis=1))
            ratio = float((du[keep] / gamma(d[keep])).max()) if keep.any() else 0.0
            if ratio > declared * tol + 1e-12:
                raise HypothesisError(
                    f"drift violates its log-Lipschitz declaration: sampled "
                    f"ratio {ratio:.3g} > declared {declared:.3g}")
        return {"sup_norm": drift.sup_norm, "log_lipschitz": declared}


def davie_step(positions, s: float, t: float, problem: FlowProblem) -> np.ndarray:
    """One second-order step from ``s`` to ``t`` (consecutive step nodes).

    Raises:
        StepSizeError: the noise displacement could wrap the torus
            (``Σ_j ‖σ_j‖_∞ |Z^j| > π``), or the step leaves the localized
            small-threshold regime (``‖σ‖_{C²}^{q/2} ω_Z(s,t)^{1/2} ≥ 1/2``).
    """
    pos = np.asarray(positions, dtype=float)
    driver = problem.driver
    rp = driver.rough_path
    Z, A = rp.increment(s, t)

    sigmas = driver.sigma_fields
    reach = sum(f.c_norm(0) * abs(Z[j]) for j, f in enumerate(sigmas))
    if reach > math.pi:
        raise StepSizeError(
            f"noise displacement bound {reach:.3g} exceeds half the domain on "
            f"step [{s:g}, {t:g}]; refine the step grid")
    p = rp.p_exponent
    omega_step = (float(np.sqrt((Z ** 2).sum())) ** p
                  + float(np.sqrt((A ** 2).sum())) ** (p / 2.0))
    guard = driver.sigma_norm(2) ** (problem.q_exponent / 2.0) * math.sqrt(omega_step)
    if guard >= 0.5:
        raise StepSizeError(
            f"step [{s:g}, {t:g}] leaves the small-threshold regime "
            f"(‖σ‖_C²^(q/2)·ω^(1/2) = {guard:.3g} ≥ 0.5); refine the step grid")

    out = pos + problem.drift.velocity(s, pos) * (t - s)
    eps = driver.sign_convention
    S = np.stack([f(pos) for f in sigmas])
    out = out + eps * np.einsum("j,j...->...", Z, S)
    G = np.stack([f.gradient(pos) for f in sigmas])
    out = out + np.einsum("i...b,j...ab,ij->...a", S, G, A)
    return _wrap(out)


# ---------------------------------------------------------------------------
# forward solves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowDiagnostics:
    """Measured variation norms of the computed flow (sup over tracked particles)."""

    q_exponent: float
    flow_variation: float
    remainder_variation: float
    threshold: float
    particles_tracked: int
    grid_nodes: int


@dataclass
class FlowTrajectory:
    times: np.ndarray
    flows: list
    diagnostics: FlowDiagnostics | None = None

    @property
    def final(self) -> ParticleFlow:
        return self.flows[-1]

    def positions_array(self) -> np.ndarray:
        return np.stack([f.positions for f in self.flows])


_DIAG_GRID_CAP = 257


def _diagnose(problem: FlowProblem, track_unwrapped: np.ndarray,
              track_wrapped: np.ndarray, threshold: float | None) -> FlowDiagnostics:
    rp = problem.driver.rough_path
    st = problem.step_times
    q = problem.q_exponent
    n_steps = st.size - 1
    stride = max(1, math.ceil(n_steps / (_DIAG_GRID_CAP - 1)))
    idx = np.unique(np.r_[np.arange(0, n_steps + 1, stride), n_steps])
    sub_times = st[idx]
    rp_sub = rp.resample(sub_times)

    # sup-over-particles increment norms of the flow and of its remainder
    phi = track_unwrapped[idx]           # (m, n_track, 2)
    m = phi.shape[0]
    diff = phi[None, :] - phi[:, None]   # (m, m, n_track, 2)
    flow_norms = np.sqrt((diff ** 2).sum(axis=-1)).max(axis=-1)
    sigmas = problem.driver.sigma_fields
    eps = problem.driver.sign_convention
    S = np.stack([np.stack([f(track_wrapped[i]) for f in sigmas], axis=-1)
                  for i in idx])         # (m, n_track, 2, M)
    Z = rp_sub.values
    dZ = Z[None, :, :] - Z[:, None, :]
    lead = eps * np.einsum("i...am,ijm->ij...a", S, dZ)
    rem_norms = np.sqrt(((diff - lead) ** 2).sum(axis=-1)).max(axis=-1)

    omega_bar = variation_control(rp_sub) + Control.interval_power(
        sub_times, rp.p_exponent)
    if threshold is None:
        steps = np.asarray(omega_bar(sub_times[:-1], sub_times[1:]))
        threshold = 4.0 * float(steps.max()) if steps.max() > 0 else 1.0
    loc = Localization(omega_bar, threshold)
    flow_var = localized_p_variation(increments=flow_norms[..., None], p=q,
                                     loc=loc, times=sub_times)
    rem_var = localized_p_variation(increments=rem_norms[..., None], p=q / 2.0,
                                    loc=loc, times=sub_times)
    # the DP returns Σ|g|^p over the best partition; report norms
    return FlowDiagnostics(q_exponent=q, flow_variation=flow_var ** (1.0 / q),
                           remainder_variation=rem_var ** (2.0 / q),
                           threshold=threshold,
                           particles_tracked=track_unwrapped.shape[1],
                           grid_nodes=int(sub_times.size))


def solve_flow(problem: FlowProblem, *, store_times=None,
               diagnostic_particles: int = 0, threshold: float | None = None,
               check: bool = True) -> FlowTrajectory:
    """March the Davie scheme over the step grid.

    ``store_times`` selects the snapshot times: ``None`` keeps endpoints only,
    ``"steps"`` keeps every step node, and an explicit array keeps its members
    (which must be step nodes).  ``diagnostic_particles > 0`` additionally
    tracks that many particles on the full step grid and reports the measured
    localized q-variation of the flow and (q/2)-variation of its remainder
    against the driver (on a ≤257-node subgrid).
    """
    if check:
        problem.check()
    st = problem.step_times
    if store_times is None:
        keep = {0, st.size - 1}
    elif isinstance(store_times, str) and store_times == "steps":
        keep = set(range(st.size))
    else:
        keep = set(int(i) for i in locate_nodes(st, _as_times(store_times)))

    initial = problem.initial
    pos = initial.positions.copy()
    flows = [initial.with_positions(pos, time=st[0])] if 0 in keep else []
    times = [st[0]] if 0 in keep else []

    n_track = min(diagnostic_particles, initial.n_particles)
    if n_track:
        track_idx = np.linspace(0, initial.n_particles - 1, n_track).astype(int)
        unwrapped = np.empty((st.size, n_track, 2))
        wrapped = np.empty((st.size, n_track, 2))
        unwrapped[0] = wrapped[0] = pos[track_idx]

    for k in range(st.size - 1):
        new = davie_step(pos, st[k], st[k + 1], problem)
        if n_track:
            delta = _nearest_image(new[track_idx] - pos[track_idx])
            unwrapped[k + 1] = unwrapped[k] + delta
            wrapped[k + 1] = new[track_idx]
        pos = new
        if k + 1 in keep:
            flows.append(initial.with_positions(pos, time=st[k + 1]))
            times.append(st[k + 1])

    diagnostics = None
    if n_track:
        diagnostics = _diagnose(problem, unwrapped, wrapped, threshold)
    return FlowTrajectory(times=np.asarray(times), flows=flows,
                          diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# inverse flows
# ---------------------------------------------------------------------------

@dataclass
class InverseFlowResult:
    """Backward-solved inverse flow plus the measured round-trip defect."""

    flow: ParticleFlow
    composition_defect_mean: float | None = None
    composition_defect_max: float | None = None


def backward_problem(problem: FlowProblem, t: float | None = None,
                     start: ParticleFlow | None = None) -> FlowProblem:
    """The time-reversed problem on ``[0, t−t₀]``: drift ``−u(t−s, ·)`` and the
    reversed driver (same sign convention); solving it forward yields φ_t⁻¹."""
    st = problem.step_times
    t = float(st[-1]) if t is None else float(t)
    idx = int(locate_nodes(st, [t])[0])
    if idx == 0:
        raise GridError("inverse flow needs a positive time")
    fwd = problem.drift

    def bwd_velocity(s, positions):
        return -fwd.velocity(t - s, positions)

    lip = fwd.log_lipschitz
    if lip is None and isinstance(fwd, GridDrift):
        lip = fwd.measure_log_lipschitz()
    drift = CallableDrift(bwd_velocity, sup_norm=fwd.sup_norm,
                          log_lipschitz=lip,
                          time_span=(0.0, t - float(st[0])))
    drift.sup_overshoot = getattr(fwd, "sup_overshoot", 1.0)
    driver = DriverPair(problem.driver.sigma_fields,
                        reverse_rough_path(problem.driver.rough_path, t),
                        sign_convention=problem.driver.sign_convention)
    back_times = t - st[idx::-1]
    start = problem.initial if start is None else start
    init = ParticleFlow(start.labels, start.positions, start.weights,
                        direction="backward", time=0.0)
    return FlowProblem(drift, driver, init, back_times,
                       q_exponent=problem.q_exponent)


def solve_inverse_flow(problem: FlowProblem, t: float | None = None, *,
                       composition_check: bool = True,
                       check: bool = True) -> InverseFlowResult:
    """Solve backward to get ``φ_t⁻¹`` on the initial particles.

    ``t`` must be a step node and a node of the driver grid (the reversal
    pivots there); with ``composition_check`` the forward flow is also run and
    pushed through the backward one, reporting the torus distance
    ``φ_t⁻¹(φ_t(x)) − x`` over the ensemble.
    """
    st = problem.step_times
    t_val = float(st[-1]) if t is None else float(t)
    bwd = backward_problem(problem, t_val)
    inverse = solve_flow(bwd, check=check).final
    inverse = ParticleFlow(problem.initial.positions, inverse.positions,
                           problem.initial.weights, direction="backward",
                           time=t_val)
    if not composition_check:
        return InverseFlowResult(inverse)

    idx = int(locate_nodes(st, [t_val])[0])
    fwd_problem = FlowProblem(problem.drift, problem.driver, problem.initial,
                              st[:idx + 1], q_exponent=problem.q_exponent)
    forward = solve_flow(fwd_problem, check=False).final
    round_trip = solve_flow(backward_problem(problem, t_val, start=forward),
                            check=False).final
    defect = round_trip.displacement_from(problem.initial.positions)
    return InverseFlowResult(inverse, float(defect.mean()), float(defect.max()))


# ---------------------------------------------------------------------------
# the nonlocal (mean-field) flow
# ---------------------------------------------------------------------------

def solve_nonlocal_flow(w0: VorticityGrid, driver: DriverPair, step_times, *,
                        particles_per_side: int | None = None,
                        resolution: int | None = None,
                        interpolation: str = "cubic",
                        mollify_eta: float | None = None,
                        store_times=None, q_exponent: float | None = None,
                        drift_callback=None) -> FlowTrajectory:
    """Self-consistent flow whose drift is the Biot-Savart velocity of the
    transported vorticity.

    Each step deposits the particle weights, solves for the velocity
    spectrally (optionally mollifying the deposited field first), freezes that
    field over the step, and advances with :func:`davie_step`.
    ``drift_callback(t, velocity_grid)``, when given, observes every frozen
    drift field — the Euler front end uses it to collect snapshots.
    """
    N = w0.N if resolution is None else int(resolution)
    n_side = 2 * N if particles_per_side is None else int(particles_per_side)
    st = _as_times(step_times)
    initial = ParticleFlow.lattice(n_side, w0)
    problem = FlowProblem(None, driver, initial, st, q_exponent=q_exponent)

    if store_times is None:
        keep = {0, st.size - 1}
    elif isinstance(store_times, str) and store_times == "steps":
        keep = set(range(st.size))
    else:
        keep = set(int(i) for i in locate_nodes(st, _as_times(store_times)))

    pos = initial.positions.copy()
    flows = [initial.with_positions(pos, time=st[0])] if 0 in keep else []
    times = [st[0]] if 0 in keep else []
    for k in range(st.size - 1):
        w = deposit(pos, initial.weights, N)
        w = VorticityGrid(w.values - w.mean)  # keep Biot-Savart solvable
        if mollify_eta is not None:
            w = mollify(w, mollify_eta)
        u = biot_savart(w)
        if drift_callback is not None:
            drift_callback(st[k], u)
        problem.drift = GridDrift([st[k]], [u], interpolation=interpolation)
        pos = davie_step(pos, st[k], st[k + 1], problem)
        if k + 1 in keep:
            flows.append(initial.with_positions(pos, time=st[k + 1]))
            times.append(st[k + 1])
    return FlowTrajectory(times=np.asarray(times), flows=flows)


# ---------------------------------------------------------------------------
# measure preservation and stability diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyResult:
    """Aggregate χ² of cell occupancies against the uniform multinomial.

    One-sided: the flow of a uniform lattice should stay area-true, so only
    *excess* dispersion fails (under-dispersion is better than multinomial
    and passes).  ``threshold = dof + 3·√(2·dof)`` is the 3σ normal
    approximation of the χ² tail.
    """

    chi_squared: float
    dof: int
    threshold: float
    cells: int

    @property
    def passed(self) -> bool:
        return self.chi_squared <= self.threshold


def occupancy_statistic(positions, n_cells: int = 32) -> OccupancyResult:
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    n_p = pos.shape[0]
    if n_p < n_cells * n_cells:
        raise HypothesisError(f"need at least {n_cells * n_cells} particles "
                              f"for a {n_cells}×{n_cells} occupancy test")
    cells = np.floor(pos * (n_cells / TWO_PI)).astype(int) % n_cells
    counts = np.bincount(cells[:, 0] * n_cells + cells[:, 1],
                         minlength=n_cells * n_cells)
    expected = n_p / (n_cells * n_cells)
    chi2 = float(((counts - expected) ** 2).sum() / expected)
    dof = n_cells * n_cells - 1
    return OccupancyResult(chi_squared=chi2, dof=dof,
                           threshold=dof + 3.0 * math.sqrt(2.0 * dof),
                           cells=n_cells)


#: Frozen empirical constant for the Lagrangian stability bound.  Calibrated
#: by perturbing initial data, diffusion fields, drivers, and drifts one at a
#: time on desk-scale Brownian problems (shear diffusion, cellular drift,
#: T = 1): the worst measured ratio of sup-distance to the unit-constant
#: right-hand side was 0.32, so the unit constant already dominates with a
#: threefold margin.
LAGRANGIAN_STABILITY_CONSTANT = 1.0


def lagrangian_stability_bound(times, positions1, positions2, driver1, driver2,
                               *, sigma_diff_c3: float = 0.0,
                               u_diff_sup: float = 0.0,
                               q: float | None = None,
                               constant: float = LAGRANGIAN_STABILITY_CONSTANT
                               ) -> float:
    """Right-hand side of the two-solution stability estimate.

    Given two particle trajectories on a common time grid (arrays of shape
    ``(n_times, n_particles, 2)``, same labels), evaluates

        ``C·( d(0) + ‖σ¹−σ²‖_{C³} + ω_{Z¹−Z²}(0,T)^{1/(2q)}
             + ‖u¹−u²‖_∞·T + ∫₀ᵀ γ(d(r)) dr )``

    where ``d(r)`` is the sup over particles of the torus distance at time
    ``r``.  The measured ``sup_r d(r)`` should be dominated by this with the
    frozen constant.  ``driver1``/``driver2`` may be :class:`DriverPair` or
    bare rough paths; the driver-difference variation is evaluated on a
    subgrid of at most 129 nodes (grid-subordinate variation only grows with
    refinement, so this makes the bound *smaller*, never easier to satisfy).
    """
    t = _as_times(times)
    a = np.asarray(positions1, dtype=float)
    b = np.asarray(positions2, dtype=float)
    if a.shape != b.shape or a.shape[0] != t.size:
        raise GridError("trajectories must share one time grid and particle set")
    d = np.sqrt((_nearest_image(a - b) ** 2).sum(axis=-1)).max(axis=-1)
    rp1 = getattr(driver1, "rough_path", driver1)
    rp2 = getattr(driver2, "rough_path", driver2)
    q = max(rp1.p_exponent, rp2.p_exponent) if q is None else float(q)
    rp_times = rp1.times
    if rp_times.size > 129:
        stride = math.ceil((rp_times.size - 1) / 128)
        rp_times = np.unique(np.r_[rp_times[::stride], rp_times[-1]])
    omega_dz = difference_variation_control(rp1, rp2, rp_times)
    horizon = t[-1] - t[0]
    return constant * (d[0] + sigma_diff_c3
                       + omega_dz(rp_times[0], rp_times[-1]) ** (1.0 / (2.0 * q))
                       + u_diff_sup * horizon
                       + float(np.trapezoid(gamma(d), t)))

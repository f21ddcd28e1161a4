"""Stochastic reach-tubes around closed-loop expert trajectories.

A tube is a per-step sequence of ellipsoids ``{x : ||A (x - c)|| <= r}``
centred on the nominal trajectory from the centre of the initial ball.
Traces are sampled from the surface of that ball in batches until the
stochastic Lipschitz caps around the sampled initial points cover at least
``1 - gamma`` of the sphere at every step, or the batch budget runs out.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .envs import batch_rollout
from .errors import (
    AlignmentError,
    CapUnderflow,
    CoverageNotReached,
    DegenerateCap,
    InsufficientSamples,
    ParseError,
    ShapeError,
    ValidationError,
)
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TubeSlice:
    c: np.ndarray
    r: float
    A: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        a = np.asarray(self.A, dtype=float)
        if a.shape != (c.size, c.size):
            raise ValidationError(f"metric shape {a.shape} does not match center dimension {c.size}")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def dim(self):
        return self.c.size

    def validate(self):
        if not (np.isfinite(self.r) and self.r > 0):
            raise ValidationError(f"slice radius must be positive, got {self.r}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.c))):
            raise ValidationError("slice has non-finite entries")
        cond = np.linalg.cond(self.A)
        if not np.isfinite(cond) or cond * np.finfo(float).eps >= 1.0:
            raise ValidationError(f"slice metric is not invertible (condition number {cond:.3g})")

    def volume_proxy(self):
        """Volume up to the unit-ball constant: r^n / |det A|."""
        return self.r ** self.dim / abs(np.linalg.det(self.A))


@dataclass(eq=False)
class ReachTube:
    slices: list
    gamma: float
    mu: float
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValidationError("gamma must lie in (0, 1)")
        if self.mu < 1:
            raise ValidationError("mu must be >= 1")

    def __len__(self):
        return len(self.slices)

    @property
    def dim(self):
        return self.slices[0].dim

    @property
    def horizon(self):
        return len(self.slices) - 1

    @property
    def taus(self):
        return np.array([s.tau for s in self.slices])

    def validate(self):
        if not self.slices:
            raise ValidationError("tube has no slices")
        for s in self.slices:
            s.validate()
        taus = self.taus
        if taus[0] != 0.0:
            raise ValidationError("first slice must have tau = 0")
        if len(taus) > 1:
            gaps = np.diff(taus)
            if np.any(gaps <= 0) or not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-12):
                raise ValidationError("slice times must be strictly increasing with uniform spacing")

    def membership(self, t, state):
        return membership(self.slices[t], state)

    def trajectory_membership(self, states):
        """rho for ``states[k]`` against slice k, for k up to the shorter length."""
        states = np.asarray(states, dtype=float)
        k = min(len(states), len(self.slices))
        return np.array([membership(self.slices[i], states[i]) for i in range(k)])


@dataclass(frozen=True)
class TubeConfig:
    gamma: float = 0.2
    mu: float = 1.1
    initial_radius: float = 0.1
    batch_size: int = 512
    max_batches: int = 8
    coverage_samples: int = 10_000
    ellipsoids: bool = True
    include_action: bool = False
    action_noise_sigma2: float = 0.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.mu < 1:
            raise ValueError("mu must be >= 1")
        if self.initial_radius <= 0:
            raise ValueError("initial_radius must be positive")
        if self.batch_size < 2 or self.max_batches < 1:
            raise ValueError("need batch_size >= 2 and max_batches >= 1")
        if self.coverage_samples < 100:
            raise ValueError("coverage_samples must be >= 100")
        if self.action_noise_sigma2 < 0:
            raise ValueError("action_noise_sigma2 must be nonnegative")


@dataclass(eq=False)
class SampleSet:
    """Closed-loop traces from initial states on the sphere around ``x0``."""

    initial: np.ndarray  # (N, n)
    traces: np.ndarray  # (N, T+1, d)
    nominal: np.ndarray  # (T+1, d)
    times: np.ndarray  # (T+1,)

    def __post_init__(self):
        if self.traces.ndim != 3 or self.traces.shape[1:] != self.nominal.shape:
            raise AlignmentError("every trace must share the nominal time grid")

    def __len__(self):
        return len(self.traces)

    def distances(self):
        """d_t(x) for every trace and step, shape (N, T+1)."""
        return np.linalg.norm(self.traces - self.nominal[None], axis=-1)

    def max_perturbation(self):
        return self.distances().max(axis=0)

    def extend(self, other):
        if other.traces.shape[1:] != self.traces.shape[1:] or not np.array_equal(other.times, self.times):
            raise AlignmentError("cannot merge sample sets on different time grids")
        return SampleSet(
            np.concatenate([self.initial, other.initial]),
            np.concatenate([self.traces, other.traces]),
            self.nominal,
            self.times,
        )


# --- sampling and per-sample statistics ----------------------------------------

def sample_initial_surface(x0, radius, n, rng):
    """``n`` points uniform on the sphere of ``radius`` around ``x0``."""
    if radius <= 0 or n < 1:
        raise ValueError("need radius > 0 and n >= 1")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    g = rng.standard_normal((n, x0.size))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian draw has probability zero but would divide by zero
    g[norms[:, 0] == 0] = 1.0
    norms[norms == 0] = np.sqrt(x0.size)
    return x0 + radius * g / norms


def perturbation_distance(trace, nominal, t):
    """||chi(t, x) - chi(t, x0)|| between two trajectories sharing a time grid."""
    if len(trace.times) != len(nominal.times) or not np.allclose(trace.times, nominal.times, rtol=0, atol=1e-12):
        raise AlignmentError("trace and nominal are on different time grids")
    return float(np.linalg.norm(trace.states[t] - nominal.states[t]))


def _lipschitz_stats(d, gamma):
    """Per-step (lambda, delta_lambda) from a distance table d of shape (N, T+1)."""
    d0 = d[:, :1]
    if np.any(d0 <= 0):
        raise InsufficientSamples("initial perturbations must be positive to form Lipschitz ratios")
    ratios = d / d0
    lam = ratios.mean(axis=0)
    upper = np.quantile(ratios, 1.0 - gamma, axis=0)
    return lam, np.maximum(upper - lam, 0.0)


def estimate_local_lipschitz(sample_set, t, gamma=0.2):
    """Empirical expansion ratio d_t/d_0 (mean) and its upper-quantile spread."""
    if len(sample_set) < 2:
        raise InsufficientSamples(f"need at least 2 traces, got {len(sample_set)}")
    d = sample_set.distances()[:, [0, t]]
    lam, dlam = _lipschitz_stats(d, gamma)
    return float(lam[1]), float(dlam[1])


def _cap_radii(lam, dlam, slack):
    # rationalised root of dlam*r^2 + lam*r = slack; exact, and reduces to
    # slack/lam as dlam -> 0 without cancellation
    return 2.0 * slack / (lam + np.sqrt(lam * lam + 4.0 * dlam * slack))


def cap_radius(lam, delta_lambda, mu, m_bar, d):
    """Radius of the stochastic cap around one sampled initial state."""
    slack = mu * m_bar - d
    if slack < 0:
        raise CapUnderflow(f"sample distance {d} exceeds the inflated bound {mu * m_bar}")
    if lam < 0 or delta_lambda < 0:
        raise ValueError("Lipschitz estimates must be nonnegative")
    if lam == 0 and delta_lambda == 0:
        raise DegenerateCap("both Lipschitz estimates are zero")
    if slack == 0:
        return 0.0
    return float(_cap_radii(lam, delta_lambda, slack))


# --- coverage of the initial sphere -----------------------------------------------

def _coverage_profile(centers, radii, sphere_center, sphere_radius, probes):
    """Fraction of ``probes`` covered by caps, for each row of ``radii`` (T, N)."""
    n_caps = len(centers)
    k = min(n_caps, 32)
    tree = cKDTree(centers)
    dk, ik = tree.query(probes, k=k)
    dk = dk.reshape(len(probes), k)
    ik = ik.reshape(len(probes), k)
    d_far = dk[:, -1]
    out = np.empty(len(radii))
    for t, rt in enumerate(radii):
        r_max = rt.max()
        if r_max >= 2.0 * sphere_radius:
            out[t] = 1.0
            continue
        covered = (dk <= rt[ik]).any(axis=1)
        if k < n_caps:
            # caps beyond the k nearest can only matter if they are wider than the k-th distance
            rest = np.flatnonzero(~covered & (d_far < r_max))
            if rest.size:
                wide = np.flatnonzero(rt > d_far[rest].min())
                for lo in range(0, rest.size, 512):
                    chunk = rest[lo:lo + 512]
                    dist = np.linalg.norm(probes[chunk, None, :] - centers[None, wide, :], axis=-1)
                    covered[chunk] = (dist <= rt[wide][None, :]).any(axis=1)
        out[t] = covered.mean()
    return out


def surface_coverage(cap_centers, cap_radii, sphere_center, sphere_radius, coverage_samples, rng):
    """Monte Carlo fraction of the sphere surface inside the union of caps.

    Caps are Euclidean (chord) balls around points on the sphere.
    """
    if coverage_samples < 100:
        raise ValueError("coverage_samples must be >= 100")
    centers = np.asarray(cap_centers, dtype=float)
    if centers.size == 0:
        return 0.0
    centers = np.atleast_2d(centers)
    radii = np.asarray(cap_radii, dtype=float).reshape(1, -1)
    probes = sample_initial_surface(sphere_center, sphere_radius, coverage_samples, rng)
    return float(_coverage_profile(centers, radii, sphere_center, sphere_radius, probes)[0])


# --- ellipsoid fitting -------------------------------------------------------------

def fit_slice(points, nominal_center, mu, tau=0.0, ellipsoid=True, degenerate_radius=1e-6):
    """Bounding ellipsoid around ``nominal_center`` for the sampled states.

    The metric whitens the second moment of the offsets (PCA rotation plus
    per-axis scaling) and is rescaled so the farthest sample maps to the
    unit sphere; the radius then applies the tightness factor ``mu``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    c = np.asarray(nominal_center, dtype=float).reshape(-1)
    if len(pts) < 2:
        raise InsufficientSamples("need at least 2 points to fit a slice")
    offsets = pts - c
    dim = c.size
    if not np.any(offsets):
        return TubeSlice(c, degenerate_radius, np.eye(dim), tau)
    if ellipsoid:
        second = offsets.T @ offsets / len(pts)
        second += (1e-9 * np.trace(second) / dim) * np.eye(dim)
        w, v = np.linalg.eigh(second)
        metric = (v / np.sqrt(w)) @ v.T
    else:
        metric = np.eye(dim)
    scale = np.linalg.norm(offsets @ metric.T, axis=1).max()
    metric = metric / scale
    r = mu * np.linalg.norm(offsets @ metric.T, axis=1).max()
    return TubeSlice(c, r, metric, tau)


def membership(slice_, state):
    """Normalised ellipsoid distance ||A (s - c)|| / r; <= 1 means inside."""
    s = np.asarray(state, dtype=float)
    if s.shape[-1] != slice_.dim:
        raise ShapeError(f"state dimension {s.shape[-1]} does not match slice dimension {slice_.dim}")
    rho = np.linalg.norm((s - slice_.c) @ slice_.A.T, axis=-1) / slice_.r
    return float(rho) if np.ndim(rho) == 0 else rho


# --- construction --------------------------------------------------------------------

def _augment(states, expert, include_action):
    if not include_action:
        return states
    return np.concatenate([states, expert(states)], axis=-1)


def _rollout_states(system, expert, starts, horizon, include_action, noise_sigma2=0.0, rng=None):
    states, _, _, _ = batch_rollout(system, expert, starts, steps=horizon, noise_sigma2=noise_sigma2, rng=rng)
    return _augment(states, expert, include_action)


def build_tube(system, expert, config=None, rng_seed=0, horizon=None, raise_on_partial=True):
    """Sample expert traces until the coverage target holds, then fit slices.

    Raises ``CoverageNotReached`` (carrying the partial tube) when the batch
    budget runs out first, unless ``raise_on_partial`` is False.
    """
    config = config or TubeConfig()
    horizon = system.horizon if horizon is None else int(horizon)
    x0 = system.x0
    sample_rng = make_rng(rng_seed, "tube", "surface")
    probe_rng = make_rng(rng_seed, "tube", "coverage")
    probes = sample_initial_surface(x0, config.initial_radius, config.coverage_samples, probe_rng)

    nominal = _rollout_states(system, expert, x0[None], horizon, config.include_action)[0]
    times = system.dt * np.arange(horizon + 1)
    samples = None
    target = 1.0 - config.gamma
    coverage = np.zeros(horizon)
    for batch in range(config.max_batches):
        starts = sample_initial_surface(x0, config.initial_radius, config.batch_size, sample_rng)
        traces = _rollout_states(system, expert, starts, horizon, config.include_action,
                                 config.action_noise_sigma2, make_rng(rng_seed, "tube", "noise", batch))
        new = SampleSet(starts, traces, nominal, times)
        samples = new if samples is None else samples.extend(new)
        coverage = _step_coverage(samples, config, probes)
        log.info("batch %d: %d traces, min coverage %.4f", batch + 1, len(samples), coverage.min(initial=1.0))
        if coverage.size == 0 or coverage.min() >= target:
            break

    min_cov = float(coverage.min(initial=1.0))
    slices = [
        fit_slice(samples.traces[:, t], nominal[t], config.mu, tau=times[t], ellipsoid=config.ellipsoids,
                  degenerate_radius=1e-6 * config.initial_radius)
        for t in range(horizon + 1)
    ]
    source = {
        "system": system.id,
        "expert": getattr(expert, "kind", type(expert).__name__),
        "seed": int(rng_seed),
        "n_traces": len(samples),
        "min_coverage": min_cov,
        "initial_radius": config.initial_radius,
        "ellipsoids": config.ellipsoids,
        "include_action": config.include_action,
        "action_noise_sigma2": config.action_noise_sigma2,
    }
    tube = ReachTube(slices, config.gamma, config.mu, source)
    if min_cov < target and raise_on_partial:
        raise CoverageNotReached(tube, min_cov, len(samples))
    return tube


def _step_coverage(samples, config, probes):
    """Cap-union coverage for steps 1..T (step 0 is the initial ball itself)."""
    d = samples.distances()
    lam, dlam = _lipschitz_stats(d, config.gamma)
    m_bar = d.max(axis=0)
    slack = config.mu * m_bar[None, :] - d
    if np.any(slack < 0):
        # only possible through rounding; recompute the bound from the same table once
        m_bar = np.max(d, axis=0)
        slack = np.maximum(config.mu * m_bar[None, :] - d, 0.0)
    lam, dlam, slack = lam[1:], dlam[1:], slack[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        radii = _cap_radii(lam[None, :], dlam[None, :], slack)
    # zero Lipschitz estimates mean every trace sits on the nominal: full cover
    radii = np.where((lam == 0) & (dlam == 0), np.inf, radii)
    return _coverage_profile(samples.initial, radii.T, samples.nominal[0], config.initial_radius, probes)


def containment_fraction(tube, trajectories):
    """Fraction of state sequences whose membership is <= 1 at every slice."""
    inside = 0
    for states in trajectories:
        inside += bool(np.all(tube.trajectory_membership(states) <= 1.0))
    return inside / len(trajectories)


# --- serialisation ----------------------------------------------------------------------

def tube_to_dict(tube):
    return {
        "gamma": tube.gamma,
        "mu": tube.mu,
        "source": tube.source,
        "slices": [
            {"tau": s.tau, "c": s.c.tolist(), "r": s.r, "A": s.A.tolist()}
            for s in tube.slices
        ],
    }


def serialize_tube(tube):
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(tube_to_dict(tube), indent=None, separators=(",", ":")).encode("utf-8")


def deserialize_tube(payload):
    text = payload.decode("utf-8") if isinstance(payload, (bytes, bytearray)) else payload
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, len(text[:exc.pos].encode("utf-8"))) from exc
    try:
        slices = [TubeSlice(np.array(s["c"], dtype=float), s["r"], np.array(s["A"], dtype=float), s["tau"])
                  for s in d["slices"]]
        tube = ReachTube(slices, float(d["gamma"]), float(d["mu"]), d.get("source", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed tube document: {exc}") from exc
    tube.validate()
    return tube


def save_tube(path, tube):
    with open(path, "wb") as fh:
        fh.write(serialize_tube(tube))


def load_tube(path):
    with open(path, "rb") as fh:
        return deserialize_tube(fh.read())

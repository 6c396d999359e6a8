"""Threat model geometry and the inner/boundary/reference point samplers.

All samplers are pure functions of (inputs, seed): identical seeds
reproduce identical draws bitwise. Points are clipped into the input
domain after perturbation; distance checks use the l-infinity norm, the
only norm in scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BALL_TOL = 1e-12  # slack for d(x_c, x) <= eps checks after float arithmetic


class AttemptsExhausted(RuntimeError):
    """Rejection sampling ran out of redraws before finding n valid points."""

    def __init__(self, found: int, wanted: int, max_attempts: int):
        super().__init__(
            f"found {found}/{wanted} points within {max_attempts} attempts each")
        self.found = found
        self.wanted = wanted
        self.max_attempts = max_attempts


@dataclass(frozen=True)
class ThreatModel:
    """l-infinity ball of radius epsilon intersected with a box domain."""

    epsilon: float
    lo: float = 0.0
    hi: float = 1.0
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}; only linf is in scope")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.lo < self.hi:
            raise ValueError("domain must satisfy lo < hi")

    def distance(self, a, b) -> float:
        return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.asarray(a).size else 0.0

    def clip_domain(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def clip_ball(self, x, center) -> np.ndarray:
        return np.clip(x, center - self.epsilon, center + self.epsilon)

    def in_domain(self, x, tol: float = BALL_TOL) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def contains(self, center, x, tol: float = BALL_TOL) -> bool:
        return self.distance(center, x) <= self.epsilon + tol

    def project(self, x, center) -> np.ndarray:
        """Nearest feasible point: domain clip then ball clip (stays in both)."""
        return self.clip_ball(self.clip_domain(x), center)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_inner(x_c, tm: ThreatModel, xi: float, n: int, rng_seed) -> np.ndarray:
    """Draw n points uniformly from the l-inf box of radius xi*epsilon.

    The clean sample itself is not included; callers prepend it. Points are
    clipped to the domain, and every draw stays strictly inside xi*epsilon.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    if n < 0:
        raise ValueError("n must be non-negative")
    if tm.epsilon <= 0:
        raise ValueError("sampling requires epsilon > 0")
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = _rng(rng_seed)
    radius = xi * tm.epsilon
    delta = rng.uniform(-radius, radius, size=(n, x_c.shape[0]))
    # uniform() can return the low endpoint exactly; pull boundary draws
    # inward so the inner set stays strictly inside the xi*eps box.
    delta = np.clip(delta, np.nextafter(-radius, 0.0), np.nextafter(radius, 0.0))
    return tm.clip_domain(x_c + delta)


def _corner_point(x_c, tm: ThreatModel, radius: float, rng: np.random.Generator) -> np.ndarray:
    signs = rng.integers(0, 2, size=x_c.shape[0]) * 2.0 - 1.0
    return tm.clip_domain(x_c + signs * radius)


def _sphere_point(x_c, tm: ThreatModel, radius: float, rng: np.random.Generator) -> np.ndarray:
    # Uniform on the l-inf sphere surface: one coordinate pinned at +-radius,
    # the rest uniform inside.
    d = x_c.shape[0]
    delta = rng.uniform(-radius, radius, size=d)
    pin = int(rng.integers(0, d))
    delta[pin] = radius if rng.integers(0, 2) else -radius
    return tm.clip_domain(x_c + delta)


_BOUNDARY_MODES = {"corner": _corner_point, "sphere": _sphere_point}


def sample_boundary_corner(x_c, tm: ThreatModel, radius_multiplier: float, n: int,
                           rng_seed, mode: str = "corner") -> np.ndarray:
    """Draw n boundary points at distance radius_multiplier*epsilon.

    Default mode perturbs every coordinate by +-(multiplier*eps) with
    independent random signs (box corners); "sphere" pins a single
    coordinate at the radius instead. Points are clipped to the domain.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if radius_multiplier <= 0:
        raise ValueError("radius_multiplier must be positive")
    if tm.epsilon <= 0:
        raise ValueError("sampling requires epsilon > 0")
    draw = _BOUNDARY_MODES[mode]
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = _rng(rng_seed)
    radius = radius_multiplier * tm.epsilon
    out = np.empty((n, x_c.shape[0]))
    for i in range(n):
        out[i] = draw(x_c, tm, radius, rng)
    return out


def sample_boundary_rejection(x_c, tm: ThreatModel, radius_multiplier: float, n: int,
                              predicate, max_attempts: int, rng_seed,
                              mode: str = "corner") -> np.ndarray:
    """Like sample_boundary_corner but redraw each point until predicate(p).

    Raises AttemptsExhausted (carrying the count found so far) when any
    single point needs more than max_attempts redraws; callers skip the
    sample in that case.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    if n < 0:
        raise ValueError("n must be non-negative")
    if radius_multiplier <= 0:
        raise ValueError("radius_multiplier must be positive")
    draw = _BOUNDARY_MODES[mode]
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = _rng(rng_seed)
    radius = radius_multiplier * tm.epsilon
    out = np.empty((n, x_c.shape[0]))
    for i in range(n):
        for _ in range(max_attempts):
            p = draw(x_c, tm, radius, rng)
            if predicate(p):
                out[i] = p
                break
        else:
            raise AttemptsExhausted(i, n, max_attempts)
    return out


@dataclass(frozen=True)
class BundleParams:
    xi: float = 0.95
    eta: float = 1.75
    n_inner: int = 999
    n_boundary: int = 1
    n_reference: int = 0

    def __post_init__(self):
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if not self.eta > 1.0:
            raise ValueError("eta must exceed 1")
        if min(self.n_inner, self.n_boundary, self.n_reference) < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class SampleBundle:
    """The point sets drawn around one clean sample.

    inner[0] is always the clean sample itself.
    """

    x_clean: np.ndarray
    inner: np.ndarray        # (n_inner + 1, d)
    boundary: np.ndarray     # (n_boundary, d)
    reference: np.ndarray    # (n_reference, d), possibly empty
    params: BundleParams


def build_bundle(x_c, tm: ThreatModel, params: BundleParams, rng_seed,
                 plant_predicate=None, max_attempts: int = 200,
                 boundary_mode: str = "corner") -> SampleBundle:
    """Draw a full sample bundle; plant_predicate gates boundary/reference
    points via rejection sampling (detector tests).

    Raises AttemptsExhausted when rejection sampling runs dry.
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = _rng(rng_seed)
    inner = sample_inner(x_c, tm, params.xi, params.n_inner, rng)
    if plant_predicate is None:
        boundary = sample_boundary_corner(x_c, tm, 1.0, params.n_boundary, rng,
                                          mode=boundary_mode)
        reference = sample_boundary_corner(x_c, tm, params.eta, params.n_reference,
                                           rng, mode=boundary_mode)
    else:
        boundary = sample_boundary_rejection(x_c, tm, 1.0, params.n_boundary,
                                             plant_predicate, max_attempts, rng,
                                             mode=boundary_mode)
        reference = sample_boundary_rejection(x_c, tm, params.eta, params.n_reference,
                                              plant_predicate, max_attempts, rng,
                                              mode=boundary_mode)
    return SampleBundle(x_c, np.vstack([x_c[None, :], inner]), boundary,
                        reference, params)


def validate_bundle(bundle: SampleBundle, tm: ThreatModel) -> str | None:
    """Return a skip reason when domain clipping broke the construction.

    A boundary point whose post-clip distance fell below xi*eps would
    erase the inner/boundary margin the test depends on; a reference point
    pulled inside the ball would no longer be a non-adversarial anchor.
    """
    x_c = bundle.x_clean
    xi_radius = bundle.params.xi * tm.epsilon
    for p in bundle.boundary:
        d = tm.distance(x_c, p)
        if d < xi_radius - BALL_TOL or d > tm.epsilon + BALL_TOL:
            return "clipped-boundary"
    for p in bundle.reference:
        if tm.distance(x_c, p) <= tm.epsilon + BALL_TOL:
            return "clipped-reference"
    return None

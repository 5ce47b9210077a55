"""Manifold primitives and order-violation energies.

Three embedding flavors share a single energy interface:

- ``oe``: order embeddings in Euclidean space. The energy is the hinge
  ``||max(0, x - y)||`` which vanishes exactly when ``y`` dominates ``x``
  coordinatewise (reversed product order).
- ``ec``: Euclidean entailment cones. Each point ``x`` carries a cone of
  half-angle ``psi(x) = arcsin(K / ||x||)``; the energy is the angle by
  which ``y`` falls outside the cone, ``max(0, Xi(x, y) - psi(x))``.
- ``hc``: entailment cones on the open unit (Poincare) ball, with
  ``psi(x) = arcsin(K (1 - ||x||^2) / ||x||)`` and the hyperbolic axis
  angle ``Xi``.

Scalar functions validate their inputs and raise :class:`GeometryError`
on domain violations. The batch kernels (``energies``,
``energies_and_gradients``, ``project_rows``, ``exp_map_rows``) clamp
instead of raising; they are the hot path used by the trainers, which
keep all points inside the cone domain by projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Guard for denominators and for the sqrt in d(arccos)/dx.
_TINY = 1e-15
# Padding used when clipping norms back into the cone domain.
DOMAIN_PAD = 1e-5
# Cap on per-pair gradient row norms. The aperture derivative diverges as a
# point approaches the domain floor and the axis-angle derivative at the
# arccos clamp; one such spike poisons Adam's second moments for thousands
# of steps. In-domain gradients away from these singular shells stay well
# under the cap.
GRAD_CLIP = 50.0

KIND_TAGS = {"oe": 0, "ec": 1, "hc": 2}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class GeometryError(ValueError):
    """Domain violation or singular configuration in a geometric kernel."""


@dataclass(frozen=True)
class ConeParams:
    """Embedding-flavor parameters: kind tag, aperture constant, options.

    ``epsilon`` is the smallest apex norm keeping the aperture defined:
    ``K`` for Euclidean cones (arcsin argument <= 1) and the positive root
    of ``K (1 - r^2) = r`` for hyperbolic cones. Order embeddings have no
    domain floor.
    """

    kind: str = "ec"
    k: float = 0.1
    oe_squared: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KIND_TAGS:
            raise GeometryError(f"unknown geometry kind {self.kind!r}")
        if self.kind != "oe" and self.k <= 0:
            raise GeometryError("aperture constant K must be positive")

    @property
    def epsilon(self) -> float:
        if self.kind == "ec":
            return self.k
        if self.kind == "hc":
            return (-1.0 + math.sqrt(1.0 + 4.0 * self.k * self.k)) / (2.0 * self.k)
        return 0.0

    @property
    def norm_max(self) -> float:
        """Largest admissible norm (unit ball for both cone flavors)."""
        return math.inf if self.kind == "oe" else 1.0


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise GeometryError(f"{name} must be a 1-D vector, got shape {v.shape}")
    return v


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.shape != yv.shape:
        raise GeometryError(f"dimension mismatch: {xv.shape} vs {yv.shape}")
    return xv, yv


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------

def oe_energy(x, y, squared: bool = False) -> float:
    """Order-violation energy ``||max(0, x - y)||``.

    Zero exactly when every coordinate of ``y`` is >= the matching
    coordinate of ``x``. ``squared`` switches to the squared norm.
    """
    xv, yv = _pair(x, y)
    d = np.maximum(xv - yv, 0.0)
    sq = float(np.dot(d, d))
    return sq if squared else math.sqrt(sq)


def euclid_xi(x, y) -> float:
    """Angle at ``x`` between the cone axis (direction of ``x``) and ``y``."""
    xv, yv = _pair(x, y)
    nx = float(np.linalg.norm(xv))
    dxy = float(np.linalg.norm(xv - yv))
    if nx < _TINY:
        raise GeometryError("cone axis undefined at the origin")
    if dxy < _TINY:
        raise GeometryError("axis angle undefined for y == x")
    b = float(np.dot(yv, yv))
    a = nx * nx
    arg = (b - a - dxy * dxy) / (2.0 * nx * dxy)
    return float(math.acos(min(1.0, max(-1.0, arg))))


def euclid_aperture(x, p: ConeParams) -> float:
    """Cone half-angle ``arcsin(K / ||x||)``; requires ``||x|| >= K``."""
    nx = float(np.linalg.norm(_as_vector(x, "x")))
    if nx < p.k:
        raise GeometryError(f"norm {nx:.6g} below aperture domain floor {p.k:.6g}")
    return float(math.asin(min(1.0, p.k / nx)))


def hyper_aperture(x, p: ConeParams) -> float:
    """Cone half-angle ``arcsin(K (1 - ||x||^2) / ||x||)`` on the ball."""
    nx = float(np.linalg.norm(_as_vector(x, "x")))
    if nx >= 1.0:
        raise GeometryError("point not inside the unit ball")
    eps = p.epsilon
    if nx < eps - 1e-12:
        raise GeometryError(f"norm {nx:.6g} below aperture domain floor {eps:.6g}")
    arg = p.k * (1.0 - nx * nx) / nx
    return float(math.asin(min(1.0, arg)))


def poincare_distance(x, y) -> float:
    """Geodesic distance on the Poincare ball."""
    xv, yv = _pair(x, y)
    nx2 = float(np.dot(xv, xv))
    ny2 = float(np.dot(yv, yv))
    if nx2 >= 1.0 or ny2 >= 1.0:
        raise GeometryError("points must lie strictly inside the unit ball")
    d2 = float(np.dot(xv - yv, xv - yv))
    arg = 1.0 + 2.0 * d2 / ((1.0 - nx2) * (1.0 - ny2))
    return float(math.acosh(max(1.0, arg)))


def hyper_xi(x, y) -> float:
    """Angle at ``x`` between the hyperbolic cone axis and the geodesic to ``y``."""
    xv, yv = _pair(x, y)
    a = float(np.dot(xv, xv))
    b = float(np.dot(yv, yv))
    if a >= 1.0 or b >= 1.0:
        raise GeometryError("points must lie strictly inside the unit ball")
    nx = math.sqrt(a)
    dxy = float(np.linalg.norm(xv - yv))
    if nx < _TINY:
        raise GeometryError("cone axis undefined at the origin")
    if dxy < _TINY:
        raise GeometryError("axis angle undefined for y == x")
    s = float(np.dot(xv, yv))
    num = s * (1.0 + a) - a * (1.0 + b)
    den = nx * dxy * math.sqrt(max(1.0 + a * b - 2.0 * s, _TINY))
    arg = num / max(den, _TINY)
    return float(math.acos(min(1.0, max(-1.0, arg))))


def cone_energy(x, y, p: ConeParams) -> float:
    """Angular cone violation ``max(0, Xi(x, y) - psi(x))``.

    Dispatches the axis angle and aperture by geometry; ``oe`` falls back
    to the order-embedding hinge so that all flavors share one entry point.
    """
    if p.kind == "oe":
        return oe_energy(x, y, squared=p.oe_squared)
    if p.kind == "ec":
        return max(0.0, euclid_xi(x, y) - euclid_aperture(x, p))
    return max(0.0, hyper_xi(x, y) - hyper_aperture(x, p))


def exp_map(x, v) -> np.ndarray:
    """Exponential map on the Poincare ball at ``x`` applied to tangent ``v``.

    At the origin this reduces to ``tanh(||v||) * v / ||v||``. The output is
    always strictly inside the ball; ``v = 0`` returns ``x`` exactly.
    """
    xv, vv = _pair(x, v)
    nx2 = float(np.dot(xv, xv))
    if nx2 >= 1.0:
        raise GeometryError("base point must lie strictly inside the unit ball")
    nv = float(np.linalg.norm(vv))
    if nv == 0.0:
        return xv.copy()
    lam = 2.0 / (1.0 - nx2)
    # sinh/cosh overflow around 710; the point saturates at the boundary
    # long before that, so cap the argument.
    t = min(lam * nv, 300.0)
    s = math.sinh(t)
    c = math.cosh(t)
    vh = vv / nv
    xdv = float(np.dot(xv, vh))
    q = 1.0 + (lam - 1.0) * c + lam * s * xdv
    out = (xv * (lam * (c + s * xdv)) + vh * s) / q
    n = float(np.linalg.norm(out))
    if n >= 1.0:
        out *= (1.0 - 1e-12) / n
    return out


def riemannian_rescale(u, g) -> np.ndarray:
    """Euclidean-to-Riemannian gradient rescale on the ball.

    Multiplies by ``(1/lambda_u)^2 = ((1 - ||u||^2) / 2)^2``, the inverse
    of the conformal metric factor squared.
    """
    uv, gv = _pair(u, g)
    nu2 = float(np.dot(uv, uv))
    if nu2 >= 1.0:
        raise GeometryError("point must lie strictly inside the unit ball")
    return gv * ((1.0 - nu2) / 2.0) ** 2


def project_to_domain(x, p: ConeParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Clip a point's norm into the cone domain, keeping its direction.

    Norms are forced into ``[epsilon + pad, norm_max - pad]`` with
    ``pad = 1e-5``. A zero vector gets a random direction (from ``rng``,
    or a fixed-seed generator) at the lower bound. Order embeddings are
    unconstrained and pass through unchanged.
    """
    xv = _as_vector(x, "x")
    if p.kind == "oe":
        return xv.copy()
    lo = p.epsilon + DOMAIN_PAD
    hi = p.norm_max - DOMAIN_PAD
    n = float(np.linalg.norm(xv))
    if n < _TINY:
        if rng is None:
            rng = np.random.default_rng(0)
        d = rng.standard_normal(xv.shape[0])
        while float(np.linalg.norm(d)) < _TINY:
            d = rng.standard_normal(xv.shape[0])
        return d * (lo / float(np.linalg.norm(d)))
    if n < lo:
        return xv * (lo / n)
    if n > hi:
        return xv * (hi / n)
    return xv.copy()


def energy_gradients(x, y, p: ConeParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients ``(dE/dx, dE/dy)`` of the pair energy.

    The hinge subgradient at kinks is zero, so order-satisfied pairs are
    stationary.
    """
    xv, yv = _pair(x, y)
    _, gx, gy = energies_and_gradients(xv[None, :], yv[None, :], p)
    return gx[0], gy[0]


# ---------------------------------------------------------------------------
# Batch kernels
# ---------------------------------------------------------------------------

def _rows(a) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    return m


def energies(X, Y, p: ConeParams) -> np.ndarray:
    """Pair energies for row-aligned point batches (n, d) -> (n,)."""
    X, Y = _rows(X), _rows(Y)
    if p.kind == "oe":
        d = np.maximum(X - Y, 0.0)
        sq = np.einsum("ij,ij->i", d, d)
        return sq if p.oe_squared else np.sqrt(sq)
    if p.kind == "ec":
        xi, _ = _euclid_xi_batch(X, Y)
        psi = np.arcsin(np.clip(p.k / _safe(np.linalg.norm(X, axis=1)), -1.0, 1.0))
        return np.maximum(0.0, xi - psi)
    xi, _ = _hyper_xi_batch(X, Y)
    nx = _safe(np.linalg.norm(X, axis=1))
    psi = np.arcsin(np.clip(p.k * (1.0 - nx * nx) / nx, -1.0, 1.0))
    return np.maximum(0.0, xi - psi)


def _safe(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, _TINY)


def _clip_rows(g: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(g, axis=1)
    over = norms > GRAD_CLIP
    if np.any(over):
        g = g.copy()
        g[over] *= (GRAD_CLIP / norms[over])[:, None]
    return g


def _euclid_xi_batch(X, Y):
    """Axis angles and intermediates for the Euclidean cone batch."""
    diff = X - Y
    a = np.einsum("ij,ij->i", X, X)
    b = np.einsum("ij,ij->i", Y, Y)
    m = np.einsum("ij,ij->i", diff, diff)
    nx = _safe(np.sqrt(a))
    dxy = _safe(np.sqrt(m))
    u = 0.5 * (b - a - m)  # equals <x, y> - ||x||^2
    v = nx * dxy
    c = np.clip(u / _safe(v), -1.0, 1.0)
    xi = np.arccos(c)
    return xi, (diff, a, nx, dxy, u, v, c)


def _hyper_xi_batch(X, Y):
    """Axis angles and intermediates for the hyperbolic cone batch."""
    a = np.einsum("ij,ij->i", X, X)
    b = np.einsum("ij,ij->i", Y, Y)
    s = np.einsum("ij,ij->i", X, Y)
    m = a + b - 2.0 * s
    g = np.maximum(1.0 + a * b - 2.0 * s, _TINY)
    num = s * (1.0 + a) - a * (1.0 + b)
    P = _safe(a * m * g)
    D = np.sqrt(P)
    c = np.clip(num / D, -1.0, 1.0)
    xi = np.arccos(c)
    return xi, (a, b, s, m, g, num, P, D, c)


def energies_and_gradients(X, Y, p: ConeParams):
    """Energies plus analytic gradients for row-aligned batches.

    Returns ``(E, dX, dY)`` with the hinge's zero subgradient applied
    wherever the pair is order-satisfied.
    """
    X, Y = _rows(X), _rows(Y)
    if p.kind == "oe":
        d = np.maximum(X - Y, 0.0)
        sq = np.einsum("ij,ij->i", d, d)
        if p.oe_squared:
            return sq, 2.0 * d, -2.0 * d
        e = np.sqrt(sq)
        scale = np.where(e > 0.0, 1.0 / _safe(e), 0.0)[:, None]
        g = d * scale
        return e, g, -g

    if p.kind == "ec":
        xi, (diff, a, nx, dxy, u, v, c) = _euclid_xi_batch(X, Y)
        psi = np.arcsin(np.clip(p.k / nx, -1.0, 1.0))
        e = np.maximum(0.0, xi - psi)
        active = (e > 0.0)[:, None]
        # d(arccos(c)) = -dc / sqrt(1 - c^2)
        inv_sin = 1.0 / _safe(np.sqrt(1.0 - c * c))
        v2 = _safe(v * v)
        # dv/dx = (dxy/nx) x + (nx/dxy) (x - y);  dv/dy = (nx/dxy) (y - x)
        du_dx = Y - 2.0 * X
        dv_dx = (dxy / nx)[:, None] * X + (nx / dxy)[:, None] * diff
        dc_dx = (v[:, None] * du_dx - u[:, None] * dv_dx) / v2[:, None]
        du_dy = X
        dv_dy = -(nx / dxy)[:, None] * diff
        dc_dy = (v[:, None] * du_dy - u[:, None] * dv_dy) / v2[:, None]
        dxi_dx = -inv_sin[:, None] * dc_dx
        dxi_dy = -inv_sin[:, None] * dc_dy
        # psi = arcsin(K / nx): dpsi/dx = -K x / (nx^2 sqrt(nx^2 - K^2))
        root = _safe(np.sqrt(np.maximum(nx * nx - p.k * p.k, 0.0)))
        dpsi_dx = -(p.k / (nx * nx * root))[:, None] * X
        gx = np.where(active, dxi_dx - dpsi_dx, 0.0)
        gy = np.where(active, dxi_dy, 0.0)
        return e, _clip_rows(gx), _clip_rows(gy)

    xi, (a, b, s, m, g, num, P, D, c) = _hyper_xi_batch(X, Y)
    nx = _safe(np.sqrt(a))
    h = np.clip(p.k * (1.0 - a) / nx, -1.0, 1.0)
    psi = np.arcsin(h)
    e = np.maximum(0.0, xi - psi)
    active = (e > 0.0)[:, None]
    inv_sin = 1.0 / _safe(np.sqrt(1.0 - c * c))
    # c = num / sqrt(P) with P = a m g; dc = (D dnum - num dD) / P, dD = dP/(2D)
    dnum_dx = (1.0 + a)[:, None] * Y + (2.0 * s - 2.0 * (1.0 + b))[:, None] * X
    dnum_dy = (1.0 + a)[:, None] * X - (2.0 * a)[:, None] * Y
    dP_dx = (
        (2.0 * m * g)[:, None] * X
        + (2.0 * a * g)[:, None] * (X - Y)
        + (2.0 * a * m)[:, None] * (b[:, None] * X - Y)
    )
    dP_dy = (2.0 * a * g)[:, None] * (Y - X) + (2.0 * a * m)[:, None] * (a[:, None] * Y - X)
    dD_dx = dP_dx / (2.0 * D)[:, None]
    dD_dy = dP_dy / (2.0 * D)[:, None]
    dc_dx = (D[:, None] * dnum_dx - num[:, None] * dD_dx) / _safe(P)[:, None]
    dc_dy = (D[:, None] * dnum_dy - num[:, None] * dD_dy) / _safe(P)[:, None]
    dxi_dx = -inv_sin[:, None] * dc_dx
    dxi_dy = -inv_sin[:, None] * dc_dy
    # psi = arcsin(K (1 - a) / nx): radial derivative -K (1 + 1/nx^2)
    dpsi_dnx = -p.k * (1.0 + 1.0 / (nx * nx)) / _safe(np.sqrt(1.0 - h * h))
    dpsi_dx = (dpsi_dnx / nx)[:, None] * X
    gx = np.where(active, dxi_dx - dpsi_dx, 0.0)
    gy = np.where(active, dxi_dy, 0.0)
    return e, _clip_rows(gx), _clip_rows(gy)


def project_rows(X, p: ConeParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Row-wise :func:`project_to_domain` for a coordinate table."""
    X = _rows(X).copy()
    if p.kind == "oe":
        return X
    lo = p.epsilon + DOMAIN_PAD
    hi = p.norm_max - DOMAIN_PAD
    norms = np.linalg.norm(X, axis=1)
    zero = norms < _TINY
    if np.any(zero):
        if rng is None:
            rng = np.random.default_rng(0)
        for i in np.flatnonzero(zero):
            d = rng.standard_normal(X.shape[1])
            while float(np.linalg.norm(d)) < _TINY:
                d = rng.standard_normal(X.shape[1])
            X[i] = d * (lo / float(np.linalg.norm(d)))
        norms = np.linalg.norm(X, axis=1)
    scale = np.ones_like(norms)
    low = norms < lo
    high = norms > hi
    scale[low] = lo / norms[low]
    scale[high] = hi / norms[high]
    return X * scale[:, None]


def exp_map_rows(X, V) -> np.ndarray:
    """Row-wise exponential map; rows with a zero tangent stay fixed."""
    X, V = _rows(X), _rows(V)
    nx2 = np.einsum("ij,ij->i", X, X)
    nv = np.linalg.norm(V, axis=1)
    lam = 2.0 / _safe(1.0 - nx2)
    t = np.minimum(lam * nv, 300.0)
    s = np.sinh(t)
    c = np.cosh(t)
    vh = V / _safe(nv)[:, None]
    xdv = np.einsum("ij,ij->i", X, vh)
    q = _safe(1.0 + (lam - 1.0) * c + lam * s * xdv)
    out = (X * (lam * (c + s * xdv))[:, None] + vh * s[:, None]) / q[:, None]
    still = nv == 0.0
    if np.any(still):
        out[still] = X[still]
    n = np.linalg.norm(out, axis=1)
    over = n >= 1.0
    if np.any(over):
        out[over] *= ((1.0 - 1e-12) / n[over])[:, None]
    return out


def exp_map_zero(Z) -> np.ndarray:
    """Exponential map at the origin, ``tanh(||z||) z / ||z||``, row-wise.

    tanh saturates to exactly 1.0 in float64 near ``||z|| ~ 19``; saturated
    rows are nudged back inside the ball.
    """
    Z = _rows(Z)
    n = np.linalg.norm(Z, axis=1)
    scale = np.where(n > _TINY, np.minimum(np.tanh(n), 1.0 - 1e-12) / _safe(n), 1.0)
    return Z * scale[:, None]


def exp_map_zero_backprop(Z, G) -> np.ndarray:
    """Pull a gradient at ``exp_0(z)`` back to ``z``.

    The Jacobian of ``z -> tanh(r) z / r`` (with ``r = ||z||``) is
    ``(tanh r / r) (I - zz^T/r^2) + (1 - tanh^2 r) zz^T/r^2``.
    """
    Z, G = _rows(Z), _rows(G)
    r = np.linalg.norm(Z, axis=1)
    t = np.tanh(r)
    radial = np.einsum("ij,ij->i", G, Z) / _safe(r * r)  # (g . zhat) / r
    tan_scale = np.where(r > _TINY, t / _safe(r), 1.0)
    sech2 = 1.0 - t * t
    out = tan_scale[:, None] * G + ((sech2 - tan_scale) * radial)[:, None] * Z
    return out

"""Galerkin discretisation of the monotone operators and their checkers.

The spatial domain is (0, 1) with homogeneous Dirichlet conditions and the
orthonormal sine basis e_k(x) = sqrt(2) sin(k pi x), k = 1..n.  Nonlinear
terms are evaluated nodally on a collocation grid of M = 4n interior points;
with cubic nonlinearities (quartic growth) the products stay below the grid
Nyquist frequency, so the transforms are alias-free and the discrete
L2 pairing of coefficient vectors equals the nodal quadrature exactly.

Two function-space triples are provided:

* ``w1p``: V = W^{1,p}_0, H = L^2.  Drifts in divergence form are
  discretised with conservative finite differences on the nodal grid, so
  the discrete pairing <A(u), u> integrates by parts exactly and
  monotonicity / coercivity hold to machine precision.
* ``h_minus_one``: V = L^{m+1}, H = H^{-1} realised spectrally through the
  Dirichlet eigenvalues (pi k)^2.

Condition checkers (hemicontinuity, weak monotonicity, coercivity,
boundedness) are sampling-based falsification harnesses over randomised
inputs spanning several amplitude decades; they test declared constants,
they do not prove the conditions.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.fft import dst
from scipy.optimize import minimize_scalar

from . import rng
from .errors import DimensionMismatch, DomainError, RangeError

MARGIN_RTOL = 1e-8


class GalerkinSpace:
    """Immutable sine-basis space with its norms, pairing and dual norm."""

    def __init__(self, kind: str, n: int, exponent: float):
        if n < 1:
            raise DomainError(f"space dimension must be >= 1, got {n}")
        self.kind = kind
        self.n = n
        self.M = 4 * n
        if kind == "w1p":
            if exponent < 2.0:
                raise DomainError(f"gradient exponent must be >= 2, got {exponent}")
            self.p = exponent
            self.alpha = exponent
        elif kind == "h_minus_one":
            if exponent < 1.0:
                raise DomainError(f"power-law exponent must be >= 1, got {exponent}")
            self.m_exp = exponent
            self.alpha = exponent + 1.0
        else:
            raise DomainError(f"unknown space kind {kind!r}")
        M = self.M
        self.x = np.arange(1, M + 1) / (M + 1)          # interior collocation nodes
        self.quad_w = 1.0 / (M + 1)
        ks = np.arange(1, n + 1, dtype=float)
        self.spectral_eigs = (np.pi * ks) ** 2           # continuum Dirichlet eigenvalues
        self.fd_eigs = 4.0 * (M + 1) ** 2 * np.sin(ks * np.pi / (2 * (M + 1))) ** 2
        self.basis = f"sqrt(2) sin(k pi x), k=1..{n}, Dirichlet on (0,1)"
        # Witness constant of the continuous embedding V into H, recorded on
        # the basis vectors.
        eye = np.eye(n)
        self.kappa = max(self.h_norm(eye[k]) / self.v_norm(eye[k]) for k in range(n))

    # -- transforms ------------------------------------------------------

    def to_nodal(self, coef: np.ndarray) -> np.ndarray:
        """Values at the M interior collocation nodes."""
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (self.n,):
            raise DimensionMismatch(f"expected {self.n} coefficients, got {coef.shape}")
        padded = np.zeros(self.M)
        padded[: self.n] = coef
        return dst(padded, type=1) / math.sqrt(2.0)

    def to_coef(self, nodal: np.ndarray) -> np.ndarray:
        """Galerkin projection of nodal values back onto the first n modes."""
        full = dst(np.asarray(nodal, dtype=float), type=1) * math.sqrt(2.0) / (2 * (self.M + 1))
        return full[: self.n]

    def _nodal_padded(self, coef: np.ndarray) -> np.ndarray:
        out = np.zeros(self.M + 2)
        out[1:-1] = self.to_nodal(coef)
        return out

    def fd_gradient(self, coef: np.ndarray) -> np.ndarray:
        """Forward differences at the M+1 half points, Dirichlet padded."""
        u = self._nodal_padded(coef)
        return (u[1:] - u[:-1]) * (self.M + 1)

    # -- norms and pairings ----------------------------------------------

    def h_norm(self, coef: np.ndarray) -> float:
        coef = np.asarray(coef, dtype=float)
        if self.kind == "w1p":
            return float(np.linalg.norm(coef))
        return float(np.sqrt(np.sum(coef**2 / self.spectral_eigs)))

    def v_norm(self, coef: np.ndarray) -> float:
        if self.kind == "w1p":
            u = self.to_nodal(coef)
            du = self.fd_gradient(coef)
            p = self.p
            return float(
                (np.sum(np.abs(u) ** p) * self.quad_w + np.sum(np.abs(du) ** p) * self.quad_w)
                ** (1.0 / p)
            )
        u = self.to_nodal(coef)
        q = self.m_exp + 1.0
        return float((np.sum(np.abs(u) ** q) * self.quad_w) ** (1.0 / q))

    def pairing(self, F: np.ndarray, v: np.ndarray) -> float:
        """Duality pairing <F, v> realised through the pivot space H."""
        F = np.asarray(F, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.kind == "w1p":
            return float(F @ v)
        return float(np.sum(F * v / self.spectral_eigs))

    def dual_norm(self, F: np.ndarray) -> float:
        """Norm of F as a functional on V.

        w1p with p = 2 is exact in the spectral representation; p > 2 uses
        the L^{p'} norm of the flux-type antiderivative of F, optimised over
        the free additive constant; the H^{-1} triple uses the L^{q'} norm
        of the inverse-Laplacian representative.
        """
        F = np.asarray(F, dtype=float)
        if self.kind == "w1p":
            if self.p == 2.0:
                return float(np.sqrt(np.sum(F**2 / (1.0 + self.fd_eigs))))
            pprime = self.p / (self.p - 1.0)
            ks = np.arange(1, self.n + 1, dtype=float)
            xs = np.arange(0, self.M + 2) / (self.M + 1)
            phi = -(np.sqrt(2.0) / (np.pi * ks))[None, :] * np.cos(
                np.pi * ks[None, :] * xs[:, None]
            )
            anti = phi @ F
            w = np.full(self.M + 2, 1.0 / (self.M + 1))
            w[0] = w[-1] = 0.5 / (self.M + 1)

            def objective(c):
                return np.sum(w * np.abs(anti - c) ** pprime)

            res = minimize_scalar(
                objective, bounds=(float(anti.min()), float(anti.max())), method="bounded"
            )
            best = min(res.fun, objective(0.0))
            return float(best ** (1.0 / pprime))
        qprime = (self.m_exp + 1.0) / self.m_exp
        rep = self.to_nodal(F / self.spectral_eigs)
        return float((np.sum(np.abs(rep) ** qprime) * self.quad_w) ** (1.0 / qprime))


def w1p_space(n: int, p: float) -> GalerkinSpace:
    """V = W^{1,p}_0(0,1), H = L^2(0,1)."""
    return GalerkinSpace("w1p", n, p)


def h_minus_one_space(n: int, m_exp: float) -> GalerkinSpace:
    """V = L^{m+1}(0,1), H = H^{-1}(0,1)."""
    return GalerkinSpace("h_minus_one", n, m_exp)


@dataclass(frozen=True)
class DriftConstants:
    """Declared constants of the monotonicity/coercivity/boundedness bounds."""

    c: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    alpha: float = 2.0


@dataclass(frozen=True, eq=False)
class DriftOperator:
    """Drift on a Galerkin space: eval(t, v) returns dual-space coefficients."""

    eval: Callable[[float, np.ndarray], np.ndarray]
    space: GalerkinSpace
    constants: DriftConstants
    params: dict = field(default_factory=dict)
    f_bound: Callable[[float], float] = lambda t: 0.0
    g_bound: Callable[[float], float] = lambda t: 0.0
    name: str = "drift"


@dataclass(frozen=True, eq=False)
class DiffusionOperator:
    """Diffusion on a Galerkin space: eval(t, v) returns a dim_H x dim_U matrix."""

    eval: Callable[[float, np.ndarray], np.ndarray]
    space: GalerkinSpace
    dim_U: int
    name: str = "diffusion"

    def hs_norm(self, matrix: np.ndarray) -> float:
        """Hilbert-Schmidt norm: column-wise H-norms, summed in squares."""
        matrix = np.asarray(matrix, dtype=float)
        return float(
            np.sqrt(sum(self.space.h_norm(matrix[:, j]) ** 2 for j in range(matrix.shape[1])))
        )


def make_p_laplace(space: GalerkinSpace, p: float, nu: float = 1.0) -> DriftOperator:
    """Divergence-form drift nu * div(|u'|^{p-2} u') with conservative finite
    differences on the collocation grid, p >= 2.

    Declared constants: weak monotonicity holds with c = 0 (the flux is
    monotone pointwise), coercivity with c2 = 2 nu / (1 + 2^{-p}) via the
    discrete Poincare bound ||u||_p <= ||u'||_p / 2, boundedness with a
    conservative c3 = 2 nu (the continuum value is nu).
    """
    if space.kind != "w1p":
        raise DomainError("divergence-form drift needs the W^{1,p} triple")
    if p < 2.0:
        raise DomainError(f"gradient exponent must be >= 2, got {p}")
    if space.p != p:
        raise DomainError(f"space was built for p={space.p}, operator wants p={p}")
    if nu <= 0.0:
        raise DomainError(f"diffusivity must be positive, got {nu}")
    Mp1 = space.M + 1

    def _eval(t, v):
        du = space.fd_gradient(v)
        flux = np.abs(du) ** (p - 2.0) * du if p != 2.0 else du
        div = (flux[1:] - flux[:-1]) * (Mp1 * nu)
        return space.to_coef(div)

    if p == 2.0:
        consts = DriftConstants(c=0.0, c1=2.0 * nu, c2=2.0 * nu, c3=nu, alpha=2.0)
        name = "linear_heat"
    else:
        consts = DriftConstants(
            c=0.0, c1=0.0, c2=2.0 * nu / (1.0 + 2.0 ** (-p)), c3=2.0 * nu, alpha=p
        )
        name = f"p_laplace(p={p})"
    return DriftOperator(
        eval=_eval, space=space, constants=consts, params={"p": p, "nu": nu}, name=name
    )


def make_linear_heat(space: GalerkinSpace, nu: float = 1.0) -> DriftOperator:
    """Dirichlet Laplacian (scaled by nu) as the p = 2 divergence-form drift."""
    return make_p_laplace(space, 2.0, nu=nu)


def make_porous_medium(space: GalerkinSpace, m: float, nu: float = 1.0) -> DriftOperator:
    """Drift nu * Laplacian of |u|^{m-1} u in the H^{-1} pivot triple, m >= 1.

    The Laplacian acts spectrally with eigenvalues -(pi k)^2, matching the
    H^{-1} norm, so <A(u) - A(v), u - v> reduces to the nodal quadrature of
    -(Psi(u) - Psi(v))(u - v) and monotonicity is exact.  Coercivity holds
    with c2 = 2, alpha = m + 1 by the same reduction.  Boundedness is
    declared with c3 = 2: the continuum constant is 1, but the Galerkin
    projection of Psi(u) is not an L^{q'} contraction (measured overshoot
    stays below 1.2 across resolutions).
    """
    if space.kind != "h_minus_one":
        raise DomainError("porous-medium drift needs the H^{-1} triple")
    if m < 1.0:
        raise DomainError(f"porous-medium exponent must be >= 1, got {m}")
    if space.m_exp != m:
        raise DomainError(f"space was built for m={space.m_exp}, operator wants m={m}")
    if nu <= 0.0:
        raise DomainError(f"diffusivity must be positive, got {nu}")

    def _eval(t, v):
        u = space.to_nodal(v)
        psi = np.abs(u) ** (m - 1.0) * u if m != 1.0 else u
        return -nu * space.spectral_eigs * space.to_coef(psi)

    consts = DriftConstants(c=0.0, c1=0.0, c2=2.0 * nu, c3=2.0 * nu, alpha=m + 1.0)
    return DriftOperator(
        eval=_eval, space=space, constants=consts, params={"m": m, "nu": nu},
        name=f"porous_medium(m={m})",
    )


def zero_drift(space: GalerkinSpace) -> DriftOperator:
    z = np.zeros(space.n)
    return DriftOperator(
        eval=lambda t, v: z,
        space=space,
        constants=DriftConstants(alpha=space.alpha),
        name="zero",
    )


def zero_diffusion(space: GalerkinSpace, dim_U: int) -> DiffusionOperator:
    z = np.zeros((space.n, dim_U))
    return DiffusionOperator(eval=lambda t, v: z, space=space, dim_U=dim_U, name="zero")


def constant_diffusion(space: GalerkinSpace, matrix: np.ndarray) -> DiffusionOperator:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[0] != space.n:
        raise DimensionMismatch(
            f"diffusion matrix has {matrix.shape[0]} rows, space has dimension {space.n}"
        )
    return DiffusionOperator(
        eval=lambda t, v: matrix, space=space, dim_U=matrix.shape[1], name="constant"
    )


def linear_diffusion(space: GalerkinSpace, dim_U: int, L: float) -> DiffusionOperator:
    """Rank-one state-proportional diffusion B(u) z = L u z_1; Lipschitz in
    the Hilbert-Schmidt norm with constant L."""

    def _eval(t, v):
        out = np.zeros((space.n, dim_U))
        out[:, 0] = L * np.asarray(v, dtype=float)
        return out

    return DiffusionOperator(eval=_eval, space=space, dim_U=dim_U, name=f"linear(L={L})")


# -- condition checkers ---------------------------------------------------


def _sample_coefficients(space, gen, amplitude):
    z = gen.standard_normal(space.n)
    nrm = np.linalg.norm(z)
    return amplitude * z / (nrm if nrm > 0 else 1.0)


_AMPLITUDES = np.logspace(-2, 2, 5)


@dataclass(frozen=True)
class ConditionReport:
    name: str
    worst_margin: float
    passed: bool
    details: dict = field(default_factory=dict)


def check_hemicontinuity(A: DriftOperator, space: GalerkinSpace, n_samples: int = 64, seed: int = 0) -> ConditionReport:
    """Hemicontinuity probe: the maximum jump of s -> <A(t, u + s v), x>
    along a refining parameter grid must contract (ratio < 0.6) at
    every refinement, for every sampled triple (u, v, x)."""
    gen = rng.substream(seed, "ensemble", 0)
    depths = [33, 65, 129, 257]
    worst_ratio = 0.0
    for _ in range(n_samples):
        amp = gen.choice(_AMPLITUDES)
        u = _sample_coefficients(space, gen, amp)
        v = _sample_coefficients(space, gen, amp)
        x = _sample_coefficients(space, gen, 1.0)
        t = float(gen.uniform(0.0, 1.0))
        jumps = []
        for mlam in depths:
            lams = np.linspace(-1.0, 1.0, mlam)
            vals = np.array([space.pairing(A.eval(t, u + lam * v), x) for lam in lams])
            jumps.append(np.max(np.abs(np.diff(vals))))
        scale = max(jumps[0], 1e-14)
        for a, b in zip(jumps, jumps[1:]):
            if a <= 1e-13 * scale and b <= 1e-13 * scale:
                continue
            worst_ratio = max(worst_ratio, b / max(a, 1e-300))
    return ConditionReport(
        name="hemicontinuity",
        worst_margin=worst_ratio - 0.6,
        passed=bool(worst_ratio < 0.6),
        details={"worst_ratio": worst_ratio},
    )


def check_weak_monotonicity(
    A: DriftOperator,
    B: DiffusionOperator,
    space: GalerkinSpace,
    n_samples: int = 1000,
    seed: int = 0,
) -> ConditionReport:
    """Weak monotonicity: 2 <A(u) - A(v), u - v> + ||B(u) - B(v)||_HS^2
    <= c ||u - v||_H^2 for the declared c, over randomised pairs."""
    gen = rng.substream(seed, "ensemble", 1)
    c = A.constants.c
    worst_margin = -math.inf
    worst_c = -math.inf
    for _ in range(n_samples):
        amp = gen.choice(_AMPLITUDES)
        u = _sample_coefficients(space, gen, amp)
        v = u + _sample_coefficients(space, gen, amp * gen.choice([1.0, 0.1, 0.01]))
        t = float(gen.uniform(0.0, 1.0))
        d = u - v
        lhs = 2.0 * space.pairing(A.eval(t, u) - A.eval(t, v), d)
        hs = B.hs_norm(B.eval(t, u) - B.eval(t, v)) ** 2
        h2 = space.h_norm(d) ** 2
        margin = lhs + hs - c * h2
        scale = abs(lhs) + hs + abs(c) * h2 + 1.0
        worst_margin = max(worst_margin, margin)
        if margin > MARGIN_RTOL * scale:
            return ConditionReport(
                name="weak_monotonicity", worst_margin=margin, passed=False,
                details={"worst_c": (lhs + hs) / h2 if h2 > 0 else math.inf},
            )
        if h2 > 1e-20:
            worst_c = max(worst_c, (lhs + hs) / h2)
    return ConditionReport(
        name="weak_monotonicity", worst_margin=worst_margin, passed=True, details={"worst_c": worst_c}
    )


def check_coercivity(
    A: DriftOperator,
    B: DiffusionOperator,
    space: GalerkinSpace,
    n_samples: int = 1000,
    seed: int = 0,
) -> ConditionReport:
    """Coercivity: 2 <A(t,v), v> + ||B(t,v)||_HS^2
    <= c1 ||v||_H^2 - c2 ||v||_V^alpha + f(t) for the declared constants."""
    gen = rng.substream(seed, "ensemble", 2)
    k = A.constants
    worst_margin = -math.inf
    for _ in range(n_samples):
        amp = gen.choice(_AMPLITUDES)
        v = _sample_coefficients(space, gen, amp)
        t = float(gen.uniform(0.0, 1.0))
        lhs = 2.0 * space.pairing(A.eval(t, v), v) + B.hs_norm(B.eval(t, v)) ** 2
        rhs = (
            k.c1 * space.h_norm(v) ** 2
            - k.c2 * space.v_norm(v) ** k.alpha
            + A.f_bound(t)
        )
        margin = lhs - rhs
        scale = abs(lhs) + abs(rhs) + 1.0
        worst_margin = max(worst_margin, margin)
        if margin > MARGIN_RTOL * scale:
            return ConditionReport(name="coercivity", worst_margin=margin, passed=False)
    return ConditionReport(name="coercivity", worst_margin=worst_margin, passed=True)


def check_boundedness(
    A: DriftOperator,
    space: GalerkinSpace,
    n_samples: int = 200,
    seed: int = 0,
) -> ConditionReport:
    """Boundedness: ||A(t,v)||_{V*} <= g(t) + c3 ||v||_V^{alpha-1}; also fits
    the log-log growth exponent of the dual norm over amplitude sweeps."""
    gen = rng.substream(seed, "ensemble", 3)
    k = A.constants
    worst_margin = -math.inf
    slopes = []
    n_dirs = max(1, n_samples // len(_AMPLITUDES))
    for _ in range(n_dirs):
        direction = _sample_coefficients(space, gen, 1.0)
        t = float(gen.uniform(0.0, 1.0))
        logs_v, logs_a = [], []
        for amp in _AMPLITUDES:
            v = amp * direction
            dual = space.dual_norm(A.eval(t, v))
            vn = space.v_norm(v)
            margin = dual - (A.g_bound(t) + k.c3 * vn ** (k.alpha - 1.0))
            scale = dual + abs(k.c3) * vn ** (k.alpha - 1.0) + 1.0
            worst_margin = max(worst_margin, margin)
            if margin > MARGIN_RTOL * scale:
                return ConditionReport(
                    name="boundedness", worst_margin=margin, passed=False, details={"amplitude": amp}
                )
            if dual > 0.0 and vn > 0.0:
                logs_v.append(math.log(vn))
                logs_a.append(math.log(dual))
        if len(logs_v) >= 2:
            slopes.append(float(np.polyfit(logs_v, logs_a, 1)[0]))
    return ConditionReport(
        name="boundedness",
        worst_margin=worst_margin,
        passed=True,
        details={"slope": float(np.mean(slopes)) if slopes else math.nan},
    )


def shift_operators(A: DriftOperator, B: DiffusionOperator, w_path: np.ndarray, grid):
    """Wrap (A, B) so they evaluate at v + w(t), w given on the grid nodes.

    Off-node times use the left-closed piecewise-constant extension of the
    path, so the wrapping stays progressively measurable; the solver itself
    only evaluates at nodes.  The wrapped drift keeps the declared
    constants: the monotonicity, coercivity and boundedness bounds are
    stable under a fixed shift of the argument.
    """
    w_path = np.asarray(w_path, dtype=float)
    if w_path.ndim != 2 or w_path.shape[0] != grid.m or w_path.shape[1] != A.space.n:
        raise RangeError(
            f"shift path must have shape ({grid.m}, {A.space.n}), got {w_path.shape}"
        )
    if not np.all(np.isfinite(w_path)):
        raise RangeError("shift path has non-finite components")

    def a_eval(t, v):
        return A.eval(t, v + w_path[grid.floor_index(t)])

    def b_eval(t, v):
        return B.eval(t, v + w_path[grid.floor_index(t)])

    A_bar = DriftOperator(
        eval=a_eval, space=A.space, constants=A.constants, params=dict(A.params),
        f_bound=A.f_bound, g_bound=A.g_bound, name=f"shifted({A.name})",
    )
    B_bar = DiffusionOperator(
        eval=b_eval, space=B.space, dim_U=B.dim_U, name=f"shifted({B.name})"
    )
    return A_bar, B_bar

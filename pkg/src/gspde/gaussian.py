"""Sampling and integration of the Gaussian drivers.

The scalar driver g has covariance R built from a kernel; the vector driver
G stacks N independent copies scaled by sqrt(lambda_n) along an orthonormal
basis of the noise space U.  Integrals of deterministic integrands against
either driver are left-endpoint Riemann-Stieltjes sums, which are exact in
law for step functions adapted to the grid.

Sampling is exact: increments over grid cells are jointly Gaussian with the
cell-pair covariance matrix from :mod:`gspde.kernel`, factorised once by
Cholesky and applied to per-path Philox substreams.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import zeta

from . import rng
from .errors import DimensionMismatch, DomainError, FactorizationError
from .kernel import CovarianceKernel, covariance_matrix, increment_covariance, weighted_double_integral

BINARY_MAGIC = b"GSPDEBIN"
BINARY_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes t_0 = 0 < ... < t_{m-1} = T."""

    T: float
    m: int
    nodes: np.ndarray = field(repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if self.m < 2 or len(nodes) != self.m:
            raise DomainError(f"grid needs m >= 2 nodes, got m={self.m}")
        if nodes[0] != 0.0 or not np.isclose(nodes[-1], self.T, rtol=1e-12, atol=0.0):
            raise DomainError("grid must start at 0 and end at T")
        if np.any(np.diff(nodes) <= 0.0):
            raise DomainError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, m: int) -> "TimeGrid":
        if T <= 0.0:
            raise DomainError(f"final time must be positive, got {T}")
        nodes = np.linspace(0.0, T, m)
        nodes[-1] = T
        return cls(T=T, m=m, nodes=nodes)

    @classmethod
    def from_nodes(cls, nodes: Sequence[float]) -> "TimeGrid":
        nodes = np.asarray(nodes, dtype=float)
        return cls(T=float(nodes[-1]), m=len(nodes), nodes=nodes)

    def index_of(self, t: float) -> int:
        """Index of a node equal to t (the solver only evaluates at nodes)."""
        i = int(np.searchsorted(self.nodes, t))
        for j in (i - 1, i, i + 1):
            if 0 <= j < self.m and abs(self.nodes[j] - t) <= 1e-12 * max(1.0, self.T):
                return j
        raise DomainError(f"time {t} is not a grid node")

    def floor_index(self, t: float) -> int:
        """Index of the last node <= t (left-closed lookup, clamped to the grid)."""
        try:
            return self.index_of(t)
        except DomainError:
            pass
        if t < 0.0 or t > self.T:
            raise DomainError(f"time {t} lies outside [0, {self.T}]")
        return max(0, int(np.searchsorted(self.nodes, t, side="right")) - 1)


@dataclass(frozen=True)
class NoiseSpec:
    """Truncated coordinate variances lambda_1..lambda_N of the vector driver.

    The untruncated sequence must have summable square roots; a power law
    lambda_n = lambda0 * n^{-beta} therefore requires beta > 2.
    """

    lambdas: np.ndarray = field(repr=False)
    N: int
    dim_U: int
    decay_law: str = "explicit"
    lambda0: float | None = None
    beta: float | None = None

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if self.N < 1 or len(lam) != self.N:
            raise DomainError(f"need N >= 1 coordinate variances, got N={self.N}")
        if np.any(lam <= 0.0):
            raise DomainError("all coordinate variances must be positive")
        if self.dim_U != self.N:
            raise DomainError("truncated basis size must equal N")
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def power_law(cls, lambda0: float, beta: float, N: int) -> "NoiseSpec":
        if lambda0 <= 0.0:
            raise DomainError(f"lambda0 must be positive, got {lambda0}")
        if beta <= 2.0:
            raise DomainError(
                f"power-law decay needs beta > 2 for summable sqrt(lambda_n), got {beta}"
            )
        lam = lambda0 * np.arange(1, N + 1, dtype=float) ** (-beta)
        return cls(
            lambdas=lam, N=N, dim_U=N,
            decay_law=f"lambda0*n^-{beta}", lambda0=lambda0, beta=beta,
        )

    @classmethod
    def explicit(cls, lambdas: Sequence[float]) -> "NoiseSpec":
        lam = np.asarray(lambdas, dtype=float)
        return cls(lambdas=lam, N=len(lam), dim_U=len(lam))

    def tail_second_moment(self, k: CovarianceKernel, t: float) -> float:
        """Truncation error sum_{n>N} lambda_n R(t,t); zero for explicit laws."""
        from .kernel import covariance_R

        if self.beta is None:
            return 0.0
        tail = self.lambda0 * (zeta(self.beta, self.N + 1))
        return float(tail * covariance_R(k, t, t))


@dataclass(frozen=True)
class GaussianEnsemble:
    """Seeded collection of driver paths on a grid.

    ``paths`` has shape (n_paths, m) for the scalar driver or
    (n_paths, m, N) for the vector driver; coordinate n of the vector case
    already carries its sqrt(lambda_n) scaling.
    """

    grid: TimeGrid
    paths: np.ndarray = field(repr=False)
    seed: int
    kernel_id: str

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def is_vector(self) -> bool:
        return self.paths.ndim == 3

    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)


def _cholesky_with_jitter(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * float(np.trace(C))
    if jitter <= 0.0:
        jitter = 1e-300
    try:
        return np.linalg.cholesky(C + jitter * np.eye(len(C)))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"increment covariance is indefinite beyond jitter repair ({exc})"
        ) from exc


def sample_scalar(
    k: CovarianceKernel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    run: int = 0,
) -> GaussianEnsemble:
    """Sample scalar driver paths whose grid marginals have covariance R.

    Path i draws its normals from the counter-based substream
    (seed, "ensemble", run, i), so ensembles are reproducible regardless of
    batch size or generation order.
    """
    if n_paths < 1:
        raise DomainError(f"need at least one path, got {n_paths}")
    if grid.T > k.T + 1e-12:
        raise DomainError(f"grid extends past the kernel horizon {k.T}")
    C = increment_covariance(k, grid.nodes)
    L = _cholesky_with_jitter(C)
    m = grid.m
    Z = np.empty((n_paths, m - 1))
    for i in range(n_paths):
        Z[i] = rng.substream(seed, "ensemble", run, i).standard_normal(m - 1)
    inc = Z @ L.T
    paths = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
    return GaussianEnsemble(grid=grid, paths=paths, seed=seed, kernel_id=k.config_id())


def sample_G(
    k: CovarianceKernel,
    spec: NoiseSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    run: int = 0,
) -> GaussianEnsemble:
    """Sample the vector driver: N independent scalar copies, coordinate n
    scaled by sqrt(lambda_n)."""
    if n_paths < 1:
        raise DomainError(f"need at least one path, got {n_paths}")
    if grid.T > k.T + 1e-12:
        raise DomainError(f"grid extends past the kernel horizon {k.T}")
    C = increment_covariance(k, grid.nodes)
    L = _cholesky_with_jitter(C)
    m, N = grid.m, spec.N
    scale = np.sqrt(spec.lambdas)
    paths = np.empty((n_paths, m, N))
    for i in range(n_paths):
        Z = rng.substream(seed, "ensemble", run, i).standard_normal((N, m - 1))
        inc = (Z @ L.T) * scale[:, None]
        paths[i, 0, :] = 0.0
        paths[i, 1:, :] = np.cumsum(inc, axis=1).T
    return GaussianEnsemble(grid=grid, paths=paths, seed=seed, kernel_id=k.config_id())


@dataclass(frozen=True, eq=False)
class OperatorValuedIntegrand:
    """Deterministic integrand t -> matrix mapping noise coordinates to the
    target coefficient space.

    ``p_eps_exponent`` declares the integrability order used by the
    continuity diagnostics; ``range_projection`` optionally records the
    finite-rank projection through which the integrand factors.
    """

    matrix: Callable[[float], np.ndarray]
    dim_H: int
    dim_U: int
    p_eps_exponent: float | None = None
    range_projection: np.ndarray | None = None

    def __post_init__(self):
        if self.range_projection is not None:
            P = np.asarray(self.range_projection, dtype=float)
            if P.shape != (self.dim_H, self.dim_H) or not np.all(np.isfinite(P)):
                raise DimensionMismatch(
                    f"range projection must be a finite {self.dim_H}x{self.dim_H} matrix"
                )
            if not np.allclose(P @ P, P, atol=1e-10):
                raise DomainError("range projection is not idempotent")
            object.__setattr__(self, "range_projection", P)

    @classmethod
    def constant(cls, matrix: np.ndarray, **kw) -> "OperatorValuedIntegrand":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise DimensionMismatch("integrand matrix must be 2-D")
        return cls(matrix=lambda t: matrix, dim_H=matrix.shape[0], dim_U=matrix.shape[1], **kw)

    @classmethod
    def zero(cls, dim_H: int, dim_U: int, **kw) -> "OperatorValuedIntegrand":
        z = np.zeros((dim_H, dim_U))
        return cls(matrix=lambda t: z, dim_H=dim_H, dim_U=dim_U, **kw)

    @classmethod
    def rank_one(cls, mode: np.ndarray, coord: int, dim_U: int, scale: float = 1.0, **kw):
        """Maps noise coordinate ``coord`` onto the fixed vector ``mode``."""
        mode = np.asarray(mode, dtype=float)
        mat = np.zeros((len(mode), dim_U))
        mat[:, coord] = scale * mode
        return cls.constant(mat, **kw)

    def at(self, t: float) -> np.ndarray:
        out = np.asarray(self.matrix(t), dtype=float)
        if out.shape != (self.dim_H, self.dim_U):
            raise DimensionMismatch(
                f"integrand returned shape {out.shape}, expected {(self.dim_H, self.dim_U)}"
            )
        if not np.all(np.isfinite(out)):
            raise DomainError(f"integrand matrix at t={t} has non-finite entries")
        return out


def integrate_scalar(f, e: GaussianEnsemble) -> np.ndarray:
    """Per-path left-endpoint integral of a deterministic f against the
    scalar driver; returns shape (n_paths,) or (n_paths, d)."""
    if e.is_vector:
        raise DimensionMismatch("integrate_scalar needs a scalar ensemble")
    nodes = e.grid.nodes
    F = np.asarray([np.asarray(f(t), dtype=float) for t in nodes[:-1]])
    inc = e.increments()
    if F.ndim == 1:
        return inc @ F
    return np.einsum("pi,id->pd", inc, F)


def integrate_operator(h: OperatorValuedIntegrand, e: GaussianEnsemble) -> np.ndarray:
    """Per-path paths of the integral of h against the vector driver.

    Returns shape (n_paths, m, dim_H); node k holds the left sum over cells
    0..k-1.  The sqrt(lambda_n) factors are already embedded in the driver
    coordinates, so h is applied to raw coordinate increments.
    """
    if not e.is_vector:
        raise DimensionMismatch("integrate_operator needs a vector ensemble")
    if h.dim_U != e.paths.shape[2]:
        raise DimensionMismatch(
            f"integrand expects {h.dim_U} noise coordinates, ensemble has {e.paths.shape[2]}"
        )
    nodes = e.grid.nodes
    inc = e.increments()
    Hmats = np.asarray([h.at(t) for t in nodes[:-1]])
    terms = np.einsum("iad,pid->pia", Hmats, inc)
    w = np.zeros((e.n_paths, e.grid.m, h.dim_H))
    np.cumsum(terms, axis=1, out=w[:, 1:, :])
    return w


def _z_from_confidence(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise DomainError(f"confidence must lie in (0, 1), got {confidence}")
    return float(stats.norm.ppf(0.5 * (1.0 + confidence)))


@dataclass(frozen=True)
class IsometryReport:
    mc_estimate: float
    quadrature_value: float
    se: float
    z: float
    passed: bool


def verify_isometry(
    f,
    h,
    k: CovarianceKernel,
    e: GaussianEnsemble,
    confidence: float = 0.9973,
) -> IsometryReport:
    """Monte Carlo check of E<Int f dg, Int h dg> against the kernel double
    integral.

    Both sides use the grid-adapted step versions of f and h (value at the
    left node on each cell), for which the identity is exact; the comparison
    therefore isolates the sampling machinery from time-discretisation bias.
    """
    nodes = e.grid.nodes
    F = np.asarray([np.asarray(f(t), dtype=float) for t in nodes[:-1]])
    Hv = np.asarray([np.asarray(h(t), dtype=float) for t in nodes[:-1]])
    inc = e.increments()
    if F.ndim == 1:
        If, Ih = inc @ F, inc @ Hv
        prod = If * Ih
    else:
        If = np.einsum("pi,id->pd", inc, F)
        Ih = np.einsum("pi,id->pd", inc, Hv)
        prod = np.sum(If * Ih, axis=1)
    mc = float(np.mean(prod))
    se = float(np.std(prod, ddof=1) / math.sqrt(len(prod)))
    quad = weighted_double_integral(k, F, Hv, nodes=nodes)
    z = _z_from_confidence(confidence)
    return IsometryReport(
        mc_estimate=mc, quadrature_value=quad, se=se, z=z,
        passed=bool(abs(mc - quad) <= z * max(se, 1e-300)),
    )


@dataclass(frozen=True)
class IdentityReport:
    name: str
    mc_estimate: float
    quadrature_value: float
    se: float
    passed: bool


@dataclass(frozen=True)
class CovarianceOperatorReport:
    pairing: IdentityReport
    trace: IdentityReport
    z: float

    @property
    def passed(self) -> bool:
        return self.pairing.passed and self.trace.passed


def verify_covariance_identities(
    h1: OperatorValuedIntegrand,
    h2: OperatorValuedIntegrand,
    x: np.ndarray,
    y: np.ndarray,
    spec: NoiseSpec,
    k: CovarianceKernel,
    e: GaussianEnsemble,
    confidence: float = 0.9973,
) -> CovarianceOperatorReport:
    """Check both covariance identities of integrals against the vector driver.

    (i)  E[<Int h1 dG, x> <Int h2 dG, y>] equals the double integral of
         <h2(s') Q h1(s)* x, y> phi(s, s'), with Q = diag(lambda);
    (ii) E<Int h1 dG, Int h2 dG> equals the trace version.
    Both oracles reduce to kernel-weighted double integrals of
    sqrt(Q)-scaled integrands, evaluated as grid-adapted step functions.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (h1.dim_H,) or y.shape != (h2.dim_H,):
        raise DimensionMismatch("test vectors must live in the integrand target space")
    if h1.dim_U != spec.dim_U or h2.dim_U != spec.dim_U:
        raise DimensionMismatch("integrands and noise spec disagree on dim_U")
    w1 = integrate_operator(h1, e)[:, -1, :]
    w2 = integrate_operator(h2, e)[:, -1, :]
    z = _z_from_confidence(confidence)
    nodes = e.grid.nodes
    sqrt_lam = np.sqrt(spec.lambdas)
    H1 = np.asarray([h1.at(t) for t in nodes[:-1]])
    H2 = np.asarray([h2.at(t) for t in nodes[:-1]])

    # (i) pairing identity
    prod = (w1 @ x) * (w2 @ y)
    mc1 = float(np.mean(prod))
    se1 = float(np.std(prod, ddof=1) / math.sqrt(len(prod)))
    u = np.einsum("iab,a->ib", H1, x) * sqrt_lam[None, :]
    v = np.einsum("iab,a->ib", H2, y) * sqrt_lam[None, :]
    quad1 = weighted_double_integral(k, u, v, nodes=nodes)
    rep1 = IdentityReport(
        name="pairing", mc_estimate=mc1, quadrature_value=quad1, se=se1,
        passed=bool(abs(mc1 - quad1) <= z * max(se1, 1e-300)),
    )

    # (ii) trace identity
    dots = np.sum(w1 * w2, axis=1)
    mc2 = float(np.mean(dots))
    se2 = float(np.std(dots, ddof=1) / math.sqrt(len(dots)))
    U = (H1 * sqrt_lam[None, None, :]).reshape(len(H1), -1)
    V = (H2 * sqrt_lam[None, None, :]).reshape(len(H2), -1)
    quad2 = weighted_double_integral(k, U, V, nodes=nodes)
    rep2 = IdentityReport(
        name="trace", mc_estimate=mc2, quadrature_value=quad2, se=se2,
        passed=bool(abs(mc2 - quad2) <= z * max(se2, 1e-300)),
    )
    return CovarianceOperatorReport(pairing=rep1, trace=rep2, z=z)


@dataclass(frozen=True)
class ContinuityProxyReport:
    grid_sizes: tuple
    percentile_99: tuple
    passed: bool


def continuity_proxy(
    h: OperatorValuedIntegrand,
    k: CovarianceKernel,
    spec: NoiseSpec,
    grid_sizes: Sequence[int] = (33, 65, 129),
    n_paths: int = 2000,
    seed: int = 0,
) -> ContinuityProxyReport:
    """Grid-refinement proxy for path continuity of the forcing integral.

    Requires a declared integrability exponent on ``h`` (the continuity
    statement needs strictly more integrability than the integral itself);
    passes when the 99th percentile of the increment norms of the forcing
    path decreases monotonically under refinement.
    """
    if h.p_eps_exponent is None:
        raise DomainError(
            "continuity proxy needs the integrand's declared integrability exponent"
        )
    percentiles = []
    for nodes_m in grid_sizes:
        grid = TimeGrid.uniform(k.T, int(nodes_m))
        ens = sample_G(k, spec, grid, n_paths, seed)
        w = integrate_operator(h, ens)
        inc_norms = np.linalg.norm(np.diff(w, axis=1), axis=2).ravel()
        percentiles.append(float(np.percentile(inc_norms, 99.0)))
    dec = all(b < a for a, b in zip(percentiles, percentiles[1:]))
    return ContinuityProxyReport(
        grid_sizes=tuple(int(m) for m in grid_sizes),
        percentile_99=tuple(percentiles),
        passed=bool(dec),
    )


@dataclass(frozen=True)
class FidelityReport:
    max_abs_z: float
    worst_entry: tuple
    subgrid: tuple
    passed: bool


def covariance_fidelity(
    e: GaussianEnsemble,
    k: CovarianceKernel,
    n_sub: int = 8,
    z_max: float = 3.0,
) -> FidelityReport:
    """Compare the empirical covariance of scalar paths with R entrywise on a
    subgrid, in units of the exact Monte Carlo standard error
    sqrt((R_ii R_jj + R_ij^2) / n)."""
    if e.is_vector:
        raise DimensionMismatch("covariance fidelity applies to scalar ensembles")
    m = e.grid.m
    idx = np.unique(np.linspace(1, m - 1, n_sub).round().astype(int))
    nodes = e.grid.nodes[idx]
    X = e.paths[:, idx]
    n = e.n_paths
    emp = (X.T @ X) / n
    exact = covariance_matrix(k, nodes)
    se = np.sqrt((np.outer(np.diag(exact), np.diag(exact)) + exact**2) / n)
    zs = np.abs(emp - exact) / se
    worst = np.unravel_index(int(np.argmax(zs)), zs.shape)
    return FidelityReport(
        max_abs_z=float(zs[worst]),
        worst_entry=(float(nodes[worst[0]]), float(nodes[worst[1]])),
        subgrid=tuple(float(t) for t in nodes),
        passed=bool(zs[worst] <= z_max),
    )


@dataclass(frozen=True)
class NormalityReport:
    max_skew_z: float
    max_kurtosis_z: float
    passed: bool


def normality_check(e: GaussianEnsemble, z_max: float = 5.0) -> NormalityReport:
    """Skewness / excess-kurtosis sanity check at every interior node."""
    X = e.paths if not e.is_vector else e.paths.reshape(e.n_paths, -1)
    X = X[:, 1:]
    n = X.shape[0]
    skew_se = math.sqrt(6.0 / n)
    kurt_se = math.sqrt(24.0 / n)
    sk = np.abs(stats.skew(X, axis=0)) / skew_se
    ku = np.abs(stats.kurtosis(X, axis=0)) / kurt_se
    return NormalityReport(
        max_skew_z=float(sk.max()),
        max_kurtosis_z=float(ku.max()),
        passed=bool(sk.max() <= z_max and ku.max() <= z_max),
    )


def ensemble_to_csv(e: GaussianEnsemble, path, header_lines: Sequence[str] = ()) -> None:
    """One row per path-node; 17 significant digits for float round-trips."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if e.is_vector:
            ncoord = e.paths.shape[2]
            cols = ",".join(f"value_{n+1}" for n in range(ncoord))
            fh.write(f"path,node,t,{cols}\n")
            for p in range(e.n_paths):
                for j in range(e.grid.m):
                    vals = ",".join(f"{v:.17g}" for v in e.paths[p, j])
                    fh.write(f"{p},{j},{e.grid.nodes[j]:.17g},{vals}\n")
        else:
            fh.write("path,node,t,value\n")
            for p in range(e.n_paths):
                for j in range(e.grid.m):
                    fh.write(f"{p},{j},{e.grid.nodes[j]:.17g},{e.paths[p, j]:.17g}\n")


def ensemble_to_binary(e: GaussianEnsemble, path) -> None:
    """Compact dump: JSON header (seed, kernel id, grid, N), float64 LE payload."""
    header = {
        "seed": e.seed,
        "kernel": e.kernel_id,
        "grid_T": e.grid.T,
        "grid_m": e.grid.m,
        "grid_nodes": [float(t) for t in e.grid.nodes],
        "shape": list(e.paths.shape),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", BINARY_VERSION, len(blob)))
        fh.write(blob)
        fh.write(e.paths.astype("<f8").tobytes(order="C"))


def ensemble_from_binary(path) -> GaussianEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
        if magic != BINARY_MAGIC:
            raise DomainError(f"not an ensemble dump: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != BINARY_VERSION:
            raise DomainError(f"unsupported dump version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    shape = tuple(header["shape"])
    paths = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    grid = TimeGrid.from_nodes(header["grid_nodes"])
    return GaussianEnsemble(
        grid=grid, paths=paths, seed=header["seed"], kernel_id=header["kernel"]
    )

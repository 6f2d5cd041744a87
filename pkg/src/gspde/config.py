"""Experiment configuration: one JSON document drives every CLI command.

Each builder validates one section and reports failures with the dotted
field path, so ``gspde <cmd> --config bad.json`` points at the offending
entry.  The master seed is mandatory: no command draws entropy from the
environment.
"""

import importlib
import json
import math
from dataclasses import replace

import numpy as np

from . import rng
from .errors import ConfigError, GspdeError
from .gaussian import NoiseSpec, OperatorValuedIntegrand, TimeGrid
from .kernel import (
    CovarianceKernel,
    make_fbm_kernel,
    make_general_kernel,
    make_stationary_kernel,
)
from .operators import (
    GalerkinSpace,
    constant_diffusion,
    h_minus_one_space,
    linear_diffusion,
    make_p_laplace,
    make_porous_medium,
    w1p_space,
    zero_diffusion,
    zero_drift,
)
from .solver import SolverConfig


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _section(cfg: dict, name: str, required: bool = True) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(name, "section is required for this command")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "section must be an object")
    return sec


def _get(sec: dict, path: str, typ, default=None, required=False):
    key = path.split(".")[-1]
    if key not in sec:
        if required:
            raise ConfigError(path, "missing required field")
        return default
    val = sec[key]
    if typ is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if typ is int and isinstance(val, int) and not isinstance(val, bool):
        return int(val)
    if typ is str and isinstance(val, str):
        return val
    if typ is bool and isinstance(val, bool):
        return val
    if typ is list and isinstance(val, list):
        return val
    raise ConfigError(path, f"expected {typ.__name__}, got {type(val).__name__}")


def master_seed(cfg: dict) -> int:
    if "master_seed" not in cfg:
        raise ConfigError("master_seed", "missing required field (no entropy defaults)")
    seed = cfg["master_seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("master_seed", "must be a non-negative integer")
    return seed


_STATIONARY_FAMILIES = {
    "exponential": lambda a, ell: (lambda w: a * math.exp(-abs(w) / ell)),
    "gaussian": lambda a, ell: (lambda w: a * math.exp(-(w * w) / (2.0 * ell * ell))),
}


def build_kernel(cfg: dict) -> CovarianceKernel:
    sec = _section(cfg, "kernel")
    kind = _get(sec, "kernel.type", str, required=True)
    T = _get(sec, "kernel.T", float, default=1.0)
    try:
        if kind == "fbm":
            H = _get(sec, "kernel.H", float, required=True)
            r = _get(sec, "kernel.r", float, default=None)
            return make_fbm_kernel(H, r=r, T=T)
        if kind == "stationary":
            family = _get(sec, "kernel.family", str, required=True)
            if family not in _STATIONARY_FAMILIES:
                raise ConfigError(
                    "kernel.family", f"unknown family {family!r}; choose from {sorted(_STATIONARY_FAMILIES)}"
                )
            a = _get(sec, "kernel.scale", float, default=1.0)
            ell = _get(sec, "kernel.corr_length", float, default=0.1)
            r = _get(sec, "kernel.r", float, required=True)
            return make_stationary_kernel(_STATIONARY_FAMILIES[family](a, ell), r=r, T=T)
        if kind == "general":
            family = _get(sec, "kernel.family", str, required=True)
            if family != "separable":
                raise ConfigError("kernel.family", f"unknown family {family!r}; only 'separable'")
            coeffs = _get(sec, "kernel.coeffs", list, required=True)
            coeffs = [float(c) for c in coeffs]
            p = _get(sec, "kernel.p", float, required=True)

            def phi(u, v, _c=tuple(coeffs)):
                qu = sum(c * u**i for i, c in enumerate(_c))
                qv = sum(c * v**i for i, c in enumerate(_c))
                return qu * qv

            return make_general_kernel(phi, p=p, T=T)
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("kernel", str(exc)) from exc
    raise ConfigError("kernel.type", f"unknown kernel type {kind!r}")


def build_grid(cfg: dict, k: CovarianceKernel) -> TimeGrid:
    sec = _section(cfg, "grid")
    m = _get(sec, "grid.m", int, required=True)
    if m < 2:
        raise ConfigError("grid.m", f"need at least 2 nodes, got {m}")
    return TimeGrid.uniform(k.T, m)


def build_noise(cfg: dict, required: bool = True) -> NoiseSpec | None:
    sec = _section(cfg, "noise", required=required)
    if not sec:
        return None
    law = _get(sec, "noise.law", str, default="power")
    try:
        if law == "power":
            lambda0 = _get(sec, "noise.lambda0", float, default=1.0)
            beta = _get(sec, "noise.beta", float, required=True)
            N = _get(sec, "noise.N", int, required=True)
            return NoiseSpec.power_law(lambda0, beta, N)
        if law == "explicit":
            values = _get(sec, "noise.values", list, required=True)
            return NoiseSpec.explicit([float(v) for v in values])
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("noise", str(exc)) from exc
    raise ConfigError("noise.law", f"unknown decay law {law!r}")


def build_space(cfg: dict) -> GalerkinSpace:
    sec = _section(cfg, "space")
    triple = _get(sec, "space.triple", str, default="w1p")
    n = _get(sec, "space.n", int, required=True)
    try:
        if triple == "w1p":
            p = _get(sec, "space.p", float, default=2.0)
            return w1p_space(n, p)
        if triple == "h_minus_one":
            m_exp = _get(sec, "space.m", float, required=True)
            return h_minus_one_space(n, m_exp)
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("space", str(exc)) from exc
    raise ConfigError("space.triple", f"unknown triple {triple!r}")


def build_drift(cfg: dict, space: GalerkinSpace):
    sec = _section(cfg, "operator")
    kind = _get(sec, "operator.type", str, required=True)
    try:
        if kind == "linear_heat":
            op = make_p_laplace(space, 2.0, nu=_get(sec, "operator.nu", float, default=1.0))
        elif kind == "p_laplace":
            p = _get(sec, "operator.p", float, required=True)
            op = make_p_laplace(space, p, nu=_get(sec, "operator.nu", float, default=1.0))
        elif kind == "porous_medium":
            m_exp = _get(sec, "operator.m", float, required=True)
            op = make_porous_medium(space, m_exp, nu=_get(sec, "operator.nu", float, default=1.0))
        elif kind == "zero":
            op = zero_drift(space)
        elif kind == "custom":
            target = _get(sec, "operator.factory", str, required=True)
            mod_name, _, attr = target.partition(":")
            if not attr:
                raise ConfigError("operator.factory", "expected 'module:function'")
            factory = getattr(importlib.import_module(mod_name), attr)
            op = factory(space, **sec.get("params", {}))
        else:
            raise ConfigError("operator.type", f"unknown operator type {kind!r}")
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("operator", str(exc)) from exc
    except (ImportError, AttributeError) as exc:
        raise ConfigError("operator.factory", str(exc)) from exc
    override = sec.get("constants")
    if override is not None:
        if not isinstance(override, dict):
            raise ConfigError("operator.constants", "must be an object")
        fields = {"c", "c1", "c2", "c3", "alpha"}
        bad = set(override) - fields
        if bad:
            raise ConfigError("operator.constants", f"unknown constants {sorted(bad)}")
        op = replace(op, constants=replace(op.constants, **{k: float(v) for k, v in override.items()}))
    return op


def build_diffusion(cfg: dict, space: GalerkinSpace, dim_U: int):
    sec = _section(cfg, "diffusion", required=False)
    kind = _get(sec, "diffusion.type", str, default="zero")
    try:
        if kind == "zero":
            return zero_diffusion(space, dim_U)
        if kind == "linear":
            L = _get(sec, "diffusion.L", float, required=True)
            return linear_diffusion(space, dim_U, L)
        if kind == "constant":
            values = _get(sec, "diffusion.values", list, required=True)
            return constant_diffusion(space, np.asarray(values, dtype=float))
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("diffusion", str(exc)) from exc
    raise ConfigError("diffusion.type", f"unknown diffusion type {kind!r}")


def build_forcing(cfg: dict, space: GalerkinSpace, spec: NoiseSpec | None):
    sec = _section(cfg, "forcing", required=False)
    kind = _get(sec, "forcing.type", str, default="zero")
    if kind == "zero":
        return None
    if spec is None:
        raise ConfigError("noise", "a non-zero forcing needs a noise section")
    p_eps = _get(sec, "forcing.p_eps_exponent", float, default=None)
    try:
        if kind == "identity":
            scale = _get(sec, "forcing.scale", float, default=1.0)
            if spec.dim_U != space.n:
                raise ConfigError(
                    "forcing.type", f"identity forcing needs dim_U == n, got {spec.dim_U} != {space.n}"
                )
            return OperatorValuedIntegrand.constant(
                scale * np.eye(space.n), p_eps_exponent=p_eps
            )
        if kind == "rank_one":
            mode_idx = _get(sec, "forcing.mode", int, default=1)
            coord = _get(sec, "forcing.coord", int, default=1)
            scale = _get(sec, "forcing.scale", float, default=1.0)
            if not 1 <= mode_idx <= space.n:
                raise ConfigError("forcing.mode", f"mode must lie in 1..{space.n}")
            if not 1 <= coord <= spec.dim_U:
                raise ConfigError("forcing.coord", f"coord must lie in 1..{spec.dim_U}")
            mode = np.zeros(space.n)
            mode[mode_idx - 1] = 1.0
            return OperatorValuedIntegrand.rank_one(
                mode, coord - 1, spec.dim_U, scale=scale, p_eps_exponent=p_eps
            )
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("forcing", str(exc)) from exc
    raise ConfigError("forcing.type", f"unknown forcing type {kind!r}")


def build_solver(cfg: dict, seed: int) -> SolverConfig:
    sec = _section(cfg, "solver")
    dt = _get(sec, "solver.dt", float, required=True)
    try:
        return SolverConfig(
            dt=dt,
            inner_tol=_get(sec, "solver.inner_tol", float, default=1e-10),
            inner_max_iter=_get(sec, "solver.inner_max_iter", int, default=200),
            inner_method=_get(sec, "solver.inner_method", str, default="newton"),
            inner_init=_get(sec, "solver.inner_init", str, default="warm"),
            seed_W=_get(sec, "solver.seed_W", int, default=seed),
            seed_G=_get(sec, "solver.seed_G", int, default=seed),
        )
    except GspdeError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("solver", str(exc)) from exc


def build_initial(cfg: dict, space: GalerkinSpace, seed: int, run: int = 0) -> np.ndarray:
    sec = _section(cfg, "initial", required=False)
    kind = _get(sec, "initial.type", str, default="zero")
    if kind == "zero":
        return np.zeros(space.n)
    if kind == "coefficients":
        values = _get(sec, "initial.values", list, required=True)
        arr = np.asarray([float(v) for v in values])
        if arr.shape != (space.n,):
            raise ConfigError("initial.values", f"need {space.n} coefficients, got {len(arr)}")
        return arr
    if kind == "mode":
        idx = _get(sec, "initial.index", int, default=1)
        amp = _get(sec, "initial.amplitude", float, default=1.0)
        if not 1 <= idx <= space.n:
            raise ConfigError("initial.index", f"mode index must lie in 1..{space.n}")
        arr = np.zeros(space.n)
        arr[idx - 1] = amp
        return arr
    if kind == "gaussian":
        scale = _get(sec, "initial.scale", float, default=1.0)
        gen = rng.substream(seed, "initial", run)
        return scale * gen.standard_normal(space.n)
    raise ConfigError("initial.type", f"unknown initial condition type {kind!r}")

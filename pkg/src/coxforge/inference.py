"""Laplace-approximate posterior inference for the latent Gaussian model.

The posterior over the latent vector given precisions psi is approximated
by a Gaussian at its mode; the mode is found by damped Newton iteration
restricted to the sum-to-zero subspaces of the spatial-field blocks. The
restriction is handled through the sparse KKT ("bordered") system

    [ H  A' ] [ delta ]   [ g ]
    [ A  0  ] [  nu   ] = [ 0 ]

with ``H`` the negative Hessian and ``A`` the block-sum constraint rows.
One LU factorization of that system per iterate yields the step, the
constrained log-determinant (via |det| of the bordered matrix divided by
det(AA')), and — at the mode — the marginal variances, since the top-left
block of its inverse is exactly the constrained covariance.

The hyperparameter posterior uses the standard Laplace identity
p(psi|y) ∝ p(y|th*) p(th*|psi) p(psi) / N(th*; th*, H^-1), maximized by
deterministic coordinate search in log-precision space (empirical Bayes)
or summed over a centered grid with log-scale Jacobian weights.

Any object with the :class:`coxforge.model.ShoeModel` likelihood/prior
surface (``n_total``, ``n_free``, ``constraint_blocks``, ``lik_parts``,
``prior_precision``, ``prior_quad``, ``log_prior_gendet``,
``log_hyperprior``, ``psi_from_free``) can be driven by these routines;
the test suite uses small synthetic problems with closed-form answers
through the same entry points.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .design import ModelSpec, index_to_string
from .errors import ConfigError, InputDataError, NumericError
from .grids import GridSpec, ShoeRecord
from .model import Hyperparams, LOG_2PI, PriorSpec, ShoeModel, ThetaLayout
from .util import parallel_map

log = logging.getLogger("coxforge.inference")

SEARCH_BOUNDS = (-12.0, 12.0)


@dataclass
class NewtonOptions:
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 30


@dataclass
class ModeResult:
    """Outcome of constrained mode finding for one psi.

    ``value`` is the psi-free part of the log-joint at the mode
    (log-likelihood minus half the prior quadratic form); ``log_det_H``
    the log-determinant of the negative Hessian restricted to the
    constraint subspace.
    """

    theta_star: np.ndarray
    value: float
    log_det_H: float
    grad_norm: float
    iterations: int
    converged: bool
    _lu: Any = field(default=None, repr=False)
    _n_aug: int = field(default=0, repr=False)


def _center_blocks(theta: np.ndarray, blocks: Sequence[np.ndarray]) -> np.ndarray:
    for blk in blocks:
        theta[blk] -= theta[blk].mean()
    return theta


def _project_grad(grad: np.ndarray, blocks: Sequence[np.ndarray]) -> np.ndarray:
    out = grad.copy()
    for blk in blocks:
        out[blk] -= out[blk].mean()
    return out


def _constraint_rows(blocks: Sequence[np.ndarray], n: int) -> sp.csr_matrix:
    c = len(blocks)
    if c == 0:
        return sp.csr_matrix((0, n))
    rows = np.concatenate([np.full(len(b), i) for i, b in enumerate(blocks)])
    cols = np.concatenate(blocks)
    return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(c, n))


def _bordered(H: sp.spmatrix, A: sp.spmatrix) -> sp.csc_matrix:
    if A.shape[0] == 0:
        return H.tocsc()
    z = sp.csc_matrix((A.shape[0], A.shape[0]))
    return sp.bmat([[H, A.T], [A, z]], format="csc")


def _logabsdet_from_lu(lu) -> float:
    diag = lu.U.diagonal()
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        raise NumericError("singular factor in log-determinant")
    return float(np.sum(np.log(np.abs(diag))))


def find_mode(
    psi,
    model,
    theta0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 30,
) -> ModeResult:
    """Damped Newton ascent of the log-joint on the constrained subspace.

    Starts from zero (always feasible) unless ``theta0`` is given; every
    iterate is re-centered so the constrained blocks sum to zero exactly.
    Convergence means the gradient projected onto the constraint nullspace
    has norm <= tol; non-convergence is reported in the result, not
    raised. Line search backtracks by halving and requires strict ascent.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    n = model.n_total
    blocks = model.constraint_blocks
    A = _constraint_rows(blocks, n)
    c = A.shape[0]
    sigma = model.prior_precision(psi)

    theta = np.zeros(n) if theta0 is None else np.array(theta0, dtype=float)
    if theta.shape != (n,):
        raise ConfigError(f"theta0 has shape {theta.shape}, model wants ({n},)")
    _center_blocks(theta, blocks)

    def core(th: np.ndarray) -> float:
        ll = model.loglik(th)
        if ll == -np.inf:
            return -np.inf
        return ll - 0.5 * model.prior_quad(th, psi)

    value = core(theta)
    if value == -np.inf:
        raise NumericError("log-joint is -inf at the starting point")

    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        ll, lgrad, fish = model.lik_parts(theta)
        grad = lgrad - sigma @ theta
        pgrad = _project_grad(grad, blocks)
        grad_norm = float(np.linalg.norm(pgrad))
        if grad_norm <= tol:
            converged = True
            break
        H = (sigma + fish).tocsc()
        try:
            lu = spla.splu(_bordered(H, A))
        except RuntimeError as exc:
            log.warning("Newton factorization failed at iteration %d: %s", it, exc)
            break
        rhs = np.concatenate([grad, np.zeros(c)])
        delta = lu.solve(rhs)[:n]
        accepted = False
        moved = False
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = _center_blocks(theta + t * delta, blocks)
            v = core(cand)
            # ties are accepted: near the mode the true ascent of a Newton
            # step falls below the objective's floating-point resolution
            # while the step itself still contracts toward the optimum.
            if v >= value:
                moved = bool(np.any(cand != theta))
                theta, value = cand, v
                accepted = True
                break
            t *= 0.5
        if not accepted or not moved:
            log.debug("line search stalled at iteration %d (|g|=%.3e)", it, grad_norm)
            break

    # Factor the bordered system at the final point: it provides the
    # constrained log-determinant now and the marginal variances later.
    _, _, fish = model.lik_parts(theta)
    H = (sigma + fish).tocsc()
    try:
        lu = spla.splu(_bordered(H, A))
        log_det = _logabsdet_from_lu(lu)
    except (RuntimeError, NumericError) as exc:
        raise NumericError(f"negative-Hessian factorization failed at mode: {exc}") from exc
    # |det(bordered)| = det(H restricted to the subspace) * det(AA'); the
    # constraint rows are disjoint indicators, so AA' is diagonal.
    log_det -= float(sum(np.log(len(b)) for b in blocks))

    return ModeResult(
        theta_star=theta,
        value=value,
        log_det_H=log_det,
        grad_norm=grad_norm,
        iterations=it,
        converged=converged,
        _lu=lu,
        _n_aug=n + c,
    )


def log_psi_posterior(
    psi,
    model,
    theta0: np.ndarray | None = None,
    opts: NewtonOptions | None = None,
) -> float:
    """Unnormalized log posterior of the precisions, by Laplace approximation.

    log p(y|th*) + log p(th*|psi) + log p(psi) + (d/2) log 2pi
    − ½ log det H, with d the constrained dimension. Raises on
    non-convergence of the inner mode search.
    """
    return _psi_objective(psi, model, theta0, opts)[0]


def _psi_objective(
    psi,
    model,
    theta0: np.ndarray | None = None,
    opts: NewtonOptions | None = None,
) -> tuple[float, ModeResult]:
    o = opts or NewtonOptions()
    mode = find_mode(
        psi, model, theta0=theta0, tol=o.tol, max_iter=o.max_iter,
        max_halvings=o.max_halvings,
    )
    if not mode.converged:
        raise NumericError(
            f"mode search did not converge (final |grad| = {mode.grad_norm:.3e})"
        )
    d = model.n_total - len(model.constraint_blocks)
    # mode.value already holds loglik − ½ th' Sigma th; add the prior's
    # normalization, the hyperprior, and the Gaussian-integral correction.
    lp = (
        mode.value
        + 0.5 * model.log_prior_gendet(psi)
        - 0.5 * d * LOG_2PI
        + model.log_hyperprior(psi)
        + 0.5 * d * LOG_2PI
        - 0.5 * mode.log_det_H
    )
    return float(lp), mode


def marginal_sd(mode: ModeResult, n: int, chunk: int = 256) -> np.ndarray:
    """Posterior marginal standard deviations at one mode.

    Solves the bordered KKT system against identity columns in chunks and
    reads the diagonal of the inverse's top-left block, which equals the
    covariance of the constrained Gaussian approximation.
    """
    if mode._lu is None:
        raise NumericError("mode result carries no factorization")
    var = np.empty(n)
    for start in range(0, n, chunk):
        cols = np.arange(start, min(start + chunk, n))
        E = np.zeros((mode._n_aug, cols.size))
        E[cols, np.arange(cols.size)] = 1.0
        X = mode._lu.solve(E)
        var[cols] = X[cols, np.arange(cols.size)]
    bad = var <= 0
    if np.any(bad):
        raise NumericError(
            f"{int(bad.sum())} non-positive marginal variances — ill-conditioned fit"
        )
    return np.sqrt(var)


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class GridConfig:
    points: int = 5
    spacing: float = 0.75

    def __post_init__(self) -> None:
        if self.points < 1 or self.spacing <= 0:
            raise ConfigError("grid needs points >= 1 and positive spacing")


@dataclass
class PsiGrid:
    """Hyperparameter evaluation points (log precisions) and posterior masses."""

    points: np.ndarray         # (m, n_free) free log precisions
    weights: np.ndarray        # (m,), normalized
    free_names: list[str]

    def to_json_dict(self) -> dict:
        return {
            "free_names": list(self.free_names),
            "points": [list(map(float, row)) for row in self.points],
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PsiGrid":
        return cls(
            points=np.array(d["points"], dtype=float).reshape(len(d["weights"]), -1),
            weights=np.array(d["weights"], dtype=float),
            free_names=list(d["free_names"]),
        )


class _Search:
    """Deterministic coordinate (compass) search with memoized evaluations.

    Only the best candidate's ModeResult keeps its factorization; cached
    entries are stripped, since a search touches on the order of a hundred
    points and each LU factor of the bordered system costs megabytes.
    """

    def __init__(self, model, opts: NewtonOptions):
        self.model = model
        self.opts = opts
        self.cache: dict[tuple, tuple[float, ModeResult | None]] = {}
        self.warm: np.ndarray | None = None
        self.best_value = -np.inf
        self.best_mode: ModeResult | None = None
        self.evals = 0

    def __call__(self, vec: np.ndarray) -> float:
        key = tuple(np.round(vec, 10))
        hit = self.cache.get(key)
        if hit is None:
            psi = self.model.psi_from_free(vec)
            try:
                lp, mode = _psi_objective(
                    psi, self.model, theta0=self.warm, opts=self.opts
                )
            except NumericError as exc:
                log.warning("rejecting candidate %s: %s", np.round(vec, 3), exc)
                lp, mode = -np.inf, None
            self.evals += 1
            if mode is not None and lp > self.best_value:
                self.best_value = lp
                self.best_mode = mode
                self.warm = mode.theta_star
            stripped = None if mode is None else replace(mode, _lu=None, _n_aug=0)
            self.cache[key] = hit = (lp, stripped)
        return hit[0]


def empirical_bayes(
    model,
    opts: NewtonOptions | None = None,
    step0: float = 1.0,
    min_step: float = 1e-3,
    bounds: tuple[float, float] = SEARCH_BOUNDS,
) -> tuple[np.ndarray, _Search]:
    """Maximize the hyperparameter posterior over log precisions.

    Coordinate search from the origin: at each scale, sweep coordinates
    trying +/- step and accept improvements until a full sweep fails, then
    halve the step; stop below ``min_step``. Entirely deterministic.
    """
    o = opts or NewtonOptions()
    ev = _Search(model, o)
    x = np.zeros(model.n_free)
    best = ev(x)
    step = step0
    while step >= min_step:
        improved_any = True
        while improved_any:
            improved_any = False
            for j in range(model.n_free):
                for sgn in (1.0, -1.0):
                    cand = x.copy()
                    cand[j] = float(np.clip(cand[j] + sgn * step, *bounds))
                    if cand[j] == x[j]:
                        continue
                    v = ev(cand)
                    if v > best:
                        best, x = v, cand
                        improved_any = True
        step *= 0.5
    return x, ev


def grid_posterior(
    model,
    center: np.ndarray,
    config: GridConfig,
    opts: NewtonOptions | None = None,
    warm: np.ndarray | None = None,
    threads: int = 1,
) -> tuple[PsiGrid, list[ModeResult]]:
    """Evaluate a centered lattice in log-precision space.

    Posterior masses are exp(log posterior + sum of log precisions): the
    second term is the Jacobian that converts the density over precisions
    to the log scale the (uniform) lattice lives on. Each point is
    warm-started from the same center mode, so results are independent of
    evaluation order and thread count.
    """
    o = opts or NewtonOptions()
    k = model.n_free
    offsets = config.spacing * (np.arange(config.points) - (config.points - 1) / 2)
    points = np.array([
        center + np.array(combo)
        for combo in itertools.product(offsets, repeat=k)
    ])

    def one(vec: np.ndarray) -> tuple[float, ModeResult]:
        psi = model.psi_from_free(vec)
        return _psi_objective(psi, model, theta0=warm, opts=o)

    results = parallel_map(one, points, threads)
    lp = np.array([r[0] for r in results])
    modes = [r[1] for r in results]
    log_mass = lp + points.sum(axis=1)
    log_mass -= log_mass.max()
    w = np.exp(log_mass)
    w /= w.sum()
    names = model.free_names() if hasattr(model, "free_names") else [
        f"log_tau[{i}]" for i in range(k)
    ]
    return PsiGrid(points=points, weights=w, free_names=names), modes


# ---------------------------------------------------------------------------
# the full fit


@dataclass
class FitResult:
    """Posterior summary: marginal moments per coordinate plus psi summaries."""

    spec: ModelSpec
    grid: GridSpec
    prior: PriorSpec
    layout: ThetaLayout
    shoe_ids: list[str]
    strategy: str
    seed: int
    psi_map: Hyperparams
    psi_grid: PsiGrid
    marginal_mean: np.ndarray
    marginal_sd: np.ndarray
    diagnostics: dict

    def heatmap(self, which: str = "smooth") -> np.ndarray:
        """Posterior-mean field as a (ny, nx) array.

        ``which`` is "smooth" or the bit string of a varying index.
        """
        lay = self.layout
        if which == "smooth":
            if not lay.smooth:
                raise ConfigError("model has no smooth field")
            blk = lay.smooth_block
        else:
            names = [index_to_string(i) for i in self.spec.varying]
            if which not in names:
                raise ConfigError(
                    f"unknown field {which!r}; have smooth and {names}"
                )
            blk = lay.varying_block(names.index(which))
        return self.marginal_mean[blk].reshape(self.grid.ny, self.grid.nx)

    def to_json_dict(self) -> dict:
        return {
            "format": "coxforge-fit-v1",
            "model": self.spec.to_json_dict(),
            "grid": self.grid.to_json_dict(),
            "prior": self.prior.to_json_dict(),
            "layout": self.layout.to_json_dict(),
            "shoe_ids": list(self.shoe_ids),
            "strategy": self.strategy,
            "seed": self.seed,
            "psi_map": self.psi_map.to_json_dict(self.spec),
            "psi_grid": self.psi_grid.to_json_dict(),
            "marginal_mean": [float(v) for v in self.marginal_mean],
            "marginal_sd": [float(v) for v in self.marginal_sd],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FitResult":
        if d.get("format") != "coxforge-fit-v1":
            raise InputDataError("not a fit result file (format tag mismatch)")
        spec = ModelSpec.from_json_dict(d["model"])
        return cls(
            spec=spec,
            grid=GridSpec.from_json_dict(d["grid"]),
            prior=PriorSpec.from_json_dict(d["prior"]),
            layout=ThetaLayout.from_json_dict(d["layout"]),
            shoe_ids=list(d["shoe_ids"]),
            strategy=str(d["strategy"]),
            seed=int(d["seed"]),
            psi_map=Hyperparams.from_json_dict(d["psi_map"], spec),
            psi_grid=PsiGrid.from_json_dict(d["psi_grid"]),
            marginal_mean=np.array(d["marginal_mean"], dtype=float),
            marginal_sd=np.array(d["marginal_sd"], dtype=float),
            diagnostics=dict(d.get("diagnostics", {})),
        )


def fit(
    records: Sequence[ShoeRecord],
    spec: ModelSpec,
    grid: GridSpec,
    prior: PriorSpec | None = None,
    strategy: str = "empirical_bayes",
    grid_config: GridConfig | None = None,
    seed: int = 0,
    threads: int = 1,
    opts: NewtonOptions | None = None,
) -> FitResult:
    """Fit the model: hyperparameter search, then Gaussian marginals.

    ``strategy`` is "empirical_bayes" (marginals at the maximizing
    precisions) or "grid" (mixture over a centered lattice of precisions
    weighted by posterior mass). The returned marginal means of every
    constrained block sum to zero. Deterministic for fixed inputs; the
    seed is carried into the result for provenance but no randomness is
    consumed.

    The inner Newton tolerance defaults to 1e-6 here (pass ``opts`` to
    tighten): on dataset-sized problems the log-joint cannot resolve the
    ascent left below that, and the mode is already located far more
    precisely than the posterior spread.
    """
    if strategy not in ("empirical_bayes", "grid"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    t_start = time.perf_counter()
    model = ShoeModel(records, spec, grid, prior)
    if model.y.sum() == 0:
        raise InputDataError("degenerate dataset: every accidental count is zero")
    o = opts or NewtonOptions(tol=1e-6)

    map_vec, search = empirical_bayes(model, opts=o)
    lp_map, map_mode = search.best_value, search.best_mode
    if map_mode is None:
        raise NumericError("hyperparameter search found no evaluable point")

    if strategy == "empirical_bayes":
        psi_grid = PsiGrid(
            points=map_vec.reshape(1, -1),
            weights=np.array([1.0]),
            free_names=model.free_names(),
        )
        modes = [map_mode]
    else:
        psi_grid, modes = grid_posterior(
            model, map_vec, grid_config or GridConfig(), opts=o,
            warm=map_mode.theta_star, threads=threads,
        )

    n = model.n_total
    sds = [marginal_sd(m, n) for m in modes]
    means = np.stack([m.theta_star for m in modes])
    w = psi_grid.weights[:, None]
    mean = (w * means).sum(axis=0)
    second = (w * (np.stack(sds) ** 2 + means**2)).sum(axis=0)
    var = np.maximum(second - mean**2, 0.0)
    sd = np.sqrt(var)

    elapsed = time.perf_counter() - t_start
    diagnostics = {
        "n_latent": int(n),
        "constrained_dim": int(model.layout.constrained_dim),
        "n_free_hyper": int(model.n_free),
        "n_parameters": int(model.layout.constrained_dim + model.n_free),
        "log_psi_posterior_map": float(lp_map),
        "psi_evaluations": int(search.evals),
        "map_newton_iterations": int(map_mode.iterations),
        "map_grad_norm": float(map_mode.grad_norm),
        "search_start_log_tau": 0.0,
        "search_initial_step": 1.0,
        "seconds": float(elapsed),
    }
    log.info(
        "fit %s: %d shoes, %d latent, %d psi evaluations, %.1fs",
        spec.name, len(records), n, search.evals, elapsed,
    )

    return FitResult(
        spec=spec,
        grid=grid,
        prior=model.prior,
        layout=model.layout,
        shoe_ids=model.shoe_ids,
        strategy=strategy,
        seed=seed,
        psi_map=model.psi_from_free(map_vec),
        psi_grid=psi_grid,
        marginal_mean=mean,
        marginal_sd=sd,
        diagnostics=diagnostics,
    )

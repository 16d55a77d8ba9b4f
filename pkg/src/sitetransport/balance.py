"""Balancing-weight programs for one site against a target distribution.

Two formulations of the same convex program: a linear-feature QP whose
quadratic term is kept in factored form (cheap to solve at scale), and a
kernelized QP built from Gram matrices. Both carry the three stability
constraints: treated weights sum to n1, control weights sum to n0, and all
weights are nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import SiteDataset, TargetSpec
from .errors import (
    AllZeroWeightsError,
    DimensionMismatchError,
    ModeMismatchError,
    SolverFailedError,
    UnfittedMapError,
)
from .features import FeatureMap, KernelSpec, apply_feature_map, kernel_matrix, resolve_kernel
from .qp import SOLVED, QpSettings, QpSolution, QuadraticProgram, solve_qp

# Weight solutions flag sites whose effective sample size drops below this
# share of the site size.
LOW_ESS_SHARE = 0.1


@dataclass(frozen=True)
class BalanceProblem:
    """One site, one target, one regularization level.

    Linear mode supplies fitted feature maps for the effect (CATE) side and
    the prognostic side; kernel mode supplies kernel specs instead and
    requires a unit-level target sample.
    """

    site: SiteDataset
    target: TargetSpec
    lam: float
    cate_map: FeatureMap | None = None
    prognostic_map: FeatureMap | None = None
    cate_kernel: KernelSpec | None = None
    prognostic_kernel: KernelSpec | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        has_maps = self.cate_map is not None or self.prognostic_map is not None
        has_kernels = self.cate_kernel is not None or self.prognostic_kernel is not None
        if has_maps and has_kernels:
            raise ModeMismatchError("supply feature maps or kernels, not both")
        if not has_maps and not has_kernels:
            raise ModeMismatchError("supply feature maps (linear mode) or kernels (kernel mode)")
        if has_maps and (self.cate_map is None or self.prognostic_map is None):
            raise ModeMismatchError("linear mode needs both cate_map and prognostic_map")
        if has_kernels and (self.cate_kernel is None or self.prognostic_kernel is None):
            raise ModeMismatchError("kernel mode needs both cate_kernel and prognostic_kernel")
        if has_kernels and not self.target.is_sample:
            raise ModeMismatchError("kernel mode requires a unit-level target sample")

    @property
    def mode(self) -> str:
        return "linear" if self.cate_map is not None else "kernel"


@dataclass(frozen=True)
class WeightSolution:
    """Per-unit weights for one site plus solver and balance diagnostics.

    ``cate_imbalance`` is the treated-vs-target imbalance norm and
    ``prognostic_imbalance`` the treated-vs-control norm; in kernel mode both
    are RKHS-norm surrogates (square roots of the objective blocks).
    """

    gamma: np.ndarray
    lam: float
    solver: QpSolution
    cate_imbalance: float
    prognostic_imbalance: float
    ess: float
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ImbalanceReport:
    cate_imbalance: float
    prognostic_imbalance: float
    per_feature_cate: np.ndarray
    per_feature_prognostic: np.ndarray


@dataclass(frozen=True)
class SweepRow:
    lam: float
    cate_imbalance: float
    prognostic_imbalance: float
    ess: float
    n_failed: int


def _coefficients(site: SiteDataset):
    """Per-unit multipliers for the effect-side and prognostic-side terms."""
    z = site.treatment
    pi = site.propensity
    n = site.n
    a_cate = z / (n * pi)
    a_prog = (z - pi) / (n * pi * (1.0 - pi))
    reg = z / pi + (1.0 - z) / (1.0 - pi)
    return a_cate, a_prog, reg


def _constraints(site: SiteDataset):
    n = site.n
    z = site.treatment
    A = sp.vstack(
        [sp.csr_matrix(z), sp.csr_matrix(1.0 - z), sp.eye(n, format="csr")],
        format="csr",
    )
    l = np.concatenate([[site.n1, site.n0], np.zeros(n)])
    u = np.concatenate([[site.n1, site.n0], np.full(n, np.inf)])
    return A, l, u


def _target_feature_mean(prob: BalanceProblem) -> np.ndarray:
    cmap = prob.cate_map
    if prob.target.is_sample:
        return apply_feature_map(cmap, prob.target.sample).mean(axis=0)
    t = prob.target.moments
    if t.size != cmap.output_dim:
        raise DimensionMismatchError(
            f"target moments have length {t.size}, feature map produces {cmap.output_dim}"
        )
    return t


def build_linear_qp(prob: BalanceProblem) -> QuadraticProgram:
    """Assemble the linear-feature balancing QP with a factored quadratic term.

    The objective is the squared treated-vs-target imbalance in the effect-side
    features, plus the squared treated-vs-control imbalance in the prognostic
    features, plus the lambda ridge penalty; the additive constant ``t't`` is
    dropped and does not affect the argmin.
    """
    if prob.mode != "linear":
        raise ModeMismatchError("build_linear_qp requires a linear-mode problem")
    if not (prob.cate_map.fitted and prob.prognostic_map.fitted):
        raise UnfittedMapError("feature maps must be fitted before assembly")

    site = prob.site
    X = site.covariates
    a_cate, a_prog, reg = _coefficients(site)

    phi_cate = apply_feature_map(prob.cate_map, X)
    phi_prog = apply_feature_map(prob.prognostic_map, X)
    B_cate = a_cate[:, None] * phi_cate  # row i: a_cate_i * phi(X_i)
    B_prog = a_prog[:, None] * phi_prog
    t = _target_feature_mean(prob)

    factor = np.sqrt(2.0) * np.vstack([B_cate.T, B_prog.T])
    p_diag = 2.0 * prob.lam * reg
    q = -2.0 * (B_cate @ t)
    A, l, u = _constraints(site)
    return QuadraticProgram(q=q, A=A, l=l, u=u, p_factor=factor, p_diag=p_diag)


def build_kernel_qp(prob: BalanceProblem) -> QuadraticProgram:
    """Assemble the kernelized balancing QP from Gram matrices.

    With linear kernels on both sides this produces the same argmin as
    ``build_linear_qp`` with identity feature maps (the objectives differ by an
    additive constant).
    """
    if prob.mode != "kernel":
        raise ModeMismatchError("build_kernel_qp requires a kernel-mode problem")
    site = prob.site
    X = site.covariates
    target = prob.target.sample
    pooled = np.vstack([X, target])
    k_cate = resolve_kernel(prob.cate_kernel, pooled)
    k_prog = resolve_kernel(prob.prognostic_kernel, pooled)

    a_cate, a_prog, reg = _coefficients(site)
    K_cate = kernel_matrix(k_cate, X)
    K_prog = kernel_matrix(k_prog, X)
    P = 2.0 * (
        (a_cate[:, None] * K_cate) * a_cate[None, :]
        + (a_prog[:, None] * K_prog) * a_prog[None, :]
    )
    P[np.diag_indices_from(P)] += 2.0 * prob.lam * reg
    P = 0.5 * (P + P.T)

    K_cross = kernel_matrix(k_cate, X, target)  # n x m
    q = -2.0 * a_cate * K_cross.mean(axis=1)
    A, l, u = _constraints(site)
    return QuadraticProgram(P=sp.csr_matrix(P), q=q, A=A, l=l, u=u)


def kish_ess(gamma: np.ndarray | Sequence[float]) -> float:
    """Kish effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(gamma, dtype=float).ravel()
    denom = float(np.sum(w**2))
    if denom <= 0.0:
        raise AllZeroWeightsError("effective sample size undefined for all-zero weights")
    return float(np.sum(w)) ** 2 / denom


def imbalance_report(site: SiteDataset, gamma: np.ndarray, prob: BalanceProblem) -> ImbalanceReport:
    """Signed per-feature imbalances and their norms (linear mode only)."""
    if prob.mode != "linear":
        raise ModeMismatchError("per-feature imbalance requires linear mode")
    gamma = np.asarray(gamma, dtype=float)
    a_cate, a_prog, _ = _coefficients(site)
    phi_cate = apply_feature_map(prob.cate_map, site.covariates)
    phi_prog = apply_feature_map(prob.prognostic_map, site.covariates)
    t = _target_feature_mean(prob)
    cate_vec = phi_cate.T @ (a_cate * gamma) - t
    prog_vec = phi_prog.T @ (a_prog * gamma)
    return ImbalanceReport(
        cate_imbalance=float(np.linalg.norm(cate_vec)),
        prognostic_imbalance=float(np.linalg.norm(prog_vec)),
        per_feature_cate=cate_vec,
        per_feature_prognostic=prog_vec,
    )


def _kernel_imbalances(prob: BalanceProblem, gamma: np.ndarray) -> tuple[float, float]:
    """Square roots of the two kernel objective blocks (RKHS imbalance norms)."""
    site = prob.site
    X = site.covariates
    target = prob.target.sample
    pooled = np.vstack([X, target])
    k_cate = resolve_kernel(prob.cate_kernel, pooled)
    k_prog = resolve_kernel(prob.prognostic_kernel, pooled)
    a_cate, a_prog, _ = _coefficients(site)

    g_cate = a_cate * gamma
    g_prog = a_prog * gamma
    K_cate = kernel_matrix(k_cate, X)
    K_prog = kernel_matrix(k_prog, X)
    K_cross = kernel_matrix(k_cate, X, target)
    m = target.shape[0]
    target_block = float(kernel_matrix(k_cate, target).sum()) / (m * m)
    cate_sq = float(g_cate @ K_cate @ g_cate) - 2.0 * float(g_cate @ K_cross.mean(axis=1)) + target_block
    prog_sq = float(g_prog @ K_prog @ g_prog)
    return float(np.sqrt(max(cate_sq, 0.0))), float(np.sqrt(max(prog_sq, 0.0)))


def _polish(site: SiteDataset, x: np.ndarray) -> np.ndarray:
    """Clip solver negatives at zero and rescale each arm to its exact sum."""
    gamma = np.maximum(x, 0.0)
    treated = site.treatment == 1
    s1 = gamma[treated].sum()
    s0 = gamma[~treated].sum()
    if s1 <= 0 or s0 <= 0:
        raise SolverFailedError("solver returned an arm with no positive weight mass")
    gamma[treated] *= site.n1 / s1
    gamma[~treated] *= site.n0 / s0
    return gamma


def solve_weights(
    prob: BalanceProblem,
    settings: QpSettings | None = None,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> WeightSolution:
    """Solve the balancing program and attach imbalance and ESS diagnostics.

    Returned weights are polished: negatives within solver tolerance are
    clipped and each arm is rescaled so the sum constraints hold exactly.
    """
    qp = build_linear_qp(prob) if prob.mode == "linear" else build_kernel_qp(prob)
    sol = solve_qp(qp, settings=settings, warm_start=warm_start)
    if sol.status != SOLVED:
        raise SolverFailedError(
            f"balancing QP for site {prob.site.site_id!r} ended with status {sol.status}"
        )
    gamma = _polish(prob.site, sol.x)

    if prob.mode == "linear":
        report = imbalance_report(prob.site, gamma, prob)
        cate_imb, prog_imb = report.cate_imbalance, report.prognostic_imbalance
    else:
        cate_imb, prog_imb = _kernel_imbalances(prob, gamma)

    ess = kish_ess(gamma)
    notes = []
    if prob.site.n1 == 1 or prob.site.n0 == 1:
        notes.append("single-unit arm: its weight is forced by the sum constraint")
    if ess < LOW_ESS_SHARE * prob.site.n:
        notes.append(f"low effective sample size: {ess:.1f} of {prob.site.n} units")
    return WeightSolution(
        gamma=gamma,
        lam=prob.lam,
        solver=sol,
        cate_imbalance=cate_imb,
        prognostic_imbalance=prog_imb,
        ess=ess,
        notes=tuple(notes),
    )


def lambda_sweep(
    sites: Sequence[SiteDataset],
    target: TargetSpec,
    lambdas: Sequence[float],
    cate_map: FeatureMap | None = None,
    prognostic_map: FeatureMap | None = None,
    cate_kernel: KernelSpec | None = None,
    prognostic_kernel: KernelSpec | None = None,
    settings: QpSettings | None = None,
) -> list[SweepRow]:
    """Trade-off table over a regularization grid, averaged across sites.

    Each site's weights are warm-started along the grid in descending lambda
    order. Per-cell solver failures are recorded in ``n_failed`` without
    aborting the sweep. Rows come back in ascending lambda order.
    """
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise ValueError("lambda grid must be nonempty")
    if any(v < 0 for v in lambdas):
        raise ValueError("lambda values must be nonnegative")
    order = sorted(set(lambdas), reverse=True)

    cells: dict[float, list[WeightSolution]] = {lam: [] for lam in order}
    failures: dict[float, int] = {lam: 0 for lam in order}
    for site in sites:
        template = BalanceProblem(
            site=site,
            target=target,
            lam=order[0],
            cate_map=cate_map,
            prognostic_map=prognostic_map,
            cate_kernel=cate_kernel,
            prognostic_kernel=prognostic_kernel,
        )
        warm = None
        for lam in order:
            prob = replace(template, lam=lam)
            try:
                ws = solve_weights(prob, settings=settings, warm_start=warm)
            except SolverFailedError:
                failures[lam] += 1
                continue
            warm = (ws.solver.x, ws.solver.y)
            cells[lam].append(ws)

    rows = []
    for lam in sorted(order):
        sols = cells[lam]
        if sols:
            rows.append(
                SweepRow(
                    lam=lam,
                    cate_imbalance=float(np.mean([s.cate_imbalance for s in sols])),
                    prognostic_imbalance=float(np.mean([s.prognostic_imbalance for s in sols])),
                    ess=float(np.mean([s.ess for s in sols])),
                    n_failed=failures[lam],
                )
            )
        else:
            rows.append(
                SweepRow(
                    lam=lam,
                    cate_imbalance=float("nan"),
                    prognostic_imbalance=float("nan"),
                    ess=float("nan"),
                    n_failed=failures[lam],
                )
            )
    return rows

"""Group elastic-net machinery and implicit-regularization oracles.

The regularizer acts on whole bottom-layer filters: for each (feature map i,
channel p) pair the group norm eta = ||w0[i, p, :]||_2 enters
(lambda/2) * sum eta^2 + alpha * sum |eta|. The L2 half is realized as plain
weight decay inside the optimizer; the L1 half is realized here as a
cumulative clipped group proximal update that produces exact zeros.

The module also carries brute-force solvers demonstrating that
overparameterizing a weight as a product of L2-regularized factors is the
same as putting a (sum of) norm penalty on the weight itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import DTYPE
from .models import (
    ArchitectureSpec,
    ConvParams,
    FixedFeatureParams,
    ModelParams,
    layer_table,
)


class GroupView:
    """Bottom-layer filter groups of a model, one per (map, channel) pair.

    For conv-stack models the groups are the filter slices w0[i, p, :]; the
    fixed-feature model groups its per-channel weight columns omega[:, p].
    Groups partition the layer-0 weight tensor exactly.
    """

    def __init__(self, spec: ArchitectureSpec):
        self.spec = spec
        if spec.kind == "fixed_feature":
            self.n_maps = 1
            self.n_channels = spec.n_channels
        elif spec.kind == "learned_filter":
            self.n_maps = 1
            self.n_channels = spec.n_channels
        elif spec.kind in ("one_hidden", "one_hidden_relu"):
            self.n_maps = spec.hidden_maps
            self.n_channels = spec.n_channels
        else:
            self.n_maps = layer_table(spec)[0].out_maps
            self.n_channels = spec.n_channels

    def __len__(self) -> int:
        return self.n_maps * self.n_channels

    def labels(self) -> list:
        """(feature_map, channel) per group, feature-map major."""
        return [(i, p) for i in range(self.n_maps) for p in range(self.n_channels)]

    def weight_tensor(self, params: ModelParams) -> np.ndarray:
        """The layer-0 tensor viewed as [n_maps, n_channels, group_size]."""
        layer = params.layers[0]
        if isinstance(layer, FixedFeatureParams):
            # columns omega[:, p] are the groups
            return layer.omega.T[None, :, :]
        if isinstance(layer, ConvParams):
            return layer.w
        raise TypeError(f"layer 0 has no filter groups: {type(layer)!r}")

    def set_weight_tensor(self, params: ModelParams, values: np.ndarray) -> None:
        layer = params.layers[0]
        if isinstance(layer, FixedFeatureParams):
            layer.omega[:] = values[0].T
        else:
            layer.w[:] = values


def channel_norms(params: ModelParams, groups: GroupView) -> np.ndarray:
    """L2 norm of each group's filter, flattened feature-map major."""
    w = groups.weight_tensor(params)
    return np.linalg.norm(w, axis=2).ravel()


def channel_max_norms(params: ModelParams, groups: GroupView) -> np.ndarray:
    """Per-channel max of the group norms (a channel is active if any is)."""
    w = groups.weight_tensor(params)
    return np.linalg.norm(w, axis=2).max(axis=0)


def elastic_net_penalty(eta: np.ndarray, lam: float, alpha: float) -> float:
    """(lam/2) * sum eta^2 + alpha * sum |eta|."""
    if lam < 0 or alpha < 0:
        raise ValueError(f"penalty strengths must be >= 0, got lam={lam}, alpha={alpha}")
    eta = np.asarray(eta, dtype=DTYPE)
    return float(0.5 * lam * np.sum(eta**2) + alpha * np.sum(np.abs(eta)))


def group_soft_threshold(w: np.ndarray, tau: float) -> np.ndarray:
    """Proximal operator of tau * ||.||_2: radial shrink, exact zero inside tau."""
    if tau < 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    w = np.asarray(w, dtype=DTYPE)
    norm = np.linalg.norm(w)
    if norm <= tau:
        return np.zeros_like(w)
    return w * (1.0 - tau / norm)


@dataclass
class CumulativePenaltyState:
    """Total L1 penalty made available so far, and what each group received.

    ``total`` accumulates alpha * lr over steps; ``applied`` tracks the
    shrinkage each group actually absorbed, so groups that were small when
    penalty accrued are not over-penalized later.
    """

    total: float
    applied: np.ndarray

    @classmethod
    def fresh(cls, groups: GroupView) -> "CumulativePenaltyState":
        return cls(0.0, np.zeros(len(groups), dtype=DTYPE))

    def copy(self) -> "CumulativePenaltyState":
        return CumulativePenaltyState(self.total, self.applied.copy())

    def to_dict(self) -> dict:
        return {"total": self.total, "applied": self.applied.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CumulativePenaltyState":
        return cls(float(d["total"]), np.asarray(d["applied"], dtype=DTYPE))


def cumulative_l1_update(params: ModelParams, groups: GroupView,
                         state: CumulativePenaltyState, alpha: float,
                         lr: float):
    """One clipped group-proximal step; call once per optimizer step.

    Adds alpha*lr to the available penalty, then shrinks each group radially
    by the outstanding amount min(||w_g||, total - applied_g), producing
    exact zeros once a group's norm is exhausted. Modifies the layer-0
    weights in place and returns ``(params, new_state)``.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0.0:
        return params, state
    w = groups.weight_tensor(params)
    norms = np.linalg.norm(w, axis=2)
    total = state.total + alpha * lr
    outstanding = np.maximum(total - state.applied, 0.0).reshape(norms.shape)
    shrink = np.minimum(norms, outstanding)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norms > shrink, 1.0 - shrink / norms, 0.0)
    scaled = w * scale[:, :, None]
    scaled[norms <= shrink, :] = 0.0  # exact zeros, not rounded products
    groups.set_weight_tensor(params, scaled)
    new_state = CumulativePenaltyState(total, state.applied + shrink.ravel())
    return params, new_state


# ---------------------------------------------------------------------------
# overparameterization oracles
# ---------------------------------------------------------------------------

def overparam_scalar_identity(w: float, grid_halfwidth: float = 6.0,
                              grid_step: float = 1e-3) -> float:
    """Brute-force min over x*y == w of x^2/2 + y^2/2; equals |w|.

    The grid must cover the analytic minimizer |x| = sqrt(|w|).
    """
    xs = np.arange(grid_step, grid_halfwidth + grid_step / 2, grid_step)
    best = np.inf
    if w == 0.0:
        best = 0.0  # x = y = 0 is feasible only here
    vals = 0.5 * xs**2 + 0.5 * (w / xs) ** 2
    return float(min(best, vals.min()))


@dataclass
class QuadraticObjective:
    """f(v) = ||A v - c||^2 / 2 on a small dense problem."""

    a: np.ndarray
    c: np.ndarray

    def value(self, v: np.ndarray) -> float:
        r = self.a @ v - self.c
        return 0.5 * float(r @ r)

    def grad(self, v: np.ndarray) -> np.ndarray:
        return self.a.T @ (self.a @ v - self.c)

    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.a, 2) ** 2)

    @property
    def dim(self) -> int:
        return self.a.shape[-1]


@dataclass
class OverparamSolution:
    beta: float
    w: np.ndarray           # factored solution of the extended problem
    v_extended: np.ndarray  # beta * w
    v_norm_reg: np.ndarray  # minimizer of f(v) + gamma * ||v||
    extended_value: float
    norm_reg_value: float


def _solve_norm_regularized(f: QuadraticObjective, gamma: float,
                            max_iter: int = 200_000, tol: float = 1e-14) -> np.ndarray:
    """Proximal gradient on f(v) + gamma*||v||_2 (convex, global minimum)."""
    step = 1.0 / max(f.lipschitz(), 1e-12)
    v = np.zeros(f.dim, dtype=DTYPE)
    for _ in range(max_iter):
        v_next = group_soft_threshold(v - step * f.grad(v), step * gamma)
        if np.linalg.norm(v_next - v) < tol:
            return v_next
        v = v_next
    return v


def _descend_extended(f: QuadraticObjective, gamma: float, w0: np.ndarray,
                      beta0: float, max_iter: int = 20_000, tol: float = 1e-15):
    """Exact alternating minimization of the smooth extended objective.

    For fixed beta the w-subproblem is ridge regression; for fixed w the
    beta-subproblem is a scalar quadratic. Both are solved in closed form,
    so the objective decreases monotonically to a stationary point.
    """
    w = np.atleast_1d(w0).astype(DTYPE).copy()
    beta = float(beta0)
    ata = f.a.T @ f.a
    atc = f.a.T @ f.c
    eye = np.eye(f.dim)

    def value(w_, b_):
        return f.value(b_ * w_) + 0.5 * gamma * (b_ * b_ + float(w_ @ w_))

    cur = value(w, beta)
    for _ in range(max_iter):
        lhs = beta * beta * ata + gamma * eye
        try:
            w = np.linalg.solve(lhs, beta * atc)
        except np.linalg.LinAlgError:
            w = np.linalg.lstsq(lhs, beta * atc, rcond=None)[0]
        aw = f.a @ w
        denom = float(aw @ aw) + gamma
        beta = 0.0 if denom == 0.0 else float(aw @ f.c) / denom
        new = value(w, beta)
        if abs(cur - new) <= tol * max(1.0, abs(cur)):
            cur = new
            break
        cur = new
    g_outer = f.grad(beta * w)
    gw = beta * g_outer + gamma * w
    gb = float(w @ g_outer) + gamma * beta
    gnorm = float(np.sqrt(float(gw @ gw) + gb * gb))
    return w, beta, cur, gnorm


def overparam_vector_equivalence(a: np.ndarray, c: np.ndarray, gamma: float,
                                 restarts: int = 8,
                                 rng: Optional[np.random.Generator] = None,
                                 match_tol: float = 5e-2) -> OverparamSolution:
    """Solve both sides of the product-factorization equivalence.

    Extended problem: min over (w, beta) of f(beta w) + gamma/2 * beta^2
    + gamma/2 * ||w||^2. Norm-regularized problem: min over v of
    f(v) + gamma * ||v||_2. The products beta*w must match v; raises after
    all restarts if no stationary point reproduces the norm-regularized
    minimum value.
    """
    f = QuadraticObjective(np.asarray(a, dtype=DTYPE), np.asarray(c, dtype=DTYPE))
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    rng = rng or np.random.default_rng(0)

    v_star = _solve_norm_regularized(f, gamma)
    target = f.value(v_star) + gamma * float(np.linalg.norm(v_star))

    dim = f.dim
    inits = []
    nv = float(np.linalg.norm(v_star))
    if nv > 0:
        inits.append((v_star / np.sqrt(nv), np.sqrt(nv)))  # closed-form split
    inits.append((np.zeros(dim), 0.0))
    while len(inits) < restarts:
        inits.append((rng.normal(size=dim), float(rng.normal())))

    best = None
    for w0, b0 in inits:
        w, beta, val, gnorm = _descend_extended(f, gamma, np.atleast_1d(w0), b0)
        if best is None or val < best[2]:
            best = (w, beta, val, gnorm)
    w, beta, val, gnorm = best
    if gnorm > 1e-6 and abs(val - target) > match_tol:
        raise RuntimeError(
            f"extended problem did not converge: best value {val:.6g}, "
            f"norm-regularized value {target:.6g}, grad norm {gnorm:.3g}"
        )
    return OverparamSolution(
        beta=beta,
        w=w,
        v_extended=beta * w,
        v_norm_reg=v_star,
        extended_value=val,
        norm_reg_value=target,
    )


def optimal_split_values(v: np.ndarray) -> tuple:
    """Closed-form optimal (beta, ||w||, beta^2/2 + ||w||^2/2) for beta*w == v.

    The scale s = ||v||^(-1/2) gives w = s*v and beta = ||v||/||w||, both of
    norm sqrt(||v||), so the split cost equals ||v||.
    """
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return 0.0, 0.0, 0.0
    s = nv ** -0.5
    w_norm = float(np.linalg.norm(s * np.asarray(v, dtype=DTYPE)))
    beta = nv / w_norm
    return beta, w_norm, 0.5 * beta**2 + 0.5 * w_norm**2

"""Local operators F_i(x, theta), mean-field versions, and problem constants.

Two built-in operator families: the quadratic-loss gradient map used in
system identification, and the linear-function-approximation Q-learning map.
Constants (B, L, alpha) are either estimated from probes or derived
analytically for the autoregressive quadratic case.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import solve_discrete_lyapunov

from .sources import ARSource, FiniteChain, Maze, stationary_distribution


class OperatorError(ValueError):
    """Raised for dimension mismatches and misuse of operator contracts."""


@dataclass(frozen=True)
class LocalOperator:
    dim: int
    eval: callable  # (observation, theta) -> R^dim
    kind: str = "custom"
    params: dict = field(default_factory=dict)


def eval_local(op: LocalOperator, x, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (op.dim,):
        raise OperatorError(f"theta has shape {theta.shape}, expected ({op.dim},)")
    return np.asarray(op.eval(x, theta), dtype=float)


# ---------------------------------------------------------------------------
# quadratic-gradient operator (system identification)


def quadratic_grad_operator(dim: int, u=None) -> LocalOperator:
    """F(x, theta) = -grad_theta (<theta, x1> - x2)^2 = -2(<theta,x1> - x2) x1.

    Descent orientation: the negative gradient makes the aggregate map
    1-point strongly monotone for positive-definite sample covariance.
    """

    def _eval(x, theta):
        x1, x2 = x
        x1 = np.asarray(x1, dtype=float)
        return -2.0 * (float(x1 @ theta) - float(x2)) * x1

    params = {} if u is None else {"u": np.asarray(u, dtype=float)}
    return LocalOperator(dim=dim, eval=_eval, kind="quadratic-gradient", params=params)


# ---------------------------------------------------------------------------
# Q-learning operator (linear / tabular function approximation)


@dataclass(frozen=True)
class TabularFeatures:
    """One-hot state-action features over a width x height grid."""

    n_states: int
    n_actions: int

    @property
    def dim(self):
        return self.n_states * self.n_actions

    def index(self, s, a):
        return int(s) * self.n_actions + int(a)

    def vector(self, s, a):
        phi = np.zeros(self.dim)
        phi[self.index(s, a)] = 1.0
        return phi

    def q_values(self, theta, s):
        base = int(s) * self.n_actions
        return np.asarray(theta)[base:base + self.n_actions]


def qlearning_operator(features: TabularFeatures, gamma: float) -> LocalOperator:
    """Semi-gradient Q-learning map
    F((s,a,r,s'), theta) = phi(s,a) (r + gamma max_a' phi(s',a')^T theta
                                       - phi(s,a)^T theta).
    Argmax ties break toward the smallest action index."""
    if not (0.0 < gamma < 1.0):
        raise OperatorError("gamma must lie in (0,1)")

    def _eval(x, theta):
        s, a, r, s_next = x
        idx = features.index(s, a)
        q_next = float(np.max(features.q_values(theta, s_next)))
        out = np.zeros(features.dim)
        out[idx] = float(r) + gamma * q_next - float(theta[idx])
        return out

    return LocalOperator(dim=features.dim, eval=_eval, kind="qlearning",
                         params={"features": features, "gamma": gamma})


# ---------------------------------------------------------------------------
# mean fields


def eval_mean_field(op: LocalOperator, src, theta) -> np.ndarray:
    """Exact expectation over a finite chain's stationary distribution.

    The observation passed to the operator is the chain state index."""
    if not isinstance(src, FiniteChain):
        raise OperatorError(
            "exact mean field requires a FiniteChain; use estimate_mean_field "
            "for continuous sources")
    mu = stationary_distribution(src)
    theta = np.asarray(theta, dtype=float)
    total = np.zeros(op.dim)
    for x, weight in enumerate(mu):
        total += weight * eval_local(op, x, theta)
    return total


def estimate_mean_field(op: LocalOperator, src, theta, n_samples, rng,
                        burn_in=1000):
    """Monte Carlo mean-field estimate (mean, standard error per coordinate)."""
    theta = np.asarray(theta, dtype=float)
    for _ in range(burn_in):
        src.sample(rng)
    acc = np.zeros(op.dim)
    acc2 = np.zeros(op.dim)
    for _ in range(n_samples):
        v = eval_local(op, src.sample(rng), theta)
        acc += v
        acc2 += v * v
    mean = acc / n_samples
    var = np.clip(acc2 / n_samples - mean**2, 0.0, None)
    return mean, np.sqrt(var / n_samples)


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class OperatorConstants:
    B: float
    L: float
    alpha: float

    def __post_init__(self):
        if self.B < self.L - 1e-12:
            raise OperatorError("constant B must dominate L")


def probe_thetas(dim, rng, n_pairs=64, radius=10.0):
    """Probe grid: random theta pairs in the radius-10 ball plus the axes."""
    pairs = []
    for _ in range(n_pairs):
        a = rng.standard_normal(dim)
        b = rng.standard_normal(dim)
        a *= radius * rng.random() ** (1.0 / dim) / max(np.linalg.norm(a), 1e-12)
        b *= radius * rng.random() ** (1.0 / dim) / max(np.linalg.norm(b), 1e-12)
        pairs.append((a, b))
    zero = np.zeros(dim)
    for i in range(dim):
        axis = np.zeros(dim)
        axis[i] = radius
        pairs.append((axis, zero))
        pairs.append((-axis, axis))
    return pairs


def estimate_constants(op: LocalOperator, observations, theta_pairs,
                       alpha=math.nan) -> OperatorConstants:
    """Measured Lipschitz constant and affine bound over probe grids.

    L_hat = max ||F(x,t)-F(x,t')|| / ||t-t'||;  B_hat = max{L_hat, ||F(x,0)||}.
    Both are lower bounds on the true suprema (measured on finite probes)."""
    observations = list(observations)
    theta_pairs = list(theta_pairs)
    if not observations or not theta_pairs:
        raise OperatorError("need at least one observation and one theta pair")
    zero = np.zeros(op.dim)
    l_hat = 0.0
    f0_max = 0.0
    for x in observations:
        f0_max = max(f0_max, float(np.linalg.norm(eval_local(op, x, zero))))
        for ta, tb in theta_pairs:
            gap = float(np.linalg.norm(np.asarray(ta) - np.asarray(tb)))
            if gap < 1e-12:
                raise OperatorError("degenerate probe pair (identical thetas)")
            diff = eval_local(op, x, ta) - eval_local(op, x, tb)
            l_hat = max(l_hat, float(np.linalg.norm(diff)) / gap)
    return OperatorConstants(B=max(l_hat, f0_max), L=l_hat, alpha=alpha)


def clipped_normal_variance(clip: float) -> float:
    """Variance of a standard normal truncated by clipping to [-clip, clip]."""
    c = float(clip)
    inner = (stats.norm.cdf(c) - stats.norm.cdf(-c)) - 2.0 * c * stats.norm.pdf(c)
    return inner + c * c * 2.0 * stats.norm.sf(c)


def ar_stationary_covariance(A, noise_clip) -> np.ndarray:
    """Stationary covariance of the AR state: Sigma = A Sigma A^T + q e1 e1^T."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    q = np.zeros((d, d))
    q[0, 0] = clipped_normal_variance(noise_clip)
    return solve_discrete_lyapunov(A, q)


def system_id_constants(sources) -> OperatorConstants:
    """Analytic (B, L, alpha) for quadratic-gradient operators over ARSources.

    L and B are true uniform bounds over the reachable (from zero) state
    space; alpha = 2 lambda_min(sum_i E[X(1) X(1)^T]) from the Lyapunov solve.
    """
    from .sources import ar_state_bound

    l_max = 0.0
    b_zero = 0.0
    cov_sum = None
    for src in sources:
        if not isinstance(src, ARSource):
            raise OperatorError("system_id_constants expects ARSources")
        xmax = ar_state_bound(src.A, src.noise_clip)
        x1_norm = float(np.linalg.norm(xmax))
        x2_max = float(np.abs(src.u) @ xmax) + src.noise_clip
        l_max = max(l_max, 2.0 * x1_norm**2)
        b_zero = max(b_zero, 2.0 * x2_max * x1_norm)
        cov = ar_stationary_covariance(src.A, src.noise_clip)
        cov_sum = cov if cov_sum is None else cov_sum + cov
    alpha = 2.0 * float(np.min(np.linalg.eigvalsh(cov_sum)))
    return OperatorConstants(B=max(l_max, b_zero), L=l_max, alpha=alpha)


# ---------------------------------------------------------------------------
# problem spec and fixed-point oracles


@dataclass
class ProblemSpec:
    operators: list
    sources: list
    alpha: float = math.nan
    theta_star: np.ndarray = None

    def __post_init__(self):
        if len(self.operators) != len(self.sources):
            raise OperatorError("one source per operator required")
        dims = {op.dim for op in self.operators}
        if len(dims) != 1:
            raise OperatorError("operators disagree on dimension")
        if self.theta_star is not None:
            self.theta_star = np.asarray(self.theta_star, dtype=float)

    @property
    def dim(self):
        return self.operators[0].dim

    @property
    def n_agents(self):
        return len(self.operators)


@dataclass(frozen=True)
class FixedPoint:
    theta: np.ndarray
    unique: bool = True
    method: str = "analytic"


def value_iteration_q(maze: Maze, gamma: float, tol=1e-12, max_iter=200_000):
    """Tabular Q fixed point under the teleport semantics: goal-state rows
    stay at zero (they are never updated by the sampled chain)."""
    feats = TabularFeatures(maze.n_cells, maze.n_actions)
    q = np.zeros(feats.dim)
    non_goal = [s for s in range(maze.n_cells)
                if s not in maze.goals and not maze.is_obstacle(s)]
    for _ in range(max_iter):
        delta = 0.0
        new = q.copy()
        for s in non_goal:
            for a in range(maze.n_actions):
                t, r = maze.move(s, a)
                target = r + gamma * float(np.max(feats.q_values(q, t)))
                idx = feats.index(s, a)
                delta = max(delta, abs(target - q[idx]))
                new[idx] = target
        q = new
        if delta <= tol:
            return q
    raise OperatorError("value iteration did not converge")


def fixed_point_oracle(spec: ProblemSpec) -> FixedPoint:
    """Root of the aggregate mean field.

    quadratic  -> theta* = u (zero-mean residual noise);
    qlearning  -> value iteration on the (single) task;
    custom     -> mean-field probe for degeneracy, else long SA run.
    """
    kinds = {op.kind for op in spec.operators}
    if kinds == {"quadratic-gradient"}:
        us = [op.params.get("u") for op in spec.operators]
        if any(u is None for u in us):
            raise OperatorError("quadratic operators lack the parameter u")
        u0 = us[0]
        if any(not np.array_equal(u, u0) for u in us):
            raise OperatorError("agents disagree on the shared parameter u")
        return FixedPoint(theta=np.array(u0, dtype=float), method="quadratic-root")
    if kinds == {"qlearning"}:
        mazes = {id(s.maze) for s in spec.sources}
        if len(mazes) != 1:
            raise OperatorError("analytic Q fixed point needs a single shared task")
        gamma = spec.operators[0].params["gamma"]
        q = value_iteration_q(spec.sources[0].maze, gamma)
        return FixedPoint(theta=q, method="value-iteration")
    if all(isinstance(s, FiniteChain) for s in spec.sources):
        return _finite_chain_oracle(spec)
    raise OperatorError("no fixed-point method applicable to this spec")


def _finite_chain_oracle(spec, probes=8, tol=1e-10):
    rng = np.random.default_rng(0)
    d = spec.dim

    def aggregate(theta):
        return sum(eval_mean_field(op, src, theta)
                   for op, src in zip(spec.operators, spec.sources))

    # degeneracy probe: identically-zero aggregate has no unique root
    if all(np.linalg.norm(aggregate(rng.standard_normal(d) * 5)) < tol
           for _ in range(probes)) and np.linalg.norm(aggregate(np.zeros(d))) < tol:
        return FixedPoint(theta=np.zeros(d), unique=False, method="degenerate")
    theta = np.zeros(d)
    for _ in range(500_000):
        g = aggregate(theta)
        if np.linalg.norm(g) < tol:
            return FixedPoint(theta=theta, method="mean-field-iteration")
        theta = theta + 0.05 * g
    raise OperatorError("mean-field iteration did not converge to a root")

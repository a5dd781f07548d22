"""Per-agent Markovian data generators and mixing-time machinery.

Three source kinds: finite ergodic chains (exact distributions available),
clipped-noise autoregressive processes, and GridWorld MDPs driven by a
uniform behavior policy with goal-to-start teleports.
"""

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

ROW_TOL = 1e-12


class SourceError(ValueError):
    """Raised for malformed chains, mazes, or invalid mixing queries."""


# ---------------------------------------------------------------------------
# finite chains


@dataclass
class FiniteChain:
    transition: np.ndarray
    state: int = 0

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise SourceError("transition matrix must be square")
        if np.any(p < 0):
            raise SourceError("transition probabilities must be nonnegative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_TOL:
            raise SourceError("transition rows must sum to 1 within 1e-12")
        p = p.copy()
        p.setflags(write=False)
        self.transition = p
        if not (0 <= self.state < p.shape[0]):
            raise SourceError("initial state out of range")

    @property
    def n_states(self):
        return self.transition.shape[0]

    def sample(self, rng):
        """Advance one step and return the new state."""
        self.state = int(rng.choice(self.n_states, p=self.transition[self.state]))
        return self.state


def ergodicity_report(c: FiniteChain):
    """(irreducible, aperiodic) for the chain's support digraph."""
    g = nx.DiGraph()
    g.add_nodes_from(range(c.n_states))
    rows, cols = np.nonzero(c.transition > 0)
    g.add_edges_from(zip(rows.tolist(), cols.tolist()))
    irreducible = nx.is_strongly_connected(g)
    aperiodic = irreducible and nx.is_aperiodic(g)
    return irreducible, aperiodic


def _require_ergodic(c: FiniteChain):
    irreducible, aperiodic = ergodicity_report(c)
    if not irreducible:
        raise SourceError("chain is not irreducible")
    if not aperiodic:
        raise SourceError("chain is periodic")


def stationary_distribution(c: FiniteChain) -> np.ndarray:
    """mu with mu P = mu, sum(mu) = 1, residual below 1e-12."""
    _require_ergodic(c)
    n = c.n_states
    # (P^T - I) mu = 0 plus the normalization row, solved by least squares.
    a = np.vstack([c.transition.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    # one power-iteration polish pass
    for _ in range(5):
        resid = np.max(np.abs(mu @ c.transition - mu))
        if resid <= 1e-13:
            break
        mu = mu @ c.transition
        mu /= mu.sum()
    if np.max(np.abs(mu @ c.transition - mu)) > 1e-12:
        raise SourceError("stationary distribution did not reach 1e-12 residual")
    return mu


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SourceError("distributions must have equal length")
    return 0.5 * float(np.abs(p - q).sum())


def _worst_tv(power, mu):
    return max(tv_distance(row, mu) for row in power)


def mixing_time(c: FiniteChain, eps: float) -> int:
    """Smallest k with max-over-starts TV(P^k(x,.), mu) <= eps, by explicit
    matrix powers."""
    if not (0.0 < eps < 1.0):
        raise SourceError("eps must lie in (0,1)")
    mu = stationary_distribution(c)
    power = np.eye(c.n_states)
    k = 0
    while _worst_tv(power, mu) > eps:
        power = power @ c.transition
        k += 1
        if k > 100_000:
            raise SourceError("mixing time exceeded 1e5 iterations")
    return k


def slem(c: FiniteChain) -> float:
    """Second largest eigenvalue modulus of the transition matrix."""
    vals = np.sort(np.abs(np.linalg.eigvals(c.transition)))[::-1]
    second = float(vals[1]) if len(vals) > 1 else 0.0
    # eigenvalues that are exactly zero in structure show up as round-off
    return second if second > 1e-12 else 0.0


@dataclass(frozen=True)
class MixingProfile:
    """Geometric mixing bound TV(k) <= m rho^k and tau(eps) <= beta log(1/eps)."""

    m: float
    rho: float
    beta: float


def fit_mixing_profile(c: FiniteChain, eps_grid) -> MixingProfile:
    """rho = SLEM; m = smallest constant covering measured TV on the
    validation range; beta = smallest constant covering tau on eps_grid."""
    _require_ergodic(c)
    eps_grid = sorted(float(e) for e in eps_grid)
    if not eps_grid:
        raise SourceError("eps_grid must be nonempty")
    mu = stationary_distribution(c)
    rho = slem(c)
    k_max = mixing_time(c, eps_grid[0])
    # extend the fit range beyond the smallest-eps mixing time so the bound
    # stays valid at the eigenvalue-implied mixing horizon
    k_fit = 2 * k_max + 10
    power = np.eye(c.n_states)
    m = 0.0
    for k in range(k_fit + 1):
        tv = _worst_tv(power, mu)
        if tv > 1e-12:
            if rho == 0.0:
                if k == 0:
                    m = max(m, tv)
            else:
                m = max(m, tv / rho**k)
        power = power @ c.transition
    m = max(m, 1e-12)
    beta = 0.0
    for eps in eps_grid:
        denom = math.log(1.0 / eps)
        if denom <= 0:
            continue
        beta = max(beta, mixing_time(c, eps) / denom)
    beta = max(beta, 1e-12)
    return MixingProfile(m=m, rho=rho, beta=beta)


def global_tau(profiles, eps: float, per_agent_tau) -> int:
    """Network-level tau(eps) = max{ceil(rho/(1-rho)), max_i tau(i,eps)}."""
    if not profiles or not per_agent_tau:
        raise SourceError("profiles and per-agent taus must be nonempty")
    rho = max(p.rho for p in profiles)
    floor_term = math.ceil(rho / (1.0 - rho) - 1e-9) if rho > 0 else 0
    return max(floor_term, max(int(t) for t in per_agent_tau))


# ---------------------------------------------------------------------------
# autoregressive source


def clipped_normal(rng, clip):
    return float(np.clip(rng.standard_normal(), -clip, clip))


@dataclass
class ARSource:
    """X(1) <- A X(1) + clip(noise) e1;  X(2) = <u, X(1)> + clip(noise).

    Noise clipping keeps the observation space compact (default clip 3).
    """

    A: np.ndarray
    u: np.ndarray
    noise_clip: float = 3.0
    state: np.ndarray = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.u.shape != (d,):
            raise SourceError("A must be d x d and u length d")
        if np.max(np.abs(np.linalg.eigvals(self.A))) >= 1.0:
            raise SourceError("spectral radius of A must be < 1")
        if self.noise_clip <= 0:
            raise SourceError("noise_clip must be positive")
        if self.state is None:
            self.state = np.zeros(d)
        else:
            self.state = np.asarray(self.state, dtype=float).copy()

    @property
    def dim(self):
        return self.A.shape[0]

    def sample(self, rng):
        x1 = self.A @ self.state
        x1[0] += clipped_normal(rng, self.noise_clip)
        x2 = float(self.u @ x1) + clipped_normal(rng, self.noise_clip)
        self.state = x1
        return x1.copy(), x2


def ar_state_bound(A, noise_clip) -> np.ndarray:
    """Componentwise bound on |X(1)| reachable from X(0)=0:
    (I - |A|)^-1 e1 * clip, valid when spectral radius of |A| < 1."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    absA = np.abs(A)
    if np.max(np.abs(np.linalg.eigvals(absA))) >= 1.0:
        raise SourceError("cannot bound state: spectral radius of |A| >= 1")
    e1 = np.zeros(d)
    e1[0] = 1.0
    return np.linalg.solve(np.eye(d) - absA, e1) * float(noise_clip)


# ---------------------------------------------------------------------------
# GridWorld MDP source

ACTIONS = ("up", "down", "left", "right")
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class Maze:
    """Text-grid maze: '.' empty, '#' obstacle, 'S' start, 'G' goal."""

    cells: tuple  # rows of strings
    height: int = field(init=False)
    width: int = field(init=False)
    start: int = field(init=False)
    goals: frozenset = field(init=False)

    def __post_init__(self):
        rows = tuple(self.cells)
        if not rows or len({len(r) for r in rows}) != 1:
            raise SourceError("maze rows must be nonempty and equal length")
        self.cells = rows
        self.height = len(rows)
        self.width = len(rows[0])
        starts, goals = [], []
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch == "S":
                    starts.append(self.index(r, c))
                elif ch == "G":
                    goals.append(self.index(r, c))
                elif ch not in ".#":
                    raise SourceError(f"unknown maze character {ch!r}")
        if len(starts) != 1:
            raise SourceError("maze must contain exactly one start 'S'")
        if not goals:
            raise SourceError("maze must contain at least one goal 'G'")
        self.start = starts[0]
        self.goals = frozenset(goals)
        if not self._goal_reachable():
            raise SourceError("no goal reachable from start")

    def index(self, r, c):
        return r * self.width + c

    def is_obstacle(self, s):
        return self.cells[s // self.width][s % self.width] == "#"

    @property
    def n_cells(self):
        return self.width * self.height

    @property
    def n_actions(self):
        return len(ACTIONS)

    def move(self, s, a):
        """(next_state, reward): obstacle or wall bumps keep the agent in
        place (reward -1 for obstacles, 0 for walls); goals give +1."""
        r, c = divmod(s, self.width)
        dr, dc = _MOVES[a]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.height and 0 <= nc < self.width):
            return s, 0.0
        t = self.index(nr, nc)
        if self.is_obstacle(t):
            return s, -1.0
        if t in self.goals:
            return t, 1.0
        return t, 0.0

    def _goal_reachable(self):
        seen = {self.start}
        stack = [self.start]
        while stack:
            s = stack.pop()
            if s in self.goals:
                return True
            for a in range(4):
                t, _ = self.move(s, a)
                if t not in seen:
                    seen.add(t)
                    stack.append(t)
        return False


def parse_maze(text: str) -> Maze:
    rows = [line for line in text.splitlines() if line.strip()]
    return Maze(cells=tuple(rows))


def load_maze(path) -> Maze:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_maze(fh.read())


@dataclass
class MDPSource:
    """GridWorld chain over (s, a, r, s') under a uniform behavior policy.

    Reaching a goal teleports back to start inside the same chain, keeping
    the sample process a single ergodic Markov chain.
    """

    maze: Maze
    gamma: float = 0.9
    state: int = None

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise SourceError("gamma must lie in (0,1)")
        if self.state is None:
            self.state = self.maze.start

    def sample(self, rng):
        s = self.state
        a = int(rng.integers(0, self.maze.n_actions))
        s_next, r = self.maze.move(s, a)
        self.state = self.maze.start if s_next in self.maze.goals else s_next
        return s, a, r, s_next


def sample_step(src, rng):
    """Advance a source one step and return its observation."""
    return src.sample(rng)

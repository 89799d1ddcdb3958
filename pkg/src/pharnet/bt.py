"""Bradley-Terry strengths from pairwise win counts (minorization-maximization)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSEUDO_COUNT = 0.5
TOLERANCE = 1e-9
MAX_ITER = 10_000


class BTError(ValueError):
    pass


@dataclass
class BTResult:
    methods: list[str]
    scores: np.ndarray
    iterations: int
    converged: bool
    pseudo_count: float

    def ranking(self) -> list[tuple[str, float]]:
        order = np.argsort(-self.scores, kind="stable")
        return [(self.methods[i], float(self.scores[i])) for i in order]

    def format(self) -> str:
        lines = [f"# Bradley-Terry log-strengths, zero mean, pseudo-count {self.pseudo_count:g} per compared ordered pair"]
        lines += [f"{name} {score:.6f}" for name, score in self.ranking()]
        return "\n".join(lines)


def _components(n_games: np.ndarray) -> list[list[int]]:
    k = n_games.shape[0]
    seen = [False] * k
    comps = []
    for start in range(k):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(n_games[i]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        comps.append(sorted(comp))
    return comps


def bt_fit(
    wins,
    methods: list[str] | None = None,
    pseudo_count: float = PSEUDO_COUNT,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITER,
) -> BTResult:
    """Fit strengths to ``wins[i][j]`` = wins of ``i`` over ``j``.

    ``pseudo_count`` is added to both directions of every pair that was
    compared at least once, which keeps shutouts finite. Scores are natural
    log-strengths shifted to zero mean.
    """
    w = np.asarray(wins, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise BTError(f"win matrix must be square, got shape {w.shape}")
    k = w.shape[0]
    names = list(methods) if methods is not None else [f"m{i}" for i in range(k)]
    if len(names) != k:
        raise BTError(f"{len(names)} method names for a {k}x{k} matrix")
    if (w < 0).any() or not np.all(np.isfinite(w)):
        raise BTError("win counts must be finite and non-negative")
    if np.any(np.diag(w) != 0):
        raise BTError("a method cannot play itself (nonzero diagonal)")

    games = w + w.T
    idle = [names[i] for i in range(k) if games[i].sum() == 0]
    if idle:
        raise BTError(f"methods with zero games: {', '.join(idle)}")
    comps = _components(games)
    if len(comps) > 1:
        desc = "; ".join("{" + ", ".join(names[i] for i in c) + "}" for c in comps)
        raise BTError(f"comparison graph is disconnected: {desc}")

    compared = games > 0
    w = w + pseudo_count * compared
    games = w + w.T
    total_wins = w.sum(axis=1)
    p = np.ones(k)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        denom = np.where(compared, games / (p[:, None] + p[None, :]), 0.0).sum(axis=1)
        new = total_wins / denom
        new /= np.exp(np.mean(np.log(new)))
        delta = np.max(np.abs(new - p) / p)
        p = new
        if delta < tol:
            converged = True
            break
    scores = np.log(p)
    scores -= scores.mean()
    return BTResult(names, scores, it, converged, pseudo_count)


def parse_pairs(text: str) -> tuple[list[str], np.ndarray]:
    """Parse ``PAIR <a> <b> <wins_a> <wins_b>`` lines; repeated pairs accumulate."""
    methods: list[str] = []
    index: dict[str, int] = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "PAIR" or len(parts) != 5:
            raise BTError(f"line {lineno}: expected 'PAIR <a> <b> <wins_a> <wins_b>', got {raw!r}")
        a, b = parts[1], parts[2]
        if a == b:
            raise BTError(f"line {lineno}: method {a!r} paired with itself")
        try:
            wa, wb = int(parts[3]), int(parts[4])
        except ValueError:
            raise BTError(f"line {lineno}: win counts must be integers") from None
        if wa < 0 or wb < 0:
            raise BTError(f"line {lineno}: win counts must be non-negative")
        for m in (a, b):
            if m not in index:
                index[m] = len(methods)
                methods.append(m)
        entries.append((index[a], index[b], wa, wb))
    w = np.zeros((len(methods), len(methods)))
    for i, j, wa, wb in entries:
        w[i, j] += wa
        w[j, i] += wb
    return methods, w

"""Energy minimization for the window CRF.

``solve_trws`` runs sequential tree-reweighted message passing over a
fixed node order (video-major, frame-minor).  The graph's edges are
partitioned into monotonic chains induced by that order; each node's
reweighting coefficient is one over the number of chains through it.
The reported lower bound is the sum of the chain optima under the
current reparameterization, which can never exceed the true minimum and
does not decrease across iterations.

``solve_exhaustive`` enumerates every labeling of a small problem and is
used as the exactness oracle in tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .crf import CrfProblem, Labeling

EXHAUSTIVE_LIMIT = 1_000_000


@dataclass
class SolveReport:
    labeling: Labeling
    lower_bound: float
    iterations: int
    converged: bool
    wall_time: float
    bound_history: list[float]


class _Graph:
    """Padded dense arrays and index structures for message passing."""

    def __init__(self, problem: CrfProblem):
        self.V = problem.num_nodes
        self.counts = np.asarray(problem.state_counts, dtype=np.int64)
        self.S = int(self.counts.max())
        self.E = len(problem.edges)
        self.a_ids = np.array([e.a for e in problem.edges], dtype=np.int64)
        self.b_ids = np.array([e.b for e in problem.edges], dtype=np.int64)

        self.tables = np.full((self.E, self.S, self.S), np.inf)
        for i, e in enumerate(problem.edges):
            if not np.isfinite(e.costs).all():
                raise ValueError(f"edge ({e.a},{e.b}) has non-finite costs")
            sa, sb = e.costs.shape
            self.tables[i, :sa, :sb] = e.costs
        self.tables_t = np.ascontiguousarray(self.tables.transpose(0, 2, 1))

        fwd: list[list[int]] = [[] for _ in range(self.V)]
        bwd: list[list[int]] = [[] for _ in range(self.V)]
        for i in range(self.E):
            fwd[self.a_ids[i]].append(i)
            bwd[self.b_ids[i]].append(i)
        self.fwd = [np.array(x, dtype=np.int64) for x in fwd]
        self.bwd = [np.array(x, dtype=np.int64) for x in bwd]

        # incoming (edge id, slot) pairs per node; slot 0 holds the a->b
        # message (a function of b's state), slot 1 the b->a message
        self.in_eids = []
        self.in_slots = []
        for i in range(self.V):
            eids = np.concatenate([self.fwd[i], self.bwd[i]])
            slots = np.concatenate(
                [np.ones(len(self.fwd[i]), dtype=np.int64), np.zeros(len(self.bwd[i]), dtype=np.int64)]
            )
            self.in_eids.append(eids)
            self.in_slots.append(slots)

        n_chains = np.maximum(
            np.array([len(x) for x in self.fwd]), np.array([len(x) for x in self.bwd])
        )
        self.gamma = 1.0 / np.maximum(n_chains, 1)

        cols = np.arange(self.S)[None, :]
        self.valid_b = cols < self.counts[self.b_ids][:, None]  # (E, S)
        self.valid_a = cols < self.counts[self.a_ids][:, None]
        self.node_valid = cols < self.counts[:, None]  # (V, S)

        self.chains = self._build_chains()
        # lockstep DP schedule over all chains: per depth k, the edges
        # taken by the chains that are at least k+1 edges long
        self.chain_first = np.array([nodes[0] for nodes, _ in self.chains], dtype=np.int64)
        max_len = max((len(eids) for _, eids in self.chains), default=0)
        acc: list[list[tuple[int, int, int]]] = [[] for _ in range(max_len)]
        for cid, (nodes, eids) in enumerate(self.chains):
            for k, eid in enumerate(eids):
                acc[k].append((eid, cid, nodes[k + 1]))
        self.chain_steps = [
            (
                np.array([x[0] for x in step], dtype=np.int64),
                np.array([x[1] for x in step], dtype=np.int64),
                np.array([x[2] for x in step], dtype=np.int64),
            )
            for step in acc
        ]

    def _build_chains(self) -> list[tuple[list[int], list[int]]]:
        """Cover all edges by monotonic chains: at each node, incoming chains
        continue along forward edges; extras start or end there."""
        chains: list[tuple[list[int], list[int]]] = []
        ending_at: dict[int, list[int]] = {}
        for i in range(self.V):
            incoming = ending_at.pop(i, [])
            outgoing = list(self.fwd[i])
            for k, eid in enumerate(outgoing):
                if k < len(incoming):
                    cid = incoming[k]
                else:
                    cid = len(chains)
                    chains.append(([i], []))
                nodes, eids = chains[cid]
                nodes.append(int(self.b_ids[eid]))
                eids.append(int(eid))
                ending_at.setdefault(int(self.b_ids[eid]), []).append(cid)
            if not incoming and not outgoing:
                chains.append(([i], []))  # isolated node: trivial chain
        return chains

    def theta_hat(self, M: np.ndarray, i: int) -> np.ndarray:
        if len(self.in_eids[i]) == 0:
            return np.zeros(self.S)
        return M[self.in_eids[i], self.in_slots[i]].sum(axis=0)

    def all_theta_hat(self, M: np.ndarray) -> np.ndarray:
        theta = np.zeros((self.V, self.S))
        for s in range(self.S):
            theta[:, s] = np.bincount(self.b_ids, weights=M[:, 0, s], minlength=self.V)
            theta[:, s] += np.bincount(self.a_ids, weights=M[:, 1, s], minlength=self.V)
        return theta


def _message_pass(g: _Graph, M: np.ndarray, forward: bool) -> None:
    order = range(g.V) if forward else range(g.V - 1, -1, -1)
    for i in order:
        eids = g.fwd[i] if forward else g.bwd[i]
        if len(eids) == 0:
            continue
        theta = g.theta_hat(M, i)
        if forward:
            # send a->b: minimize over this node's states (rows)
            tmp = g.gamma[i] * theta[None, :] - M[eids, 1]
            new = (tmp[:, :, None] + g.tables[eids]).min(axis=1)
            valid = g.valid_b[eids]
            slot = 0
        else:
            # send b->a: minimize over this node's states (columns)
            tmp = g.gamma[i] * theta[None, :] - M[eids, 0]
            new = (tmp[:, :, None] + g.tables_t[eids]).min(axis=1)
            valid = g.valid_a[eids]
            slot = 1
        new = new - new.min(axis=1, keepdims=True)
        M[eids, slot] = np.where(valid, new, 0.0)


def _lower_bound(g: _Graph, M: np.ndarray) -> float:
    """Sum of chain optima under the current reparameterization, by
    dynamic programming over all chains in lockstep."""
    rep = g.tables - M[:, 0][:, None, :] - M[:, 1][:, :, None]
    theta = g.all_theta_hat(M)
    wtheta = np.where(g.node_valid, g.gamma[:, None] * theta, np.inf)
    vec = wtheta[g.chain_first].copy()  # (chains, S)
    for eids, cids, nxt in g.chain_steps:
        vec[cids] = (vec[cids][:, :, None] + rep[eids]).min(axis=1) + wtheta[nxt]
    return float(vec.min(axis=1).sum())


def _extract_labeling(g: _Graph, M: np.ndarray) -> np.ndarray:
    """Sequential conditioned argmin: earlier neighbors are fixed through
    the pair costs, later neighbors speak through their messages."""
    states = np.zeros(g.V, dtype=np.int64)
    for i in range(g.V):
        score = np.zeros(g.S)
        if len(g.fwd[i]):
            score += M[g.fwd[i], 1].sum(axis=0)
        if len(g.bwd[i]):
            eids = g.bwd[i]
            score += g.tables[eids, states[g.a_ids[eids]], :].sum(axis=0)
        score[g.counts[i] :] = np.inf
        states[i] = int(np.argmin(score))
    return states


def _extract_labeling_backward(g: _Graph, M: np.ndarray) -> np.ndarray:
    """Conditioned argmin in reverse order (later neighbors fixed)."""
    states = np.zeros(g.V, dtype=np.int64)
    for i in range(g.V - 1, -1, -1):
        score = np.zeros(g.S)
        if len(g.bwd[i]):
            score += M[g.bwd[i], 0].sum(axis=0)
        if len(g.fwd[i]):
            eids = g.fwd[i]
            score += g.tables_t[eids, states[g.b_ids[eids]], :].sum(axis=0)
        score[g.counts[i] :] = np.inf
        states[i] = int(np.argmin(score))
    return states


def _local_descent(g: _Graph, states: np.ndarray, max_sweeps: int = 20) -> np.ndarray:
    """Deterministic single-node coordinate descent until a fixed point."""
    states = states.copy()
    for _ in range(max_sweeps):
        changed = False
        for i in range(g.V):
            score = np.zeros(g.S)
            if len(g.fwd[i]):
                eids = g.fwd[i]
                score += g.tables_t[eids, states[g.b_ids[eids]], :].sum(axis=0)
            if len(g.bwd[i]):
                eids = g.bwd[i]
                score += g.tables[eids, states[g.a_ids[eids]], :].sum(axis=0)
            score[g.counts[i] :] = np.inf
            s = int(np.argmin(score))
            if s != states[i] and score[s] < score[states[i]] - 1e-15:
                states[i] = s
                changed = True
        if not changed:
            break
    return states


def _labeling_energy(g: _Graph, states: np.ndarray) -> float:
    if g.E == 0:
        return 0.0
    return float(g.tables[np.arange(g.E), states[g.a_ids], states[g.b_ids]].sum())


def solve_trws(problem: CrfProblem, max_iters: int = 100, epsilon: float = 1e-4) -> SolveReport:
    """Approximate MAP via sequential tree-reweighted message passing.

    Stops when the lower bound improves by less than ``epsilon`` or after
    ``max_iters`` iterations; a decrease of the bound beyond float noise
    is a bug and raises.  After each pass a labeling is read off by the
    sequential conditioned-argmin sweep (plus a min-marginal start),
    polished by deterministic local descent; the best labeling over all
    iterations is kept.  Argmin ties go to the lowest state index.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    t_start = time.perf_counter()
    g = _Graph(problem)

    if g.E == 0:
        states = [0] * g.V
        labeling = Labeling(states=states, energy=0.0)
        return SolveReport(labeling, 0.0, 0, True, time.perf_counter() - t_start, [0.0])

    M = np.zeros((g.E, 2, g.S))
    best_states: np.ndarray | None = None
    best_energy = np.inf
    bound = -np.inf
    bounds: list[float] = []
    converged = False
    iterations = 0

    def consider(states: np.ndarray) -> None:
        nonlocal best_states, best_energy
        states = _local_descent(g, states)
        energy = _labeling_energy(g, states)
        if energy < best_energy:
            best_energy = energy
            best_states = states

    for iterations in range(1, max_iters + 1):
        _message_pass(g, M, forward=True)
        consider(_extract_labeling_backward(g, M))
        _message_pass(g, M, forward=False)
        new_bound = _lower_bound(g, M)
        if np.isfinite(bound) and new_bound < bound - 1e-9:
            raise RuntimeError(
                f"lower bound decreased from {bound!r} to {new_bound!r} at iteration {iterations}"
            )
        consider(_extract_labeling(g, M))
        theta = g.all_theta_hat(M)
        theta[~g.node_valid] = np.inf
        consider(theta.argmin(axis=1))
        improvement = new_bound - bound
        bound = max(new_bound, bound)
        bounds.append(bound)
        if improvement < epsilon or best_energy - bound <= 1e-9:
            converged = True
            break

    labeling = Labeling(states=[int(s) for s in best_states], energy=best_energy)
    return SolveReport(
        labeling=labeling,
        lower_bound=bound,
        iterations=iterations,
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        bound_history=bounds,
    )


def solve_exhaustive(problem: CrfProblem) -> Labeling:
    """Exact global minimum by enumeration; lexicographic tie-break.

    Only for problems whose state-space product is at most 10**6.
    """
    counts = np.asarray(problem.state_counts, dtype=np.int64)
    total = int(np.prod(counts, dtype=np.int64))
    if total > EXHAUSTIVE_LIMIT:
        raise ValueError(f"state space too large for enumeration: {total} labelings")

    # C-order enumeration: index // stride[i] % counts[i] gives node i's
    # state, so argmin's first-hit tie-break is lexicographic.
    strides = np.ones(len(counts), dtype=np.int64)
    for i in range(len(counts) - 2, -1, -1):
        strides[i] = strides[i + 1] * counts[i + 1]

    idx = np.arange(total, dtype=np.int64)
    energy = np.zeros(total)
    for e in problem.edges:
        sa = (idx // strides[e.a]) % counts[e.a]
        sb = (idx // strides[e.b]) % counts[e.b]
        energy += e.costs[sa, sb]
    best = int(np.argmin(energy))
    states = [int((best // strides[i]) % counts[i]) for i in range(len(counts))]
    return Labeling(states=states, energy=float(energy[best]))

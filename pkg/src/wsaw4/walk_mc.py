"""Monte Carlo for the continuous-time weakly self-avoiding walk.

The walk takes nearest-neighbour steps at the events of a rate-2d Poisson
clock; a path up to horizon T is weighted by ``exp(-g I(T))`` where the
intersection local time ``I(T) = sum_x (L_T^x)^2`` penalises
self-intersections.  Local times are accumulated from exact residence
intervals (never time discretisation), so ``sum_x L_T^x = T`` holds to
roundoff pathwise.

Randomness contract
-------------------
All estimators draw from counter-based Philox streams keyed by
``(seed, block_index)`` over fixed-size blocks of samples, and merge block
statistics in block order with the pairwise (Chan) update.  Results are
therefore bit-reproducible for a given seed regardless of how blocks would
be distributed over workers, and independent samples never share a stream.
Batch sampling uses the conditional representation of the Poisson clock
(jump count ~ Poisson(2dT), jump times i.i.d. uniform on [0, T]), which is
distributionally identical to drawing exponential(2d) inter-jump gaps;
:func:`simulate` draws the exponential gaps literally.

Folding: projecting a walk on Z^d to the torus of period n can only merge
sites, so intersection local time grows pathwise under folding, and grows
further as the period shrinks through a geometric sequence.  Unfolding is
unique for nearest-neighbour walks only when the period is >= 3, so
comparisons enforce that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice_green import LatticeSpec, constant_a

try:
    from numba import njit as _njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    _HAVE_NUMBA = False

__all__ = [
    "WalkSample",
    "Estimate",
    "LaplaceEstimate",
    "JensenReport",
    "simulate",
    "estimate_cT",
    "estimate_mean_intersection",
    "fold_and_compare",
    "intersection_local_time",
    "susceptibility_mc",
    "conditioned_intersection",
    "saw_counts",
    "jensen_bound_check",
]

BLOCK_SIZE = 4096


# ---------------------------------------------------------------------------
# RNG contract
# ---------------------------------------------------------------------------

def block_rng(seed: int, block_index: int) -> np.random.Generator:
    """Philox stream for one block, keyed by (seed, block_index)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(block_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _combine(n1, mean1, m2_1, n2, mean2, m2_2):
    """Chan's pairwise combination of (count, mean, sum of squared devs)."""
    if n2 == 0:
        return n1, mean1, m2_1
    n = n1 + n2
    delta = mean2 - mean1
    mean = mean1 + delta * (n2 / n)
    m2 = m2_1 + m2_2 + delta * delta * (n1 * n2 / n)
    return n, mean, m2


@dataclass(frozen=True)
class Estimate:
    mean: float
    std_error: float
    n_samples: int
    seed: int


@dataclass(frozen=True)
class LaplaceEstimate(Estimate):
    truncation_bound: float = 0.0   # bound on the neglected Laplace tail
    quadrature_error: float = 0.0   # Simpson error estimate of the T-grid


@dataclass(frozen=True)
class JensenReport:
    mean_I: float
    se_I: float
    upper_bound: float          # 2 T C_0(0)
    c_T_hat: float
    se_c_T: float
    jensen_floor: float         # exp(-g * mean_I)
    bound_satisfied: bool
    jensen_satisfied: bool


# ---------------------------------------------------------------------------
# Single-walk simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WalkSample:
    """One continuous-time walk up to horizon T.

    sites[v] is the position during the v-th residence interval and
    gaps[v] its exact duration; jump_times are the Poisson events.
    """

    T: float
    jump_times: np.ndarray
    sites: np.ndarray           # (n_jumps + 1, d) integer positions
    gaps: np.ndarray            # (n_jumps + 1,) residence durations
    local_times: dict
    I_T: float

    @property
    def total_time(self) -> float:
        return float(self.gaps.sum())


def _local_times_from_visits(sites, gaps):
    lt = {}
    for pos, dt in zip(map(tuple, sites.tolist()), gaps):
        lt[pos] = lt.get(pos, 0.0) + float(dt)
    return lt


def intersection_local_time(sites: np.ndarray, gaps: np.ndarray) -> float:
    """I(T) = sum_x (L_T^x)^2 from per-visit positions and durations."""
    lt = _local_times_from_visits(np.asarray(sites), np.asarray(gaps))
    return float(sum(v * v for v in lt.values()))


def simulate(spec: LatticeSpec, T: float, rng_stream, sample_index: int = 0) -> WalkSample:
    """Simulate one walk: exponential(2d) gaps, uniform neighbour steps.

    ``rng_stream`` is either a seed (combined with ``sample_index`` into a
    Philox key) or a ready ``numpy.random.Generator``.
    """
    if T <= 0:
        raise ValueError("T must be > 0")
    if spec.geometry == "graph":
        raise ValueError("walks run on window or torus geometry")
    rng = rng_stream if isinstance(rng_stream, np.random.Generator) \
        else block_rng(rng_stream, sample_index)
    d = spec.d
    rate = 2.0 * d
    times = []
    t = rng.exponential(1.0 / rate)
    while t < T:
        times.append(t)
        t += rng.exponential(1.0 / rate)
    n = len(times)
    jump_times = np.array(times)
    dirs = rng.integers(0, 2 * d, size=n)
    steps = np.zeros((n, d), dtype=np.int64)
    if n:
        steps[np.arange(n), dirs >> 1] = 1 - 2 * (dirs & 1)
    sites = np.zeros((n + 1, d), dtype=np.int64)
    if n:
        sites[1:] = np.cumsum(steps, axis=0)
    if spec.geometry == "torus":
        sites = np.mod(sites, spec.period)
    bounds = np.concatenate([[0.0], jump_times, [T]])
    gaps = np.diff(bounds)
    lt = _local_times_from_visits(sites, gaps)
    I_T = float(sum(v * v for v in lt.values()))
    return WalkSample(T=T, jump_times=jump_times, sites=sites, gaps=gaps,
                      local_times=lt, I_T=I_T)


def fold_and_compare(sample: WalkSample, periods) -> dict:
    """I(T) of the same trajectory folded to each torus period.

    Returns ``{period: I_T}`` plus the unfolded value under key ``None``,
    and asserts the pathwise monotonicity: shrinking the period through the
    (ascending) list can only merge sites and so increase I(T), and every
    folding dominates the unfolded walk.  Periods must be >= 3 (unique
    unfolding regime for nearest-neighbour walks).
    """
    out = {None: sample.I_T}
    for p in periods:
        p = int(p)
        if p < 3:
            raise ValueError("folding comparisons need period >= 3")
        folded = np.mod(sample.sites, p)
        out[p] = intersection_local_time(folded, sample.gaps)
    ps = sorted(int(p) for p in periods)
    tol = 1e-12 * (1.0 + sample.I_T)
    for small, big in zip(ps, ps[1:]):
        if big % small == 0:
            assert out[small] >= out[big] - tol, "folding monotonicity failed"
    for p in ps:
        assert out[p] >= sample.I_T - tol, "folded walk lost intersections"
    return out


# ---------------------------------------------------------------------------
# Vectorized block sampling
# ---------------------------------------------------------------------------

def _block_intersections(spec, T, rng, nblock):
    """I(T) for a block of walks, fully vectorized.

    Jump counts are Poisson(2dT); conditionally the jump times are sorted
    uniforms and steps are uniform neighbours.  Local times are grouped by
    packing (sample, site) into one int64 key.
    """
    d = spec.d
    N = rng.poisson(2 * d * T, size=nblock)
    total = int(N.sum())
    starts = np.concatenate([[0], np.cumsum(N[:-1])])
    owner = np.repeat(np.arange(nblock), N)
    times = rng.random(total) * T
    order = np.lexsort((times, owner))
    times = times[order]
    dirs = rng.integers(0, 2 * d, size=total)

    steps = np.zeros((total, d), dtype=np.int64)
    if total:
        steps[np.arange(total), dirs >> 1] = 1 - 2 * (dirs & 1)
    cum = np.cumsum(steps, axis=0)
    base = np.zeros((nblock, d), dtype=np.int64)
    nz = starts > 0
    base[nz] = cum[starts[nz] - 1]
    pos_after = cum - np.repeat(base, N, axis=0)

    # visits: one origin visit per sample plus one per jump
    nv = total + nblock
    visit_starts = starts + np.arange(nblock)
    vowner = np.repeat(np.arange(nblock), N + 1)
    vpos = np.zeros((nv, d), dtype=np.int64)
    vtimes = np.zeros(nv)     # time at which the visit starts
    jump_rows = np.ones(nv, dtype=bool)
    jump_rows[visit_starts] = False
    vpos[jump_rows] = pos_after
    vtimes[jump_rows] = times
    # residence gap of each visit: next visit start (or T) minus own start
    next_t = np.empty(nv)
    next_t[:-1] = vtimes[1:]
    next_t[-1] = T
    ends = visit_starts + N  # last visit of each sample
    next_t[ends] = T
    gaps = next_t - vtimes

    if spec.geometry == "torus":
        vpos = np.mod(vpos, spec.period)

    # pack (sample, site) into one int64
    cmax = int(np.abs(vpos).max()) + 1 if nv else 1
    side = 2 * cmax + 1
    if side**d * nblock > 2**62:
        raise OverflowError("site key would overflow; reduce T or block size")
    key = vowner.astype(np.int64)
    for ax in range(d):
        key = key * side + (vpos[:, ax] + cmax)
    sorter = np.argsort(key, kind="stable")
    skey = key[sorter]
    sgaps = gaps[sorter]
    sowner = vowner[sorter]
    seg = np.concatenate([[0], np.flatnonzero(skey[1:] != skey[:-1]) + 1])
    lt = np.add.reduceat(sgaps, seg)
    I = np.zeros(nblock)
    np.add.at(I, sowner[seg], lt * lt)
    return I


def _blocked_stat(spec, T, n, seed, value_fn, block_size=BLOCK_SIZE):
    """Stream blocks of I(T), reduce value_fn(I) with Chan's update."""
    count, mean, m2 = 0, 0.0, 0.0
    block = 0
    remaining = n
    while remaining > 0:
        nb = min(block_size, remaining)
        rng = block_rng(seed, block)
        I = _block_intersections(spec, T, rng, nb)
        vals = value_fn(I)
        bn = len(vals)
        bmean = float(vals.mean())
        bm2 = float(((vals - bmean) ** 2).sum())
        count, mean, m2 = _combine(count, mean, m2, bn, bmean, bm2)
        remaining -= nb
        block += 1
    se = math.sqrt(m2 / (count - 1) / count) if count > 1 else 0.0
    return mean, se, count


def estimate_cT(spec: LatticeSpec, g: float, T: float, n: int, seed: int = 0) -> Estimate:
    """Monte Carlo estimate of ``c_T = E exp(-g I(T))``."""
    if g < 0:
        raise ValueError("g must be >= 0")
    mean, se, count = _blocked_stat(spec, T, n, seed, lambda I: np.exp(-g * I))
    return Estimate(mean=mean, std_error=se, n_samples=count, seed=seed)


def estimate_mean_intersection(spec: LatticeSpec, T: float, n: int,
                               seed: int = 0) -> Estimate:
    """Monte Carlo estimate of E I(T)."""
    mean, se, count = _blocked_stat(spec, T, n, seed, lambda I: I)
    return Estimate(mean=mean, std_error=se, n_samples=count, seed=seed)


# ---------------------------------------------------------------------------
# Laplace transform (susceptibility)
# ---------------------------------------------------------------------------

def susceptibility_mc(spec: LatticeSpec, g: float, nu: float, T_max: float,
                      n: int, seed: int = 0, grid_points: int = 33) -> LaplaceEstimate:
    """chi(g, nu) ~= int_0^T_max c_T e^{-nu T} dT by Simpson over MC points.

    nu must be positive: the neglected tail is then bounded by
    ``exp(-nu T_max)/nu`` (since c_T <= 1), which is reported rather than
    hidden.  Near-critical nu is out of Monte Carlo reach and rejected.
    """
    if nu <= 0:
        raise ValueError("susceptibility_mc requires nu > 0 "
                         "(unverifiable truncation otherwise)")
    if grid_points % 2 == 0:
        grid_points += 1
    Ts = np.linspace(0.0, T_max, grid_points)
    h = Ts[1] - Ts[0]
    means = np.empty(grid_points)
    ses = np.zeros(grid_points)
    means[0] = 1.0  # c_0 = 1 exactly
    block0 = 0
    per_point_blocks = (n + BLOCK_SIZE - 1) // BLOCK_SIZE
    for i in range(1, grid_points):
        count, mean, m2 = 0, 0.0, 0.0
        remaining = n
        b = 0
        while remaining > 0:
            nb = min(BLOCK_SIZE, remaining)
            rng = block_rng(seed, block0 + i * per_point_blocks + b)
            I = _block_intersections(spec, Ts[i], rng, nb)
            vals = np.exp(-g * I)
            bmean = float(vals.mean())
            bm2 = float(((vals - bmean) ** 2).sum())
            count, mean, m2 = _combine(count, mean, m2, nb, bmean, bm2)
            remaining -= nb
            b += 1
        means[i] = mean
        ses[i] = math.sqrt(m2 / (count - 1) / count) if count > 1 else 0.0
    w = np.ones(grid_points)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    w *= h / 3.0
    damp = np.exp(-nu * Ts)
    value = float(np.sum(w * damp * means))
    se = float(np.sqrt(np.sum((w * damp * ses) ** 2)))
    tail = math.exp(-nu * T_max) / nu
    # Simpson h^4 error proxy from the exact g=0 integrand scale
    quad_err = float((h**4 / 180.0) * nu**3 * T_max)
    return LaplaceEstimate(mean=value, std_error=se, n_samples=n * (grid_points - 1),
                           seed=seed, truncation_bound=tail,
                           quadrature_error=quad_err)


# ---------------------------------------------------------------------------
# Conditioned intersection local time
# ---------------------------------------------------------------------------

def conditioned_intersection(T: float, n: int, n_samples: int,
                             seed: int = 0) -> Estimate:
    """E(I(T) | n jumps, path self-avoiding) by direct gap sampling.

    Conditionally on the number of jumps, jump times are i.i.d. uniform on
    [0, T]; on the self-avoiding event every site is visited once, so
    I(T) is the sum of squared gaps.  The exact value is 2T^2/(n+2).
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return Estimate(mean=T * T, std_error=0.0, n_samples=n_samples, seed=seed)
    count, mean, m2 = 0, 0.0, 0.0
    block = 0
    remaining = n_samples
    per_block = max(1, BLOCK_SIZE // max(1, n))
    while remaining > 0:
        nb = min(per_block, remaining)
        rng = block_rng(seed, block)
        u = np.sort(rng.random((nb, n)) * T, axis=1)
        bounds = np.concatenate([np.zeros((nb, 1)), u, np.full((nb, 1), T)],
                                axis=1)
        vals = (np.diff(bounds, axis=1) ** 2).sum(axis=1)
        bmean = float(vals.mean())
        bm2 = float(((vals - bmean) ** 2).sum())
        count, mean, m2 = _combine(count, mean, m2, nb, bmean, bm2)
        remaining -= nb
        block += 1
    se = math.sqrt(m2 / (count - 1) / count) if count > 1 else 0.0
    return Estimate(mean=mean, std_error=se, n_samples=count, seed=seed)


# ---------------------------------------------------------------------------
# Strictly self-avoiding walk counts
# ---------------------------------------------------------------------------

def _saw_counts_python(d, n_max):
    counts = [0] * (n_max + 1)
    counts[0] = 1
    steps = []
    for ax in range(d):
        for s in (1, -1):
            e = [0] * d
            e[ax] = s
            steps.append(tuple(e))
    origin = (0,) * d
    visited = {origin}
    path = [origin]

    def extend(depth):
        pos = path[-1]
        for e in steps:
            nxt = tuple(p + q for p, q in zip(pos, e))
            if nxt in visited:
                continue
            counts[depth] += 1
            if depth < n_max:
                visited.add(nxt)
                path.append(nxt)
                extend(depth + 1)
                path.pop()
                visited.remove(nxt)

    extend(1)
    return counts[1:]


if _HAVE_NUMBA:
    @_njit(cache=True)
    def _saw_counts_kernel(d, n_max):  # pragma: no cover - compiled
        side = 2 * n_max + 3
        visited = np.zeros(side**d, dtype=np.uint8)
        counts = np.zeros(n_max + 1, dtype=np.int64)
        pos = np.full(d, n_max + 1, dtype=np.int64)
        # flatten index of the current position
        def idx(p):
            out = 0
            for ax in range(d):
                out = out * side + p[ax]
            return out
        stack_dir = np.zeros(n_max + 2, dtype=np.int64)
        stack_idx = np.zeros(n_max + 2, dtype=np.int64)
        visited[idx(pos)] = 1
        depth = 1
        stack_dir[1] = 0
        stack_idx[1] = idx(pos)
        while depth >= 1:
            moved = False
            while stack_dir[depth] < 2 * d:
                dd = stack_dir[depth]
                stack_dir[depth] += 1
                ax = dd >> 1
                sg = 1 - 2 * (dd & 1)
                pos[ax] += sg
                i = idx(pos)
                if visited[i]:
                    pos[ax] -= sg
                    continue
                counts[depth] += 1
                if depth < n_max:
                    visited[i] = 1
                    depth += 1
                    stack_dir[depth] = 0
                    stack_idx[depth] = i
                    moved = True
                    break
                pos[ax] -= sg
            if not moved:
                # retreat
                if depth >= 2:
                    i = stack_idx[depth]
                    visited[i] = 0
                    # undo the step that led here
                    dd = stack_dir[depth - 1] - 1
                    ax = dd >> 1
                    sg = 1 - 2 * (dd & 1)
                    pos[ax] -= sg
                depth -= 1
        return counts


def saw_counts(d: int, n_max: int):
    """Exact counts s_n of n-step strictly self-avoiding walks, n = 1..n_max.

    Backtracking enumeration (numba-accelerated when available).  The
    enumeration budget caps n_max at 11 for d = 4; larger requests raise.
    """
    if not 1 <= d <= 4:
        raise ValueError("d must be in 1..4")
    budget = {1: 64, 2: 20, 3: 14, 4: 11}[d]
    if n_max > budget:
        raise ValueError(f"enumeration budget exceeded: n_max <= {budget} for d={d}")
    if d == 1:
        return [2] * n_max
    if _HAVE_NUMBA and (2 * d) * (2 * d - 1) ** max(0, n_max - 1) > 2_000_000:
        return [int(c) for c in _saw_counts_kernel(d, n_max)[1:]]
    return _saw_counts_python(d, n_max)


# ---------------------------------------------------------------------------
# Jensen bound
# ---------------------------------------------------------------------------

def jensen_bound_check(g: float, T: float, n: int, seed: int = 0) -> JensenReport:
    """Check E I(T) <= 2 T C_0(0) and c_T >= exp(-g E I(T)) at d = 4."""
    spec = LatticeSpec.window(4)
    mean_I, se_I, _ = _blocked_stat(spec, T, n, seed, lambda I: I)
    c_hat, se_c, _ = _blocked_stat(spec, T, n, seed, lambda I: np.exp(-g * I))
    bound = T * constant_a()  # = 2 T C_0(0)
    floor = math.exp(-g * mean_I)
    return JensenReport(
        mean_I=mean_I, se_I=se_I, upper_bound=bound,
        c_T_hat=c_hat, se_c_T=se_c, jensen_floor=floor,
        bound_satisfied=mean_I <= bound + 3.0 * se_I,
        jensen_satisfied=c_hat >= floor - 3.0 * se_c,
    )

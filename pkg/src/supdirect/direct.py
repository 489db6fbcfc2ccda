"""DIRECT partition of the unit parameter cube.

Rectangles are stored by integer lower-corner indices and base-3 side
exponents, so a rectangle along dimension ``d`` spans
``[lo[d] / 3**j[d], (lo[d] + 1) / 3**j[d]]``.  Centres and sample points are
tuples of :class:`fractions.Fraction`, which keeps every geometric check
exact.

Costs are not evaluated here.  A :class:`Partition` collects sample requests
in ``pending``; the caller supplies a cost for each pending point through
:func:`complete_pending_divisions`.  The same engine therefore serves static
test functions and the supervisor's monitoring signals.
"""

from __future__ import annotations

import bisect
import contextlib
import functools
import gc
import heapq
import logging
import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

logger = logging.getLogger(__name__)

GridPoint = tuple[Fraction, ...]

DEFAULT_EPS = 1e-5


class DirectError(ValueError):
    """Base class for partition errors."""


class InvalidDimensionError(DirectError):
    pass


class IncompleteEvaluationError(DirectError):
    pass


class InvalidCostError(DirectError):
    pass


class DoubleDivisionError(DirectError):
    pass


class InvalidResolutionError(DirectError):
    pass


class EmptyPartitionError(DirectError):
    pass


_HASH_MODULUS = sys.hash_info.modulus


@functools.lru_cache(maxsize=None)
def _inverse_mod(den: int) -> int:
    return pow(den, -1, _HASH_MODULUS)


class _Exact(Fraction):
    """Fraction with a cheap, memoised hash.

    Hashing a Fraction costs a modular inverse of the denominator.  Grid
    denominators are few (``2 * 3**j``) while points are hashed many times,
    so the inverse is cached per denominator and the hash per instance.
    """

    __slots__ = ("_hash",)

    def __hash__(self):
        try:
            return self._hash
        except AttributeError:
            pass
        # same value as Fraction.__hash__ for a finite denominator
        n = self._numerator
        h = hash(hash(abs(n)) * _inverse_mod(self._denominator))
        h = h if n >= 0 else -h
        self._hash = -2 if h == -1 else h
        return self._hash


def _exact(num: int, den: int) -> _Exact:
    """``num / den`` in lowest terms, skipping the generic Fraction parser."""
    g = math.gcd(num, den)
    out = object.__new__(_Exact)
    out._numerator = num // g
    out._denominator = den // g
    return out


# one object per distinct size, so group membership is an identity check
_SIZE_KEYS: dict[Fraction, Fraction] = {}


@functools.lru_cache(maxsize=None)
def _size_key(exponents: tuple[int, ...]) -> Fraction:
    key = _Exact(sum((Fraction(1, 4 * 9**j) for j in exponents), Fraction(0)))
    return _SIZE_KEYS.setdefault(key, key)


@functools.lru_cache(maxsize=None)
def _center_to_vertex(exponents: tuple[int, ...]) -> float:
    return 0.5 * math.sqrt(math.fsum(9.0**-j for j in exponents))


def grid_point(*coords) -> GridPoint:
    """Build a grid point from ints, strings or Fractions."""
    return tuple(_Exact(c) for c in coords)


@dataclass(slots=True)
class HyperRect:
    id: int
    lo: tuple[int, ...]
    side_exponents: tuple[int, ...]
    last_cost: float | None = None
    # trisection keeps the centre, so it is fixed for the rect's lifetime
    _center: GridPoint | None = field(default=None, repr=False, compare=False)

    @property
    def n_p(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> GridPoint:
        if self._center is None:
            self._center = tuple(_exact(2 * a + 1, 2 * 3**j) for a, j in zip(self.lo, self.side_exponents))
        return self._center

    @property
    def divisions(self) -> int:
        return sum(self.side_exponents)

    @property
    def sides(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(1, 3**j) for j in self.side_exponents)

    @property
    def volume(self) -> Fraction:
        return Fraction(1, 3 ** self.divisions)

    @property
    def size_key(self) -> Fraction:
        """Exact squared centre-to-vertex distance."""
        return _size_key(self.side_exponents)

    @property
    def d(self) -> float:
        """Euclidean centre-to-vertex distance."""
        return _center_to_vertex(self.side_exponents)

    def bounds(self) -> list[tuple[Fraction, Fraction]]:
        return [
            (Fraction(a, 3**j), Fraction(a + 1, 3**j))
            for a, j in zip(self.lo, self.side_exponents)
        ]


class SampleRequest(NamedTuple):
    rect_id: int
    dim: int | None  # None marks the root centre
    point: GridPoint


@dataclass
class Partition:
    n_p: int
    rects: dict[int, HyperRect] = field(default_factory=dict)
    pending: list[SampleRequest] = field(default_factory=list)
    k: int = 0
    mu_hat: float | None = None
    eps: float = DEFAULT_EPS
    next_id: int = 0
    # centre -> rect id; a trisection keeps the parent's centre
    by_center: dict[GridPoint, int] = field(default_factory=dict)
    # size key -> heap of (cost, id); entries are checked against the rect when read
    heaps: dict[Fraction, list[tuple[float, int]]] = field(default_factory=dict, repr=False)
    group_d: dict[Fraction, float] = field(default_factory=dict, repr=False)
    group_order: list[Fraction] = field(default_factory=list, repr=False)

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def sample_points(self) -> list[GridPoint]:
        """All points sampled so far: rect centres plus outstanding requests."""
        seen = dict.fromkeys(self.by_center)
        seen.update(dict.fromkeys(req.point for req in self.pending))
        return list(seen)

    def min_d(self) -> float:
        return min(r.d for r in self.rects.values())

    def index(self, rect: HyperRect) -> None:
        """Record the rect's current size and cost in the group heaps."""
        if rect.last_cost is None:
            return
        key = _size_key(rect.side_exponents)
        heap = self.heaps.get(key)
        if heap is None:
            heap = self.heaps[key] = []
            self.group_d[key] = rect.d
            bisect.insort(self.group_order, key)
        heapq.heappush(heap, (rect.last_cost, rect.id))

    def _live(self, key, cost, rid) -> bool:
        r = self.rects.get(rid)
        return r is not None and r.last_cost == cost and r.size_key is key

    def groups(self) -> list[tuple[float, float, list[int]]]:
        """Size groups in ascending size: (d, min cost, ids at the min cost)."""
        out = []
        emptied = []
        for key in self.group_order:
            heap = self.heaps[key]
            while heap and not self._live(key, *heap[0]):
                heapq.heappop(heap)
            if not heap:
                emptied.append(key)
                continue
            m = heap[0][0]
            ties = {}
            while heap and heap[0][0] == m:
                entry = heapq.heappop(heap)
                if self._live(key, *entry):
                    ties[entry[1]] = entry
            for entry in ties.values():
                heapq.heappush(heap, entry)
            out.append((self.group_d[key], m, sorted(ties)))
        for key in emptied:
            del self.heaps[key]
            del self.group_d[key]
            self.group_order.remove(key)
        return out


def init_partition(n_p: int, eps: float = DEFAULT_EPS) -> Partition:
    """Root rectangle [0,1]^n_p with its centre and 2*n_p neighbours pending."""
    if n_p < 1:
        raise InvalidDimensionError(f"n_p must be >= 1, got {n_p}")
    part = Partition(n_p=n_p, eps=eps)
    root = HyperRect(id=part.new_id(), lo=(0,) * n_p, side_exponents=(0,) * n_p)
    part.rects[root.id] = root
    part.by_center[root.center] = root.id
    part.pending.append(SampleRequest(root.id, None, root.center))
    part.pending.extend(_division_requests(root))
    return part


def _longest_dims(rect: HyperRect) -> list[int]:
    jmin = min(rect.side_exponents)
    return [d for d, j in enumerate(rect.side_exponents) if j == jmin]


def _division_requests(rect: HyperRect) -> list[SampleRequest]:
    c = rect.center
    out = []
    for d in _longest_dims(rect):
        # centre (2a+1) / (2*3**j) moved by 1/3**(j+1), over the finer denominator
        j = rect.side_exponents[d]
        mid = 3 * (2 * rect.lo[d] + 1)
        den = 2 * 3 ** (j + 1)
        for step in (-2, 2):
            p = list(c)
            p[d] = _exact(mid + step, den)
            out.append(SampleRequest(rect.id, d, tuple(p)))
    return out


def _check_cost(point: GridPoint, costs: Mapping[GridPoint, float]) -> float:
    try:
        value = float(costs[point])
    except KeyError:
        raise IncompleteEvaluationError(f"no cost supplied for pending point {format_point(point)}") from None
    if not math.isfinite(value) or value < 0:
        raise InvalidCostError(f"cost at {format_point(point)} must be finite and >= 0, got {value}")
    return value


def _set_cost(part: Partition, rect: HyperRect, value: float) -> None:
    if rect.last_cost != value:
        rect.last_cost = value
        part.index(rect)


def complete_pending_divisions(part: Partition, costs: Mapping[GridPoint, float]) -> list[int]:
    """Trisect every rectangle with pending requests; returns the new rect ids.

    Dimensions are divided in ascending order of the smaller of the two
    neighbour costs, ties going to the lower dimension index.  After the
    divisions, any rect whose centre appears in ``costs`` has its
    ``last_cost`` refreshed.
    """
    by_rect: dict[int, dict[int, list[tuple[GridPoint, float]]]] = {}
    n_pending = 0
    for rid, dim, point in part.pending:
        try:
            c = float(costs[point])
        except KeyError:
            c = _check_cost(point, costs)
        if not 0 <= c < math.inf:
            _check_cost(point, costs)
        n_pending += 1
        if dim is None:
            _set_cost(part, part.rects[rid], c)
            continue
        dims = by_rect.get(rid)
        if dims is None:
            dims = by_rect[rid] = {}
        pair = dims.get(dim)
        if pair is None:
            dims[dim] = [(point, c)]
        else:
            pair.append((point, c))

    new_ids = []
    rects, by_center = part.rects, part.by_center
    for rid in sorted(by_rect):
        rect = rects[rid]
        dims = by_rect[rid]
        order = sorted(dims, key=lambda d: (min(dims[d][0][1], dims[d][1][1]), d))

        lo, js = list(rect.lo), list(rect.side_exponents)
        for d in order:
            js[d] += 1
            exps = tuple(js)
            base = 3 * lo[d]
            # each outer child is centred on its request point; requests come lower one first
            for offset, (point, c) in zip((0, 2), dims[d]):
                lo[d] = base + offset
                child = HyperRect(part.next_id, tuple(lo), exps, c, point)
                part.next_id += 1
                rects[child.id] = child
                by_center[point] = child.id
                part.index(child)
                new_ids.append(child.id)
            lo[d] = base + 1
        rect.lo, rect.side_exponents = tuple(lo), tuple(js)
        part.index(rect)

    # costs beyond the pending points refresh older centres
    if len(costs) > n_pending:
        for c in costs:
            rid = part.by_center.get(c)
            if rid is not None:
                _set_cost(part, part.rects[rid], _check_cost(c, costs))
    part.pending.clear()
    return new_ids


class RectSummary(NamedTuple):
    """What the selection needs to know about a rect: exact size key, distance, cost."""

    id: int
    key: object
    d: float
    cost: float


def summaries(part: Partition) -> list[RectSummary]:
    if not part.rects:
        raise EmptyPartitionError("partition has no rectangles")
    out = []
    for r in part.rects.values():
        if r.last_cost is None:
            raise IncompleteEvaluationError(f"rect {r.id} has no cost")
        out.append(RectSummary(r.id, r.size_key, r.d, r.last_cost))
    return out


def _groups(items: Sequence[RectSummary]) -> list[tuple[float, float, list[int]]]:
    """Items grouped by size, ascending: (d, min cost, ids at the min cost)."""
    if not items:
        raise EmptyPartitionError("no rectangles to select from")
    grouped: dict[object, list[RectSummary]] = {}
    for it in items:
        grouped.setdefault(it.key, []).append(it)
    out = []
    for key in sorted(grouped):
        rs = grouped[key]
        m = min(r.cost for r in rs)
        out.append((rs[0].d, m, [r.id for r in rs if r.cost == m]))
    return out


def _eps_target(items: Sequence[RectSummary], mu_hat: float | None, eps: float) -> float:
    if mu_hat is None:
        mu_hat = min(it.cost for it in items)
    return mu_hat - eps * abs(mu_hat)


def _slope(d0: float, m0: float, d1: float, m1: float) -> float:
    return (m1 - m0) / (d1 - d0)


def hull_select(items: Sequence[RectSummary], mu_hat: float | None, eps: float) -> set[int]:
    """Potentially optimal ids from the lower-right convex hull of (d, cost).

    The hull runs from the cheapest group (largest ``d`` on ties) to the
    largest group; collinear points are kept.  Each hull point then faces
    the epsilon test at the steepest admissible rate, the slope to its right
    neighbour.
    """
    return _hull_choose(_groups(items), _eps_target(items, mu_hat, eps))


def _hull_choose(groups: Sequence[tuple[float, float, list[int]]], target: float) -> set[int]:
    gmin = min(g[1] for g in groups)
    start = max(i for i, g in enumerate(groups) if g[1] == gmin)

    hull: list[int] = []
    for i in range(start, len(groups)):
        d, m, _ = groups[i]
        while len(hull) >= 2:
            a, b = groups[hull[-2]], groups[hull[-1]]
            if _slope(a[0], a[1], b[0], b[1]) > _slope(b[0], b[1], d, m):
                hull.pop()
            else:
                break
        hull.append(i)

    chosen: set[int] = set()
    for pos, gi in enumerate(hull):
        d, m, ids = groups[gi]
        if pos + 1 < len(hull):
            nd, nm, _ = groups[hull[pos + 1]]
            if m - _slope(d, m, nd, nm) * d > target:
                continue
        chosen.update(ids)
    return chosen


def oracle_select(items: Sequence[RectSummary], mu_hat: float | None, eps: float) -> set[int]:
    """Pairwise-slope decision of the potentially-optimal conditions, item by item."""
    if not items:
        raise EmptyPartitionError("no rectangles to select from")
    target = _eps_target(items, mu_hat, eps)
    chosen = set()
    for it in items:
        lo, hi, ok = -math.inf, math.inf, True
        for other in items:
            if other.id == it.id:
                continue
            if other.key == it.key:
                ok = ok and it.cost <= other.cost
            elif other.key < it.key:
                lo = max(lo, _slope(other.d, other.cost, it.d, it.cost))
            else:
                hi = min(hi, _slope(it.d, it.cost, other.d, other.cost))
        if not ok or hi <= 0 or lo > hi:
            continue
        if hi < math.inf and it.cost - hi * it.d > target:
            continue
        chosen.add(it.id)
    return chosen


def _partition_groups(part: Partition) -> list[tuple[float, float, list[int]]]:
    if not part.rects:
        raise EmptyPartitionError("partition has no rectangles")
    groups = part.groups()
    if not groups:
        raise IncompleteEvaluationError("no rect has a cost yet")
    return groups


def _target(part: Partition, groups) -> float:
    mu_hat = part.mu_hat if part.mu_hat is not None else min(g[1] for g in groups)
    return mu_hat - part.eps * abs(mu_hat)


def identify_potentially_optimal(part: Partition) -> set[int]:
    """Ids of the potentially optimal rects (convex hull over size-group minima)."""
    groups = _partition_groups(part)
    return _hull_choose(groups, _target(part, groups))


def potentially_optimal_oracle(part: Partition) -> set[int]:
    """Independent O(n^2) check of :func:`identify_potentially_optimal`."""
    return oracle_select(summaries(part), part.mu_hat, part.eps)


def request_divisions(part: Partition, optimal_ids: Iterable[int]) -> list[SampleRequest]:
    """Queue trisection requests for the selected rects; returns unique new requests."""
    busy = {req.rect_id for req in part.pending}
    fresh: dict[GridPoint, SampleRequest] = {}
    queued = []
    rects = part.rects
    for rid in sorted(optimal_ids):
        rect = rects.get(rid)
        if rect is None:
            raise KeyError(f"unknown rect id {rid}")
        if rid in busy:
            raise DoubleDivisionError(f"rect {rid} already has pending divisions")
        busy.add(rid)
        reqs = _division_requests(rect)
        queued += reqs
        for req in reqs:
            if req.point not in fresh:
                fresh[req.point] = req
    part.pending.extend(queued)
    return list(fresh.values())


def termination_iterations(n_p: int, d_star: float) -> int:
    """Iteration count after which every point is within ``d_star`` of a sample."""
    if n_p < 1:
        raise InvalidDimensionError(f"n_p must be >= 1, got {n_p}")
    if not d_star > 0:
        raise InvalidResolutionError(f"d_star must be > 0, got {d_star}")
    target = Fraction(d_star) ** 2
    i = 0
    # sqrt(n_p * 9**-i) / 2 <= d_star, squared to stay exact
    while Fraction(n_p, 4 * 9**i) > target:
        i += 1
    return 3 ** (n_p - 1) * (3 ** (n_p * (i + 1)) - 1) // (3**n_p - 1)


def min_distance_to_samples(p_star: Sequence, samples: Iterable[Sequence]) -> float:
    """Smallest infinity-norm distance from ``p_star`` to a sample point."""
    best = math.inf
    empty = True
    for s in samples:
        empty = False
        dist = max(abs(float(a) - float(b)) for a, b in zip(p_star, s))
        best = min(best, dist)
    if empty:
        raise ValueError("sample set is empty")
    return best


@dataclass
class IterationRecord:
    k: int
    mu_hat: float | None
    optimal: list[int]
    new_points: list[GridPoint]
    fallback: bool = False


def direct_iteration(part: Partition, costs: Mapping[GridPoint, float]) -> IterationRecord:
    """One DIRECT iteration in the pipelined reading.

    Finalises the pending divisions with ``costs``, picks the potentially
    optimal rects against the previous iteration's minimum cost, and queues
    their trisections.  The caller evaluates the new requests before the
    next call.
    """
    complete_pending_divisions(part, costs)
    if part.k == 0:
        root_center = (Fraction(1, 2),) * part.n_p
        part.mu_hat = float(costs[root_center])
    groups = _partition_groups(part)
    optimal = _hull_choose(groups, _target(part, groups))
    fallback = False
    if not optimal:
        biggest = groups[-1][2][0]
        optimal = {biggest}
        fallback = True
        logger.warning("empty potentially-optimal set at k=%d; dividing rect %d", part.k, biggest)
    used_mu_hat = part.mu_hat
    part.mu_hat = min(g[1] for g in groups)
    new = request_divisions(part, optimal)
    part.k += 1
    return IterationRecord(part.k, used_mu_hat, sorted(optimal), [r.point for r in new], fallback)


def evaluate_pending(part: Partition, cost: Callable[[GridPoint], float]) -> dict[GridPoint, float]:
    return {req.point: cost(req.point) for req in part.pending}


@contextlib.contextmanager
def _gc_paused():
    """Suspend cyclic garbage collection.

    Partitions hold no reference cycles, yet large ones make every
    collection walk hundreds of thousands of live tuples.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def run_static(
    cost: Callable[[GridPoint], float],
    n_p: int,
    iterations: int,
    eps: float = DEFAULT_EPS,
    callback: Callable[[Partition, IterationRecord], None] | None = None,
) -> Partition:
    """Run ``iterations`` DIRECT iterations against an instantaneous cost."""
    part = init_partition(n_p, eps)
    with _gc_paused():
        for _ in range(iterations):
            # a static cost never changes, so only the new points need values
            rec = direct_iteration(part, evaluate_pending(part, cost))
            if callback is not None:
                callback(part, rec)
    return part


def format_point(p: Sequence[Fraction]) -> str:
    return "(" + ", ".join(str(c) for c in p) + ")"


def snapshot(part: Partition) -> str:
    """Plain-text dump of the partition, one rect per line."""
    lines = [
        f"# partition n_p={part.n_p} k={part.k} mu_hat={part.mu_hat!r} eps={part.eps!r}",
        "# id center side_exponents divisions last_cost",
    ]
    for rid in sorted(part.rects):
        r = part.rects[rid]
        center = ",".join(str(c) for c in r.center)
        sides = ",".join(str(j) for j in r.side_exponents)
        lines.append(f"{r.id} {center} {sides} {r.divisions} {r.last_cost!r}")
    return "\n".join(lines) + "\n"


def check_tiling(part: Partition) -> None:
    """Raise AssertionError unless the rects tile the unit cube exactly."""
    rects = list(part.rects.values())
    total = sum((r.volume for r in rects), Fraction(0))
    if total != 1:
        raise AssertionError(f"volumes sum to {total}, expected 1")
    # compare on a common integer grid 3**J per dimension
    J = max(max(r.side_exponents) for r in rects)
    boxes = []
    for r in rects:
        box = []
        for a, j in zip(r.lo, r.side_exponents):
            scale = 3 ** (J - j)
            box.append((a * scale, (a + 1) * scale))
        boxes.append(box)
    for i in range(len(boxes)):
        for k in range(i + 1, len(boxes)):
            if all(a0 < b1 and b0 < a1 for (a0, a1), (b0, b1) in zip(boxes[i], boxes[k])):
                raise AssertionError(f"rects {rects[i].id} and {rects[k].id} overlap")

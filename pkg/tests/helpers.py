"""Shared test utilities: random partitions and a brute-force selector."""

from supdirect import direct


def random_partition(rng, n_p, rounds, eps, max_rects=50):
    """Partition grown by random division choices, with random costs attached."""
    part = direct.init_partition(n_p, eps)
    for _ in range(rounds):
        direct.complete_pending_divisions(part, {q.point: rng.random() for q in part.pending})
        ids = sorted(part.rects)
        room = (max_rects - len(part.rects)) // (2 * n_p)
        if room < 1:
            break
        chosen = rng.sample(ids, rng.randint(1, min(room, len(ids))))
        direct.request_divisions(part, chosen)
    direct.complete_pending_divisions(part, {q.point: rng.random() for q in part.pending})
    costs = {}
    for r in part.rects.values():
        c = rng.random()
        if costs and rng.random() < 0.15:
            # occasional exact duplicate to exercise tie handling
            c = rng.choice(list(costs.values()))
        costs[r.center] = c
    direct.complete_pending_divisions(part, costs)
    lowest = min(costs.values())
    part.mu_hat = lowest if rng.random() < 0.3 else lowest * (1 + 0.5 * rng.random())
    return part


def brute_force_select(items, mu_hat, eps, tol=1e-12):
    """Decide each rect by trying every candidate rate L directly.

    The feasible rates form an interval whose finite end points are
    pairwise slopes, so trying all positive slopes and one huge value is
    exhaustive.
    """
    target = mu_hat - eps * abs(mu_hat)
    chosen = set()
    for it in items:
        cands = [1e12]
        for o in items:
            if o.d != it.d:
                s = (o.cost - it.cost) / (o.d - it.d)
                if s > 0:
                    cands.append(s)
        for L in cands:
            lhs = it.cost - L * it.d
            if lhs > target + tol * max(1.0, abs(target)):
                continue
            if all(lhs <= o.cost - L * o.d + tol * max(1.0, abs(o.cost)) for o in items):
                chosen.add(it.id)
                break
    return chosen

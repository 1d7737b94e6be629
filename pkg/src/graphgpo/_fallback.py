"""Pure-Python implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` module; used when the
extension is not built or ``GRAPHGPO_PURE_PYTHON=1`` is set.
"""

import heapq
import math

import numpy as np


def reverse_dijkstra(n_nodes, edge_src, edge_dst, edge_cost, is_goal, rank):
    """Multi-source shortest cost-to-goal over the reversed edge list.

    Returns a float64 array with ``inf`` for nodes that cannot reach a goal.
    Heap ties are broken by ``rank`` so pop order is reproducible.
    """
    incoming = [[] for _ in range(n_nodes)]
    for u, v, c in zip(edge_src.tolist(), edge_dst.tolist(), edge_cost.tolist()):
        incoming[v].append((u, c))
    rank = rank.tolist()
    dist = [math.inf] * n_nodes
    heap = []
    for v in range(n_nodes):
        if is_goal[v]:
            dist[v] = 0.0
            heap.append((0.0, rank[v], v))
    heapq.heapify(heap)
    done = [False] * n_nodes
    while heap:
        d, _, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for u, c in incoming[v]:
            nd = d + c
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, rank[u], u))
    return np.asarray(dist, dtype=np.float64)


def group_normalize(values, offsets, weights, std_floor):
    """Standardize ``values`` within contiguous segments.

    Segment ``g`` spans ``values[offsets[g]:offsets[g+1]]``. Population
    statistics, weighted by ``weights``; singleton segments and segments whose
    std falls below ``std_floor`` map to zero.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    out = np.zeros_like(values)
    for g in range(len(offsets) - 1):
        lo, hi = int(offsets[g]), int(offsets[g + 1])
        if hi - lo < 2:
            continue
        v = values[lo:hi]
        w = weights[lo:hi]
        wsum = w.sum()
        mu = float((w * v).sum() / wsum)
        sigma = math.sqrt(float((w * (v - mu) ** 2).sum() / wsum))
        if sigma < std_floor:
            continue
        out[lo:hi] = (v - mu) / sigma
    return out


def _flatten(trajectories):
    ids = {}
    nodes = []
    src, act, dst, cost, traj_of, t_of, pens, term = [], [], [], [], [], [], [], []

    def intern(s):
        i = ids.get(s)
        if i is None:
            i = ids[s] = len(nodes)
            nodes.append(s)
        return i

    for m, traj in enumerate(trajectories):
        cur = intern(traj.steps[0].state)
        pen = 0.0
        for t, step in enumerate(traj.steps):
            nxt = intern(step.next_state)
            src.append(cur)
            act.append(step.action)
            dst.append(nxt)
            cost.append(step.cost)
            traj_of.append(m)
            t_of.append(t)
            pen += step.env_penalty
            cur = nxt
        term.append(cur)
        pens.append(pen)
    i64 = np.int64
    return (
        nodes, np.array(src, dtype=i64), np.array(act, dtype=i64), np.array(dst, dtype=i64),
        np.array(cost, dtype=np.float64), np.array(traj_of, dtype=i64), np.array(t_of, dtype=i64),
        np.array(pens, dtype=np.float64), np.array(term, dtype=i64),
    )


def flatten_steps(trajectories):
    """Intern states to integer ids and flatten steps in ``(m, t)`` order.

    Returns ``(nodes, src, act, dst, cost, traj, t, terminal)`` where
    ``terminal[m]`` is the id of trajectory ``m``'s last state.
    """
    out = _flatten(trajectories)
    return out[:7] + (out[8],)


def dedupe_edges(n_nodes, step_src, step_act, step_dst, step_cost):
    """Map each step to a unique (src, action, dst, cost) edge id.

    Edge ids follow first occurrence. Returns ``(edge_of_step, first_step)``
    where ``first_step[e]`` is the step that introduced edge ``e``.
    """
    seen = {}
    edge_of = []
    first = []
    for i, key in enumerate(zip(step_src.tolist(), step_act.tolist(), step_dst.tolist(), step_cost.tolist())):
        e = seen.get(key)
        if e is None:
            e = seen[key] = len(first)
            first.append(i)
        edge_of.append(e)
    return np.asarray(edge_of, dtype=np.int64), np.asarray(first, dtype=np.int64)


def _bucket(keys, n_keys):
    order = np.argsort(np.asarray(keys, dtype=np.int64), kind="stable")
    counts = np.bincount(keys, minlength=n_keys)
    offsets = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    return order, offsets


def graph_edge_advantages(n_nodes, edge_src, edge_dst, edge_cost, edge_weight, node_dist, omega, r_succ, std_floor):
    """Graph advantage per edge, grouped by source node.

    Each group's rewards are evaluated relative to its smallest exponent
    (standardization is scale-invariant). Returns ``(advantages, exponents)``.
    """
    n = len(edge_src)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    dist = np.asarray(node_dist, dtype=np.float64)
    finite = dist[np.isfinite(dist)]
    d_max = float(finite.max()) if finite.size else 0.0
    d = dist[edge_dst]
    expo = np.where(np.isinf(d), d_max + 1.0, d) + np.asarray(edge_cost, dtype=np.float64)
    order, offsets = _bucket(edge_src, n_nodes)
    ex = expo[order]
    rew = np.empty(n)
    for g in range(n_nodes):
        lo, hi = offsets[g], offsets[g + 1]
        if hi > lo:
            rew[lo:hi] = r_succ * np.power(omega, ex[lo:hi] - ex[lo:hi].min())
    out = group_normalize(rew, offsets, np.asarray(edge_weight, dtype=np.float64)[order], std_floor)
    adv = np.empty(n)
    adv[order] = out
    return adv, expo


def keyed_normalize(keys, n_keys, values, std_floor):
    """Standardize ``values`` within groups of equal integer key, in place order."""
    n = len(keys)
    if n == 0:
        return np.zeros(0)
    order, offsets = _bucket(keys, n_keys)
    out = group_normalize(np.asarray(values, dtype=np.float64)[order], offsets, np.ones(n), std_floor)
    res = np.empty(n)
    res[order] = out
    return res


def _byte_ranks(nodes):
    order = sorted(range(len(nodes)), key=nodes.__getitem__)
    rank = np.empty(len(nodes), dtype=np.int64)
    rank[order] = np.arange(len(nodes), dtype=np.int64)
    return rank


def build_compact(trajectories, success_flags):
    """Flatten, intern, dedupe and compute distances for one rollout group.

    Returns ``(nodes, src, act, dst, cost, traj, t, penalties, terminal,
    edge_of, first, is_goal, n_clash, dist)``.
    """
    nodes, src, act, dst, cost, traj, t, pens, term = _flatten(trajectories)
    n = len(nodes)
    flags = np.asarray(success_flags, dtype=bool)
    goal = np.zeros(n, dtype=np.uint8)
    goal[term[flags]] = 1
    fail = np.zeros(n, dtype=np.uint8)
    fail[term[~flags]] = 1
    edge_of, first = dedupe_edges(n, src, act, dst, cost)
    dist = reverse_dijkstra(n, src[first], dst[first], cost[first], goal, _byte_ranks(nodes))
    return nodes, src, act, dst, cost, traj, t, pens, term, edge_of, first, goal, int((goal & fail).sum()), dist


def compact_credit(n_nodes, step_src, step_dst, step_cost, step_traj, edge_of_step, edge_first,
                   node_dist, edge_weight, success, penalties, return_succ, omega, r_succ, std_floor, beta_g, beta_e,
                   step_values=None):
    """Graph, episode and combined advantages for one compact graph.

    With ``step_values`` given (GiGPO rewards per step), the step term is
    those values normalized within origin-state buckets instead of the
    graph advantage. Episode returns are ``return_succ * success + penalties``.
    Returns ``(step_adv, edge_adv, episode_adv, step_term)``.
    """
    first = np.asarray(edge_first, dtype=np.int64)
    weights = np.ones(len(first)) if edge_weight is None else np.asarray(edge_weight, dtype=np.float64)
    edge_adv, _ = graph_edge_advantages(
        n_nodes, step_src[first], step_dst[first], step_cost[first], weights, node_dist, omega, r_succ, std_floor
    )
    ret = np.where(np.asarray(success, dtype=bool), return_succ, 0.0) + np.asarray(penalties, dtype=np.float64)
    ep = group_normalize(ret, np.array([0, len(ret)]), np.ones(len(ret)), std_floor)
    if step_values is None:
        term = None
        step = beta_g * edge_adv[edge_of_step] + beta_e * ep[step_traj]
    else:
        term = keyed_normalize(step_src, n_nodes, step_values, std_floor)
        step = beta_g * term + beta_e * ep[step_traj]
    return step, edge_adv, ep, term


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def surrogate_loss_grad(logits, ref_logits, rows, actions, advantages, old_logp, clip_eps, kl_coef):
    """Clipped surrogate loss with exact KL penalty, and its gradient.

    ``logits``/``ref_logits`` are (S, A) tables for the batch's distinct
    states; step ``i`` lives in row ``rows[i]``. Loss is averaged over steps.
    Returns ``(loss, grad, n_clipped)`` where ``grad`` has the shape of
    ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    ref_logits = np.asarray(ref_logits, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.intp)
    actions = np.asarray(actions, dtype=np.intp)
    adv = np.asarray(advantages, dtype=np.float64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    n = len(rows)
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad, 0

    logp = _log_softmax(logits)
    ref_logp = _log_softmax(ref_logits)
    probs = np.exp(logp)

    ratio = np.exp(logp[rows, actions] - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    obj = np.minimum(unclipped_obj, clipped_obj)
    # gradient flows only where the unclipped branch attains the min
    active = (unclipped_obj <= clipped_obj) & (adv != 0.0)
    n_clipped = int(np.count_nonzero(~active & (adv != 0.0)))

    kl_rows = (probs * (logp - ref_logp)).sum(axis=1)
    loss = -obj.mean() + kl_coef * kl_rows[rows].mean()

    coef = np.where(active, adv * ratio, 0.0) / n
    # d/dlogits of log pi(a|s) is onehot(a) - pi(.|s)
    np.add.at(grad, (rows, actions), -coef)
    np.add.at(grad, rows, coef[:, None] * probs[rows])

    if kl_coef:
        counts = np.bincount(rows, minlength=logits.shape[0]).astype(np.float64)
        kl_grad = probs * (logp - ref_logp - kl_rows[:, None])
        grad += (kl_coef / n) * counts[:, None] * kl_grad
    return float(loss), grad, n_clipped

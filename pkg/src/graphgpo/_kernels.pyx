# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``graphgpo._fallback``.

The ``cdef`` cores work on raw buffers; the Python-facing functions are thin
wrappers, and the two fused entry points (``build_compact`` and
``compact_credit``) chain several cores in one call for the training loop.
"""

import numpy as np
cimport numpy as cnp
from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_GET_SIZE
from libc.math cimport exp, log, pow, sqrt, INFINITY
from libc.stdlib cimport malloc, free, qsort
from libc.string cimport memcmp

cnp.import_array()

ctypedef cnp.int64_t i64


# ---------------------------------------------------------------- heap

cdef struct HeapItem:
    double dist
    i64 rank
    i64 node


cdef inline bint _less(HeapItem a, HeapItem b) noexcept nogil:
    if a.dist != b.dist:
        return a.dist < b.dist
    return a.rank < b.rank


cdef void _push(HeapItem* heap, i64* size, HeapItem item) noexcept nogil:
    cdef i64 i = size[0]
    cdef i64 parent
    size[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if _less(item, heap[parent]):
            heap[i] = heap[parent]
            i = parent
        else:
            break
    heap[i] = item


cdef HeapItem _pop(HeapItem* heap, i64* size) noexcept nogil:
    cdef HeapItem top = heap[0]
    cdef HeapItem last
    cdef i64 i = 0, child, n
    size[0] -= 1
    n = size[0]
    if n == 0:
        return top
    last = heap[n]
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _less(heap[child + 1], heap[child]):
            child += 1
        if _less(heap[child], last):
            heap[i] = heap[child]
            i = child
        else:
            break
    heap[i] = last
    return top


# ---------------------------------------------------------------- cores

cdef int _dijkstra(i64 n_nodes, i64 n_edges, const i64* src, const i64* dst, const double* cost,
                   const cnp.uint8_t* goal, const i64* rank, double* dist) noexcept nogil:
    """Multi-source shortest cost-to-goal over reversed edges. Returns -1 on OOM."""
    cdef i64* indptr = <i64*> malloc((n_nodes + 1) * sizeof(i64))
    cdef i64* fill = <i64*> malloc((n_nodes + 1) * sizeof(i64))
    cdef i64* in_src = <i64*> malloc((n_edges + 1) * sizeof(i64))
    cdef double* in_cost = <double*> malloc((n_edges + 1) * sizeof(double))
    cdef cnp.uint8_t* done = <cnp.uint8_t*> malloc((n_nodes + 1) * sizeof(cnp.uint8_t))
    cdef HeapItem* heap = <HeapItem*> malloc((n_nodes + n_edges + 1) * sizeof(HeapItem))
    cdef int status = 0
    cdef i64 e, v, u, j, pos, size = 0
    cdef HeapItem item, nxt
    cdef double nd
    if indptr == NULL or fill == NULL or in_src == NULL or in_cost == NULL or done == NULL or heap == NULL:
        status = -1
    else:
        for v in range(n_nodes + 1):
            indptr[v] = 0
        for e in range(n_edges):
            indptr[dst[e] + 1] += 1
        for v in range(n_nodes):
            indptr[v + 1] += indptr[v]
            fill[v] = indptr[v]
        for e in range(n_edges):
            v = dst[e]
            pos = fill[v]
            in_src[pos] = src[e]
            in_cost[pos] = cost[e]
            fill[v] = pos + 1
        for v in range(n_nodes):
            done[v] = 0
            dist[v] = INFINITY
            if goal[v]:
                dist[v] = 0.0
                item.dist = 0.0
                item.rank = rank[v]
                item.node = v
                _push(heap, &size, item)
        while size > 0:
            item = _pop(heap, &size)
            v = item.node
            if done[v]:
                continue
            done[v] = 1
            for j in range(indptr[v], indptr[v + 1]):
                u = in_src[j]
                nd = item.dist + in_cost[j]
                if nd < dist[u]:
                    dist[u] = nd
                    nxt.dist = nd
                    nxt.rank = rank[u]
                    nxt.node = u
                    _push(heap, &size, nxt)
    free(indptr)
    free(fill)
    free(in_src)
    free(in_cost)
    free(done)
    free(heap)
    return status


cdef void _normalize_segments(const double* v, const double* w, const i64* off, i64 n_groups,
                              double std_floor, double* out) noexcept nogil:
    """Weighted population z-scores per segment; singletons and flat segments give 0."""
    cdef i64 g, i, lo, hi
    cdef double wsum, mu, var, sigma, dv
    for g in range(n_groups):
        lo = off[g]
        hi = off[g + 1]
        for i in range(lo, hi):
            out[i] = 0.0
        if hi - lo < 2:
            continue
        wsum = 0.0
        mu = 0.0
        for i in range(lo, hi):
            wsum += w[i]
            mu += w[i] * v[i]
        mu /= wsum
        var = 0.0
        for i in range(lo, hi):
            dv = v[i] - mu
            var += w[i] * dv * dv
        sigma = sqrt(var / wsum)
        if sigma < std_floor:
            continue
        for i in range(lo, hi):
            out[i] = (v[i] - mu) / sigma


cdef int _stable_bucket(const i64* keys, i64 n, i64 n_keys, i64* offsets, i64* order) noexcept nogil:
    """Counting sort of 0..n-1 by ``keys``; ties keep index order."""
    cdef i64 i, k
    cdef i64* fill = <i64*> malloc((n_keys + 1) * sizeof(i64))
    if fill == NULL:
        return -1
    for k in range(n_keys + 1):
        offsets[k] = 0
    for i in range(n):
        offsets[keys[i] + 1] += 1
    for k in range(n_keys):
        offsets[k + 1] += offsets[k]
    for k in range(n_keys):
        fill[k] = offsets[k]
    for i in range(n):
        k = keys[i]
        order[fill[k]] = i
        fill[k] += 1
    free(fill)
    return 0


cdef i64 _dedupe(i64 n_nodes, i64 n, const i64* src, const i64* act, const i64* dst, const double* cost,
                 i64* edge_of, i64* first) noexcept nogil:
    """First-seen edge ids via per-source linked lists. Returns edge count or -1 on OOM."""
    cdef i64* head = <i64*> malloc((n_nodes + 1) * sizeof(i64))
    cdef i64* nxt = <i64*> malloc((n + 1) * sizeof(i64))
    cdef i64 i, e, f, n_edges = 0
    if head == NULL or nxt == NULL:
        free(head)
        free(nxt)
        return -1
    for i in range(n_nodes):
        head[i] = -1
    for i in range(n):
        e = head[src[i]]
        while e >= 0:
            f = first[e]
            if act[f] == act[i] and dst[f] == dst[i] and cost[f] == cost[i]:
                break
            e = nxt[e]
        if e < 0:
            e = n_edges
            n_edges += 1
            first[e] = i
            nxt[e] = head[src[i]]
            head[src[i]] = e
        edge_of[i] = e
    free(head)
    free(nxt)
    return n_edges


cdef int _graph_adv(i64 n_nodes, i64 n, const i64* src, const i64* dst, const double* cost,
                    const double* weight, const double* dist, double omega, double r_succ,
                    double std_floor, double* adv, double* expo) noexcept nogil:
    """Per-edge graph advantage grouped by source node, rewards shifted per group."""
    cdef i64* off = <i64*> malloc((n_nodes + 1) * sizeof(i64))
    cdef i64* order = <i64*> malloc((n + 1) * sizeof(i64))
    cdef double* rew = <double*> malloc((n + 1) * sizeof(double))
    cdef double* w = <double*> malloc((n + 1) * sizeof(double))
    cdef double* out = <double*> malloc((n + 1) * sizeof(double))
    cdef i64 i, j, g
    cdef double d, d_max = 0.0, shift
    cdef int status = 0
    if off == NULL or order == NULL or rew == NULL or w == NULL or out == NULL:
        status = -1
    elif _stable_bucket(src, n, n_nodes, off, order) != 0:
        status = -1
    else:
        for i in range(n_nodes):
            if dist[i] != INFINITY and dist[i] > d_max:
                d_max = dist[i]
        for i in range(n):
            d = dist[dst[i]]
            if d == INFINITY:
                d = d_max + 1.0
            expo[i] = d + cost[i]
        for g in range(n_nodes):
            if off[g + 1] == off[g]:
                continue
            shift = expo[order[off[g]]]
            for j in range(off[g] + 1, off[g + 1]):
                if expo[order[j]] < shift:
                    shift = expo[order[j]]
            for j in range(off[g], off[g + 1]):
                rew[j] = r_succ * pow(omega, expo[order[j]] - shift)
                w[j] = weight[order[j]]
        _normalize_segments(rew, w, off, n_nodes, std_floor, out)
        for j in range(n):
            adv[order[j]] = out[j]
    free(off)
    free(order)
    free(rew)
    free(w)
    free(out)
    return status


cdef int _keyed_norm(const i64* keys, i64 n, i64 n_keys, const double* values, double std_floor,
                     double* res) noexcept nogil:
    cdef i64* off = <i64*> malloc((n_keys + 1) * sizeof(i64))
    cdef i64* order = <i64*> malloc((n + 1) * sizeof(i64))
    cdef double* vs = <double*> malloc((n + 1) * sizeof(double))
    cdef double* w = <double*> malloc((n + 1) * sizeof(double))
    cdef double* out = <double*> malloc((n + 1) * sizeof(double))
    cdef i64 j
    cdef int status = 0
    if off == NULL or order == NULL or vs == NULL or w == NULL or out == NULL:
        status = -1
    elif _stable_bucket(keys, n, n_keys, off, order) != 0:
        status = -1
    else:
        for j in range(n):
            vs[j] = values[order[j]]
            w[j] = 1.0
        _normalize_segments(vs, w, off, n_keys, std_floor, out)
        for j in range(n):
            res[order[j]] = out[j]
    free(off)
    free(order)
    free(vs)
    free(w)
    free(out)
    return status


cdef struct KeyRef:
    const char* data
    Py_ssize_t size
    i64 node


cdef int _cmp_keys(const void* a, const void* b) noexcept nogil:
    cdef const KeyRef* x = <const KeyRef*> a
    cdef const KeyRef* y = <const KeyRef*> b
    cdef Py_ssize_t n = x.size if x.size < y.size else y.size
    cdef int c = memcmp(x.data, y.data, n)
    if c != 0:
        return c
    return (x.size > y.size) - (x.size < y.size)


cdef int _byte_ranks(list nodes, i64* rank) except -1:
    cdef i64 n = len(nodes), i
    cdef KeyRef* refs = <KeyRef*> malloc((n + 1) * sizeof(KeyRef))
    if refs == NULL:
        raise MemoryError()
    for i in range(n):
        key = nodes[i]
        refs[i].data = PyBytes_AS_STRING(key)
        refs[i].size = PyBytes_GET_SIZE(key)
        refs[i].node = i
    qsort(refs, n, sizeof(KeyRef), _cmp_keys)
    for i in range(n):
        rank[refs[i].node] = i
    free(refs)
    return 0


cdef inline void _check(int status) except *:
    if status < 0:
        raise MemoryError()


# ---------------------------------------------------------------- wrappers

cdef inline object _i64(object a):
    if type(a) is np.ndarray and cnp.PyArray_TYPE(<cnp.ndarray> a) == cnp.NPY_INT64 and cnp.PyArray_IS_C_CONTIGUOUS(<cnp.ndarray> a):
        return a
    return np.ascontiguousarray(a, dtype=np.int64)


cdef inline object _f64(object a):
    if type(a) is np.ndarray and cnp.PyArray_TYPE(<cnp.ndarray> a) == cnp.NPY_DOUBLE and cnp.PyArray_IS_C_CONTIGUOUS(<cnp.ndarray> a):
        return a
    return np.ascontiguousarray(a, dtype=np.float64)


def reverse_dijkstra(i64 n_nodes, edge_src, edge_dst, edge_cost, is_goal, rank):
    cdef i64[::1] src = np.ascontiguousarray(edge_src, dtype=np.int64)
    cdef i64[::1] dst = np.ascontiguousarray(edge_dst, dtype=np.int64)
    cdef double[::1] cost = np.ascontiguousarray(edge_cost, dtype=np.float64)
    cdef cnp.uint8_t[::1] goal = np.ascontiguousarray(is_goal, dtype=np.uint8)
    cdef i64[::1] rk = np.ascontiguousarray(rank, dtype=np.int64)
    dist_arr = np.empty(n_nodes, dtype=np.float64)
    if n_nodes == 0:
        return dist_arr
    cdef double[::1] dist = dist_arr
    cdef i64 n_edges = src.shape[0]
    cdef int status
    with nogil:
        status = _dijkstra(n_nodes, n_edges, &src[0] if n_edges else NULL, &dst[0] if n_edges else NULL,
                           &cost[0] if n_edges else NULL, &goal[0], &rk[0], &dist[0])
    _check(status)
    return dist_arr


def group_normalize(values, offsets, weights, double std_floor):
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef i64[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    out_arr = np.zeros(v.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    if v.shape[0] == 0 or off.shape[0] < 2:
        return out_arr
    with nogil:
        _normalize_segments(&v[0], &w[0], &off[0], off.shape[0] - 1, std_floor, &out[0])
    return out_arr


def flatten_steps(trajectories):
    cdef list trajs = list(trajectories)
    cdef i64 n = 0, M = len(trajs)
    for traj in trajs:
        n += len(traj.steps)
    ibuf = np.empty(5 * n + M, dtype=np.int64)
    fbuf = np.empty(n + M, dtype=np.float64)
    nodes = _flatten(trajs, n, ibuf, fbuf)
    return (nodes, ibuf[:n], ibuf[n:2 * n], ibuf[2 * n:3 * n], fbuf[:n], ibuf[3 * n:4 * n], ibuf[4 * n:5 * n],
            ibuf[5 * n:])


cdef list _flatten(list trajs, i64 n, i64[::1] ib, double[::1] fb):
    """Intern states and write step columns into flat buffers.

    ``ib`` holds src, act, dst, traj, t (``n`` each) then ``M`` terminal ids;
    ``fb`` holds ``n`` costs then ``M`` penalty sums.
    """
    cdef i64 m, t, i = 0, cur, nx, M = len(trajs)
    cdef tuple steps, step
    cdef double pen
    cdef dict ids = {}
    cdef list nodes = []
    cdef object key, found
    for m in range(M):
        steps = trajs[m].steps
        key = (<tuple> steps[0])[0]
        found = ids.get(key)
        if found is None:
            cur = len(nodes)
            ids[key] = cur
            nodes.append(key)
        else:
            cur = found
        pen = 0.0
        for t in range(len(steps)):
            step = <tuple> steps[t]
            key = step[2]
            found = ids.get(key)
            if found is None:
                nx = len(nodes)
                ids[key] = nx
                nodes.append(key)
            else:
                nx = found
            ib[i] = cur
            ib[n + i] = step[1]
            ib[2 * n + i] = nx
            ib[3 * n + i] = m
            ib[4 * n + i] = t
            fb[i] = step[3]
            pen += step[4]
            cur = nx
            i += 1
        ib[5 * n + m] = cur
        fb[n + m] = pen
    return nodes


def dedupe_edges(i64 n_nodes, step_src, step_act, step_dst, step_cost):
    cdef i64[::1] src = np.ascontiguousarray(step_src, dtype=np.int64)
    cdef i64[::1] act = np.ascontiguousarray(step_act, dtype=np.int64)
    cdef i64[::1] dst = np.ascontiguousarray(step_dst, dtype=np.int64)
    cdef double[::1] cost = np.ascontiguousarray(step_cost, dtype=np.float64)
    cdef i64 n = src.shape[0], n_edges
    edge_of_arr = np.empty(n, dtype=np.int64)
    first_arr = np.empty(n, dtype=np.int64)
    if n == 0:
        return edge_of_arr, first_arr
    cdef i64[::1] edge_of = edge_of_arr
    cdef i64[::1] first = first_arr
    with nogil:
        n_edges = _dedupe(n_nodes, n, &src[0], &act[0], &dst[0], &cost[0], &edge_of[0], &first[0])
    _check(n_edges)
    return edge_of_arr, first_arr[:n_edges].copy()


def graph_edge_advantages(i64 n_nodes, edge_src, edge_dst, edge_cost, edge_weight, node_dist,
                          double omega, double r_succ, double std_floor):
    cdef i64[::1] src = np.ascontiguousarray(edge_src, dtype=np.int64)
    cdef i64[::1] dst = np.ascontiguousarray(edge_dst, dtype=np.int64)
    cdef double[::1] cost = np.ascontiguousarray(edge_cost, dtype=np.float64)
    cdef double[::1] weight = np.ascontiguousarray(edge_weight, dtype=np.float64)
    cdef double[::1] dist = np.ascontiguousarray(node_dist, dtype=np.float64)
    cdef i64 n = src.shape[0]
    adv_arr = np.zeros(n, dtype=np.float64)
    expo_arr = np.empty(n, dtype=np.float64)
    if n == 0:
        return adv_arr, expo_arr
    cdef double[::1] adv = adv_arr
    cdef double[::1] expo = expo_arr
    cdef int status
    with nogil:
        status = _graph_adv(n_nodes, n, &src[0], &dst[0], &cost[0], &weight[0], &dist[0],
                            omega, r_succ, std_floor, &adv[0], &expo[0])
    _check(status)
    return adv_arr, expo_arr


def keyed_normalize(keys, i64 n_keys, values, double std_floor):
    cdef i64[::1] k = np.ascontiguousarray(keys, dtype=np.int64)
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef i64 n = k.shape[0]
    res_arr = np.zeros(n, dtype=np.float64)
    if n == 0:
        return res_arr
    cdef double[::1] res = res_arr
    cdef int status
    with nogil:
        status = _keyed_norm(&k[0], n, n_keys, &v[0], std_floor, &res[0])
    _check(status)
    return res_arr


# ---------------------------------------------------------------- fused

def build_compact(trajectories, success_flags):
    """Flatten, intern, dedupe and compute distances for one rollout group.

    Returns ``(nodes, src, act, dst, cost, traj, t, penalties, terminal,
    edge_of, first, is_goal, n_clash, dist)``; arrays are views into three
    flat buffers.
    """
    cdef list trajs = list(trajectories)
    cdef i64 n = 0, M = len(trajs), m, v, n_edges = 0, n_clash = 0
    for traj in trajs:
        n += len(traj.steps)
    # int64: src act dst traj t | terminal(M) | edge_of first
    ibuf = np.empty(7 * n + M, dtype=np.int64)
    fbuf = np.empty(n + M + n + 1, dtype=np.float64)
    cdef i64[::1] ib = ibuf
    cdef double[::1] fb = fbuf
    nodes = _flatten(trajs, n, ib, fb)
    cdef i64 n_nodes = len(nodes)
    # uint8: goal | fail ; float64 tail reused for dist once sized
    gbuf = np.zeros(2 * n_nodes + 1, dtype=np.uint8)
    dist_arr = np.empty(n_nodes, dtype=np.float64)
    cdef cnp.uint8_t[::1] gb = gbuf
    cdef double[::1] dist = dist_arr
    cdef i64* src = &ib[0] if n else NULL
    cdef i64* act = src + n
    cdef i64* dst = src + 2 * n
    cdef i64* term = &ib[5 * n] if M else NULL
    cdef i64* edge_of = src + 5 * n + M
    cdef i64* first = src + 6 * n + M
    cdef double* cost = &fb[0]
    cdef i64* rank = <i64*> malloc((n_nodes + 1) * sizeof(i64))
    cdef i64* e_src = <i64*> malloc((n + 1) * sizeof(i64))
    cdef i64* e_dst = <i64*> malloc((n + 1) * sizeof(i64))
    cdef double* e_cost = <double*> malloc((n + 1) * sizeof(double))
    cdef int status = 0
    try:
        if rank == NULL or e_src == NULL or e_dst == NULL or e_cost == NULL:
            raise MemoryError()
        for m in range(M):
            if success_flags[m]:
                gb[term[m]] = 1
            else:
                gb[n_nodes + term[m]] = 1
        _byte_ranks(nodes, rank)
        if n:
            with nogil:
                for v in range(n_nodes):
                    if gb[v] and gb[n_nodes + v]:
                        n_clash += 1
                n_edges = _dedupe(n_nodes, n, src, act, dst, cost, edge_of, first)
                if n_edges >= 0:
                    for m in range(n_edges):
                        e_src[m] = src[first[m]]
                        e_dst[m] = dst[first[m]]
                        e_cost[m] = cost[first[m]]
                    status = _dijkstra(n_nodes, n_edges, e_src, e_dst, e_cost, &gb[0], rank, &dist[0])
            _check(n_edges)
            _check(status)
    finally:
        free(rank)
        free(e_src)
        free(e_dst)
        free(e_cost)
    o = 5 * n + M
    return (nodes, ibuf[:n], ibuf[n:2 * n], ibuf[2 * n:3 * n], fbuf[:n], ibuf[3 * n:4 * n], ibuf[4 * n:5 * n],
            fbuf[n:n + M], ibuf[5 * n:o], ibuf[o:o + n], ibuf[o + n:o + n + n_edges], gbuf[:n_nodes], n_clash,
            dist_arr)


def compact_credit(i64 n_nodes, step_src, step_dst, step_cost, step_traj, edge_of_step, edge_first,
                   node_dist, edge_weight, success, penalties, double return_succ, double omega, double r_succ,
                   double std_floor,
                   double beta_g, double beta_e, step_values=None):
    """Graph, episode and combined advantages for one compact graph.

    With ``step_values`` given (GiGPO rewards per step), the step term is
    those values normalized within origin-state buckets instead of the
    graph advantage. Episode returns are ``return_succ * success + penalties``.
    Returns ``(step_adv, edge_adv, episode_adv, step_term)``.
    """
    cdef i64[::1] src = _i64(step_src)
    cdef i64[::1] dst = _i64(step_dst)
    cdef double[::1] cost = _f64(step_cost)
    cdef i64[::1] traj = _i64(step_traj)
    cdef i64[::1] edge_of = _i64(edge_of_step)
    cdef i64[::1] first = _i64(edge_first)
    cdef double[::1] dist = _f64(node_dist)
    cdef cnp.uint8_t[::1] succ = np.ascontiguousarray(success, dtype=np.uint8)
    cdef double[::1] pen = _f64(penalties)
    cdef i64 n = src.shape[0], n_edges = first.shape[0], M = pen.shape[0], i, e
    cdef bint weighted = edge_weight is not None
    cdef bint gigpo = step_values is not None
    cdef double[::1] weight
    cdef double[::1] values
    if weighted:
        weight = np.ascontiguousarray(edge_weight, dtype=np.float64)
    if gigpo:
        values = np.ascontiguousarray(step_values, dtype=np.float64)
    step_arr = np.empty(n, dtype=np.float64)
    edge_arr = np.zeros(n_edges, dtype=np.float64)
    ep_arr = np.zeros(M, dtype=np.float64)
    term_arr = np.empty(n, dtype=np.float64) if gigpo else None
    cdef double[::1] step_adv = step_arr
    cdef double[::1] edge_adv = edge_arr
    cdef double[::1] ep = ep_arr
    cdef double[::1] term
    if gigpo:
        term = term_arr
    cdef i64* e_src = <i64*> malloc((n_edges + 1) * sizeof(i64))
    cdef i64* e_dst = <i64*> malloc((n_edges + 1) * sizeof(i64))
    cdef double* e_cost = <double*> malloc((n_edges + 1) * sizeof(double))
    cdef double* w = <double*> malloc((n_edges + M + 1) * sizeof(double))
    cdef double* ret = <double*> malloc((M + 1) * sizeof(double))
    cdef double* expo = <double*> malloc((n_edges + 1) * sizeof(double))
    cdef i64 ep_off[2]
    cdef int status = 0
    try:
        if e_src == NULL or e_dst == NULL or e_cost == NULL or w == NULL or expo == NULL or ret == NULL:
            raise MemoryError()
        with nogil:
            for e in range(n_edges):
                e_src[e] = src[first[e]]
                e_dst[e] = dst[first[e]]
                e_cost[e] = cost[first[e]]
                w[e] = weight[e] if weighted else 1.0
            if n_edges:
                status = _graph_adv(n_nodes, n_edges, e_src, e_dst, e_cost, w, &dist[0],
                                    omega, r_succ, std_floor, &edge_adv[0], expo)
            if M:
                for i in range(M):
                    w[i] = 1.0
                    ret[i] = (return_succ if succ[i] else 0.0) + pen[i]
                ep_off[0] = 0
                ep_off[1] = M
                _normalize_segments(ret, w, ep_off, 1, std_floor, &ep[0])
            if status == 0 and gigpo and n:
                status = _keyed_norm(&src[0], n, n_nodes, &values[0], std_floor, &term[0])
            if status == 0:
                for i in range(n):
                    if gigpo:
                        step_adv[i] = beta_g * term[i] + beta_e * ep[traj[i]]
                    else:
                        step_adv[i] = beta_g * edge_adv[edge_of[i]] + beta_e * ep[traj[i]]
        _check(status)
    finally:
        free(e_src)
        free(e_dst)
        free(e_cost)
        free(w)
        free(expo)
        free(ret)
    return step_arr, edge_arr, ep_arr, term_arr


# ---------------------------------------------------------------- surrogate

def surrogate_loss_grad(logits, ref_logits, rows, actions, advantages, old_logp,
                        double clip_eps, double kl_coef):
    cdef double[:, ::1] L = np.ascontiguousarray(logits, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(ref_logits, dtype=np.float64)
    cdef i64[::1] row = np.ascontiguousarray(rows, dtype=np.int64)
    cdef i64[::1] act = np.ascontiguousarray(actions, dtype=np.int64)
    cdef double[::1] adv = np.ascontiguousarray(advantages, dtype=np.float64)
    cdef double[::1] old = np.ascontiguousarray(old_logp, dtype=np.float64)
    cdef i64 S = L.shape[0], A = L.shape[1], n = row.shape[0]
    grad_arr = np.zeros((S, A), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    if n == 0:
        return 0.0, grad_arr, 0

    logp_arr = np.empty((S, A), dtype=np.float64)
    ref_arr = np.empty((S, A), dtype=np.float64)
    kl_arr = np.empty(S, dtype=np.float64)
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] reflp = ref_arr
    cdef double[::1] kl = kl_arr
    cdef i64 s, a, i, r
    cdef double m, z, acc, ratio, clipped, uo, co, coef, loss = 0.0, kl_sum = 0.0, p
    cdef i64 n_clipped = 0
    cdef double lo_clip = 1.0 - clip_eps, hi_clip = 1.0 + clip_eps

    with nogil:
        for s in range(S):
            m = L[s, 0]
            for a in range(1, A):
                if L[s, a] > m:
                    m = L[s, a]
            acc = 0.0
            for a in range(A):
                acc += exp(L[s, a] - m)
            z = m + log(acc)
            for a in range(A):
                logp[s, a] = L[s, a] - z
            m = R[s, 0]
            for a in range(1, A):
                if R[s, a] > m:
                    m = R[s, a]
            acc = 0.0
            for a in range(A):
                acc += exp(R[s, a] - m)
            z = m + log(acc)
            for a in range(A):
                reflp[s, a] = R[s, a] - z
            acc = 0.0
            for a in range(A):
                acc += exp(logp[s, a]) * (logp[s, a] - reflp[s, a])
            kl[s] = acc

        for i in range(n):
            r = row[i]
            ratio = exp(logp[r, act[i]] - old[i])
            clipped = ratio
            if clipped < lo_clip:
                clipped = lo_clip
            elif clipped > hi_clip:
                clipped = hi_clip
            uo = ratio * adv[i]
            co = clipped * adv[i]
            loss -= uo if uo < co else co
            kl_sum += kl[r]
            if adv[i] == 0.0:
                continue
            if uo <= co:
                coef = adv[i] * ratio / n
                for a in range(A):
                    grad[r, a] += coef * exp(logp[r, a])
                grad[r, act[i]] -= coef
            else:
                n_clipped += 1

        if kl_coef != 0.0:
            for i in range(n):
                r = row[i]
                for a in range(A):
                    p = exp(logp[r, a])
                    grad[r, a] += (kl_coef / n) * p * (logp[r, a] - reflp[r, a] - kl[r])

    loss = loss / n + kl_coef * kl_sum / n
    return loss, grad_arr, n_clipped

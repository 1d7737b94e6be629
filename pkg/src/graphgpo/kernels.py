"""Kernel backend selection.

The compiled extension is used when importable; set ``GRAPHGPO_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("GRAPHGPO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

reverse_dijkstra = _impl.reverse_dijkstra
group_normalize = _impl.group_normalize
surrogate_loss_grad = _impl.surrogate_loss_grad
dedupe_edges = _impl.dedupe_edges
flatten_steps = _impl.flatten_steps
build_compact = _impl.build_compact
compact_credit = _impl.compact_credit
graph_edge_advantages = _impl.graph_edge_advantages
keyed_normalize = _impl.keyed_normalize


def backends():
    """All importable backends, keyed by name (used by tests and benchmarks)."""
    found = {"python": _fallback}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found

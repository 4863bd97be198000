"""Functional operations over nested containers of tensors.

A tree is any nesting of dicts (string-keyed, insertion-ordered), lists and
tuples; everything else is a leaf.  Float-dtype tensors are the leaves the
numeric transforms act on; integer tensors, scalars and opaque objects ride
along untouched.  All operations are pure and preserve structure.
"""

from __future__ import annotations

import numpy as np

from .tensors import Tensor


class TreeError(ValueError):
    """Structure mismatch or a mapped function failing at some leaf."""


def is_leaf(x) -> bool:
    return not isinstance(x, (dict, list, tuple))


def _join(path: tuple) -> str:
    return ".".join(str(p) for p in path)


def tree_map(f, t):
    """Apply f to every leaf, preserving structure and traversal order."""

    def rec(node, path):
        if isinstance(node, dict):
            return {k: rec(v, path + (k,)) for k, v in node.items()}
        if isinstance(node, (list, tuple)):
            items = [rec(v, path + (i,)) for i, v in enumerate(node)]
            return type(node)(items)
        try:
            return f(node)
        except Exception as exc:
            raise TreeError(f"tree_map failed at path '{_join(path)}': {exc}") from exc

    return rec(t, ())


def tree_zip_map(f, a, b):
    """Apply f leafwise to two trees of identical structure."""

    def rec(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            ka, kb = list(x.keys()), list(y.keys())
            if ka != kb:
                for i in range(max(len(ka), len(kb))):
                    la = ka[i] if i < len(ka) else "<missing>"
                    lb = kb[i] if i < len(kb) else "<missing>"
                    if la != lb:
                        raise TreeError(
                            f"tree structures diverge at path '{_join(path + (la,))}'"
                            f" vs '{_join(path + (lb,))}'"
                        )
            return {k: rec(x[k], y[k], path + (k,)) for k in ka}
        if isinstance(x, (list, tuple)) and type(x) is type(y):
            if len(x) != len(y):
                raise TreeError(
                    f"tree structures diverge at path '{_join(path)}':"
                    f" lengths {len(x)} vs {len(y)}"
                )
            items = [rec(u, v, path + (i,)) for i, (u, v) in enumerate(zip(x, y))]
            return type(x)(items)
        if is_leaf(x) and is_leaf(y):
            try:
                return f(x, y)
            except Exception as exc:
                raise TreeError(f"tree_zip_map failed at path '{_join(path)}': {exc}") from exc
        raise TreeError(f"tree structures diverge at path '{_join(path)}': node kinds differ")

    return rec(a, b, ())


def tree_structure(t):
    """Hashable skeleton of a tree with leaf contents erased."""
    if isinstance(t, dict):
        return ("dict", tuple(t.keys()), tuple(tree_structure(v) for v in t.values()))
    if isinstance(t, list):
        return ("list", tuple(tree_structure(v) for v in t))
    if isinstance(t, tuple):
        return ("tuple", tuple(tree_structure(v) for v in t))
    return "leaf"


def tree_leaves(t) -> list:
    out = []

    def rec(node):
        if isinstance(node, dict):
            for v in node.values():
                rec(v)
        elif isinstance(node, (list, tuple)):
            for v in node:
                rec(v)
        else:
            out.append(node)

    rec(t)
    return out


def float_leaves(t) -> list:
    """All float-dtype tensor leaves with their dot-joined paths."""
    out = []

    def rec(node, path):
        if isinstance(node, dict):
            for k, v in node.items():
                rec(v, path + (k,))
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                rec(v, path + (i,))
        elif isinstance(node, Tensor) and node.dtype.is_float:
            out.append((_join(path), node))

    rec(t, ())
    return out


def all_finite(t) -> bool:
    """True iff no float tensor leaf contains inf or NaN (vacuously true)."""
    for leaf in tree_leaves(t):
        if isinstance(leaf, Tensor) and leaf.dtype.is_float:
            if not np.isfinite(leaf.payload).all():
                return False
    return True


def _leaf_repr(x) -> str:
    if isinstance(x, Tensor):
        return f"tensor {x.dtype.value}{list(x.shape)} {x.payload.tolist()!r}"
    return repr(x)


def format_tree(t) -> str:
    """Canonical human-readable rendering (for golden tests, not a wire format)."""
    lines = []

    def rec(node, indent):
        pad = "  " * indent
        if isinstance(node, dict):
            if not node:
                lines.append(pad + "{}")
                return
            for k, v in node.items():
                if is_leaf(v):
                    lines.append(f"{pad}{k}: {_leaf_repr(v)}")
                else:
                    lines.append(f"{pad}{k}:")
                    rec(v, indent + 1)
        elif isinstance(node, (list, tuple)):
            if not node:
                lines.append(pad + ("[]" if isinstance(node, list) else "()"))
                return
            for v in node:
                if is_leaf(v):
                    lines.append(f"{pad}- {_leaf_repr(v)}")
                else:
                    lines.append(f"{pad}-")
                    rec(v, indent + 1)
        else:
            lines.append(pad + _leaf_repr(node))

    rec(t, 0)
    return "\n".join(lines) + "\n"

"""Walking nested weight containers."""
from __future__ import annotations

import dataclasses

from .tensor import Tensor


def iter_params(obj, prefix=""):
    """Yield ``(dotted_name, Tensor)`` for every tensor in a dataclass/list tree, in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_params(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_params(item, f"{prefix}.{i}" if prefix else str(i))


def param_count(obj) -> int:
    return int(sum(t.size for _, t in iter_params(obj)))

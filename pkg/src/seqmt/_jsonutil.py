from __future__ import annotations

from typing import Any

from .errors import ValidationError

_MISSING = object()


def field(d: Any, key: str, path: str, kind: type | tuple[type, ...] | None = None, default: Any = _MISSING) -> Any:
    """Fetch ``d[key]`` with a diagnostic naming the JSON path on failure."""
    if not isinstance(d, dict):
        raise ValidationError(f"{path or '<root>'}: expected an object, got {type(d).__name__}")
    if key not in d:
        if default is not _MISSING:
            return default
        raise ValidationError(f"{_join(path, key)}: required field missing")
    value = d[key]
    if kind is not None:
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(value, bool) and kind in (int, float):
            raise ValidationError(f"{_join(path, key)}: expected {kind.__name__}, got bool")
        if not isinstance(value, kind):
            want = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise ValidationError(f"{_join(path, key)}: expected {want}, got {type(value).__name__}")
    return value


def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


join = _join

"""Line-oriented ``section.key = value`` text format.

Blank lines and ``#`` comment lines are ignored.  Keys keep their file order,
so ``format_config(parse_config(text))`` reproduces ``text`` up to comments
and whitespace around ``=``.
"""

from __future__ import annotations

import os
import tempfile


class ConfigError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}" if line else reason)
        self.line = line
        self.reason = reason


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(lineno, f"expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise ConfigError(lineno, f"bad key {key!r}")
        if key in out:
            raise ConfigError(lineno, f"duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_config(items: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def subkeys(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    """Entries under ``prefix.`` with the prefix stripped, in file order."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def split_list(value: str, sep: str = ",") -> list[str]:
    return [s.strip() for s in value.split(sep) if s.strip()]


def write_atomic(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

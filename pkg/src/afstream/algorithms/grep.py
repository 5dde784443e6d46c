"""Pattern matching over byte lines; no state, so beta is 1."""

from __future__ import annotations

from typing import Optional


def grep(line: bytes, pattern: bytes) -> Optional[bytes]:
    """The line itself when it contains the pattern, else None."""
    if not line or not pattern:
        return None
    return line if pattern in line else None

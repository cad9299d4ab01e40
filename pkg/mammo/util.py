"""Small hashing, seeding and filesystem helpers shared by the stages and the CLI."""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Union

import numpy as np

_INVALID_FILENAME_CHARS = re.compile(r'[<>:"/\\|?*\s]')

PathLike = Union[str, Path]


def sanitize_filename(filename: str, max_length: int = 200) -> str:
    """Make ``filename`` safe for Windows/Unix filesystems."""
    sanitized = _INVALID_FILENAME_CHARS.sub("_", filename).strip(". ")
    return sanitized[:max_length]


def sha256_file(path: PathLike, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no whitespace: identical for reordered mappings."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def derive_seed(root: int, *names: Union[str, int]) -> int:
    """Derive a 32-bit seed for a named sub-stream of ``root``.

    Names are mixed through numpy's ``SeedSequence`` so ``derive_seed(s, "split")`` and
    ``derive_seed(s, "train", 3)`` are independent but reproducible everywhere.
    """
    keys = [n if isinstance(n, int) else zlib.crc32(str(n).encode("utf-8")) for n in names]
    return int(np.random.SeedSequence([int(root), *keys]).generate_state(1)[0])


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")

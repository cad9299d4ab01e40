"""Streamed file download with retries, for fetching pretrained weights."""

from __future__ import annotations

import time
from pathlib import Path
from typing import Callable, Optional

import requests

from .errors import IoFailure
from .logging import get_logger
from .util import PathLike

log = get_logger(__name__)

USER_AGENT = "mammo/1.0"


class DownloadSession:
    """Thin wrapper over ``requests.Session`` that retries transient transport errors."""

    def __init__(self, timeout: float = 60.0, max_retries: int = 3, retry_delay: float = 2.0,
                 chunk_size: int = 1 << 20):
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_delay = retry_delay
        self.chunk_size = chunk_size
        self._session = requests.Session()
        self._session.headers.update({"User-Agent": USER_AGENT})

    def download(self, url: str, dest: PathLike,
                 on_progress: Optional[Callable[[int, Optional[int]], None]] = None) -> Path:
        """Stream ``url`` to ``dest`` (via a ``.part`` file renamed on success).

        Raises ``requests.RequestException`` once every attempt has failed and
        :class:`IoFailure` if ``dest`` cannot be written.
        """
        dest = Path(dest)
        part = dest.with_name(dest.name + ".part")
        try:
            dest.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {dest.parent}: {exc}") from exc

        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                with self._session.get(url, stream=True, timeout=self.timeout) as resp:
                    resp.raise_for_status()
                    total = resp.headers.get("Content-Length")
                    total = int(total) if total else None
                    done = 0
                    with open(part, "wb") as fh:
                        for chunk in resp.iter_content(chunk_size=self.chunk_size):
                            fh.write(chunk)
                            done += len(chunk)
                            if on_progress:
                                on_progress(done, total)
                part.replace(dest)
                log.info("Downloaded %s -> %s (%d bytes)", url, dest, done)
                return dest
            except requests.RequestException as exc:
                last_exc = exc
                log.warning("Download attempt %d/%d failed for %s: %s",
                            attempt + 1, self.max_retries, url, exc)
                if attempt < self.max_retries - 1:
                    time.sleep(self.retry_delay)
            except OSError as exc:
                raise IoFailure(f"cannot write {part}: {exc}") from exc
        raise last_exc  # type: ignore[misc]

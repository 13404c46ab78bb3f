"""Activation-memory accounting.

The ledger records logical buffer bytes at their allocation sites, not
allocator- or OS-level memory.  Two kinds of records exist:

* retained buffers (``retain_array``/``release_array``) -- refcounted by
  array identity, used for tape-saved activations and long-lived state
  (parameters, gradients, optimizer slots).  A buffer shared by several
  tape nodes is counted once.
* transient markers (``alloc``/``free``) -- handle-based, used by kernels
  to bracket buffers they materialize and drop within a single call.

Every event is attributed to the innermost open scope tag, which lets
reports break peaks down per layer and per component.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

from .errors import AccountingError

PARAMETERS = "parameters"
GRADIENTS = "gradients"
OPTIMIZER = "optimizer"
ACTIVATION = "activation"
TRANSIENT = "transient"

CATEGORIES = (PARAMETERS, GRADIENTS, OPTIMIZER, ACTIVATION, TRANSIENT)

# Mixed-precision AdamW model states: fp16 params + grads (2+2 bytes) and
# fp32 master params + momentum + variance (4+4+4 bytes) per parameter.
MODEL_STATE_BYTES_PER_PARAM = 16


def model_states_bytes(param_count: float) -> float:
    """Bytes needed for parameters, gradients and optimizer state."""
    if param_count <= 0:
        raise ValueError(f"param_count must be positive, got {param_count}")
    return MODEL_STATE_BYTES_PER_PARAM * param_count


@dataclass(frozen=True)
class LedgerEvent:
    step: int  # monotonic event counter
    kind: str  # "alloc" | "free" | "leak" | "mark"
    nbytes: int
    category: str
    site: str
    op: str = ""


@dataclass
class LedgerReport:
    peak_total_bytes: int
    peak_by_category: dict[str, int]
    peak_by_site: dict[str, int]
    peak_by_site_category: dict[tuple[str, str], int]
    activation_bytes_by_site: dict[str, int]
    marks: dict[str, int]
    leaked_bytes: int
    series: list[tuple[int, int]]

    def activation_bytes(self, *site_prefixes: str) -> int:
        """Sum retained activation bytes over sites matching any prefix."""
        total = 0
        for site, nbytes in self.activation_bytes_by_site.items():
            if not site_prefixes or any(site.startswith(p) for p in site_prefixes):
                total += nbytes
        return total


class _Retained:
    __slots__ = ("array", "handle", "refcount")

    def __init__(self, array, handle: int):
        self.array = array  # strong ref: retained means alive
        self.handle = handle
        self.refcount = 1


class Ledger:
    """Single-writer event log of tagged allocations and releases."""

    def __init__(self, enabled: bool = True, keep_series: bool = True):
        self.enabled = enabled
        self.keep_series = keep_series
        self.events: list[LedgerEvent] = []
        self._counter = 0
        self._next_handle = 1
        self._live: dict[int, tuple[int, str, str]] = {}  # handle -> (bytes, cat, site)
        self._retained: dict[int, _Retained] = {}  # id(array) -> entry
        self._scopes: list[str] = []
        self.live_total = 0
        self.live_by_category: dict[str, int] = {c: 0 for c in CATEGORIES}
        self._live_by_site: dict[str, int] = {}
        self._live_by_site_cat: dict[tuple[str, str], int] = {}
        self.peak_total = 0
        self.peak_by_category: dict[str, int] = {c: 0 for c in CATEGORIES}
        self.peak_by_site: dict[str, int] = {}
        self.peak_by_site_cat: dict[tuple[str, str], int] = {}
        self.activation_by_site: dict[str, int] = {}
        self.total_alloc_by_category: dict[str, int] = {c: 0 for c in CATEGORIES}
        self.alloc_events_by_category: dict[str, int] = {c: 0 for c in CATEGORIES}
        self.marks: dict[str, int] = {}
        self.series: list[tuple[int, int]] = []

    # -- scoping ----------------------------------------------------------

    @contextmanager
    def scope(self, tag: str):
        self._scopes.append(tag)
        try:
            yield self
        finally:
            self._scopes.pop()

    def current_site(self) -> str:
        return self._scopes[-1] if self._scopes else ""

    # -- raw alloc/free ----------------------------------------------------

    def alloc(self, nbytes: int, category: str, op: str = "") -> int:
        if not self.enabled:
            return 0
        if category not in CATEGORIES:
            raise AccountingError(f"unknown category {category!r}")
        site = self.current_site()
        handle = self._next_handle
        self._next_handle += 1
        self._live[handle] = (nbytes, category, site)
        self._bump(nbytes, category, site)
        self.total_alloc_by_category[category] += nbytes
        self.alloc_events_by_category[category] += 1
        if category == ACTIVATION:
            self.activation_by_site[site] = self.activation_by_site.get(site, 0) + nbytes
        self._emit("alloc", nbytes, category, site, op)
        return handle

    def free(self, handle: int, op: str = "") -> None:
        if not self.enabled or handle == 0:
            return
        entry = self._live.pop(handle, None)
        if entry is None:
            raise AccountingError(f"free without matching alloc (handle {handle})")
        nbytes, category, site = entry
        self._bump(-nbytes, category, site)
        self._emit("free", nbytes, category, site, op)

    # -- refcounted array retention -----------------------------------------

    def retain_array(self, array, category: str, op: str = "") -> None:
        if not self.enabled:
            return
        key = id(array)
        entry = self._retained.get(key)
        if entry is not None:
            entry.refcount += 1
            return
        handle = self.alloc(array.nbytes, category, op=op)
        self._retained[key] = _Retained(array, handle)

    def release_array(self, array, op: str = "") -> None:
        if not self.enabled:
            return
        key = id(array)
        entry = self._retained.get(key)
        if entry is None:
            raise AccountingError("release of an array that was never retained")
        entry.refcount -= 1
        if entry.refcount == 0:
            del self._retained[key]
            self.free(entry.handle, op=op)

    # -- snapshots ----------------------------------------------------------

    def mark(self, name: str) -> None:
        if not self.enabled:
            return
        self.marks[name] = self.live_total
        self._emit("mark", self.live_total, "", self.current_site(), name)

    def live_bytes(self) -> int:
        return self.live_total

    def flag_leaks(self, baseline: int) -> int:
        """Flag bytes still live above a step-start baseline.

        Leaked activations/transients are recorded as ``leak`` events and
        returned; parameters/optimizer state above baseline are legitimate
        and not flagged.
        """
        if not self.enabled:
            return 0
        leaked = 0
        for nbytes, category, site in self._live.values():
            if category in (ACTIVATION, TRANSIENT):
                leaked += nbytes
                self._emit("leak", nbytes, category, site, "")
        if self.live_total < baseline:
            raise AccountingError(
                f"live bytes {self.live_total} fell below baseline {baseline}"
            )
        return leaked

    # -- reporting -----------------------------------------------------------

    def report(self) -> LedgerReport:
        leaked = sum(
            nbytes
            for nbytes, category, _ in self._live.values()
            if category in (ACTIVATION, TRANSIENT)
        )
        return LedgerReport(
            peak_total_bytes=self.peak_total,
            peak_by_category=dict(self.peak_by_category),
            peak_by_site=dict(self.peak_by_site),
            peak_by_site_category=dict(self.peak_by_site_cat),
            activation_bytes_by_site=dict(self.activation_by_site),
            marks=dict(self.marks),
            leaked_bytes=leaked,
            series=list(self.series),
        )

    def reset_counters(self) -> None:
        """Zero the cumulative/peak statistics, keeping live buffers."""
        self.peak_total = self.live_total
        self.peak_by_category = dict(self.live_by_category)
        self.peak_by_site = dict(self._live_by_site)
        self.peak_by_site_cat = dict(self._live_by_site_cat)
        self.activation_by_site = {}
        self.total_alloc_by_category = {c: 0 for c in CATEGORIES}
        self.alloc_events_by_category = {c: 0 for c in CATEGORIES}
        self.marks = {}
        self.events.clear()
        self.series.clear()

    # -- internals -------------------------------------------------------------

    def _bump(self, delta: int, category: str, site: str) -> None:
        self.live_total += delta
        self.live_by_category[category] += delta
        self._live_by_site[site] = self._live_by_site.get(site, 0) + delta
        key = (site, category)
        self._live_by_site_cat[key] = self._live_by_site_cat.get(key, 0) + delta
        if delta > 0:
            if self.live_total > self.peak_total:
                self.peak_total = self.live_total
            if self.live_by_category[category] > self.peak_by_category[category]:
                self.peak_by_category[category] = self.live_by_category[category]
            site_live = self._live_by_site[site]
            if site_live > self.peak_by_site.get(site, 0):
                self.peak_by_site[site] = site_live
            cat_live = self._live_by_site_cat[key]
            if cat_live > self.peak_by_site_cat.get(key, 0):
                self.peak_by_site_cat[key] = cat_live

    def _emit(self, kind: str, nbytes: int, category: str, site: str, op: str) -> None:
        self._counter += 1
        self.events.append(LedgerEvent(self._counter, kind, nbytes, category, site, op))
        if self.keep_series:
            self.series.append((self._counter, self.live_total))


class _NullLedger(Ledger):
    """Disabled ledger used by default so hot paths stay cheap."""

    def __init__(self):
        super().__init__(enabled=False)


_CURRENT: Ledger = _NullLedger()


def get() -> Ledger:
    return _CURRENT


def set_ledger(ledger: Ledger | None) -> Ledger:
    global _CURRENT
    previous = _CURRENT
    _CURRENT = ledger if ledger is not None else _NullLedger()
    return previous


@contextmanager
def use(ledger: Ledger):
    previous = set_ledger(ledger)
    try:
        yield ledger
    finally:
        set_ledger(previous)


def affine_fit(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares fit y = a*x + c, returning (a, c, r_squared)."""
    n = len(xs)
    if n < 2:
        raise ValueError("need at least two points")
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    if sxx == 0:
        raise ValueError("degenerate x values")
    a = sxy / sxx
    c = my - a * mx
    ss_res = sum((y - (a * x + c)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    if math.isnan(r2):
        r2 = 0.0
    return a, c, r2

"""Durability and availability model for erasure-coded, replicated chains.

Probabilities very close to one are carried as ``log(p)`` so that their
complements survive double precision (``1 - 1e-40`` rounds to ``1.0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

YEAR_S = 31_536_000
MONTH_S = YEAR_S / 12
DAY_S = 86_400

LOSS_RULES = ("k+1", "k")


def period_failure_rate(a: float, period_s: float) -> float:
    """Expected failures in one period for an annual rate ``a``."""
    if a < 0:
        raise ValueError("rate must be non-negative")
    if period_s <= 0:
        raise ValueError("period must be positive")
    return a * period_s / YEAR_S


def poisson_loss(f: float) -> float:
    """Probability of at least one event when ``f`` are expected: ``1 - e^-f``."""
    if f < 0:
        raise ValueError("rate must be non-negative")
    return -math.expm1(-f)


def poisson_gap(f: float) -> float:
    """``f - poisson_loss(f)`` without the cancellation of subtracting the two directly."""
    if f < 1e-3:
        # alternating series f^2/2 - f^3/6 + f^4/24 - ...
        total, term, j = 0.0, f, 1
        while True:
            j += 1
            term *= -f / j
            if abs(term) < 1e-20 * abs(total) and total:
                return -total
            total += term
    return f + math.expm1(-f)


@dataclass(frozen=True)
class NinesReport:
    """A probability near one, held as its natural log."""

    log_value: float

    @classmethod
    def from_complement(cls, q: float) -> "NinesReport":
        if not 0 <= q <= 1:
            raise ValueError("complement must lie in [0, 1]")
        return cls(math.log1p(-q) if q < 1 else -math.inf)

    @property
    def value(self) -> float:
        return math.exp(self.log_value)

    @property
    def complement(self) -> float:
        return -math.expm1(self.log_value)

    @property
    def nines(self) -> float:
        """``floor(-log10(1 - p))``; infinite when the complement is exactly zero."""
        q = self.complement
        if q <= 0:
            return math.inf
        return math.floor(-math.log10(q) + 1e-12)

    def __str__(self):
        return f"{self.value:.17g} (1-p={self.complement:.6g}, {self.nines} nines)"


def cumulative_chain_durability(p: float, o: float, b: float) -> NinesReport:
    """Survival of every object of a chain of ``b`` blocks, ``o`` objects each.

    Block ``j`` has been exposed for ``b - j + 1`` periods, giving the
    exponent ``o * b * (b + 1) / 2``.
    """
    if not 0 <= p < 1:
        raise ValueError("per-period loss must lie in [0, 1)")
    if o < 0 or b < 0:
        raise ValueError("counts must be non-negative")
    return NinesReport(o * b * (b + 1) / 2 * math.log1p(-p))


def binomial_coefficient_log(n: int, j: int) -> float:
    if n <= 60:
        return math.log(math.comb(n, j))
    return math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1)


def binomial_tail(p: float, n: int, first: int) -> float:
    """``P(X >= first)`` for ``X ~ Binomial(n, p)``."""
    if first <= 0:
        return 1.0
    if first > n or p <= 0:
        return 0.0
    if p >= 1:
        return 1.0
    log_p, log_q = math.log(p), math.log1p(-p)
    total = 0.0
    for j in range(first, n + 1):
        if n <= 60:
            total += math.comb(n, j) * p ** j * (1 - p) ** (n - j)
        else:
            total += math.exp(binomial_coefficient_log(n, j) + j * log_p + (n - j) * log_q)
    return min(total, 1.0)


def _first_lost(k: int, loss_rule: str) -> int:
    if loss_rule == "k+1":
        return k + 1
    if loss_rule == "k":
        return k
    raise ValueError(f"loss rule must be one of {LOSS_RULES}")


def shard_loss_probability(a: float, r_s: float) -> float:
    return poisson_loss(period_failure_rate(a, r_s))


def object_loss_per_period(a: float, r_s: float, n: int, k: int, loss_rule: str = "k+1") -> float:
    if not 0 <= k < n:
        raise ValueError("need 0 <= k < n")
    return binomial_tail(shard_loss_probability(a, r_s), n, _first_lost(k, loss_rule))


def object_durability(a: float, r_s: float, n: int, k: int, loss_rule: str = "k+1") -> NinesReport:
    """Annual survival of an object coded into ``n`` shards tolerating ``k`` losses.

    A shard is lost in a recovery period of ``r_s`` seconds with probability
    ``poisson_loss(period_failure_rate(a, r_s))``; the object is lost when
    ``k + 1`` or more shards go in the same period (``loss_rule="k"``
    counts ``k`` or more instead).
    """
    cdf = object_loss_per_period(a, r_s, n, k, loss_rule)
    if cdf >= 1:
        return NinesReport(-math.inf)
    return NinesReport(YEAR_S / r_s * math.log1p(-cdf))


def recovery_time(bytes_per_block: float, o: float, b: float, n: int, k: int,
                  transfer_mbps: float) -> float:
    """Seconds to re-transfer one shard of every object of a ``b``-block chain."""
    if o <= 0 or transfer_mbps <= 0 or n <= k:
        raise ValueError("need positive o and bandwidth and k < n")
    return bytes_per_block / o * b / (n - k) * 8 / (transfer_mbps * 1e6)


def unavailability(a_c: float, n: int, k: int) -> float:
    """Probability that more than ``k`` of ``n`` independent buckets are down."""
    if not 0 <= a_c <= 1:
        raise ValueError("availability must lie in [0, 1]")
    return binomial_tail(1 - a_c, n, n - k + 1) if k < n else 0.0


def availability(a_c: float, n: int, k: int) -> float:
    """Chance that at least ``n - k`` buckets answer, under independent outages.

    Loses precision near one; :func:`unavailability` gives the complement.
    """
    return 1 - unavailability(a_c, n, k)


def worst_case_availability(a_c: float) -> float:
    """All bucket outages coincide, so the chain is only as available as one bucket."""
    return a_c


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DurabilityModel:
    bucket_afr: float = 1e-11
    period_s: float = 0.1
    shard_afr: float = 0.00405
    shard_recovery_s: float = 6.5 * DAY_S
    bucket_shards: int = 20
    bucket_parity: int = 3
    shards: int = 6
    parity: int = 3
    objects_per_block: float = 4
    blocks: float = 3.1536e10
    bytes_per_block: float = 1328
    transfer_mbps: float = 160
    bucket_availability: float = 0.999

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("parity", "bucket_parity"):
                if v < 0:
                    raise ModelError(f"{f.name} must be non-negative")
            elif v <= 0:
                raise ModelError(f"{f.name} must be positive")
        if self.parity >= self.shards or self.bucket_parity >= self.bucket_shards:
            raise ModelError("parity must be smaller than the shard count")
        if self.bucket_availability > 1:
            raise ModelError("bucket_availability must not exceed 1")

    @classmethod
    def parse(cls, text: str, require_all: bool = True) -> "DurabilityModel":
        """Read flat ``key = value`` lines; ``#`` starts a comment."""
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ModelError(f"line {lineno}: unknown or malformed entry {line!r}")
            kind = int if known[key].type in ("int", int) else float
            try:
                values[key] = kind(float(value)) if kind is int else kind(value)
            except ValueError:
                raise ModelError(f"line {lineno}: bad number {value.strip()!r}") from None
        if require_all:
            missing = [k for k in known if k not in values]
            if missing:
                raise ModelError(f"missing field(s): {', '.join(missing)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str, require_all: bool = True) -> "DurabilityModel":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), require_all)


@dataclass(frozen=True)
class ChainDurability:
    f_c: float
    f_gap: float
    p_c: float
    single_bucket: NinesReport
    p_s: float
    cdf_s: float
    d_c: NinesReport
    r_z: float
    d_z: NinesReport
    cumulative: NinesReport
    loss_rule: str


def chain_durability_full(model: DurabilityModel, loss_rule: str = "k+1") -> ChainDurability:
    """Bucket-level object durability fed into the cross-bucket coding, then over the chain.

    ``loss_rule`` selects the loss threshold of the cross-bucket stage only;
    the bucket-internal stage always loses an object at ``k + 1`` shards.
    """
    f_c = period_failure_rate(model.bucket_afr, model.period_s)
    p_c = poisson_loss(f_c)
    single = cumulative_chain_durability(p_c, model.objects_per_block, model.blocks)
    p_s = shard_loss_probability(model.shard_afr, model.shard_recovery_s)
    cdf_s = object_loss_per_period(model.shard_afr, model.shard_recovery_s,
                                   model.bucket_shards, model.bucket_parity)
    d_c = object_durability(model.shard_afr, model.shard_recovery_s,
                            model.bucket_shards, model.bucket_parity)
    r_z = recovery_time(model.bytes_per_block, model.objects_per_block, model.blocks,
                        model.shards, model.parity, model.transfer_mbps)
    d_z = object_durability(d_c.complement, r_z, model.shards, model.parity, loss_rule)
    cumulative = cumulative_chain_durability(d_z.complement, model.objects_per_block, model.blocks)
    return ChainDurability(f_c, poisson_gap(f_c), p_c, single, p_s, cdf_s, d_c, r_z, d_z,
                           cumulative, loss_rule)


def simulate_object_loss(a: float, r_s: float, n: int, k: int, periods: int, trials: int, *,
                         seed: Optional[int] = 0, loss_rule: str = "k+1") -> tuple[float, float]:
    """Monte-Carlo estimate of losing an object within ``periods`` recovery periods.

    Each shard's failure events over the whole horizon are Poisson and land
    in uniformly random periods; a period loses the object when enough
    distinct shards fail in it.  Returns the loss fraction and its
    standard error.
    """
    rng = np.random.default_rng(seed)
    first = _first_lost(k, loss_rule)
    lam = period_failure_rate(a, r_s) * periods
    counts = rng.poisson(lam, size=(trials, n))
    total = int(counts.sum())
    trial_ids = np.repeat(np.arange(trials).repeat(n), counts.ravel())
    shard_ids = np.repeat(np.tile(np.arange(n), trials), counts.ravel())
    period_ids = rng.integers(0, periods, size=total)
    cells = np.unique((trial_ids.astype(np.int64) * periods + period_ids) * n + shard_ids)
    trial_period, per_cell = np.unique(cells // n, return_counts=True)
    lost_trials = np.unique(trial_period[per_cell >= first] // periods)
    frac = len(lost_trials) / trials
    return frac, math.sqrt(max(frac * (1 - frac), 1e-300) / trials)


def analytic_object_loss(a: float, r_s: float, n: int, k: int, periods: int,
                         loss_rule: str = "k+1") -> float:
    cdf = object_loss_per_period(a, r_s, n, k, loss_rule)
    return -math.expm1(periods * math.log1p(-cdf))


def appendix_rows(model: DurabilityModel) -> list[tuple[str, float, Optional[float]]]:
    """Rows ``(name, value, nines)`` walking through the whole model."""
    base = chain_durability_full(model, "k+1")
    alt = chain_durability_full(model, "k")
    a_gap = unavailability(model.bucket_availability, model.shards, model.parity)
    rows: list = [
        ("f_c", base.f_c, None),
        ("f_c-p_c", base.f_gap, None),
        ("p_c", base.p_c, None),
        ("single_bucket_d*_z", base.single_bucket.value, None),
        ("p_s", base.p_s, None),
        ("cdf_s", base.cdf_s, None),
        ("1-d_c", base.d_c.complement, base.d_c.nines),
        ("r_z_s", base.r_z, None),
    ]
    for r in (base, alt):
        rows.append((f"1-d_z[{r.loss_rule}]", r.d_z.complement, r.d_z.nines))
        rows.append((f"1-d*_z[{r.loss_rule}]", r.cumulative.complement, r.cumulative.nines))
    rows.append(("1-a_z", a_gap, NinesReport.from_complement(a_gap).nines))
    rows.append(("a_z_worst_case", worst_case_availability(model.bucket_availability),
                 NinesReport.from_complement(1 - model.bucket_availability).nines))
    return rows

"""Qubit-subspace witness, Koashi-Preskill key fraction and dimension optimization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import entr

from timebin.core.discretize import (
    Block,
    CorrelationMatrices,
    DiscretizationConfig,
    calibrate_grid_phase,
    discretize_block,
    iter_blocks,
    subspace_counts,
)
from timebin.core.errors import ConfigError, EntropyDomainError
from timebin.core.rng import SeededRNG
from timebin.core.timetag import TagStream

logger = logging.getLogger(__name__)

WITNESS_THRESHOLD = 1.5
WEIGHTINGS = ("uniform", "coincidences")
REPORT_COLUMNS = [
    "block_id",
    "block_start_s",
    "d",
    "witness_avg",
    "key_fraction",
    "key_fraction_raw",
    "key_rate_bps",
    "coincidences",
    "accepted_coincidences",
    "singles_rate_bob",
    "undefined_subspaces",
    "witness_certified",
    "key_positive",
]

Quadruple = Tuple[int, int, int, int]


def _match_frequency(matched: int, total: int) -> Optional[float]:
    if total <= 0:
        return None
    return matched / total


def p_match_toa(counts: Quadruple) -> Optional[float]:
    """``(m_ii + m_jj) / (m_ii + m_ij + m_ji + m_jj)``; ``None`` without counts."""

    ii, ij, ji, jj = (int(c) for c in counts)
    return _match_frequency(ii + jj, ii + ij + ji + jj)


def p_match_tsup(counts: Quadruple) -> Optional[float]:
    """``(m++ + m--) / (m++ + m+- + m-+ + m--)`` at the subspace diagonal."""

    pp, pm, mp, mm = (int(c) for c in counts)
    return _match_frequency(pp + mm, pp + pm + mp + mm)


def _binomial_stderr(p: Optional[float], n: int) -> Optional[float]:
    if p is None or n <= 0:
        return None
    return math.sqrt(p * (1.0 - p) / n)


@dataclass(frozen=True)
class SubspaceStats:
    """Matching frequencies of one qubit subspace; ``None`` marks undefined values."""

    index: int
    p_toa: Optional[float]
    p_tsup: Optional[float]
    n_toa: int
    n_tsup: int
    stderr_toa: Optional[float] = None
    stderr_tsup: Optional[float] = None

    @classmethod
    def from_counts(cls, index: int, toa: Quadruple, tsup: Quadruple) -> "SubspaceStats":
        p_toa = p_match_toa(toa)
        p_tsup = p_match_tsup(tsup)
        n_toa, n_tsup = int(sum(toa)), int(sum(tsup))
        return cls(
            index=index,
            p_toa=p_toa,
            p_tsup=p_tsup,
            n_toa=n_toa,
            n_tsup=n_tsup,
            stderr_toa=_binomial_stderr(p_toa, n_toa),
            stderr_tsup=_binomial_stderr(p_tsup, n_tsup),
        )

    @property
    def defined(self) -> bool:
        return self.p_toa is not None and self.p_tsup is not None

    @property
    def coincidences(self) -> int:
        return self.n_toa + self.n_tsup

    @property
    def witness(self) -> Optional[float]:
        if not self.defined:
            return None
        return self.p_toa + self.p_tsup


def subspace_stats(m: CorrelationMatrices) -> List[SubspaceStats]:
    if m.d % 2:
        raise ConfigError(f"Subspace analysis needs an even dimension, got d = {m.d}.")
    stats = []
    for i in range(m.d // 2):
        counts = subspace_counts(m, i)
        stats.append(SubspaceStats.from_counts(i, counts.toa, counts.tsup))
    return stats


def witness(m: CorrelationMatrices) -> Tuple[Optional[float], List[Optional[float]]]:
    """Average of ``p_toa + p_tsup`` over subspaces with defined statistics."""

    per_subspace = [s.witness for s in subspace_stats(m)]
    defined = [value for value in per_subspace if value is not None]
    if len(defined) < len(per_subspace):
        logger.warning(
            "d=%d block %d: %d of %d subspaces have no coincidences.",
            m.d,
            m.block_index,
            len(per_subspace) - len(defined),
            len(per_subspace),
        )
    if not defined:
        return None, per_subspace
    return float(np.mean(defined)), per_subspace


def binary_entropy(p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Shannon entropy in bits of a Bernoulli(p) variable, ``H(0) = H(1) = 0``."""

    values = np.asarray(p, dtype=float)
    if np.any(np.isnan(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise EntropyDomainError(f"Probability {p!r} outside [0, 1].")
    result = (entr(values) + entr(1.0 - values)) / math.log(2.0)
    if result.ndim == 0:
        return float(result)
    return result


class KeyFraction(NamedTuple):
    raw: float
    usable: float


def key_fraction(s: SubspaceStats) -> Optional[KeyFraction]:
    """Koashi-Preskill bound ``1 - H(p_toa) - H(p_tsup)``, clamped at zero for use.

    The bound is symmetric under ``p -> 1 - p``, so anti-correlated statistics
    score as high as correlated ones. Only a subspace whose own witness clears
    the threshold contributes usable key.
    """

    if not s.defined:
        return None
    raw = float(1.0 - binary_entropy(s.p_toa) - binary_entropy(s.p_tsup))
    usable = max(0.0, raw) if s.witness > WITNESS_THRESHOLD else 0.0
    return KeyFraction(raw=raw, usable=usable)


@dataclass
class AnalysisResult:
    block_id: int
    d: int
    integration_s: float
    witness_avg: Optional[float]
    witness_per_subspace: List[Optional[float]]
    key_fraction_avg: Optional[float]
    key_fraction_raw_avg: Optional[float]
    key_rate: Optional[float]
    subspace_coincidences: int
    accepted_coincidences: int = 0
    block_start_s: float = 0.0
    singles_rate_bob: float = 0.0
    subspaces: List[SubspaceStats] = field(default_factory=list)
    matrices: Optional[CorrelationMatrices] = field(default=None, repr=False)

    @property
    def witness_certified(self) -> bool:
        return self.witness_avg is not None and self.witness_avg > WITNESS_THRESHOLD

    @property
    def key_positive(self) -> bool:
        return self.key_rate is not None and self.key_rate > 0

    @property
    def undefined_subspaces(self) -> int:
        return sum(1 for value in self.witness_per_subspace if value is None)

    def to_row(self) -> Dict[str, object]:
        return {
            "block_id": self.block_id,
            "block_start_s": self.block_start_s,
            "d": self.d,
            "witness_avg": self.witness_avg,
            "key_fraction": self.key_fraction_avg,
            "key_fraction_raw": self.key_fraction_raw_avg,
            "key_rate_bps": self.key_rate,
            "coincidences": self.subspace_coincidences,
            "accepted_coincidences": self.accepted_coincidences,
            "singles_rate_bob": self.singles_rate_bob,
            "undefined_subspaces": self.undefined_subspaces,
            "witness_certified": self.witness_certified,
            "key_positive": self.key_positive,
        }


def key_rate(m: CorrelationMatrices, weighting: str = "uniform", block_start_s: float = 0.0) -> AnalysisResult:
    """Average key fraction times subspace coincidences per second, plus the witness."""

    if weighting not in WEIGHTINGS:
        raise ConfigError(f"Unknown weighting '{weighting}'. Expected one of {', '.join(WEIGHTINGS)}.")
    if m.integration_s <= 0:
        raise ConfigError("Integration time must be positive.")
    stats = subspace_stats(m)
    witness_avg, per_subspace = witness(m)

    fractions = [(s, key_fraction(s)) for s in stats]
    defined = [(s, f) for s, f in fractions if f is not None]
    total = sum(s.coincidences for s in stats)
    if defined:
        weights = np.array([1.0 if weighting == "uniform" else s.coincidences for s, _ in defined])
        usable = float(np.average([f.usable for _, f in defined], weights=weights))
        raw = float(np.average([f.raw for _, f in defined], weights=weights))
        if witness_avg is None or witness_avg <= WITNESS_THRESHOLD:
            # no key from a block that does not certify entanglement
            usable = 0.0
        rate = usable * total / m.integration_s
    else:
        usable = raw = rate = None

    return AnalysisResult(
        block_id=m.block_index,
        d=m.d,
        integration_s=m.integration_s,
        witness_avg=witness_avg,
        witness_per_subspace=per_subspace,
        key_fraction_avg=usable,
        key_fraction_raw_avg=raw,
        key_rate=rate,
        subspace_coincidences=int(total),
        accepted_coincidences=m.frame_stats.accepted,
        block_start_s=block_start_s,
        singles_rate_bob=m.frame_stats.singles_bob / m.integration_s,
        subspaces=stats,
        matrices=m,
    )


class DimensionScan(NamedTuple):
    best_d: Optional[int]
    results: Dict[int, AnalysisResult]

    def to_rows(self) -> List[Dict[str, object]]:
        return [self.results[d].to_row() for d in sorted(self.results)]


def _pick_best(results: Dict[int, AnalysisResult]) -> Optional[int]:
    best_d, best_rate = None, 0.0
    for d in sorted(results):
        rate = results[d].key_rate
        if rate is not None and rate > best_rate:
            best_d, best_rate = d, rate
    return best_d


def optimize_dimension(
    a: TagStream,
    b: TagStream,
    block: Block,
    d_candidates: Sequence[int],
    tau_mzi_ps: int = 2_700,
    frame_len_ps: Optional[int] = None,
    grid_phase_ps: int = 0,
    seed: int = 0,
    weighting: str = "uniform",
) -> DimensionScan:
    """Discretize one block at every candidate ``d`` and keep the best key rate.

    Ties go to the smaller dimension; ``best_d`` is ``None`` when no candidate
    yields a positive rate.
    """

    root = SeededRNG(seed)
    results: Dict[int, AnalysisResult] = {}
    for d in sorted(set(d_candidates)):
        cfg = DiscretizationConfig.for_dimension(d, tau_mzi_ps, frame_len_ps, grid_phase_ps)
        matrices = discretize_block(a, b, cfg, block, root.substream("fair_sampling", block.index, d))
        results[d] = key_rate(matrices, weighting, block_start_s=block.start_s)
    best_d = _pick_best(results)
    logger.debug("Block %d best dimension: %s.", block.index, best_d)
    return DimensionScan(best_d, results)


def analyze_blocks(
    a: TagStream,
    b: TagStream,
    config,
    seed: int = 0,
    threads: int = 1,
    end_ps: Optional[int] = None,
) -> List[DimensionScan]:
    """Run :func:`optimize_dimension` over every block of the session.

    ``config`` is an :class:`~timebin.schemas.AnalysisConfig`. An ``"auto"``
    grid phase is calibrated once at the largest requested dimension.
    """

    d_list = sorted(config.d_list)
    reference = DiscretizationConfig.for_dimension(d_list[-1], config.tau_mzi_ps, config.frame_len_ps)
    if config.grid_phase_ps == "auto":
        phase = calibrate_grid_phase(a, b, reference, config.n_phases, config.calibration_s)
    else:
        phase = int(config.grid_phase_ps)
    reference = reference.with_phase(phase)
    blocks = list(iter_blocks(a, b, config.block_len_s, reference, end_ps=end_ps))
    logger.info("Analyzing %d blocks at d in %s (grid phase %d ps).", len(blocks), d_list, phase)
    scans: List[DimensionScan] = Parallel(n_jobs=threads, prefer="threads")(
        delayed(optimize_dimension)(
            a,
            b,
            block,
            d_list,
            config.tau_mzi_ps,
            config.frame_len_ps,
            phase,
            seed,
            config.weighting,
        )
        for block in blocks
    )
    return scans


def results_frame(scans: Sequence[DimensionScan]) -> pd.DataFrame:
    """Flatten block scans into report rows ordered by block then dimension."""

    rows = [row for scan in scans for row in scan.to_rows()]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


BEST_COLUMNS = ["block_id", "block_start_s", "best_d", "key_rate_bps", "witness_avg"]


def best_dimension_frame(report: pd.DataFrame) -> pd.DataFrame:
    """Best ``d`` per block from report rows, with the same tie rule as :func:`optimize_dimension`."""

    rows = []
    for block_id, group in report.groupby("block_id", sort=True):
        rates = pd.to_numeric(group["key_rate_bps"], errors="coerce").fillna(0.0)
        positive = group[rates > 0]
        best = None
        if not positive.empty:
            top = rates[rates > 0].max()
            best = positive[rates[rates > 0] == top].sort_values("d").iloc[0]
        rows.append(
            {
                "block_id": int(block_id),
                "block_start_s": float(group["block_start_s"].iloc[0]),
                "best_d": int(best["d"]) if best is not None else None,
                "key_rate_bps": float(best["key_rate_bps"]) if best is not None else 0.0,
                "witness_avg": best["witness_avg"] if best is not None else None,
            }
        )
    frame = pd.DataFrame(rows, columns=BEST_COLUMNS)
    frame["best_d"] = frame["best_d"].astype("Int64")
    return frame


__all__ = [
    "AnalysisResult",
    "DimensionScan",
    "KeyFraction",
    "SubspaceStats",
    "WITNESS_THRESHOLD",
    "analyze_blocks",
    "best_dimension_frame",
    "binary_entropy",
    "key_fraction",
    "key_rate",
    "optimize_dimension",
    "p_match_toa",
    "p_match_tsup",
    "results_frame",
    "subspace_stats",
    "witness",
]

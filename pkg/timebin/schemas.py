"""Pydantic schemas for scenario configuration and run manifests."""
from __future__ import annotations

import math
from datetime import timezone
from typing import Any, List, Literal, Optional, Tuple, Union

import numpy as np
from dateutil import parser as date_parser
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_EPOCH = "2021-06-24T03:00:00Z"
DEFAULT_DIMENSIONS = (4, 6, 12, 18, 36)


class Profile(BaseModel):
    """Piecewise-linear function of session time (s), constant outside its knots."""

    knots: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0)])

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="before")
    @classmethod
    def parse_text(cls, value: Any) -> Any:
        if isinstance(value, (int, float)):
            return {"knots": [(0.0, float(value))]}
        if isinstance(value, str):
            return {"knots": parse_profile_text(value)}
        if isinstance(value, (list, tuple)):
            return {"knots": list(value)}
        return value

    @field_validator("knots")
    @classmethod
    def validate_knots(cls, value: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if not value:
            raise ValueError("Profile needs at least one knot.")
        times = [t for t, _ in value]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("Profile knot times must be strictly increasing.")
        if any(v < 0 or not math.isfinite(v) for _, v in value):
            raise ValueError("Profile values must be finite and non-negative.")
        return value

    def __call__(self, t_s: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        times = np.array([t for t, _ in self.knots], dtype=float)
        values = np.array([v for _, v in self.knots], dtype=float)
        return np.interp(t_s, times, values)

    def peak(self, start_s: float, stop_s: float) -> float:
        """Maximum over [start_s, stop_s]; exact because the profile is piecewise linear."""

        inside = [v for t, v in self.knots if start_s <= t <= stop_s]
        candidates = inside + [float(self(start_s)), float(self(stop_s))]
        return max(candidates)

    def scaled(self, factor: float) -> "Profile":
        return Profile(knots=[(t, v * factor) for t, v in self.knots])


def parse_profile_text(text: str) -> List[Tuple[float, float]]:
    """Parse ``"0:100, 600:4000"`` (or a bare number) into profile knots."""

    text = text.strip()
    if not text:
        raise ValueError("Profile text is empty.")
    if ":" not in text:
        return [(0.0, float(text))]
    knots: List[Tuple[float, float]] = []
    for chunk in text.split(","):
        time_part, sep, value_part = chunk.partition(":")
        if not sep:
            raise ValueError(f"Profile knot '{chunk.strip()}' must be written as t_s:value.")
        knots.append((float(time_part), float(value_part)))
    return knots


def parse_epoch(value: Any) -> int:
    """Return Unix seconds for an ISO date-time label or pass integers through."""

    if isinstance(value, (int, np.integer)):
        return int(value)
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    parsed = date_parser.isoparse(text) if "T" in text else date_parser.parse(text)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return int(parsed.timestamp())


class SourceConfig(BaseModel):
    """Photon-pair source of the hyperentangled state, reduced to its statistics."""

    pair_rate_hz: float = Field(65.0 * 28.5, gt=0)
    tsup_visibility: float = Field(0.9, ge=0, le=1)
    toa_visibility: float = Field(0.99, ge=0, le=1)
    phase_rad: float = Field(0.0, ge=0, lt=2 * math.pi)

    model_config = ConfigDict(extra="forbid", frozen=True)


class ChannelConfig(BaseModel):
    """Link, detector and clock imperfections between the source and both parties."""

    loss_alice_db: float = Field(6.0, ge=0)
    loss_bob_db: float = Field(25.0, ge=0)
    extra_loss_bob_db: Profile = Field(default_factory=Profile)
    jitter_sigma_ps: float = Field(40.0, ge=0)
    background_bob: Profile = Field(default_factory=lambda: Profile(knots=[(0.0, 1500.0)]))
    background_alice: Profile = Field(default_factory=Profile)
    dark_rate_hz: float = Field(200.0, ge=0)
    clock_offset_ps: int = 100_000_000
    clock_drift_ps_per_s: float = 30.0
    drift_noise_ps_per_sqrt_s: float = Field(1.0, ge=0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    def transmission_alice(self) -> float:
        return 10.0 ** (-self.loss_alice_db / 10.0)

    def transmission_bob(self, t_s: Union[float, np.ndarray] = 0.0) -> Union[float, np.ndarray]:
        return 10.0 ** (-(self.loss_bob_db + self.extra_loss_bob_db(t_s)) / 10.0)


class SessionConfig(BaseModel):
    duration_s: float = Field(600.0, gt=0)
    seed: int = Field(0, ge=0)
    epoch: int = Field(default_factory=lambda: parse_epoch(DEFAULT_EPOCH))
    chunk_s: float = Field(50.0, gt=0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("epoch", mode="before")
    @classmethod
    def coerce_epoch(cls, value: Any) -> int:
        try:
            return parse_epoch(value)
        except (ValueError, OverflowError) as exc:
            raise ValueError(f"Unrecognised epoch '{value}'.") from exc


class SyncConfig(BaseModel):
    block_len_s: float = Field(10.0, gt=0)
    coarse_bin_ps: int = Field(1_000, ge=1)
    coarse_window_ps: int = Field(1_000_000, ge=1)
    fine_bin_ps: int = Field(10, ge=1)
    fine_window_ps: int = Field(10_000, ge=1)
    min_significance: float = Field(5.0, ge=0)
    refine_window_ps: int = Field(200, ge=0)
    min_peak_counts: int = Field(10, ge=1)
    # Centre of the coarse search; None takes the scenario's nominal clock offset.
    initial_offset_ps: Optional[int] = None

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def check_windows(self) -> "SyncConfig":
        if self.coarse_window_ps % self.coarse_bin_ps:
            raise ValueError("coarse_window_ps must be a multiple of coarse_bin_ps.")
        if self.fine_window_ps % self.fine_bin_ps:
            raise ValueError("fine_window_ps must be a multiple of fine_bin_ps.")
        return self


class AnalysisConfig(BaseModel):
    d_list: List[int] = Field(default_factory=lambda: list(DEFAULT_DIMENSIONS))
    tau_mzi_ps: int = Field(2_700, gt=0)
    frame_len_ps: Optional[int] = Field(None, gt=0)
    block_len_s: float = Field(200.0, gt=0)
    grid_phase_ps: Union[int, Literal["auto"]] = "auto"
    n_phases: int = Field(16, ge=1)
    calibration_s: float = Field(1.0, gt=0)
    weighting: Literal["uniform", "coincidences"] = "uniform"

    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator("d_list", mode="before")
    @classmethod
    def parse_d_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(part) for part in value.replace(";", ",").split(",") if part.strip()]
        return value

    @field_validator("d_list")
    @classmethod
    def check_d_list(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("At least one dimension is required.")
        if any(d < 2 for d in value):
            raise ValueError("Dimensions must be at least 2.")
        return sorted(set(value))

    @field_validator("grid_phase_ps", mode="before")
    @classmethod
    def parse_phase(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() != "auto":
            return int(value)
        if isinstance(value, str):
            return "auto"
        return value


class ScenarioMeta(BaseModel):
    name: str = "scenario"
    description: str = ""

    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenarioConfig(BaseModel):
    scenario: ScenarioMeta = Field(default_factory=ScenarioMeta)
    source: SourceConfig = Field(default_factory=SourceConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    session: SessionConfig = Field(default_factory=SessionConfig)
    sync: SyncConfig = Field(default_factory=SyncConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @property
    def name(self) -> str:
        return self.scenario.name

    def with_seed(self, seed: Optional[int]) -> "ScenarioConfig":
        if seed is None:
            return self
        return self.model_copy(update={"session": self.session.model_copy(update={"seed": seed})})

    @property
    def sync_prior_ps(self) -> int:
        """Coarse-search centre standing in for the GPS-disciplined time transfer."""

        if self.sync.initial_offset_ps is not None:
            return self.sync.initial_offset_ps
        return self.channel.clock_offset_ps

    def with_background_scale(self, factor: float) -> "ScenarioConfig":
        """Scale both receivers' stray light; dark counts stay as configured."""

        channel = self.channel.model_copy(
            update={
                "background_alice": self.channel.background_alice.scaled(factor),
                "background_bob": self.channel.background_bob.scaled(factor),
            }
        )
        return self.model_copy(update={"channel": channel})


class StageRecord(BaseModel):
    name: str
    status: Literal["ok", "failed"] = "ok"
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    seconds: float = 0.0
    error: Optional[str] = None


class RunManifest(BaseModel):
    """Everything needed to reproduce a run directory."""

    tool_version: str
    command: str
    seed: int
    config: dict[str, Any] = Field(default_factory=dict)
    parameters: dict[str, Any] = Field(default_factory=dict)
    stages: List[StageRecord] = Field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return all(stage.status == "ok" for stage in self.stages)

    def artifacts(self) -> dict[str, str]:
        files: dict[str, str] = {}
        for stage in self.stages:
            files.update(stage.outputs)
        return files

"""Application service layer: stages of a run directory and their manifest."""
from __future__ import annotations

import hashlib
import logging
import re
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import pandas as pd

from timebin import __version__
from timebin.core.analysis import (
    DimensionScan,
    analyze_blocks,
    best_dimension_frame,
    results_frame,
)
from timebin.core.errors import ConfigError, StageError, SyncFailure
from timebin.core.simulator import simulate_session
from timebin.core.sync import ClockModel, apply_model, synchronize
from timebin.core.timetag import PS_PER_S, TagStream, read_tags, write_tags
from timebin.exporting.xlsx import write_report_workbook
from timebin.importers.scenario import scenario_from_snapshot
from timebin.schemas import RunManifest, ScenarioConfig, StageRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TAG_SUFFIX = {"binary": ".ftag", "csv": ".csv"}
REPORT_CSV_COLUMNS = [
    "block_id",
    "block_start_s",
    "d",
    "witness_avg",
    "key_fraction",
    "key_rate_bps",
    "coincidences",
    "singles_rate_bob",
]
SWEEP_COLUMNS = [
    "noise_level",
    "clock_source",
    "block_id",
    "block_start_s",
    "d",
    "witness_avg",
    "key_fraction",
    "key_rate_bps",
    "coincidences",
    "best_d",
]
DEFAULT_NOISE_LEVELS = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 20.0)
_RUN_PATTERN = re.compile(r"_run(\d{3,})$")


def file_digest(path: Path, chunk_bytes: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_bytes), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def allocate_run_dir(out_root: Path, scenario: str, seed: int) -> Path:
    """Create ``<out>/<scenario>_seed<seed>_run<NNN>`` with the next free number."""

    out_root.mkdir(parents=True, exist_ok=True)
    prefix = f"{scenario}_seed{seed}"
    taken = []
    for entry in out_root.glob(f"{prefix}_run*"):
        match = _RUN_PATTERN.search(entry.name)
        if match and entry.name[: match.start()] == prefix:
            taken.append(int(match.group(1)))
    number = max(taken, default=0) + 1
    while True:
        run_dir = out_root / f"{prefix}_run{number:03d}"
        try:
            run_dir.mkdir()
        except FileExistsError:
            number += 1
            continue
        return run_dir


class PipelineService:
    """Coordinates the simulate, sync, analyze and report stages of one run directory."""

    def __init__(
        self,
        run_dir: Path,
        config: ScenarioConfig,
        manifest: RunManifest,
        threads: int = 1,
        tag_format: str = "binary",
    ) -> None:
        if tag_format not in TAG_SUFFIX:
            raise ConfigError(f"Unsupported tag format '{tag_format}'. Expected binary or csv.")
        self.run_dir = run_dir
        self.config = config
        self.manifest = manifest
        self.threads = threads
        self.tag_format = tag_format

    @classmethod
    def create(
        cls,
        out_root: Path,
        config: ScenarioConfig,
        command: str,
        threads: int = 1,
        tag_format: str = "binary",
        parameters: Optional[Dict[str, object]] = None,
    ) -> "PipelineService":
        if tag_format not in TAG_SUFFIX:
            raise ConfigError(f"Unsupported tag format '{tag_format}'. Expected binary or csv.")
        run_dir = allocate_run_dir(out_root, config.name, config.session.seed)
        manifest = RunManifest(
            tool_version=__version__,
            command=command,
            seed=config.session.seed,
            config=config.model_dump(mode="json"),
            parameters={"tag_format": tag_format, **(parameters or {})},
        )
        service = cls(run_dir, config, manifest, threads, tag_format)
        service.save_manifest()
        logger.info("Created run directory %s.", run_dir)
        return service

    @classmethod
    def open(cls, run_dir: Path, threads: int = 1) -> "PipelineService":
        path = run_dir / MANIFEST_NAME
        if not path.exists():
            raise ConfigError(f"No {MANIFEST_NAME} in {run_dir}; not a run directory.")
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        config = scenario_from_snapshot(manifest.config)
        tag_format = str(manifest.parameters.get("tag_format", "binary"))
        return cls(run_dir, config, manifest, threads, tag_format)

    # manifest bookkeeping

    def save_manifest(self) -> Path:
        path = self.run_dir / MANIFEST_NAME
        path.write_text(self.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    def has_stage(self, name: str) -> bool:
        return any(stage.name == name and stage.status == "ok" for stage in self.manifest.stages)

    def _require(self, name: str) -> None:
        if not self.has_stage(name):
            raise ConfigError(f"Run directory {self.run_dir} has no completed '{name}' stage.")

    def _digests(self, files: Dict[str, Path]) -> Dict[str, str]:
        return {
            path.relative_to(self.run_dir).as_posix(): file_digest(path) for path in files.values() if path.exists()
        }

    @contextmanager
    def _stage(self, name: str, inputs: Optional[Dict[str, Path]] = None) -> Iterator[Dict[str, Path]]:
        if self.has_stage(name):
            raise ConfigError(f"Stage '{name}' already ran in {self.run_dir}; start a new run instead.")
        outputs: Dict[str, Path] = {}
        started = time.perf_counter()
        logger.info("Stage %s started.", name)
        try:
            yield outputs
        except Exception as exc:
            self.manifest.stages.append(
                StageRecord(
                    name=name,
                    status="failed",
                    inputs=self._digests(inputs or {}),
                    seconds=round(time.perf_counter() - started, 3),
                    error=str(exc),
                )
            )
            self.save_manifest()
            raise StageError(name, exc) from exc
        record = StageRecord(
            name=name,
            inputs=self._digests(inputs or {}),
            outputs=self._digests(outputs),
            seconds=round(time.perf_counter() - started, 3),
        )
        self.manifest.stages.append(record)
        self.save_manifest()
        logger.info("Stage %s finished in %.2f s (%d artifacts).", name, record.seconds, len(record.outputs))

    # artifact paths

    def tag_path(self, name: str) -> Path:
        return self.run_dir / f"{name}{TAG_SUFFIX[self.tag_format]}"

    @property
    def ground_truth_dir(self) -> Path:
        return self.run_dir / "ground_truth"

    def _read_pair(self, bob_name: str) -> tuple[TagStream, TagStream]:
        return read_tags(self.tag_path("alice"), self.tag_format), read_tags(self.tag_path(bob_name), self.tag_format)

    # stages

    def simulate(self) -> Dict[str, int]:
        session_cfg = self.config.session
        with self._stage("simulate") as outputs:
            session = simulate_session(
                self.config.source,
                self.config.channel,
                session_cfg.duration_s,
                session_cfg.seed,
                epoch=session_cfg.epoch,
                chunk_s=session_cfg.chunk_s,
                threads=self.threads,
                tau_mzi_ps=self.config.analysis.tau_mzi_ps,
            )
            outputs["alice"] = write_tags(session.alice, self.tag_path("alice"), self.tag_format)
            outputs["bob"] = write_tags(session.bob, self.tag_path("bob"), self.tag_format)
            outputs.update(session.truth.write(self.ground_truth_dir))
        return {
            "pairs": session.truth.n_pairs,
            "alice_tags": len(session.alice),
            "bob_tags": len(session.bob),
            "both_detected": session.truth.both_detected(),
        }

    def truth_clock(self) -> ClockModel:
        frame = pd.read_csv(self.ground_truth_dir / "ground_truth_clock.csv")
        return ClockModel(frame["time_s"].to_numpy(dtype=float), frame["offset_ps"].to_numpy(dtype=float))

    def sync(self, truth_clock: bool = False) -> ClockModel:
        self._require("simulate")
        inputs = {"alice": self.tag_path("alice"), "bob": self.tag_path("bob")}
        with self._stage("sync", inputs) as outputs:
            alice, bob = self._read_pair("bob")
            if truth_clock:
                model = self.truth_clock()
                corrected = apply_model(bob, model)
            else:
                model, corrected = synchronize(alice, bob, self.config.sync, self.config.sync_prior_ps)
            outputs["clock_model"] = _write_csv(model.to_frame(), self.run_dir / "clock_model.csv")
            outputs["bob_synced"] = write_tags(corrected, self.tag_path("bob_synced"), self.tag_format)
        self.manifest.parameters["clock_source"] = "truth" if truth_clock else "tracked"
        self.save_manifest()
        return model

    def analyze(self, export_matrices: bool = False) -> List[DimensionScan]:
        self._require("sync")
        inputs = {"alice": self.tag_path("alice"), "bob_synced": self.tag_path("bob_synced")}
        with self._stage("analyze", inputs) as outputs:
            alice, bob = self._read_pair("bob_synced")
            scans = analyze_blocks(
                alice,
                bob,
                self.config.analysis,
                seed=self.config.session.seed,
                threads=self.threads,
                end_ps=int(round(self.config.session.duration_s * PS_PER_S)),
            )
            outputs["analysis"] = _write_csv(results_frame(scans), self.run_dir / "analysis.csv")
            if export_matrices:
                outputs.update(self._export_matrices(scans))
        return scans

    def _export_matrices(self, scans: Sequence[DimensionScan]) -> Dict[str, Path]:
        files: Dict[str, Path] = {}
        for scan in scans:
            for d, result in sorted(scan.results.items()):
                if result.matrices is None:
                    continue
                for name, frame in result.matrices.to_frames().items():
                    path = self.run_dir / "matrices" / f"block{result.block_id:03d}_d{d:02d}_{name}.csv"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    frame.to_csv(path, lineterminator="\n")
                    files[path.stem] = path
        return files

    def report(self) -> pd.DataFrame:
        self._require("analyze")
        inputs = {"analysis": self.run_dir / "analysis.csv"}
        with self._stage("report", inputs) as outputs:
            analysis = pd.read_csv(inputs["analysis"])
            report = analysis[REPORT_CSV_COLUMNS]
            best = best_dimension_frame(analysis)
            outputs["report"] = _write_csv(report, self.run_dir / "report.csv")
            outputs["best_dimension"] = _write_csv(best, self.run_dir / "best_dimension.csv")
            outputs["report_xlsx"] = write_report_workbook(self.run_dir / "report.xlsx", report, best, self.manifest)
        return best

    def pipeline(self, truth_clock: bool = False, export_matrices: bool = False) -> pd.DataFrame:
        """simulate -> sync -> analyze -> report; the first failing stage aborts."""

        self.simulate()
        self.sync(truth_clock=truth_clock)
        self.analyze(export_matrices=export_matrices)
        return self.report()

    def sweep(self, noise_levels: Sequence[float] = DEFAULT_NOISE_LEVELS, truth_clock: bool = False) -> pd.DataFrame:
        """Repeat the chain in memory with both parties' background scaled by each level.

        Every level reuses the run seed. When drift tracking fails at a level
        the simulator's own clock is used and the rows say so.
        """

        if not noise_levels or any(level < 0 for level in noise_levels):
            raise ConfigError("Noise levels must be a non-empty list of non-negative multipliers.")
        self.manifest.parameters["noise_levels"] = [float(level) for level in noise_levels]
        with self._stage("sweep") as outputs:
            frames = []
            for level in noise_levels:
                frames.append(self._sweep_level(float(level), truth_clock))
            table = pd.concat(frames, ignore_index=True)[SWEEP_COLUMNS]
            outputs["sweep"] = _write_csv(table, self.run_dir / "sweep.csv")
        return table

    def _sweep_level(self, level: float, truth_clock: bool) -> pd.DataFrame:
        config = self.config.with_background_scale(level)
        session_cfg = config.session
        session = simulate_session(
            config.source,
            config.channel,
            session_cfg.duration_s,
            session_cfg.seed,
            epoch=session_cfg.epoch,
            chunk_s=session_cfg.chunk_s,
            threads=self.threads,
            tau_mzi_ps=config.analysis.tau_mzi_ps,
        )
        truth_model = ClockModel(session.truth.clock.grid_s, session.truth.clock.offset_ps)
        clock_source = "truth"
        if truth_clock:
            bob = apply_model(session.bob, truth_model)
        else:
            try:
                _, bob = synchronize(session.alice, session.bob, config.sync, config.sync_prior_ps)
                clock_source = "tracked"
            except SyncFailure as exc:
                logger.warning("Noise level %g: %s Falling back to the simulated clock.", level, exc)
                bob = apply_model(session.bob, truth_model)
        scans = analyze_blocks(
            session.alice,
            bob,
            config.analysis,
            seed=session_cfg.seed,
            threads=self.threads,
            end_ps=int(round(session_cfg.duration_s * PS_PER_S)),
        )
        rows = results_frame(scans)
        best = best_dimension_frame(rows)[["block_id", "best_d"]]
        rows = rows.merge(best, on="block_id", how="left")
        rows.insert(0, "clock_source", clock_source)
        rows.insert(0, "noise_level", level)
        logger.info("Noise level %g: %d blocks analysed (%s clock).", level, len(scans), clock_source)
        return rows


__all__ = [
    "DEFAULT_NOISE_LEVELS",
    "MANIFEST_NAME",
    "PipelineService",
    "allocate_run_dir",
    "file_digest",
]

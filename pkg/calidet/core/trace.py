import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .edge import EdgeMatrix


@dataclass
class TraceEntry:
    """
    One self-calibration iteration: the edge the detector ran under, the
    evaluation of those predictions, and the update applied afterwards.
    """

    iteration: int
    edge: EdgeMatrix
    step_mae: float
    step_max: float
    effective_step: list[float]
    z_bar: list[float]
    metrics: dict[str, Any] | None = None

    def __post_init__(self):
        if self.step_mae > self.step_max + 1e-12:
            raise ValueError(f"Iteration {self.iteration}: step MAE {self.step_mae} exceeds step MAX {self.step_max}.")

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "edge": self.edge.to_dict(),
            "step_mae": self.step_mae,
            "step_max": self.step_max,
            "effective_step": self.effective_step,
            "z_bar": self.z_bar,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "TraceEntry":
        return cls(
            iteration=document["iteration"],
            edge=EdgeMatrix.from_dict(document["edge"]),
            step_mae=document["step_mae"],
            step_max=document["step_max"],
            effective_step=document["effective_step"],
            z_bar=document["z_bar"],
            metrics=document.get("metrics"),
        )


@dataclass
class CalibrationTrace:
    name: str
    initial_edge: EdgeMatrix
    config: dict[str, Any] = field(default_factory=dict)
    entries: list[TraceEntry] = field(default_factory=list)
    final_edge: EdgeMatrix | None = None
    converged: bool = False

    def add_state(self, entry: TraceEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def step_maes(self) -> list[float]:
        return [entry.step_mae for entry in self.entries]

    def step_maxes(self) -> list[float]:
        return [entry.step_max for entry in self.entries]

    def metric(self, key: str = "AP") -> list[float | None]:
        return [None if entry.metrics is None else entry.metrics.get(key) for entry in self.entries]

    def store(self, path: str | Path) -> Path:
        """
        Writes a header line followed by one JSON line per iteration.
        """
        path = Path(path)
        if path.suffix != ".jsonl":
            path = path.with_name(path.name + ".jsonl")
        header = {
            "name": self.name,
            "config": self.config,
            "initial_edge": self.initial_edge.to_dict(),
            "final_edge": None if self.final_edge is None else self.final_edge.to_dict(),
            "converged": self.converged,
        }
        with open(path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for entry in self.entries:
                f.write(json.dumps(entry.to_dict()) + "\n")
        print(f"Calibration trace stored as {path}")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationTrace":
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines:
            raise ValueError(f"Empty trace file {path}.")
        header = lines[0]
        final = header.get("final_edge")
        return cls(
            name=header["name"],
            initial_edge=EdgeMatrix.from_dict(header["initial_edge"]),
            config=header.get("config", {}),
            entries=[TraceEntry.from_dict(line) for line in lines[1:]],
            final_edge=None if final is None else EdgeMatrix.from_dict(final),
            converged=header.get("converged", False),
        )

"""Persisted run records (``runlog.json``)."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .types import GuidanceScales, Observation

SCHEMA_VERSION = "1"
PROTOCOL_VERSION = "edit-json/1"
RUNLOG_NAME = "runlog.json"


def observation_to_dict(o: Observation) -> dict:
    return {
        "iteration": o.iteration,
        "s_image": o.scales.s_image,
        "s_text": o.scales.s_text,
        "score": o.score,
        "raw_score": o.raw_score,
        "explanation": o.explanation,
        "image_ref": o.image_ref,
    }


def observation_from_dict(d: dict) -> Observation:
    return Observation(
        scales=GuidanceScales(d["s_image"], d["s_text"]),
        score=d["score"],
        iteration=d["iteration"],
        raw_score=d["raw_score"],
        explanation=d["explanation"],
        image_ref=d["image_ref"],
    )


@dataclass
class RunRecord:
    config: dict
    instruction: str
    edit_prompt: dict
    observations: list[Observation]
    incumbent: Observation | None
    stop_reason: str
    cost: dict
    timings: dict = field(default_factory=dict)
    rounds: list[dict] = field(default_factory=list)
    versions: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["observations"] = [observation_to_dict(o) for o in self.observations]
        d["incumbent"] = None if self.incumbent is None else observation_to_dict(self.incumbent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        d = dict(d)
        d["observations"] = [observation_from_dict(o) for o in d["observations"]]
        if d["incumbent"] is not None:
            d["incumbent"] = observation_from_dict(d["incumbent"])
        return cls(**d)

    def trace(self) -> list[tuple]:
        """The comparable part of a run: scales, scores and stop reason."""
        pts = [(o.scales.s_image, o.scales.s_text, o.score, o.raw_score) for o in self.observations]
        return [*pts, ("stop", self.stop_reason)]


def runlog_schema() -> dict:
    return json.loads(resources.files("cfgtune").joinpath("data/runlog.schema.json").read_text())


def validate_runlog(data: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``data`` does not match the schema."""
    jsonschema.validate(data, runlog_schema())


def write_runlog(record: RunRecord, directory: str | Path) -> Path:
    """Atomically write ``runlog.json``; a failed write leaves no partial file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = record.to_dict()
    validate_runlog(data)
    target = directory / RUNLOG_NAME
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".runlog-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def read_runlog(path: str | Path) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / RUNLOG_NAME
    data = json.loads(path.read_text())
    validate_runlog(data)
    return RunRecord.from_dict(data)

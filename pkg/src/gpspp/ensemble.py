"""Weighted ensembling of saved models or saved predictions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ConfigError
from .model import GPSModel
from .packer import PackSpec
from .training import mean_absolute_error, predict


@dataclass(frozen=True)
class Member:
    weight: float
    checkpoint: Path | None = None
    predictions: Path | None = None

    def __post_init__(self):
        if (self.checkpoint is None) == (self.predictions is None):
            raise ConfigError("an ensemble member needs exactly one of checkpoint or predictions")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ConfigError(f"member weight {self.weight} must be a nonnegative number")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        if not any(m.weight > 0 for m in self.members):
            raise ConfigError("an ensemble needs at least one positive weight")

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.members], dtype=float)

    @classmethod
    def from_json(cls, path) -> "EnsembleSpec":
        """Load a JSON list of ``{"checkpoint"|"predictions": path, "weight": w}``.

        Relative paths resolve against the spec file's directory.
        """
        path = Path(path)
        with open(path) as fh:
            entries = json.load(fh)
        if not isinstance(entries, list):
            raise ConfigError(f"{path}: expected a JSON list of members")
        members = []
        for k, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise ConfigError(f"{path}: member {k} is not an object")
            kw = {"weight": float(entry.get("weight", 1.0))}
            for key in ("checkpoint", "predictions"):
                if key in entry:
                    kw[key] = path.parent / entry[key]
            members.append(Member(**kw))
        return cls(tuple(members))


def combine(predictions, weights) -> np.ndarray:
    """``sum_m w_m * y_m / sum_m w_m`` per graph; members with weight 0 are skipped."""
    predictions = np.asarray(predictions, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if predictions.ndim != 2 or len(predictions) != len(weights):
        raise ConfigError("expected one prediction row per weight")
    active = weights > 0
    if not active.any():
        raise ConfigError("an ensemble needs at least one positive weight")
    w = weights[active]
    return w @ predictions[active] / w.sum()


def write_predictions(path, graph_ids, values):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph_id", "prediction"])
        for gid, v in zip(graph_ids, values):
            writer.writerow([int(gid), repr(float(v))])


def read_predictions(path, graph_ids) -> np.ndarray:
    """Read a predictions CSV and return values in ``graph_ids`` order."""
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"graph_id", "prediction"} <= set(reader.fieldnames):
            raise CheckpointError(f"{path}: expected columns graph_id, prediction")
        for row in reader:
            table[int(row["graph_id"])] = float(row["prediction"])
    missing = [int(g) for g in graph_ids if int(g) not in table]
    if missing:
        raise CheckpointError(f"{path}: no prediction for graph ids {missing[:5]}")
    return np.array([table[int(g)] for g in graph_ids])


def member_predictions(member: Member, featurized, graph_ids, spec: PackSpec = PackSpec()) -> np.ndarray:
    if member.checkpoint is not None:
        return predict(GPSModel.load(member.checkpoint), featurized, spec)
    return read_predictions(member.predictions, graph_ids)


def ensemble_predict(spec: EnsembleSpec, featurized, graph_ids=None, pack_spec: PackSpec = PackSpec()):
    """Return ``(ensembled, per_member)`` predictions for ``featurized`` graphs.

    ``graph_ids`` names the graphs in predictions files (default: positions).
    Zero-weight members are not evaluated.
    """
    featurized = list(featurized)
    if graph_ids is None:
        graph_ids = np.arange(len(featurized))
    rows = np.full((len(spec.members), len(featurized)), np.nan)
    for k, member in enumerate(spec.members):
        if member.weight > 0:
            rows[k] = member_predictions(member, featurized, graph_ids, pack_spec)
    active = spec.weights > 0
    return combine(rows[active], spec.weights[active]), rows


def ensemble_eval(spec: EnsembleSpec, featurized, graph_ids=None, pack_spec: PackSpec = PackSpec()) -> dict:
    """Per-member MAE, their average, and the MAE of the weighted ensemble."""
    featurized = list(featurized)
    targets = np.array([np.nan if f.graph.target is None else f.graph.target for f in featurized])
    ensembled, rows = ensemble_predict(spec, featurized, graph_ids, pack_spec)
    active = spec.weights > 0
    member_mae = [mean_absolute_error(r, targets) if a else None for r, a in zip(rows, active)]
    scored = [m for m in member_mae if m is not None]
    return {
        "member_mae": member_mae,
        "avg_mae": float(np.mean(scored)),
        "ensembled_mae": mean_absolute_error(ensembled, targets),
        "weights": spec.weights.tolist(),
        "num_graphs": len(featurized),
        "predictions": ensembled,
    }

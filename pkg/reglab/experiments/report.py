"""VerifyReport and its CSV / JSON writers."""

import io
import json
import logging
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from ..core.dynamics import Trajectory

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

_COMPARISONS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
    "==": operator.eq,
}


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value"):
        return value.value
    return value


@dataclass(frozen=True)
class Verdict:
    name: str
    metric: str
    comparison: str
    threshold: float
    value: float
    passed: bool


@dataclass
class VerifyReport:
    """
    Self-describing experiment outcome.

    ``rows`` holds one record per (sigma, trial) or per arm; ``metrics`` and
    ``trends`` the aggregates; each verdict names the metric (or trend) it
    was computed from and its threshold.
    """

    experiment: str
    params: Dict[str, Any]
    metrics: Dict[str, float] = field(default_factory=dict)
    trends: Dict[str, List[float]] = field(default_factory=dict)
    verdicts: List[Verdict] = field(default_factory=list)
    rows: pd.DataFrame = field(default_factory=pd.DataFrame)
    runtime_seconds: float = 0.0
    notes: List[str] = field(default_factory=list)
    trajectories: Dict[str, Trajectory] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def metric(self, name: str, value: float) -> float:
        self.metrics[name] = float(value)
        return self.metrics[name]

    def trend(self, name: str, values) -> List[float]:
        self.trends[name] = [float(v) for v in values]
        return self.trends[name]

    def check(self, name: str, metric: str, comparison: str, threshold: float) -> Verdict:
        """Compare a recorded metric against a threshold (NaN never passes)."""
        value = self.metrics[metric]
        passed = bool(not math.isnan(value) and _COMPARISONS[comparison](value, threshold))
        verdict = Verdict(name, metric, comparison, float(threshold), value, passed)
        self.verdicts.append(verdict)
        return verdict

    def check_decreasing(self, name: str, trend: str) -> Verdict:
        from .stats import strictly_decreasing

        values = self.trends[trend]
        passed = bool(strictly_decreasing(values)) and not any(math.isnan(v) for v in values)
        verdict = Verdict(name, trend, "strictly_decreasing", 0.0, float(len(values)), passed)
        self.verdicts.append(verdict)
        return verdict

    def failed_verdicts(self) -> List[Verdict]:
        return [v for v in self.verdicts if not v.passed]

    def without_timing(self) -> "VerifyReport":
        rows = self.rows.copy()
        if "runtime_s" in rows.columns:
            rows["runtime_s"] = 0.0
        return VerifyReport(
            experiment=self.experiment,
            params=self.params,
            metrics=self.metrics,
            trends=self.trends,
            verdicts=self.verdicts,
            rows=rows,
            runtime_seconds=0.0,
            notes=self.notes,
            trajectories=self.trajectories,
            tables=self.tables,
        )

    def summary_frame(self) -> pd.DataFrame:
        records = []
        for key, value in self.params.items():
            records.append(("param", key, _fmt(_jsonable(value)), "", "", ""))
        for key, value in self.metrics.items():
            records.append(("metric", key, _fmt(value), "", "", ""))
        for key, values in self.trends.items():
            for i, value in enumerate(values):
                records.append(("trend", f"{key}[{i}]", _fmt(value), "", "", ""))
        for v in self.verdicts:
            records.append(("verdict", v.name, _fmt(v.value), _fmt(v.threshold), v.comparison, _fmt(v.passed)))
        for note in self.notes:
            records.append(("note", "", note, "", "", ""))
        records.append(("runtime", "runtime_seconds", _fmt(self.runtime_seconds), "", "", ""))
        records.append(("result", "passed", _fmt(self.passed), "", "", ""))
        return pd.DataFrame(records, columns=["section", "name", "value", "threshold", "comparison", "passed"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.rows.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        buf.write("\n")
        self.summary_frame().to_csv(buf, index=False, lineterminator="\n")
        return buf.getvalue()

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(
            {
                "experiment": self.experiment,
                "params": self.params,
                "metrics": self.metrics,
                "trends": self.trends,
                "verdicts": [v.__dict__ for v in self.verdicts],
                "passed": self.passed,
                "runtime_seconds": self.runtime_seconds,
                "notes": self.notes,
                "rows": self.rows.to_dict(orient="records"),
                "tables": {name: table.to_dict(orient="records") for name, table in self.tables.items()},
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def write(self, out_dir: Path, fmt: str = "csv", stem: Optional[str] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.experiment.replace("-", "_")
        path = out_dir / f"{stem}.{fmt}"
        path.write_text(self.to_csv() if fmt == "csv" else self.to_json(), encoding="utf-8")
        logger.info("wrote %s", path)
        if fmt == "csv":
            for name, table in self.tables.items():
                side = out_dir / f"{stem}_{name}.csv"
                table.to_csv(side, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
                logger.info("wrote %s", side)
        return path


def write_trajectory(traj: Trajectory, path: Path) -> Path:
    """CSV with header t, x_0..x_{d-1}, reward, tanh_diag, meas_proj."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    traj.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path

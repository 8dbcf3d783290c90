"""Horizon RMSE, ablation runs, and report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import ScenarioBatch, collate
from .generator import VARIANTS, Rhino
from .giraffe import Giraffe
from .pipeline import generate_k, min_of_k, train_rhino

HORIZONS = (10, 20, 30, 40, 50)


class ReportError(IOError):
    pass


class VariantError(ValueError):
    pass


@dataclass
class EvalReport:
    values: dict = field(default_factory=dict)    # horizon frame -> RMSE in meters
    sample_count: int = 0
    fingerprint: str = ""
    variant: str = "full"
    flags: dict = field(default_factory=dict)

    @property
    def horizons(self) -> list[int]:
        return sorted(self.values)

    @property
    def nondecreasing(self) -> bool:
        v = [self.values[h] for h in self.horizons]
        return all(b >= a for a, b in zip(v, v[1:]))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "fingerprint": self.fingerprint,
                "sample_count": self.sample_count, "flags": self.flags,
                "rmse": {str(h): self.values[h] for h in self.horizons},
                "nondecreasing": self.nondecreasing}


def rmse(predictions, truths, horizon_frames: Sequence[int] = HORIZONS) -> EvalReport:
    """RMSE over all samples and frames 1..h for each horizon h.

    ``predictions`` and ``truths`` are [F, L, 2] (longitudinal, lateral).
    """
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs truths {t.shape}")
    if p.ndim != 3 or p.shape[-1] != 2:
        raise ValueError(f"expected [F, L, 2] arrays, got {p.shape}")
    sq = ((p - t) ** 2).sum(axis=-1)    # [F, L]
    values = {}
    for h in horizon_frames:
        if not 1 <= h <= p.shape[0]:
            raise ValueError(f"horizon {h} outside 1..{p.shape[0]}")
        values[int(h)] = float(np.sqrt(sq[:h].mean()))
    return EvalReport(values=values, sample_count=int(p.shape[1]))


def evaluate(model: Rhino, predictor: Giraffe, scenarios: Sequence[ScenarioBatch], k: int,
             seed: int, cfg: RunConfig | None = None, batch_size: int = 16,
             horizons: Sequence[int] = HORIZONS, source: str = "posterior") -> EvalReport:
    """Min-of-K RMSE of sampled futures against ground truth, over every agent."""
    preds, truths = [], []
    for i in range(0, len(scenarios), batch_size):
        batch = collate(scenarios[i:i + batch_size])
        samples = generate_k(model, predictor, batch, k, seed + i, source)
        preds.append(min_of_k(samples, batch.future))
        truths.append(batch.future)
    if not preds:
        return EvalReport(variant=model.cfg.variant)
    report = rmse(np.concatenate(preds, axis=1), np.concatenate(truths, axis=1), horizons)
    report.variant = model.cfg.variant
    report.fingerprint = cfg.fingerprint() if cfg is not None else ""
    report.flags = {"variant": model.cfg.variant, "k": k, "seed": seed, "source": source}
    return report


def run_ablation(cfg: RunConfig, variant: str, train: Sequence[ScenarioBatch],
                 test: Sequence[ScenarioBatch], predictor: Giraffe, seed: int = 7,
                 steps: int | None = None) -> tuple[Rhino, EvalReport]:
    """Train one generator variant on ``train`` and score it on ``test``."""
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant != "no_hg" and not cfg.scales:
        raise VariantError(f"variant {variant!r} needs hypergraph scales but config has none")
    model, _ = train_rhino(train, predictor, cfg, variant=variant, steps=steps, log_every=0)
    return model, evaluate(model, predictor, test, cfg.k_samples, seed, cfg)


# ---- files --------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def emit_report(reports: EvalReport | Sequence[EvalReport], out_dir) -> list[Path]:
    """Write rmse.csv, config.json and an SVG of RMSE against horizon.

    A single report gives a ``horizon,value`` CSV; several reports (one per
    variant) add a leading ``variant`` column.
    """
    from .plotting import plot_error_curves

    if isinstance(reports, EvalReport):
        reports = [reports]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "rmse.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            multi = len(reports) > 1
            w.writerow(["variant", "horizon", "value"] if multi else ["horizon", "value"])
            for r in reports:
                for h in r.horizons:
                    row = [h, _fmt(r.values[h])]
                    w.writerow([r.variant] + row if multi else row)
        cfg_path = out / "config.json"
        cfg_path.write_text(json.dumps({"reports": [r.to_dict() for r in reports]},
                                       indent=2, sort_keys=True) + "\n")
        svg_path = out / "rmse.svg"
        plot_error_curves(reports, svg_path)
    except OSError as exc:
        raise ReportError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from exc
    return [csv_path, cfg_path, svg_path]


def read_rmse_csv(path) -> dict:
    """{variant: {horizon: value}}; single-series files use the key ``None``."""
    out: dict = {}
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return out
    header = rows[0]
    for row in rows[1:]:
        if header[0] == "variant":
            out.setdefault(row[0], {})[int(row[1])] = float(row[2])
        else:
            out.setdefault(None, {})[int(row[0])] = float(row[1])
    return out

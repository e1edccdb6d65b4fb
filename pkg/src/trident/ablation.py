"""Ablation harness: paradigm x correlation kind x resolution preset.

Each case runs one preset over one bundle root and contributes one row.
Rows whose bundles are missing or malformed are kept in the table but
marked unavailable, so a partial sweep still renders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import TridentError
from .pipeline import PipelineOptions, run_preset
from .presets import get_preset

__all__ = ["AblationCase", "ablation_grid", "ablation_run", "render_table"]


@dataclass(frozen=True)
class AblationCase:
    paradigm: str
    corr: str
    preset: str
    bundle_root: str
    epsilon: float = 0.0

    def __post_init__(self):
        get_preset(self.preset)
        PipelineOptions(paradigm=self.paradigm, corr=self.corr, epsilon=self.epsilon)

    def options(self) -> PipelineOptions:
        return PipelineOptions(
            paradigm=self.paradigm, corr=self.corr, epsilon=self.epsilon
        )


def ablation_grid(
    paradigms: Sequence[str],
    corrs: Sequence[str],
    presets: Sequence[str],
    roots: str | Mapping[str, str],
    epsilon: float = 0.0,
) -> tuple[AblationCase, ...]:
    """Cartesian product of the three axes.

    ``roots`` is either one bundle root shared by every preset or a
    preset-name -> root mapping (resolution sweeps need per-preset exports).
    """
    cases = []
    for preset in presets:
        root = roots if isinstance(roots, str) else roots[preset]
        for paradigm in paradigms:
            for corr in corrs:
                cases.append(AblationCase(paradigm, corr, preset, str(root), epsilon))
    return tuple(cases)


def ablation_run(cases: Sequence[AblationCase]) -> dict:
    """One row per case; never raises on a missing or broken bundle root."""
    rows = []
    for case in cases:
        row = {
            "preset": case.preset,
            "paradigm": case.paradigm,
            "correlation": case.corr,
            "epsilon": case.epsilon,
            "images": 0,
            "miou": None,
            "pixel_accuracy": None,
            "unavailable": None,
        }
        try:
            report = run_preset(case.preset, case.bundle_root, case.options())
        except (TridentError, OSError) as e:
            row["unavailable"] = str(e)
        else:
            row["images"] = len(report["images"])
            row["miou"] = report["miou"]
            row["pixel_accuracy"] = report["pixel_accuracy"]
        rows.append(row)
    return {"rows": rows}


def render_table(result: dict) -> str:
    header = (
        f"{'preset':<12} {'paradigm':<10} {'correlation':<12} "
        f"{'images':>6} {'mIoU':>8} {'pixAcc':>8}  note"
    )
    lines = [header, "-" * len(header)]
    for row in result["rows"]:
        miou_s = "-" if row["miou"] is None else f"{row['miou']:.4f}"
        acc_s = "-" if row["pixel_accuracy"] is None else f"{row['pixel_accuracy']:.4f}"
        note = row["unavailable"] or ""
        lines.append(
            f"{row['preset']:<12} {row['paradigm']:<10} {row['correlation']:<12} "
            f"{row['images']:>6} {miou_s:>8} {acc_s:>8}  {note}"
        )
    return "\n".join(lines)

"""Fixed-rate perception-distortion curves, knee detection, reports, plots.

A curve collects the operating points traced by the decoder fine-tuning
weight at one fixed rate. The knee is the interior point with maximum
perpendicular distance to the chord between the curve's x-extremes after
min-max normalizing both axes; that normalization makes the answer
invariant under per-axis positive affine rescaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib as mpl
from matplotlib.figure import Figure

BASELINE_MARKER = "mse-only"

# Distances closer than this (in normalized units) count as tied; ties go to
# the larger-gamma point.
_TIE_EPS = 1e-12

_SVG_HASHSALT = "rdplab"


@dataclass(frozen=True)
class PDPoint:
    """One operating point: dataset-mean metrics at a fixed rate.

    ``gamma`` is None for the distortion-only baseline the sweep starts from.
    """

    gamma: Optional[float]
    bpp_actual: float
    psnr: float
    ssim: float
    perceptual: float
    frozen_hash: str
    checkpoint_hash: str

    def __post_init__(self):
        for name in ("bpp_actual", "psnr", "ssim", "perceptual"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")

    def gamma_label(self) -> str:
        return BASELINE_MARKER if self.gamma is None else repr(self.gamma)

    def sort_gamma(self) -> float:
        return math.inf if self.gamma is None else self.gamma


@dataclass(frozen=True)
class PDCurve:
    points: Tuple[PDPoint, ...]
    rate_label: float

    @property
    def frozen_hash(self) -> str:
        return self.points[0].frozen_hash


@dataclass(frozen=True)
class KneeResult:
    index: int
    gamma_at_knee: float  # math.inf marks the baseline point
    distance: float


def assemble_curve(points: Iterable[PDPoint]) -> PDCurve:
    """Canonicalize sweep points into a curve.

    Ordering is baseline first, then gamma descending, so the polyline runs
    from the distortion-trained end toward the perception-trained end. All
    points must share one frozen hash.
    """
    pts = list(points)
    if not pts:
        raise ValueError("cannot assemble an empty curve")
    hashes = {p.frozen_hash for p in pts}
    if len(hashes) != 1:
        raise ValueError(f"points mix frozen hashes: {sorted(hashes)}")
    baselines = [p for p in pts if p.gamma is None]
    if len(baselines) > 1:
        raise ValueError("more than one baseline point")
    ordered = sorted(pts, key=lambda p: -p.sort_gamma())
    rate_label = (baselines[0] if baselines else ordered[0]).bpp_actual
    return PDCurve(points=tuple(ordered), rate_label=rate_label)


def _normalize(values: Sequence[float], what: str) -> List[float]:
    lo, hi = min(values), max(values)
    if hi <= lo:
        raise ValueError(f"degenerate {what} axis: all values equal ({lo})")
    return [(v - lo) / (hi - lo) for v in values]


def knee_point(curve: PDCurve, x_axis: str = "psnr") -> KneeResult:
    """Maximum-chord-distance knee of a curve.

    ``x_axis`` selects psnr or ssim; the y axis is always the perceptual
    score. The chord joins the points with extreme x; interior points
    compete on perpendicular distance, ties resolved toward larger gamma.
    """
    if x_axis not in ("psnr", "ssim"):
        raise ValueError(f"x_axis must be 'psnr' or 'ssim', got {x_axis!r}")
    pts = curve.points
    if len(pts) < 3:
        raise ValueError(f"knee detection needs >= 3 points, got {len(pts)}")
    xs = _normalize([getattr(p, x_axis) for p in pts], x_axis)
    ys = _normalize([p.perceptual for p in pts], "perceptual")

    i_lo = min(range(len(pts)), key=lambda i: (xs[i], i))
    i_hi = max(range(len(pts)), key=lambda i: (xs[i], -i))
    x0, y0 = xs[i_lo], ys[i_lo]
    x1, y1 = xs[i_hi], ys[i_hi]
    chord_len = math.hypot(x1 - x0, y1 - y0)

    best: Optional[Tuple[float, float, int]] = None
    for i, p in enumerate(pts):
        if i in (i_lo, i_hi):
            continue
        dist = abs((y1 - y0) * xs[i] - (x1 - x0) * ys[i] + x1 * y0 - y1 * x0) / chord_len
        if best is None or dist > best[0] + _TIE_EPS:
            best = (dist, p.sort_gamma(), i)
        elif abs(dist - best[0]) <= _TIE_EPS and p.sort_gamma() > best[1]:
            best = (max(dist, best[0]), p.sort_gamma(), i)
    if best is None:
        raise ValueError("no interior points to choose a knee from")
    _, gamma_key, idx = best
    return KneeResult(index=idx, gamma_at_knee=gamma_key, distance=best[0])


# -- reports --------------------------------------------------------------

CURVE_CSV_HEADER = "rate_label,gamma,bpp_actual,psnr,ssim,perceptual,is_knee"


def _gamma_to_json(g: float) -> Union[str, float]:
    return BASELINE_MARKER if math.isinf(g) else g


def _gamma_from_json(v) -> float:
    return math.inf if v == BASELINE_MARKER else float(v)


def export_results(
    curves: Sequence[PDCurve],
    knees: Sequence[KneeResult],
    csv_path: Union[str, Path],
    json_path: Union[str, Path],
    knee_axis: str = "psnr",
) -> None:
    """Write the curve table as CSV plus a lossless JSON mirror."""
    if not curves:
        raise ValueError("no curves to export")
    if len(knees) != len(curves):
        raise ValueError("need one knee per curve")

    lines = [CURVE_CSV_HEADER]
    for curve, knee in zip(curves, knees):
        for i, p in enumerate(curve.points):
            is_knee = "true" if i == knee.index else "false"
            lines.append(
                f"{curve.rate_label!r},{p.gamma_label()},{p.bpp_actual!r},"
                f"{p.psnr!r},{p.ssim!r},{p.perceptual!r},{is_knee}"
            )
    Path(csv_path).write_text("\n".join(lines) + "\n")

    doc = {
        "schema_version": 1,
        "knee_axis": knee_axis,
        "curves": [
            {
                "rate_label": curve.rate_label,
                "frozen_hash": curve.frozen_hash,
                "points": [
                    {
                        "gamma": p.gamma,
                        "bpp_actual": p.bpp_actual,
                        "psnr": p.psnr,
                        "ssim": p.ssim,
                        "perceptual": p.perceptual,
                        "frozen_hash": p.frozen_hash,
                        "checkpoint_hash": p.checkpoint_hash,
                    }
                    for p in curve.points
                ],
                "knee": {
                    "index": knee.index,
                    "gamma_at_knee": _gamma_to_json(knee.gamma_at_knee),
                    "distance": knee.distance,
                },
            }
            for curve, knee in zip(curves, knees)
        ],
    }
    Path(json_path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def import_results(
    json_path: Union[str, Path]
) -> Tuple[List[PDCurve], List[KneeResult], str]:
    """Read back an exported JSON document; inverse of export_results."""
    doc = json.loads(Path(json_path).read_text())
    curves, knees = [], []
    for entry in doc["curves"]:
        points = tuple(
            PDPoint(
                gamma=p["gamma"],
                bpp_actual=p["bpp_actual"],
                psnr=p["psnr"],
                ssim=p["ssim"],
                perceptual=p["perceptual"],
                frozen_hash=p["frozen_hash"],
                checkpoint_hash=p["checkpoint_hash"],
            )
            for p in entry["points"]
        )
        curves.append(PDCurve(points=points, rate_label=entry["rate_label"]))
        k = entry["knee"]
        knees.append(
            KneeResult(
                index=k["index"],
                gamma_at_knee=_gamma_from_json(k["gamma_at_knee"]),
                distance=k["distance"],
            )
        )
    return curves, knees, doc["knee_axis"]


# -- plots ----------------------------------------------------------------


def plot_curves(
    curves: Sequence[PDCurve],
    knees: Sequence[KneeResult],
    out_dir: Union[str, Path],
) -> List[Path]:
    """Emit perceptual-vs-PSNR and perceptual-vs-SSIM SVGs.

    One polyline per rate, knee points highlighted. Byte-deterministic for
    identical inputs (fixed hash salt, no date metadata).
    """
    if not curves:
        raise ValueError("no curves to plot")
    if len(knees) != len(curves):
        raise ValueError("need one knee per curve")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for x_axis in ("psnr", "ssim"):
        with mpl.rc_context({"svg.hashsalt": _SVG_HASHSALT}):
            fig = Figure(figsize=(6.0, 4.5))
            ax = fig.add_subplot()
            for curve, knee in zip(curves, knees):
                xs = [getattr(p, x_axis) for p in curve.points]
                ys = [p.perceptual for p in curve.points]
                ax.plot(
                    xs, ys, marker="o", markersize=4,
                    label=f"{curve.rate_label:.3f} bpp",
                )
                kp = curve.points[knee.index]
                ax.plot(
                    [getattr(kp, x_axis)], [kp.perceptual],
                    marker="*", markersize=14, linestyle="none",
                    markerfacecolor="none", markeredgecolor="black",
                )
            ax.set_xlabel(x_axis.upper() + (" (dB)" if x_axis == "psnr" else ""))
            ax.set_ylabel("perceptual distance")
            ax.legend(loc="best", fontsize=8)
            ax.grid(True, alpha=0.3)
            path = out_dir / f"perceptual_vs_{x_axis}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
        paths.append(path)
    return paths

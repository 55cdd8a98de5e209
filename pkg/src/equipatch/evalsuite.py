"""Rotation-robustness evaluation: sweeps, token analysis, significance tests.

The rotation sweep classifies every test image at each angle of a fixed
grid (10-degree increments by default) and summarizes accuracy as mean and
population standard deviation over all listed angles.  Token equivariance
compares embedding outputs under quarter-turns after undoing the induced
token-grid permutation.  Per-angle jobs are independent; when
EQUIPATCH_THREADS asks for workers they run concurrently and merge in
angle order, byte-identical to the serial sweep.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod, tensorkit as tk, vit
from .errors import ContractError, DataError, DegenerateVarianceError
from .tensorkit import Tensor

DEFAULT_ANGLES = tuple(range(0, 360, 10))
EVAL_BATCH = 256


@dataclass
class RotationReport:
    angles: list[int]
    per_angle_acc: list[float]
    per_angle_correct: list[int]
    n_total: int
    orig_acc: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_angle_acc))

    @property
    def std(self) -> float:
        return float(np.std(self.per_angle_acc))  # population SD over the angle grid


@dataclass
class TokenEquivReport:
    rotations: list[int]
    per_token_cosine: dict[int, np.ndarray]  # rotation -> [n_images, n_tokens]

    def median(self, rotation: int | None = None) -> float:
        return float(np.median(self._gather(rotation)))

    def fraction_at_least(self, threshold: float = 0.99, rotation: int | None = None) -> float:
        vals = self._gather(rotation)
        return float((vals >= threshold).mean())

    def _gather(self, rotation):
        if rotation is not None:
            return self.per_token_cosine[rotation]
        return np.concatenate([v.reshape(-1) for v in self.per_token_cosine.values()])


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_two_tailed: float
    n: int


def worker_count() -> int:
    """EQUIPATCH_THREADS worker cap; 0 or unset means serial."""
    raw = os.environ.get("EQUIPATCH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"EQUIPATCH_THREADS must be an integer, got {raw!r}")
    return max(n, 0)


def predict(model, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest class id.

    Any object exposing ``predict_labels(images) -> int array`` may stand in
    for a model (used by protocol tests with stub classifiers).
    """
    stub = getattr(model, "predict_labels", None)
    if callable(stub):
        return np.asarray(stub(images), dtype=np.int64)
    preds = np.empty(len(images), dtype=np.int64)
    with tk.no_grad():
        for lo in range(0, len(images), batch):
            logits = vit.forward(model, Tensor(images[lo : lo + batch]))
            preds[lo : lo + batch] = np.argmax(logits.data, axis=1)
    return preds


def accuracy(model: vit.ViTModel, index) -> float:
    if len(index) == 0:
        raise DataError("cannot evaluate accuracy on an empty dataset")
    preds = predict(model, index.images())
    return float((preds == index.labels()).mean())


def rotation_sweep(model: vit.ViTModel, index, angles=DEFAULT_ANGLES, fill=None) -> RotationReport:
    """Classify every image at every angle; fill defaults to the swept set's channel mean."""
    if len(index) == 0:
        raise DataError("cannot sweep an empty dataset")
    images = index.images()
    labels = index.labels()
    if images.shape[-1] != images.shape[-2]:
        raise DataError(f"rotation sweep requires square images, got {images.shape}")
    fill_arr = data_mod.channel_mean(images) if fill is None else np.asarray(fill, np.float32)
    angles = [int(a) for a in angles]

    def evaluate_angle(angle: int) -> int:
        rotated = data_mod.rotate_batch(images, angle, fill_arr)
        return int((predict(model, rotated) == labels).sum())

    workers = worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            correct = list(pool.map(evaluate_angle, angles))
    else:
        correct = [evaluate_angle(a) for a in angles]

    n = len(labels)
    orig_correct = correct[angles.index(0)] if 0 in angles else evaluate_angle(0)
    return RotationReport(
        angles=angles,
        per_angle_acc=[c / n for c in correct],
        per_angle_correct=correct,
        n_total=n,
        orig_acc=orig_correct / n,
    )


def token_equivariance(model: vit.ViTModel, images: np.ndarray, rotations=(90, 180, 270)) -> TokenEquivReport:
    """Cosine between original tokens and permutation-aligned rotated tokens.

    Zero-norm pairs define cosine 1 when both tokens are zero, 0 when only
    one is.
    """
    g = model.grid
    for r in rotations:
        if r % 90 != 0:
            raise ContractError(f"token analysis covers quarter-turns only, got {r}")
    with tk.no_grad():
        base = vit.embed_tokens(model, Tensor(images)).data.astype(np.float64)
    per: dict[int, np.ndarray] = {}
    for rot in rotations:
        times = (rot // 90) % 4
        rotated = np.ascontiguousarray(np.rot90(images, times, axes=(-2, -1)))
        with tk.no_grad():
            tokens = vit.embed_tokens(model, Tensor(rotated)).data.astype(np.float64)
        perm = vit.rot90_token_permutation(g, times)
        aligned = tokens[:, perm, :]
        na = np.linalg.norm(base, axis=-1)
        nb = np.linalg.norm(aligned, axis=-1)
        dot = (base * aligned).sum(-1)
        both_zero = (na == 0) & (nb == 0)
        one_zero = ((na == 0) | (nb == 0)) & ~both_zero
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = dot / (na * nb)
        cos = np.where(both_zero, 1.0, cos)
        cos = np.where(one_zero, 0.0, cos)
        # bitwise-identical token pairs have cosine exactly 1, no rounding
        cos = np.where(np.all(aligned == base, axis=-1), 1.0, cos)
        per[rot] = np.clip(cos, -1.0, 1.0)
    return TokenEquivReport(rotations=[int(r) for r in rotations], per_token_cosine=per)


# ---------------------------------------------------------------------------
# paired t-test with an in-house Student-t tail
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction failed to converge for a={a}, b={b}, x={x}")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), absolute error below 1e-8."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed(t: float, df: int) -> float:
    """P(|T_df| >= |t|) via I_x(df/2, 1/2) with x = df / (df + t^2)."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    x = df / (df + t * t)
    return reg_inc_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"paired t-test needs equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise DataError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=n - 1, p_two_tailed=1.0, n=n)
        raise DegenerateVarianceError(
            f"paired differences are constant ({mean}) with zero variance; t is undefined"
        )
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=float(t), df=n - 1, p_two_tailed=student_t_two_tailed(t, n - 1), n=n)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def emit_reports(report: RotationReport, out_dir, model_id: str = "", seed: int = 0) -> dict[str, Path]:
    """Write rotation.csv, summary.json, and radar.svg; deterministic bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "rotation.csv"
    lines = ["angle_deg,accuracy,n_correct,n_total"]
    for angle, acc, correct in zip(report.angles, report.per_angle_acc, report.per_angle_correct):
        lines.append(f"{angle},{_fmt(acc)},{correct},{report.n_total}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    summary = {
        "orig_acc": float(_fmt(report.orig_acc)),
        "rot_mean": float(_fmt(report.mean)),
        "rot_std": float(_fmt(report.std)),
        "angles": report.angles,
        "model_id": model_id,
        "seed": seed,
    }
    json_path = out / "summary.json"
    json_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n"
    )

    svg_path = out / "radar.svg"
    svg_path.write_text(radar_svg(report), encoding="utf-8", newline="\n")
    return {"rotation_csv": csv_path, "summary_json": json_path, "radar_svg": svg_path}


def radar_svg(report: RotationReport, size: int = 480) -> str:
    """Self-contained radar chart: one spoke per angle, closed accuracy polygon.

    The radial axis spans [min accuracy - 5 points, 100] percent so small
    differences remain visible.
    """
    center = size / 2.0
    radius = size / 2.0 - 50.0
    accs_pct = [a * 100.0 for a in report.per_angle_acc]
    lo = max(0.0, min(accs_pct) - 5.0)
    hi = 100.0
    span = max(hi - lo, 1e-9)

    def polar(angle_deg: float, value_pct: float) -> tuple[float, float]:
        rr = radius * (value_pct - lo) / span
        th = math.radians(angle_deg - 90.0)
        return center + rr * math.cos(th), center + rr * math.sin(th)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for frac in (0.25, 0.5, 0.75, 1.0):
        r = radius * frac
        label = lo + span * frac
        parts.append(
            f'<circle cx="{center:.3f}" cy="{center:.3f}" r="{r:.3f}" fill="none" '
            f'stroke="#cccccc" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{center + 4:.3f}" y="{center - r - 3:.3f}" font-size="10" '
            f'fill="#888888">{label:.9g}%</text>'
        )
    for angle in report.angles:
        x, y = polar(angle, hi)
        parts.append(
            f'<line x1="{center:.3f}" y1="{center:.3f}" x2="{x:.3f}" y2="{y:.3f}" '
            f'stroke="#eeeeee" stroke-width="1"/>'
        )
        if angle % 30 == 0:
            lx, ly = polar(angle, hi + 0.04 * span)
            parts.append(
                f'<text x="{lx:.3f}" y="{ly:.3f}" font-size="10" fill="#444444" '
                f'text-anchor="middle">{angle}&#176;</text>'
            )
    points = " ".join(
        f"{x:.3f},{y:.3f}" for x, y in (polar(a, v) for a, v in zip(report.angles, accs_pct))
    )
    parts.append(
        f'<polygon points="{points}" fill="#4477aa" fill-opacity="0.25" '
        f'stroke="#4477aa" stroke-width="2"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_tokens_csv(report: TokenEquivReport, out_path) -> Path:
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["image_id,rotation,token_index,cosine"]
    for rot in report.rotations:
        mat = report.per_token_cosine[rot]
        for img_id in range(mat.shape[0]):
            for tok in range(mat.shape[1]):
                lines.append(f"{img_id},{rot},{tok},{_fmt(mat[img_id, tok])}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path

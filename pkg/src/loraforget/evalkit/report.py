"""Evaluation report: selectivity, divergence, difference maps, exports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import lora
from ..data import SPLITS, to_u8, write_pgm
from .metrics import _sigmoid, cls_metrics, dice_iou, divergence_arrays, predict

FIGURE_SALT = "loraforget"


@dataclass
class EvalReport:
    """Teacher vs student metrics per split plus the derived quantities.

    ``splits[name]`` holds ``{"teacher": {...}, "student": {...},
    "delta": {...}}`` where the delta is teacher minus student.
    """

    task: str
    splits: dict
    selectivity: float
    divergence: dict
    budget: dict
    headline: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def delta(self, split: str, metric: str | None = None) -> float:
        return self.splits[split]["delta"][metric or self.headline]

    def scalar_metrics(self) -> list[str]:
        first = self.splits[SPLITS[0]]["teacher"]
        return [k for k, v in first.items() if not isinstance(v, list)]


def selectivity(d_forget: float, d_retain: float, d_val: float) -> float:
    return d_forget - max(d_retain, d_val)


def _split_metrics(task: str, logits, items, n_classes: int) -> dict:
    if task == "seg":
        dice, iou = dice_iou(logits, np.stack([it.target for it in items]))
        return {"dice": dice, "iou": iou}
    acc, f1 = cls_metrics(logits, [it.target for it in items], n_classes)
    return {"accuracy": acc, "f1": f1, "macro_f1": float(np.mean(f1))}


def evaluate(student, teacher, data, adapters=None, meta: dict | None = None,
             batch_size: int = 32) -> EvalReport:
    """Score ``student`` against ``teacher`` on every split of ``data``."""
    task = data.task
    n_classes = data.spec.n_classes
    splits, div = {}, {}
    for name in SPLITS:
        items = data.split(name)
        zt, ft = predict(teacher, items, batch_size)
        zs, fs = predict(student, items, batch_size)
        mt = _split_metrics(task, zt, items, n_classes)
        ms = _split_metrics(task, zs, items, n_classes)
        delta = {k: mt[k] - ms[k] for k in mt if not isinstance(mt[k], list)}
        splits[name] = {"teacher": mt, "student": ms, "delta": delta, "count": len(items)}
        l1, fgap = divergence_arrays(zs, zt, fs, ft, task)
        div[name] = {"l1_logit_gap": l1, "feature_gap": fgap}
    headline = "dice" if task == "seg" else "accuracy"
    sel = selectivity(*(splits[s]["delta"][headline] for s in ("forget", "retain", "val")))
    if adapters is not None:
        trainable, total, pct = lora.budget(student, adapters)
        budget = {"trainable": trainable, "total": total, "pct": pct}
    else:
        budget = {"trainable": None, "total": student.num_params(), "pct": None}
    return EvalReport("segmentation" if task == "seg" else "classification", splits, sel, div,
                      budget, headline, dict(meta or {}))


# -- difference maps --------------------------------------------------------

def diff_maps(student, teacher, items, out_dir, batch_size: int = 32) -> list[dict]:
    """Write five PGMs per item and return per-item foreground statistics.

    Files: ``<id>_input``, ``<id>_gt``, ``<id>_teacher``, ``<id>_student``
    and ``<id>_diff`` (|p_t - p_s|), all scaled to [0, 255].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zt, _ = predict(teacher, items, batch_size)
    zs, _ = predict(student, items, batch_size)
    if zt.ndim != 4:
        raise ValueError("diff_maps needs segmentation outputs")
    pt, ps = _sigmoid(zt), _sigmoid(zs)
    stats = []
    for i, it in enumerate(items):
        gt = it.target[0] > 0.5
        diff = np.abs(pt[i, 0] - ps[i, 0])
        for suffix, arr in (("input", it.image[0]), ("gt", it.target[0]), ("teacher", pt[i, 0]),
                            ("student", ps[i, 0]), ("diff", diff)):
            write_pgm(out / f"{it.id}_{suffix}.pgm", to_u8(arr))
        stats.append({
            "id": it.id,
            "split": it.split,
            "T_fg": float(pt[i, 0][gt].mean()) if gt.any() else float("nan"),
            "S_fg": float(ps[i, 0][gt].mean()) if gt.any() else float("nan"),
            "diff_in": float(diff[gt].mean()) if gt.any() else 0.0,
            "diff_out": float(diff[~gt].mean()) if (~gt).any() else 0.0,
        })
    return stats


def fg_table(stats: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["id", "split", "T_fg", "S_fg", "diff_in", "diff_out"]
    w.writerow(cols)
    for s in stats:
        w.writerow([s[c] if isinstance(s[c], str) else f"{s[c]:.6g}" for c in cols])
    return buf.getvalue()


# -- exports ----------------------------------------------------------------

def metrics_csv(rep: EvalReport) -> str:
    """One row per (split, scalar metric); 6 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "metric", "teacher", "student", "delta"])
    for split in SPLITS:
        s = rep.splits[split]
        for m in rep.scalar_metrics():
            w.writerow([split, m] + [f"{v:.6g}" for v in (s["teacher"][m], s["student"][m], s["delta"][m])])
    return buf.getvalue()


def bar_chart(rep: EvalReport, metric: str, path) -> None:
    """Grouped teacher/student bars, one group per split, as static SVG."""
    import matplotlib
    from matplotlib.figure import Figure

    with matplotlib.rc_context({"svg.hashsalt": FIGURE_SALT, "svg.fonttype": "none"}):
        fig = Figure(figsize=(4.5, 3.2))
        ax = fig.add_subplot()
        width = 0.38
        for i, split in enumerate(SPLITS):
            s = rep.splits[split]
            for j, (who, colour) in enumerate((("teacher", "#4c72b0"), ("student", "#dd8452"))):
                (bar,) = ax.bar(i + (j - 0.5) * width, s[who][metric], width, color=colour,
                                label=who if i == 0 else None)
                bar.set_gid(f"bar-{split}-{who}")
        ax.set_xticks(range(len(SPLITS)), SPLITS)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric}: teacher vs student")
        ax.legend(frameon=False, fontsize=8)
        for side in ("top", "right"):
            ax.spines[side].set_visible(False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})


def write_report(rep: EvalReport, out_dir) -> list[Path]:
    """report.json, metrics.csv and figures/<metric>.svg under ``out_dir``."""
    out = Path(out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    written = [out / "report.json", out / "metrics.csv"]
    written[0].write_text(rep.to_json())
    written[1].write_text(metrics_csv(rep))
    for m in rep.scalar_metrics():
        path = out / "figures" / f"{m}.svg"
        bar_chart(rep, m, path)
        written.append(path)
    return written


report = write_report

"""Report rendering: delimited per-epoch/per-scene tables plus matplotlib
figures saved next to them.

Matplotlib is imported lazily and driven through the Agg backend so report
files are byte-stable across runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import PQReport
from .trainer import EvalReport, TrainReport


def _figure_axes(n_rows: int, n_cols: int, size=(9.0, 3.2)):
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(n_rows, n_cols, figsize=size, constrained_layout=True)
    return plt, fig, axes


def dump_json(path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_train_report(prefix, report: TrainReport) -> list[Path]:
    """Write <prefix>.json, <prefix>.csv, and <prefix>.png (loss and quality
    curves). Returns the paths written."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_suffix(".json")
    dump_json(json_path, report.to_dict())

    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss_panoptic", "loss_relation", "eval_oa", "eval_pq"])
        for e in report.epochs:
            writer.writerow(
                [e.epoch, repr(e.lr), repr(e.loss_panoptic), repr(e.loss_relation),
                 repr(e.eval_oa), repr(e.eval_pq)]
            )

    png_path = prefix.with_suffix(".png")
    epochs = [e.epoch for e in report.epochs]
    plt, fig, (ax_loss, ax_q) = _figure_axes(1, 2)
    ax_loss.plot(epochs, [e.loss_panoptic for e in report.epochs], label="panoptic CE")
    ax_loss.plot(epochs, [e.loss_relation for e in report.epochs], label="relation MSE")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_loss.legend()
    ax_loss.set_title("training losses")
    ax_q.plot(epochs, [e.eval_oa for e in report.epochs], label="overlap accuracy")
    ax_q.plot(epochs, [e.eval_pq for e in report.epochs], label="panoptic quality")
    ax_q.set_xlabel("epoch")
    ax_q.set_ylim(0.0, 1.0)
    ax_q.legend()
    ax_q.set_title("held-in evaluation")
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return [json_path, csv_path, png_path]


def _pq_row(tag: str, rep: PQReport) -> list[str]:
    return [tag, repr(rep.pq), repr(rep.sq), repr(rep.rq), repr(rep.pq_things), repr(rep.pq_stuff)]


def write_eval_report(report_path, report: EvalReport) -> list[Path]:
    """Write the JSON report plus a per-scene CSV and summary figure beside
    it (same stem, .csv/.png suffixes)."""
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(report_path, report.to_dict())

    csv_path = report_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "n_instances", "oa", "pq_sog", "pq_heuristic", "pq_prior"])
        for s in report.scenes:
            writer.writerow(
                [s.index, s.n_instances, "" if s.oa is None else repr(s.oa),
                 repr(s.pq_sog.pq), repr(s.pq_heuristic.pq), repr(s.pq_prior.pq)]
            )
        writer.writerow([])
        writer.writerow(["aggregate", "", repr(report.mean_oa),
                         repr(report.pq_sog.pq), repr(report.pq_heuristic.pq),
                         repr(report.pq_prior.pq)])

    png_path = report_path.with_suffix(".png")
    plt, fig, (ax_pq, ax_oa) = _figure_axes(1, 2, size=(8.0, 3.2))
    labels = ["sog", "heuristic", "prior"]
    values = [report.pq_sog.pq, report.pq_heuristic.pq, report.pq_prior.pq]
    bars = ax_pq.bar(labels, values, color=["#3566a5", "#b8534f", "#7a9a4f"])
    ax_pq.bar_label(bars, fmt="%.3f")
    ax_pq.set_ylim(0.0, 1.0)
    ax_pq.set_ylabel("PQ")
    ax_pq.set_title("fusion comparison")
    oas = [s.oa for s in report.scenes if s.oa is not None]
    if oas:
        ax_oa.hist(oas, bins=20, range=(0.0, 1.0), color="#3566a5")
    ax_oa.axvline(report.mean_oa, color="#b8534f", label=f"mean {report.mean_oa:.3f}")
    ax_oa.axvline(report.baseline_oa, color="#555555", linestyle="--",
                  label=f"zero-relation {report.baseline_oa:.3f}")
    ax_oa.set_xlabel("per-scene overlap accuracy")
    ax_oa.legend()
    ax_oa.set_title("overlap accuracy")
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return [report_path, csv_path, png_path]

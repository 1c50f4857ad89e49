"""Scenario runs, scenario matrices and parameter sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, layers, oracle, train
from .datasets import Op, ScenarioSpec
from .image import EDGE, rescale_unit_band, rmse, write_kernel_csv, write_pgm
from .layers import LayerKind, LayerState

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["op", "se", "kind", "final_loss", "rmse_l1", "rmse_l2",
                  "param_l1", "param_l2", "epochs"]


@dataclass
class ScenarioReport:
    spec: ScenarioSpec
    final_loss: float = math.nan
    kernel_rmse: list = field(default_factory=list)
    shape_param_final: list = field(default_factory=list)
    epochs: int = 0
    wall_time: float = 0.0
    converged: bool = False
    failed: bool = False
    error: str = ""
    result: train.TrainResult | None = None

    @property
    def name(self) -> str:
        s = self.spec
        return f"{s.op.value}_{s.se}_{s.kind.value}"

    def row(self) -> dict:
        rm = self.kernel_rmse + [math.nan] * (2 - len(self.kernel_rmse))
        pa = self.shape_param_final + [math.nan] * (2 - len(self.shape_param_final))
        return {
            "op": self.spec.op.value, "se": self.spec.se, "kind": self.spec.kind.value,
            "final_loss": self.final_loss, "rmse_l1": rm[0], "rmse_l2": rm[1],
            "param_l1": pa[0], "param_l2": pa[1], "epochs": self.epochs,
        }


def erosion_side(op: Op, depth: int) -> list[bool]:
    """Which layers of the network play the erosion role for ``op``."""
    return {
        Op.DILATION: [False],
        Op.EROSION: [True],
        Op.CLOSING: [False, True],
        Op.OPENING: [True, False],
    }[op][:depth]


def learned_kernel_for_rmse(op: Op, position: int, kernel) -> np.ndarray:
    """Kernel put side by side with ``target_se`` when scoring a layer.

    Single erosions are generated with ``-se`` so ``w`` compares directly. In
    closings and openings the erosion step uses ``se`` itself, whose smooth
    counterpart is ``w = -se``; those layers are scored on ``-w``.
    """
    if op in (Op.CLOSING, Op.OPENING) and erosion_side(op, 2)[position]:
        return -kernel
    return kernel


def run_scenario(spec: ScenarioSpec, cfg: train.TrainConfig = train.TrainConfig(),
                 images=None, mnist_dir=None) -> ScenarioReport:
    """Build the network for ``spec``, train it and score the learned kernels."""
    if images is None:
        images = datasets.load_digits(spec.sample_count, mnist_dir)
    inputs, targets = datasets.make_pairs(images, spec)
    net = train.build_network(spec.kind, spec.op.depth, seed=cfg.seed)
    target = datasets.target_se(spec.se)
    report = ScenarioReport(spec)
    start = time.perf_counter()
    try:
        result = train.train(net, inputs, targets, cfg)
    except (train.TrainingDiverged, FloatingPointError, layers.DomainError) as exc:
        report.failed = True
        report.error = str(exc)
        report.wall_time = time.perf_counter() - start
        log.warning("%s failed: %s", report.name, exc)
        return report
    report.wall_time = time.perf_counter() - start
    report.result = result
    report.final_loss = result.final_loss
    report.epochs = result.epochs
    report.converged = result.converged
    for i, layer in enumerate(result.network.morph_layers):
        kernel = learned_kernel_for_rmse(spec.op, i, layer.kernel)
        report.kernel_rmse.append(rmse(kernel, target))
        report.shape_param_final.append(layer.shape_param)
    log.info("%s: loss %.3e, params %s, %d epochs in %.0f s", report.name, report.final_loss,
             report.shape_param_final, report.epochs, report.wall_time)
    values = [report.final_loss, *report.kernel_rmse, *report.shape_param_final]
    if not all(math.isfinite(v) for v in values):
        report.failed = True
        report.error = "non-finite metrics"
    return report


def _run_one(args):
    spec, cfg, images = args
    return run_scenario(spec, cfg, images)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rep in reports:
            row = rep.row()
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def format_table(reports) -> str:
    head = f"{'op':<9}{'se':<10}{'kind':<8}{'loss':>11}{'rmse_l1':>9}{'rmse_l2':>9}" \
           f"{'param_l1':>10}{'param_l2':>10}{'epochs':>7}  status"
    lines = [head, "-" * len(head)]
    for rep in reports:
        r = rep.row()
        status = "FAILED: " + rep.error if rep.failed else ("ok" if rep.converged else "max_epochs")
        lines.append(
            f"{r['op']:<9}{r['se']:<10}{r['kind']:<8}{r['final_loss']:>11.3e}"
            f"{r['rmse_l1']:>9.4f}{r['rmse_l2']:>9.4f}{r['param_l1']:>10.3f}"
            f"{r['param_l2']:>10.3f}{r['epochs']:>7}  {status}")
    return "\n".join(lines)


def dump_artifacts(out_dir, reports) -> None:
    """Loss histories, trained networks and learned/target kernels (CSV + PGM)."""
    out = Path(out_dir)
    (out / "kernels").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(exist_ok=True)
    (out / "histories").mkdir(exist_ok=True)
    for se in sorted({rep.spec.se for rep in reports}):
        write_kernel_csv(out / "targets" / f"{se}.csv", datasets.target_se(se))
        write_pgm(out / "targets" / f"{se}.pgm", datasets.target_se(se))
    for rep in reports:
        if rep.result is None:
            continue
        train.write_history_csv(out / "histories" / f"{rep.name}.csv", rep.result.history)
        train.save_network(out / "kernels" / f"{rep.name}.json", rep.result.network)
        for i, layer in enumerate(rep.result.network.morph_layers, start=1):
            write_kernel_csv(out / "kernels" / f"{rep.name}_l{i}.csv", layer.kernel)
            write_pgm(out / "kernels" / f"{rep.name}_l{i}.pgm", layer.kernel)


def run_matrix(ops, ses, kinds, cfg: train.TrainConfig = train.TrainConfig(),
               sample_count: int = 1000, images=None, mnist_dir=None,
               out_dir=None, workers: int = 1) -> list[ScenarioReport]:
    """Every (op, se, kind) combination; failures are recorded, not raised."""
    specs = [ScenarioSpec(op, se, kind, sample_count)
             for op in ops for se in ses for kind in kinds]
    if images is None:
        images = datasets.load_digits(sample_count, mnist_dir)
    jobs = [(spec, cfg, images) for spec in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(job) for job in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_report_csv(Path(out_dir) / "report.csv", reports)
        (Path(out_dir) / "report.txt").write_text(format_table(reports) + "\n")
        dump_artifacts(out_dir, reports)
    return reports


@dataclass
class SweepFrame:
    value: float
    image: np.ndarray
    distance: float     # max-abs distance to the exact operation


def sweep_operator(kind, se):
    """Kernel and exact limit operators used to demo ``kind`` with structuring element ``se``.

    SMorph and LMorph use ``w = se``; their positive/negative limits are
    ``f ⊕ se`` and ``f ⊖ -se``. PConv uses unit weights on the support of
    ``se`` (and a negligible weight elsewhere), whose limits are the flat
    dilation and erosion over that support.
    """
    kind = LayerKind(kind)
    se = np.asarray(se, dtype=np.float64)
    if kind is LayerKind.PCONV:
        inside = se > 0
        weights = np.where(inside, 1.0, 1e-12)
        flat = oracle.flat_kernel(inside)
        return weights, (lambda f: oracle.dilate(f, flat)), (lambda f: oracle.erode(f, flat))
    return se, (lambda f: oracle.dilate(f, se)), (lambda f: oracle.erode(f, -se))


def demo_sweep(kind, se, values, image, out_dir=None) -> tuple[list[SweepFrame], dict]:
    """Apply the layer at each shape-parameter value to one image.

    PConv and LMorph inputs are first rescaled onto [1, 2]. Returns the frames
    and the exact targets ``{"dilation": ..., "erosion": ...}``; with
    ``out_dir`` everything is also written as PGM.
    """
    kind = LayerKind(kind)
    se = datasets.target_se(se) if isinstance(se, str) else np.asarray(se, dtype=np.float64)
    f = np.asarray(image, dtype=np.float64)
    if kind.needs_rescale:
        f = rescale_unit_band(f)
    kernel, dil, ero = sweep_operator(kind, se)
    targets = {"dilation": dil(f), "erosion": ero(f)}
    frames = []
    for value in values:
        out = layers.forward(f, LayerState(kind, kernel, float(value)), EDGE)
        ref = targets["dilation"] if value >= 0 else targets["erosion"]
        frames.append(SweepFrame(float(value), out, float(np.max(np.abs(out - ref)))))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "input.pgm", f)
        for name, img in targets.items():
            write_pgm(out / f"target_{name}.pgm", img)
        for frame in frames:
            write_pgm(out / f"{kind.value}_{frame.value:+g}.pgm", frame.image)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "max_abs_distance"])
            for frame in frames:
                writer.writerow([repr(frame.value), repr(frame.distance)])
    return frames, targets

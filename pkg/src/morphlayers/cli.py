"""Command-line entry point: ``morphlayers {train,matrix,sweep,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import datasets, gradcheck, harness, train
from .datasets import Op, ScenarioSpec
from .layers import LayerKind

MORPH_KINDS = [k.value for k in LayerKind if k.is_morphological]
FULL_SCALE_SAMPLES = 60000


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _split(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _settings(args) -> dict:
    """Merge defaults, config file and explicit flags (flags win)."""
    merged = {}
    if args.config:
        merged.update(read_config(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "command", "func"):
            merged[key] = value
    return merged


def _train_config(settings) -> train.TrainConfig:
    kwargs = {}
    for f in dataclasses.fields(train.TrainConfig):
        if f.name in settings:
            kwargs[f.name] = type(f.default)(settings[f.name])
    return train.TrainConfig(**kwargs)


def _sample_count(settings) -> int:
    if str(settings.get("full_scale", "")).lower() in ("1", "true", "yes"):
        return FULL_SCALE_SAMPLES
    return int(settings.get("samples", 1000))


def cmd_train(args) -> int:
    s = _settings(args)
    cfg = _train_config(s)
    spec = ScenarioSpec(Op.parse(s.get("op", "dilation")), s.get("se", "cross7"),
                        LayerKind(s.get("layer", "smorph")), _sample_count(s))
    report = harness.run_scenario(spec, cfg, mnist_dir=s.get("mnist_dir"))
    print(harness.format_table([report]))
    if s.get("out_dir"):
        out = Path(s["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        harness.write_report_csv(out / "report.csv", [report])
        harness.dump_artifacts(out, [report])
    return 0 if report.converged and not report.failed else 1


def cmd_matrix(args) -> int:
    s = _settings(args)
    cfg = _train_config(s)
    ops = [Op.parse(o) for o in _split(s.get("op", ",".join(o.value for o in Op)))]
    ses = _split(s.get("se", ",".join(datasets.SE_NAMES)))
    kinds = [LayerKind(k) for k in _split(s.get("layer", ",".join(MORPH_KINDS)))]
    reports = harness.run_matrix(
        ops, ses, kinds, cfg, sample_count=_sample_count(s),
        mnist_dir=s.get("mnist_dir"), out_dir=s.get("out_dir"),
        workers=int(s.get("workers", 1)))
    print(harness.format_table(reports))
    ok = all(r.converged and not r.failed for r in reports)
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    s = _settings(args)
    kind = LayerKind(s.get("layer", "smorph"))
    if "values" in s:
        values = [float(v) for v in _split(s["values"])]
    elif kind is LayerKind.SMORPH:
        values = [0, 1, 5, 20, 50, -1, -5, -20, -50]
    else:
        values = [0, 1, 5, 20, 40, -1, -5, -20, -40]
    image = datasets.load_digits(int(s.get("index", 0)) + 1, s.get("mnist_dir"))[-1]
    frames, _ = harness.demo_sweep(kind, s.get("se", "disk3"), values, image,
                                   s.get("out_dir", "sweep_out"))
    print("value      max_abs_distance_to_exact")
    for frame in frames:
        print(f"{frame.value:<10g} {frame.distance:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    s = _settings(args)
    tol, net_tol = float(s.get("tol", 1e-4)), float(s.get("net_tol", 1e-3))
    results = gradcheck.run_suite(int(s.get("cases", 100)), int(s.get("seed", 0)),
                                  int(s.get("network_cases", 10)))
    worst = {}
    for r in results:
        worst[r.label] = max(worst.get(r.label, 0.0), r.max_rel_error)
    ok = True
    for label, err in worst.items():
        limit = net_tol if label.endswith("network") else tol
        passed = err < limit
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {label:<16} max rel error {err:.3e} (< {limit:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphlayers", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--mnist-dir", help="directory with train-images-idx3-ubyte "
                                           "(default: $MNIST_DIR, else synthetic digits)")
        p.add_argument("--out-dir")

    def training(p):
        p.add_argument("--samples", type=int)
        p.add_argument("--full-scale", action="store_const", const="true",
                       help=f"train on {FULL_SCALE_SAMPLES} digits")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--initial-lr", type=float)

    p = sub.add_parser("train", help="train one scenario")
    common(p)
    training(p)
    p.add_argument("--op", choices=[o.value for o in Op])
    p.add_argument("--se", choices=datasets.SE_NAMES)
    p.add_argument("--layer", choices=MORPH_KINDS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrix", help="train every op x se x layer combination")
    common(p)
    training(p)
    p.add_argument("--op", help="comma-separated operations")
    p.add_argument("--se", help="comma-separated structuring elements")
    p.add_argument("--layer", help="comma-separated layer kinds")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("sweep", help="apply a layer for a range of p or alpha")
    common(p)
    p.add_argument("--layer", choices=MORPH_KINDS)
    p.add_argument("--se", choices=datasets.SE_NAMES)
    p.add_argument("--values", help="comma-separated shape parameter values")
    p.add_argument("--index", type=int, help="which digit to use")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(p)
    p.add_argument("--cases", type=int)
    p.add_argument("--network-cases", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    verbose = args.verbose
    del args.verbose
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        if verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``raycal`` command-line interface.

Exit codes: 0 success, 2 input error, 3 numerical abort, 4 incompatible
checkpoint/scene/dataset, 5 gradient-check failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (Calibrator, TrainingAborted, TrainingConfig, evaluate, load_dataset, split_indices,
                          train, validation_loss)
from .em import CompiledPaths, FixedMaterials, SceneModel, WaveformConfig, path_coefficient
from .figures import cir_stem_svg, heatmap_svg, loss_curve_svg
from .geometry import SceneError, compute_aabb, load_scene
from .params import (ParameterStore, antenna_from_dict, load_checkpoint, save_checkpoint, scattering_from_dict)
from .synth import SynthConfig, default_scene, generate
from .tracer import TraceConfig, load_path_cache, trace_all

log = logging.getLogger("raycal")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INCOMPATIBLE, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("RAYCAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"RAYCAL_THREADS must be an integer, got '{env}'")
    return os.cpu_count() or 1


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} is not valid JSON: {exc}")


def _scene(path):
    if path is None:
        return default_scene()
    try:
        return load_scene(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc))


def _vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise CliError(f"expected x,y,z but got '{text}'")
    if v.shape != (3,):
        raise CliError(f"expected x,y,z but got '{text}'")
    return v


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _emit(args, doc: dict, lines: list) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    scene = _scene(args.scene)
    cfg = SynthConfig.from_dict(_read_json(args.synth, "synth config")) if args.synth else SynthConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.positions is not None:
        overrides["positions"] = args.positions
    if overrides:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), **overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = generate(scene, cfg, out, threads=_threads(args.threads))
    doc = {"positions": len(result.dataset), "mean_paths": result.mean_paths, "flagged_empty": result.flagged,
           "out": str(out)}
    _emit(args, doc, [f"generated {len(result.dataset)} records in {out}",
                      f"mean path count {result.mean_paths:.1f}",
                      f"positions without paths: {len(result.flagged)}"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate

def _load_data(data_dir):
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise CliError(f"dataset not found: {d}")
    dataset = load_dataset(d)
    cache = d / dataset.manifest.get("paths_file", "paths.json")
    if not cache.exists():
        raise CliError(f"path cache not found: {cache}")
    return dataset, load_path_cache(cache)


def _usable(dataset) -> np.ndarray:
    """Record indices excluding positions flagged as having no paths."""
    flagged = set(dataset.manifest.get("flagged_empty", []))
    return np.array([i for i, r in enumerate(dataset.records) if r.id not in flagged], dtype=int)


def _splits(dataset, cfg: TrainingConfig) -> tuple:
    usable = _usable(dataset)
    parts = split_indices(len(usable), cfg.fractions, cfg.split_seed)
    return tuple(usable[p] for p in parts)


def _fixed_materials(path) -> dict:
    if path is None:
        return {}
    doc = _read_json(path, "fixed materials")
    out = {}
    for name, m in doc.items():
        if set(m) != {"eps_r", "sigma", "S", "Kx"}:
            raise CliError(f"fixed material '{name}' needs exactly eps_r, sigma, S, Kx")
        out[name] = (m["eps_r"], m["sigma"], m["S"], m["Kx"])
    return out


def _training_config(args) -> TrainingConfig:
    base = _read_json(args.config, "training config") if args.config else {}
    flags = {"model": args.model, "iterations": args.iters, "learning_rate": args.lr,
             "lr_final": args.lr_final, "batch_size": args.batch,
             "enc_levels": args.enc_levels, "embedding_dim": args.embedding_dim, "seed": args.seed,
             "antenna": args.antenna, "scattering": args.scattering}
    return TrainingConfig.from_dict({**base, **{k: v for k, v in flags.items() if v is not None}})


def cmd_calibrate(args) -> int:
    scene = _scene(args.scene)
    dataset, pathsets = _load_data(args.data)
    cfg = _training_config(args)
    fixed = _fixed_materials(args.fixed_materials)
    try:
        cal = Calibrator(scene, dataset, pathsets, cfg, fixed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE)
    train_idx, val_idx, test_idx = _splits(dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = cal.init_store()
    try:
        result = train(cal, store, train_idx, val_idx, log_path=out / "train_log.csv",
                       progress=_progress(args.verbose))
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    train_loss = validation_loss(cal, result.store, train_idx, result.alpha) if len(train_idx) else None
    val_loss = validation_loss(cal, result.store, val_idx, result.alpha) if len(val_idx) else None
    metadata = {"alpha": result.alpha, "iterations": result.iterations, "stopped_early": result.stopped_early,
                "fixed_materials": {k: list(v) for k, v in fixed.items()},
                "dataset_records_sha256": _sha256(Path(args.data) / "records.jsonl"),
                "splits": {"train": len(train_idx), "validation": len(val_idx), "test": len(test_idx)},
                "materials": cal.material_values(result.store), "version": __version__}
    save_checkpoint(out / "checkpoint.json", result.store, cal.model_spec(), result.optimizer.state_dict(), metadata)
    hist = result.history
    (out / "loss_curve.svg").write_text(loss_curve_svg([h["iteration"] for h in hist], [h["loss"] for h in hist],
                                                       [h["validation"] for h in hist]))
    doc = {"checkpoint": str(out / "checkpoint.json"), "train_loss": train_loss, "validation_loss": val_loss,
           "iterations": result.iterations, "alpha": result.alpha, "materials": metadata["materials"]}
    lines = [f"checkpoint written to {out / 'checkpoint.json'}",
             f"final train loss {train_loss if train_loss is None else f'{train_loss:.6g}'}",
             f"final validation loss {val_loss if val_loss is None else f'{val_loss:.6g}'}"]
    lines += [f"  {n}: " + ", ".join(f"{k}={v:.4g}" for k, v in m.items()) for n, m in metadata["materials"].items()]
    _emit(args, doc, lines)
    return EXIT_OK


def _progress(verbose: bool):
    if not verbose:
        return None

    def report(entry):
        if entry["iteration"] % 100 == 0 or entry["validation"] is not None:
            log.info("iter %d loss %.6g val %s", entry["iteration"], entry["loss"], entry["validation"])
    return report


# ---------------------------------------------------------------------------
# evaluate

def _check_compatible(cal: Calibrator, ckpt) -> None:
    names = ckpt.model.get("materials")
    if names != cal.scene.material_names:
        raise CliError(f"checkpoint materials {names} do not match scene materials {cal.scene.material_names}",
                       EXIT_INCOMPATIBLE)
    expected = cal.init_store(0)
    if set(expected.names) != set(ckpt.store.names):
        raise CliError("checkpoint parameters do not match the model built for this scene", EXIT_INCOMPATIBLE)
    for k in expected.names:
        if expected[k].shape != ckpt.store[k].shape:
            raise CliError(f"parameter '{k}' has shape {ckpt.store[k].shape}, expected {expected[k].shape}",
                           EXIT_INCOMPATIBLE)


def _heatmap(cal: Calibrator, store: ParameterStore, grid: str, z: float, rx_index: int, trace_cfg: TraceConfig):
    try:
        nx, ny = (int(v) for v in grid.lower().split("x"))
    except ValueError:
        raise CliError(f"heatmap grid must look like 100x100, got '{grid}'")
    if nx < 1 or ny < 1:
        raise CliError("heatmap grid must be positive")
    aabb = compute_aabb(cal.scene)
    lo, hi = aabb.center - aabb.edge / 2, aabb.center + aabb.edge / 2
    v_lo, v_hi = cal.scene.vertices.min(axis=0), cal.scene.vertices.max(axis=0)
    lo[:2], hi[:2] = v_lo[:2], v_hi[:2]
    xs = lo[0] + (np.arange(nx) + 0.5) / nx * (hi[0] - lo[0])
    ys = lo[1] + (np.arange(ny) + 0.5) / ny * (hi[1] - lo[1])
    rx = cal.dataset.rx_positions[rx_index]
    pathsets = [trace_all(cal.scene, np.array([x, y, z]), rx, trace_cfg) for y in ys for x in xs]
    compiled = CompiledPaths(cal.scene, pathsets, cal.waveform, cal.model.tx, cal.model.rx, cache_taps=False)
    power = np.zeros(len(pathsets))
    for s in range(0, len(pathsets), 64):
        idx = np.arange(s, min(s + 64, len(pathsets)))
        h = compiled.cir(cal.model, store.values, idx).numpy()
        power[idx] = np.sum(np.abs(h) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        loss_db = np.where(power > 0, -10 * np.log10(power), np.nan).reshape(ny, nx)
    return heatmap_svg(loss_db, (lo[0], hi[0], lo[1], hi[1]), title=f"path loss -P [dB] at z={z:g} m"), loss_db


def cmd_evaluate(args) -> int:
    scene = _scene(args.scene)
    dataset, pathsets = _load_data(args.data)
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    try:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = TrainingConfig.from_dict(ckpt.model["training"])
    except (ValueError, KeyError) as exc:
        raise CliError(f"unreadable checkpoint: {exc}", EXIT_INCOMPATIBLE)
    fixed = {k: tuple(v) for k, v in ckpt.metadata.get("fixed_materials", {}).items()}
    try:
        cal = Calibrator(scene, dataset, pathsets, cfg, fixed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE)
    _check_compatible(cal, ckpt)
    train_idx, val_idx, test_idx = _splits(dataset, cfg)
    chosen = {"train": train_idx, "validation": val_idx, "test": test_idx, "all": _usable(dataset)}[args.split]
    if len(chosen) == 0:
        raise CliError(f"the {args.split} split is empty")
    alpha = float(ckpt.metadata.get("alpha", 1.0))
    report = evaluate(cal, ckpt.store, chosen, alpha)
    report["split"] = args.split
    report["alpha"] = alpha
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report)
    written = [out / "metrics.json"]
    if args.heatmap:
        cfg0 = pathsets[0].config if pathsets else TraceConfig()
        tcfg = TraceConfig(cfg0.max_order, args.heatmap_rays or cfg0.ray_count, cfg0.diffuse_samples, cfg0.seed)
        svg, _ = _heatmap(cal, ckpt.store, args.heatmap, args.heatmap_z, 0, tcfg)
        (out / "heatmap.svg").write_text(svg)
        written.append(out / "heatmap.svg")
    ids = {r.id: i for i, r in enumerate(dataset.records)}
    for rid in args.plot or []:
        if rid not in ids:
            raise CliError(f"unknown record id '{rid}'")
        i = ids[rid]
        pred = cal.predict(ckpt.store, [i])[0]
        svg = cir_stem_svg(dataset.records[i].cir * np.sqrt(alpha), pred, 1.0 / cal.bandwidth, title=f"CIR {rid}")
        (out / f"cir_{rid}.svg").write_text(svg)
        written.append(out / f"cir_{rid}.svg")
    doc = {"ale_db": report["ale_db"], "rae": report["rae"], "n_positions": report["n_positions"],
           "files": [str(p) for p in written]}
    _emit(args, doc, [f"{args.split} split: {report['n_positions']} positions",
                      f"mean ALE {report['ale_db']['mean']:.4g} dB, mean RAE {report['rae']['mean']:.4g}",
                      *[f"wrote {p}" for p in written]])
    return EXIT_OK


# ---------------------------------------------------------------------------
# trace

def _trace_model(scene, materials_path):
    table = {}
    for m in scene.materials:
        if m.get("model") == "fixed":
            table[m["name"]] = (m["eps_r"], m["sigma"], m["S"], m["Kx"])
    for name, v in _fixed_materials(materials_path).items():
        table[name] = v
    if not scene.material_names or set(table) != set(scene.material_names):
        return None if scene.material_names else SceneModel(FixedMaterials([], {}))
    return SceneModel(FixedMaterials(scene.material_names, table), scattering_from_dict({"kind": "backscatter",
                      "alpha_r": 5, "alpha_s": 8, "lambda": 0.8}), antenna_from_dict({}), antenna_from_dict({}))


def cmd_trace(args) -> int:
    scene = _scene(args.scene)
    tx, rx = _vec3(args.tx), _vec3(args.rx)
    cfg = TraceConfig(args.max_order, args.rays, args.diffuse, args.seed, args.exhaustive)
    ps = trace_all(scene, tx, rx, cfg)
    model = _trace_model(scene, args.materials)
    wavelength = WaveformConfig().wavelength
    entries = []
    for p in ps.paths:
        e = {"kinds": list(p.kinds), "triangles": list(p.sequence), "points": p.points.tolist(),
             "length": p.length, "delay": p.delay, "abs_a": None}
        if model is not None:
            a, _ = path_coefficient(p, scene, model, wavelength)
            a = a.numpy() if hasattr(a, "numpy") else a
            e["abs_a"] = float(np.abs(a))
        entries.append(e)
    doc = {"tx": tx.tolist(), "rx": rx.tolist(), "config": cfg.to_dict(), "paths": entries,
           "materials": "fixed" if model is not None else "unknown (no amplitudes)"}
    if args.out:
        _write_json(Path(args.out), doc)
    lines = [f"{len(entries)} paths"]
    for e in entries:
        amp = "" if e["abs_a"] is None else f" |a|={e['abs_a']:.4g}"
        lines.append(f"  {'-'.join(e['kinds']) or 'los':24s} tau={e['delay'] * 1e9:.3f} ns{amp}")
    _emit(args, {**doc, "out": args.out} if args.out else doc, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    report = run_suite(quick=args.quick)
    doc = report.to_dict()
    worst = report.worst
    lines = [f"{r.name:32s} {r.max_rel_error:.3e}  {'ok' if r.passed(report.tolerance) else 'FAIL'}"
             for r in report.results]
    if worst is not None:
        lines.append(f"worst relative error {worst.max_rel_error:.3e} ({worst.name}, {worst.worst_param})")
    for r in report.failures:
        lines.append(f"FAILED {r.name} (parameter '{r.worst_param}')")
    _emit(args, doc, lines)
    if not report.passed:
        if not args.json:
            print(f"error: gradient check failed: {', '.join(r.name for r in report.failures)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raycal", description="Differentiable ray-tracing scene calibration.")
    parser.add_argument("--version", action="version", version=f"raycal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable summary on stdout")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    g = common(sub.add_parser("generate", help="synthesize a dataset with known parameters"))
    g.add_argument("--scene", help="scene JSON (default: shipped corridor)")
    g.add_argument("--synth", help="synthetic-data config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--positions", type=int)
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_generate)

    c = common(sub.add_parser("calibrate", help="fit scene parameters to a dataset"))
    c.add_argument("--data", required=True)
    c.add_argument("--scene")
    c.add_argument("--out", required=True)
    c.add_argument("--config", help="training config JSON")
    c.add_argument("--model", choices=["embedding", "neural", "fixed"])
    c.add_argument("--iters", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--lr-final", type=float, help="cosine-anneal the learning rate to this value")
    c.add_argument("--batch", type=int)
    c.add_argument("--enc-levels", type=int)
    c.add_argument("--embedding-dim", type=int)
    c.add_argument("--antenna", choices=["fixed", "sg"])
    c.add_argument("--scattering", choices=["fixed", "hg"])
    c.add_argument("--fixed-materials", help="JSON mapping material name to eps_r/sigma/S/Kx")
    c.add_argument("--seed", type=int)
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_calibrate)

    e = common(sub.add_parser("evaluate", help="metrics and figures for a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scene")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=["train", "validation", "test", "all"], default="test")
    e.add_argument("--heatmap", help="grid size such as 100x100")
    e.add_argument("--heatmap-z", type=float, default=1.5)
    e.add_argument("--heatmap-rays", type=int)
    e.add_argument("--plot", nargs="*", help="record ids for CIR comparison plots")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_evaluate)

    t = common(sub.add_parser("trace", help="trace propagation paths between two points"))
    t.add_argument("--scene")
    t.add_argument("--tx", required=True, help="x,y,z")
    t.add_argument("--rx", required=True, help="x,y,z")
    t.add_argument("--max-order", type=int, default=3)
    t.add_argument("--rays", type=int, default=20000)
    t.add_argument("--diffuse", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--exhaustive", action="store_true")
    t.add_argument("--materials", help="JSON with eps_r/sigma/S/Kx per material for amplitudes")
    t.add_argument("--out")
    t.set_defaults(func=cmd_trace)

    k = common(sub.add_parser("gradcheck", help="run the built-in gradient-check suite"))
    k.add_argument("--quick", action="store_true", help="lower reflection order in the pipeline checks")
    k.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SceneError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

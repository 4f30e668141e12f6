"""Synthetic calibration datasets generated with known ground-truth parameters."""
from __future__ import annotations

import hashlib
import json
from importlib import resources
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (DATASET_FORMAT, DATASET_VERSION, Dataset, DatasetRecord, split_indices,
                          write_dataset)
from .em import CompiledPaths, FixedMaterials, SceneModel, WaveformConfig
from .geometry import MeshBuilder, Scene
from .params import antenna_from_dict, scattering_from_dict
from .tracer import TRACER_VERSION, TraceConfig, save_path_cache, trace_all

log = logging.getLogger(__name__)

GROUND_TRUTH = {
    "Floor": {"eps_r": 5.24, "sigma": 0.121, "S": 0.3, "Kx": 0.2},
    "Walls": {"eps_r": 2.73, "sigma": 0.027, "S": 0.5, "Kx": 0.4},
    "Ceiling": {"eps_r": 1.48, "sigma": 0.004, "S": 0.8, "Kx": 0.3},
}
DEFAULT_LOBE = {"kind": "backscatter", "alpha_r": 5, "alpha_s": 8, "lambda": 0.8}


def _grid_quad(mb: MeshBuilder, origin, u, v, nu: int, nv: int, material: str) -> None:
    """Planar rectangle origin + [0,1]u + [0,1]v split into nu x nv quads."""
    o, u, v = (np.asarray(x, float) for x in (origin, u, v))
    for i in range(nu):
        for j in range(nv):
            a = o + u * i / nu + v * j / nv
            b = o + u * (i + 1) / nu + v * j / nv
            c = o + u * (i + 1) / nu + v * (j + 1) / nv
            d = o + u * i / nu + v * (j + 1) / nv
            mb.quad(a, b, c, d, material)


def corridor_scene(leg_a=(16.0, 3.0), leg_b=(3.0, 11.0), height=3.0, cell=2.0) -> Scene:
    """L-shaped corridor with three objects (Floor, Walls, Ceiling).

    Leg A spans x in [0, La], y in [0, Wa]; leg B rises from its far end along
    +y with width Wb and length Lb. Surfaces are split into roughly ``cell``
    sized panels. Materials are declared trainable (model "embedding").
    """
    La, Wa = leg_a
    Wb, Lb = leg_b
    mb = MeshBuilder()
    for name in ("Floor", "Walls", "Ceiling"):
        mb.material(name, "embedding")
    n = lambda length: max(1, int(round(length / cell)))  # noqa: E731
    x0 = La - Wb
    rects = [((0.0, 0.0), (La, Wa)), ((x0, Wa), (La, Wa + Lb))]
    for (ax, ay), (bx, by) in rects:
        dx, dy = bx - ax, by - ay
        _grid_quad(mb, (ax, ay, 0.0), (dx, 0, 0), (0, dy, 0), n(dx), n(dy), "Floor")
        _grid_quad(mb, (ax, ay, height), (0, dy, 0), (dx, 0, 0), n(dy), n(dx), "Ceiling")
    outline = [(0.0, 0.0), (La, 0.0), (La, Wa + Lb), (x0, Wa + Lb), (x0, Wa), (0.0, Wa)]
    for k in range(len(outline)):
        p, q = np.array(outline[k]), np.array(outline[(k + 1) % len(outline)])
        length = float(np.linalg.norm(q - p))
        _grid_quad(mb, (*p, 0.0), (*(q - p), 0.0), (0, 0, height), n(length), n(height), "Walls")
    return mb.build()


def default_scene() -> Scene:
    """The corridor scene shipped with the package (``raycal/data/corridor.json``)."""
    text = resources.files("raycal").joinpath("data/corridor.json").read_text()
    return Scene.from_dict(json.loads(text))


def corridor_regions(leg_a=(16.0, 3.0), leg_b=(3.0, 11.0), margin=0.5, z=(1.0, 2.0)) -> list:
    La, Wa = leg_a
    Wb, Lb = leg_b
    return [[[margin, margin, z[0]], [La - margin, Wa - margin, z[1]]],
            [[La - Wb + margin, Wa + margin, z[0]], [La - margin, Wa + Lb - margin, z[1]]]]


@dataclass
class SynthConfig:
    materials: dict = field(default_factory=lambda: {k: dict(v) for k, v in GROUND_TRUTH.items()})
    scattering: dict = field(default_factory=lambda: dict(DEFAULT_LOBE))
    tx_antenna: dict = field(default_factory=lambda: {"pattern": {"kind": "isotropic"}, "slant": 0.0})
    rx_antenna: dict = field(default_factory=lambda: {"pattern": {"kind": "isotropic"}, "slant": 0.0})
    positions: int = 256
    regions: list = field(default_factory=corridor_regions)
    rx_positions: list = field(default_factory=lambda: [[14.5, 5.0, 1.8]])
    waveform: dict = field(default_factory=lambda: WaveformConfig().to_dict())
    trace: dict = field(default_factory=lambda: TraceConfig(max_order=3, ray_count=20000,
                                                            diffuse_samples=300).to_dict())
    seed: int = 0
    random_phases: bool = False

    def __post_init__(self):
        for name, m in self.materials.items():
            if set(m) != {"eps_r", "sigma", "S", "Kx"}:
                raise ValueError(f"material '{name}' needs exactly eps_r, sigma, S, Kx")
        if self.positions < 1:
            raise ValueError("positions must be at least 1")
        WaveformConfig.from_dict(self.waveform)
        TraceConfig.from_dict(self.trace)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def sample_positions(regions, count: int, seed: int) -> np.ndarray:
    """Uniform samples from a union of boxes (chosen proportionally to volume)."""
    boxes = np.asarray(regions, dtype=float).reshape(-1, 2, 3)
    vol = np.prod(boxes[:, 1] - boxes[:, 0], axis=1)
    if np.any(vol <= 0):
        raise ValueError("sampling regions must have positive volume")
    rng = np.random.default_rng(seed)
    which = rng.choice(len(boxes), size=count, p=vol / vol.sum())
    u = rng.uniform(size=(count, 3))
    return boxes[which, 0] + u * (boxes[which, 1] - boxes[which, 0])


def _trace_one(args):
    scene, tx, rx, cfg = args
    return trace_all(scene, tx, rx, cfg)


def trace_positions(scene: Scene, pairs: list, cfg: TraceConfig, threads: int = 1) -> list:
    jobs = [(scene, tx, rx, cfg) for tx, rx in pairs]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_trace_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    return [_trace_one(j) for j in jobs]


def ground_truth_model(scene: Scene, config: SynthConfig) -> SceneModel:
    missing = [n for n in scene.material_names if n not in config.materials]
    if missing:
        raise ValueError(f"no ground-truth values for materials {missing}")
    table = {n: tuple(config.materials[n][k] for k in ("eps_r", "sigma", "S", "Kx")) for n in scene.material_names}
    return SceneModel(FixedMaterials(scene.material_names, table), scattering_from_dict(config.scattering),
                      antenna_from_dict(config.tx_antenna), antenna_from_dict(config.rx_antenna))


@dataclass
class GenerateResult:
    dataset: Dataset
    pathsets: list
    flagged: list

    @property
    def mean_paths(self) -> float:
        return float(np.mean([len(p) for p in self.pathsets])) if self.pathsets else 0.0


def generate(scene: Scene, config: SynthConfig, out_dir=None, threads: int = 1, pathsets=None) -> GenerateResult:
    """Trace every (tx, rx) pair, compute ground-truth CIRs and optionally write the dataset.

    ``pathsets`` may supply paths already traced for the same scene, positions
    and trace settings (for example to re-synthesize with other patterns).
    """
    waveform = WaveformConfig.from_dict(config.waveform)
    trace_cfg = TraceConfig.from_dict(config.trace)
    model = ground_truth_model(scene, config)
    tx_pos = sample_positions(config.regions, config.positions, config.seed)
    rx_pos = np.asarray(config.rx_positions, dtype=float).reshape(-1, 3)
    pairs, ids, rx_index = [], [], []
    for i, tx in enumerate(tx_pos):
        for r, rx in enumerate(rx_pos):
            pairs.append((tx, rx))
            ids.append(f"p{i:04d}r{r}")
            rx_index.append(r)
    if pathsets is None:
        pathsets = trace_positions(scene, pairs, trace_cfg, threads)
    elif len(pathsets) != len(pairs) or any(ps.config != trace_cfg for ps in pathsets):
        raise ValueError("supplied paths do not match the configured positions and trace settings")
    else:
        for ps, (tx, rx) in zip(pathsets, pairs):
            if not (np.allclose(ps.tx, tx, rtol=0, atol=1e-12) and np.allclose(ps.rx, rx, rtol=0, atol=1e-12)):
                raise ValueError("supplied paths were traced for different positions")
    chi = None
    if config.random_phases:
        rng = np.random.default_rng(config.seed + 1)
        chi = rng.uniform(0.0, 2.0 * np.pi, (sum(len(p) for p in pathsets), 2))
    compiled = CompiledPaths(scene, pathsets, waveform, model.tx, model.rx, chi=chi, cache_taps=False)
    records, flagged = [], []
    for lo in range(0, len(pairs), 64):
        idx = np.arange(lo, min(lo + 64, len(pairs)))
        h = compiled.cir(model, None, idx).numpy()
        for k, i in enumerate(idx):
            records.append(DatasetRecord(ids[i], pairs[i][0], rx_index[i], h[k]))
            if len(pathsets[i]) == 0:
                flagged.append(ids[i])
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "waveform": waveform.to_dict(),
        "rx_positions": rx_pos.tolist(),
        "cir_order": "natural",
        "tx_antenna": config.tx_antenna,
        "rx_antenna": config.rx_antenna,
        "scattering": config.scattering,
        "paths_file": "paths.json",
        "n_records": len(records),
        "flagged_empty": flagged,
        "provenance": {"generator": "raycal.synth", "config_sha256": config.digest(), "seed": config.seed,
                       "tracer_version": TRACER_VERSION, "random_phases": config.random_phases},
    }
    dataset = Dataset(manifest, records)
    if out_dir is not None:
        out = Path(out_dir)
        write_dataset(out, manifest, records)
        save_path_cache(pathsets, out / "paths.json")
        truth = {"materials": config.materials, "scattering": config.scattering,
                 "tx_antenna": config.tx_antenna, "rx_antenna": config.rx_antenna}
        (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    if flagged:
        log.warning("%d positions have no propagation paths", len(flagged))
    return GenerateResult(dataset, pathsets, flagged)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Disjoint train/validation/test datasets (see :func:`split_indices` for the rounding)."""
    parts = split_indices(len(dataset), fractions, seed)
    return tuple(dataset.subset(p) for p in parts)

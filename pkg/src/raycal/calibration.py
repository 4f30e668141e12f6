"""Loss, measurement scaling, metrics and the gradient-descent calibration loop."""
from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import CVar, GradientError, Tape
from .constants import SQRT_FLOOR
from .em import CompiledPaths, FixedMaterials, MaterialParams, SceneModel, WaveformConfig
from .geometry import Scene, compute_aabb
from .params import (EmbeddingMaterials, HGScatteringPattern, NeuralMaterialNet, NeuralMaterials,
                     NeuralScattering, ParameterStore, SGMixtureAntenna, antenna_from_dict,
                     scattering_from_dict)

log = logging.getLogger(__name__)

DATASET_FORMAT = "raycal-dataset"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# channel statistics and loss

def _power(h):
    if isinstance(h, CVar):
        return h.abs2()
    h = np.asarray(h, dtype=complex)
    return h.real ** 2 + h.imag ** 2


def channel_gain(h):
    """Total gain ``sum |h[l]|^2`` over the last axis."""
    return ad.vsum(_power(h), axis=-1)


def _spread_from_power(p, W: float):
    P = ad.vsum(p, axis=-1, keepdims=True)
    Pv = ad.value(P)
    empty = Pv <= 0
    if np.any(empty):
        warnings.warn("zero channel gain: delay spread defined as 0", stacklevel=3)
    P_safe = ad.where(empty, np.ones_like(Pv), P)
    ell = np.arange(ad.value(p).shape[-1], dtype=float)
    q = p / P_safe
    mean = ad.vsum(q * ell, axis=-1, keepdims=True)
    var = ad.vsum(q * (ell - mean) ** 2, axis=-1)
    tau = ad.sqrt(var) / W
    # below the sqrt floor the gradient is already zero; report the spread as exactly 0
    flat = empty.reshape(np.shape(ad.value(var))) | (ad.value(var) <= SQRT_FLOOR)
    return ad.where(flat, np.zeros(np.shape(ad.value(var))), tau)


def rms_delay_spread(h, W: float):
    """RMS delay spread in seconds; taps are indexed in natural order 0..N-1."""
    return _spread_from_power(_power(h), W)


def smape(x, y):
    """``|x - y| / (x + y)``, defined as 0 when both are 0."""
    den = ad.add(x, y)
    zero = ad.value(den) == 0
    safe = ad.where(zero, np.ones(np.shape(ad.value(den))), den)
    out = ad.absolute(ad.sub(x, y)) / safe
    return ad.where(zero, np.zeros(np.shape(ad.value(den))), out)


@dataclass
class LossReport:
    delay: np.ndarray
    power: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.delay + self.power

    @property
    def mean(self) -> float:
        return float(np.mean(self.total)) if len(self.total) else 0.0


def example_loss(h, h_hat, W: float):
    """Per-example loss (delay-spread SMAPE + power SMAPE) and its terms.

    ``h`` and ``h_hat`` have shape (N,) or (B, N); ``h_hat`` may be a CVar.
    Returns ``(loss, delay_term, power_term)``.
    """
    p, p_hat = _power(h), _power(h_hat)
    delay = smape(_spread_from_power(p, W), _spread_from_power(p_hat, W))
    power = smape(ad.vsum(p, axis=-1), ad.vsum(p_hat, axis=-1))
    return ad.add(delay, power), delay, power


# ---------------------------------------------------------------------------
# measurement scaling

def estimate_scale_batch(P, P_hat) -> float:
    """Least-squares scale mapping measured powers onto predicted ones."""
    P, P_hat = np.asarray(P, float), np.asarray(P_hat, float)
    den = float(np.sum(P * P))
    if den <= 0:
        raise ValueError("all measured powers are zero; scale is undefined")
    return float(np.sum(P * P_hat) / den)


@dataclass
class ScalingState:
    alpha: float | None = None
    iteration: int = 0


def update_scale(state: ScalingState, alpha_hat: float, decay: float) -> ScalingState:
    """Exponential moving average of batch scale estimates (first estimate seeds the average)."""
    if not alpha_hat > 0:
        raise ValueError("scale estimate must be positive")
    prev = alpha_hat if state.alpha is None else state.alpha
    return ScalingState(decay * prev + (1.0 - decay) * alpha_hat, state.iteration + 1)


def align_taps(h, threshold: float = 0.01) -> np.ndarray:
    """Cyclically shift so the first tap above ``threshold * max`` power-amplitude sits at l = 0."""
    h = np.asarray(h, dtype=complex)
    mag = np.abs(h)
    if mag.max() == 0:
        return h.copy()
    first = int(np.argmax(mag > threshold * mag.max()))
    return np.roll(h, -first)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class Adam:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, store: ParameterStore, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            store.values[name] = store.values[name] - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": {k: v.reshape(-1).tolist() for k, v in self.m.items()},
                "v": {k: v.reshape(-1).tolist() for k, v in self.v.items()}}


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetRecord:
    id: str
    tx: np.ndarray
    rx: int
    cir: np.ndarray  # complex, natural tap order


@dataclass
class Dataset:
    manifest: dict
    records: list

    def __len__(self):
        return len(self.records)

    @property
    def waveform(self) -> WaveformConfig:
        return WaveformConfig.from_dict(self.manifest["waveform"])

    @property
    def rx_positions(self) -> np.ndarray:
        return np.asarray(self.manifest["rx_positions"], dtype=float).reshape(-1, 3)

    def cirs(self, indices=None) -> np.ndarray:
        recs = self.records if indices is None else [self.records[i] for i in indices]
        return np.array([r.cir for r in recs]).reshape(len(recs), -1)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.manifest, [self.records[i] for i in indices])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def record_to_line(r: DatasetRecord) -> str:
    tx = ",".join(_fmt(x) for x in r.tx)
    cir = ",".join(f"[{_fmt(z.real)},{_fmt(z.imag)}]" for z in r.cir)
    return f'{{"id":{json.dumps(r.id)},"tx":[{tx}],"rx":{int(r.rx)},"cir":[{cir}]}}'


def record_from_dict(d: dict, n: int | None = None) -> DatasetRecord:
    unknown = set(d) - {"id", "tx", "rx", "cir", "cfr"}
    if unknown:
        raise ValueError(f"unknown record keys: {sorted(unknown)}")
    if "cir" in d:
        c = np.array(d["cir"], dtype=float)
        cir = c[:, 0] + 1j * c[:, 1]
    else:
        from .em import cir as to_cir
        c = np.array(d["cfr"], dtype=float)
        cir = to_cir(c[:, 0] + 1j * c[:, 1], "natural")
    if n is not None and len(cir) != n:
        raise ValueError(f"record {d.get('id')} has {len(cir)} taps, expected {n}")
    if not np.all(np.isfinite(cir)):
        raise ValueError(f"record {d.get('id')} has non-finite taps")
    return DatasetRecord(str(d["id"]), np.array(d["tx"], dtype=float), int(d.get("rx", 0)), cir)


def write_dataset(directory, manifest: dict, records: list) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    with open(directory / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(record_to_line(r) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"dataset not found: {directory}")
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{directory} is not a dataset")
    n = int(manifest["waveform"]["n_subcarriers"])
    records = []
    with open(directory / "records.jsonl") as fh:
        for line in fh:
            if line.strip():
                records.append(record_from_dict(json.loads(line), n))
    if manifest.get("align_taps"):
        for r in records:
            r.cir = align_taps(r.cir, manifest.get("align_threshold", 0.01))
    return Dataset(manifest, records)


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Deterministic random partition.

    The training share is rounded half up, the validation share floored and the
    test split takes the remainder, so 256 records split 205/25/26.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-12:
        raise ValueError("fractions must be three non-negative numbers summing to at most 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n + 0.5 + 1e-9))
    n_val = min(int(np.floor(fractions[1] * n + 1e-9)), n - n_train)
    if fractions == (1.0, 0.0, 0.0):
        n_train, n_val = n, 0
    parts = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:]))
    for name, part in zip(("train", "validation", "test"), parts):
        if len(part) == 0 and n:
            warnings.warn(f"empty {name} split", stacklevel=2)
    return parts


# ---------------------------------------------------------------------------
# model assembly

@dataclass
class TrainingConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    lr_final: float | None = None  # cosine-anneal towards this rate over the budget; None keeps it constant
    ema_decay: float = 0.9
    iterations: int = 5000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    model: str = "embedding"  # embedding | neural | fixed
    embedding_dim: int = 30
    enc_levels: int = 10
    hidden: tuple = (128, 128, 128, 128)
    neural_pattern_heads: bool = False
    antenna: str = "fixed"  # fixed | sg
    antenna_components: int = 3
    scattering: str = "fixed"  # fixed | hg
    hg_normalization: str = "axis"
    synthetic: bool = True
    random_phases: bool = False
    patience: int = 20
    eval_every: int = 50
    fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_final is not None and not 0 <= self.lr_final <= self.learning_rate:
            raise ValueError("final learning rate must lie in [0, learning_rate]")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("EMA decay must lie in [0, 1)")
        if self.model not in ("embedding", "neural", "fixed"):
            raise ValueError(f"unknown model '{self.model}'")
        if self.antenna not in ("fixed", "sg") or self.scattering not in ("fixed", "hg"):
            raise ValueError("antenna must be fixed|sg and scattering fixed|hg")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class CompositeMaterials:
    """Fixed materials by name, everything else from a trainable provider."""

    def __init__(self, names, fixed: dict, trainable=None):
        self.names = list(names)
        self.is_fixed = np.array([n in fixed for n in self.names])
        table = {n: fixed.get(n, (2.0, 1.0, 0.5, 0.5)) for n in self.names}
        self.fixed = FixedMaterials(self.names, table)
        self.trainable = trainable

    def evaluate(self, p, material_index, points=None) -> MaterialParams:
        idx = np.asarray(material_index, dtype=int)
        f = self.fixed.evaluate(p, idx, points)
        if self.trainable is None or self.is_fixed[idx].all():
            return f
        t = self.trainable.evaluate(p, idx, points)
        mask = self.is_fixed[idx]
        if not mask.any():
            return t
        return MaterialParams(*(ad.where(mask, a, b) for a, b in
                                zip((f.eps_r, f.sigma, f.S, f.Kx), (t.eps_r, t.sigma, t.S, t.Kx))))


def _check_paths_match(scene: Scene, pathsets: list, tol: float = 1e-6) -> None:
    """Reject path caches traced on a different scene."""
    tri, pts = [], []
    for ps in pathsets:
        for p in ps:
            for it in p.interactions:
                tri.append(it.triangle_id)
                pts.append(it.point)
    if not tri:
        return
    tri = np.asarray(tri)
    if tri.max() >= scene.n_triangles:
        raise ValueError("path cache references triangles missing from the scene")
    off = np.abs(np.sum((np.asarray(pts) - scene.v0[tri]) * scene.normals[tri], axis=1))
    if off.max() > tol:
        raise ValueError("path cache interaction points do not lie on the scene geometry")


class Calibrator:
    """Everything needed to evaluate and differentiate predicted CIRs for a dataset."""

    def __init__(self, scene: Scene, dataset: Dataset, pathsets: list, config: TrainingConfig,
                 fixed_materials: dict | None = None):
        if len(pathsets) != len(dataset):
            raise ValueError(f"path cache has {len(pathsets)} positions, dataset has {len(dataset)} records")
        _check_paths_match(scene, pathsets)
        self.scene, self.dataset, self.config = scene, dataset, config
        self.waveform = dataset.waveform
        man = dataset.manifest
        tx = antenna_from_dict(man.get("tx_antenna", {}))
        rx = antenna_from_dict(man.get("rx_antenna", {}))
        scattering = scattering_from_dict(man.get("scattering", {"kind": "backscatter", "alpha_r": 5,
                                                                  "alpha_s": 8, "lambda": 0.8}))
        fixed = {m["name"]: (m["eps_r"], m["sigma"], m["S"], m["Kx"]) for m in scene.materials
                 if m.get("model") == "fixed"}
        fixed.update(fixed_materials or {})
        self.components = []
        names = [n for n in scene.material_names if n not in fixed]
        trainable = None
        if config.model == "embedding" and names:
            trainable = EmbeddingMaterials(names, config.embedding_dim)
            trainable.evaluate = self._embedding_evaluator(trainable, scene.material_names)
        elif config.model == "neural" and names:
            net = NeuralMaterialNet(config.enc_levels, config.hidden, config.neural_pattern_heads)
            trainable = NeuralMaterials(net, compute_aabb(scene), config.hg_normalization)
            if config.neural_pattern_heads:
                scattering = NeuralScattering(trainable)
        elif names and config.model == "fixed":
            raise ValueError(f"materials {names} have no fixed parameters")
        if trainable is not None:
            self.components.append(trainable)
        if config.antenna == "sg":
            sg = SGMixtureAntenna("tx_antenna", config.antenna_components)
            tx.pattern = sg
            self.components.append(sg)
        if config.scattering == "hg" and not isinstance(scattering, NeuralScattering):
            hg = HGScatteringPattern("scattering", config.hg_normalization)
            scattering = hg
            self.components.append(hg)
        self.model = SceneModel(CompositeMaterials(scene.material_names, fixed, trainable), scattering, tx, rx)
        self.compiled = CompiledPaths(scene, pathsets, self.waveform, tx, rx)
        self.measured = dataset.cirs()
        self.bandwidth = self.waveform.bandwidth

    @staticmethod
    def _embedding_evaluator(emb: EmbeddingMaterials, all_names):
        # the composite indexes by scene material, the embedding by its own list
        lookup = np.array([emb.names.index(n) if n in emb.names else 0 for n in all_names])
        base = EmbeddingMaterials.evaluate

        def evaluate(p, material_index, points=None):
            return base(emb, p, lookup[np.asarray(material_index, int)], points)
        return evaluate

    @property
    def trainable_keys(self) -> list:
        return [k for c in self.components for k in c.keys()]

    def init_store(self, seed: int | None = None) -> ParameterStore:
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        store = ParameterStore()
        for c in self.components:
            c.init(store, rng)
        return store

    def model_spec(self) -> dict:
        return {"kind": self.config.model, "components": [c.to_dict() for c in self.components],
                "materials": self.scene.material_names, "training": self.config.to_dict()}

    def predict(self, store: ParameterStore, examples=None) -> np.ndarray:
        """Predicted CIRs as complex arrays (no gradient)."""
        examples = np.arange(len(self.dataset)) if examples is None else np.asarray(examples)
        out = []
        for lo in range(0, len(examples), 64):
            out.append(self.compiled.cir(self.model, store.values, examples[lo:lo + 64]).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.waveform.n_subcarriers), complex)

    def loss(self, store: ParameterStore, examples, alpha: float = 1.0, tape: Tape | None = None):
        """Mean batch loss (Var if ``tape`` given) and the per-example report."""
        p = store.bind(tape)
        h_hat = self.compiled.cir(self.model, p, examples)
        h = self.measured[examples] * np.sqrt(alpha)
        total, delay, power = example_loss(h, h_hat, self.bandwidth)
        report = LossReport(np.atleast_1d(ad.value(delay)).copy(), np.atleast_1d(ad.value(power)).copy())
        return ad.mean(total), report

    def material_values(self, store: ParameterStore) -> dict:
        """Effective parameters per material (neural: averaged over the material's triangle centroids)."""
        out = {}
        tri_centroids = self.scene.v0 + (self.scene.e1 + self.scene.e2) / 3.0
        for k, name in enumerate(self.scene.material_names):
            tris = np.nonzero(self.scene.triangle_material == k)[0]
            if len(tris) == 0:
                continue
            m = self.model.materials.evaluate(store.values, np.full(len(tris), k), tri_centroids[tris])
            out[name] = {f: float(np.mean(np.broadcast_to(ad.value(getattr(m, f)), (len(tris),))))
                         for f in ("eps_r", "sigma", "S", "Kx")}
        return out


# ---------------------------------------------------------------------------
# training

class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    store: ParameterStore
    history: list
    alpha: float
    best_validation: float | None
    iterations: int
    optimizer: Adam
    stopped_early: bool = False


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Endless epoch-wise shuffled batches without replacement."""
    while True:
        perm = rng.permutation(indices)
        for lo in range(0, len(perm), batch_size):
            yield np.sort(perm[lo:lo + batch_size])


def learning_rate_at(cfg: TrainingConfig, it: int) -> float:
    """Step size for 1-based iteration ``it``: constant, or cosine-annealed to ``lr_final``."""
    if cfg.lr_final is None or cfg.iterations <= 1:
        return cfg.learning_rate
    frac = (it - 1) / (cfg.iterations - 1)
    return cfg.lr_final + 0.5 * (cfg.learning_rate - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


def train(cal: Calibrator, store: ParameterStore | None = None, train_idx=None, val_idx=None,
          log_path=None, progress=None) -> TrainResult:
    """Adam on the mean batch loss with EMA measurement scaling and early stopping."""
    cfg = cal.config
    store = cal.init_store() if store is None else store
    n = len(cal.dataset)
    if train_idx is None:
        train_idx, val_idx, _ = split_indices(n, cfg.fractions, cfg.split_seed)
    train_idx = np.asarray(train_idx, dtype=int)
    val_idx = np.asarray(val_idx if val_idx is not None else [], dtype=int)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(train_idx, cfg.batch_size, rng)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    scale = ScalingState(1.0 if cfg.synthetic else None)
    keys = cal.trainable_keys
    history = []
    best, best_store, stale, stopped = None, store.copy(), 0, False
    t0 = time.perf_counter()
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    if fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "delay_term", "power_term", "alpha", "validation", "wall_clock"])
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            batch = next(batches)
            opt.lr = learning_rate_at(cfg, it)
            if cfg.random_phases:
                cal.compiled.resample_chi(rng)
            tape = Tape()
            p = store.bind(tape, trainable=set(keys))
            try:
                h_hat = cal.compiled.cir(cal.model, p, batch)
                if not cfg.synthetic:
                    P_hat = np.sum(np.abs(h_hat.numpy()) ** 2, axis=1)
                    P = np.sum(np.abs(cal.measured[batch]) ** 2, axis=1)
                    scale = update_scale(scale, estimate_scale_batch(P, P_hat), cfg.ema_decay)
                h = cal.measured[batch] * np.sqrt(scale.alpha)
                total, delay, power = example_loss(h, h_hat, cal.bandwidth)
                loss = ad.mean(total)
                grads = tape.backward(loss)
            except GradientError as exc:
                raise TrainingAborted(f"non-finite value at iteration {it}: {exc}") from exc
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingAborted(f"non-finite gradient for parameter '{k}' at iteration {it}")
            opt.step(store, grads)
            entry = {"iteration": it, "loss": float(loss.value), "delay": float(np.mean(ad.value(delay))),
                     "power": float(np.mean(ad.value(power))), "alpha": float(scale.alpha), "validation": None}
            if len(val_idx) and (it % cfg.eval_every == 0 or it == cfg.iterations):
                v = validation_loss(cal, store, val_idx, scale.alpha)
                entry["validation"] = v
                if best is None or v < best:
                    best, best_store, stale = v, store.copy(), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        stopped = True
            history.append(entry)
            if writer:
                writer.writerow([it, repr(entry["loss"]), repr(entry["delay"]), repr(entry["power"]),
                                 repr(entry["alpha"]), "" if entry["validation"] is None else repr(entry["validation"]),
                                 f"{time.perf_counter() - t0:.3f}"])
            if progress:
                progress(entry)
            if stopped:
                log.info("early stop at iteration %d", it)
                break
    finally:
        if fh:
            fh.close()
    final = best_store if len(val_idx) and best is not None else store
    return TrainResult(final, history, float(scale.alpha if scale.alpha is not None else 1.0), best, it, opt, stopped)


def validation_loss(cal: Calibrator, store: ParameterStore, indices, alpha: float = 1.0) -> float:
    h_hat = cal.predict(store, indices)
    total, _, _ = example_loss(cal.measured[indices] * np.sqrt(alpha), h_hat, cal.bandwidth)
    return float(np.mean(total))


# ---------------------------------------------------------------------------
# evaluation

def _db(x):
    return 10.0 * np.log10(np.maximum(x, 1e-300))


def _summary(x: np.ndarray) -> dict:
    if len(x) == 0:
        return {"mean": None, "std": None, "median": None, "p90": None}
    return {"mean": float(np.mean(x)), "std": float(np.std(x)), "median": float(np.median(x)),
            "p90": float(np.quantile(x, 0.9))}


def compare(measured: np.ndarray, predicted: np.ndarray, tx: np.ndarray, W: float) -> dict:
    """ALE / RAE per transmitter position (powers and delay spreads averaged over receivers)."""
    P, P_hat = channel_gain(measured), channel_gain(predicted)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau, tau_hat = rms_delay_spread(measured, W), rms_delay_spread(predicted, W)
    keys = [tuple(np.round(t, 9)) for t in tx]
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    rows = []
    for k, idx in groups.items():
        p, ph = float(np.mean(P[idx])), float(np.mean(P_hat[idx]))
        t, th = float(np.mean(tau[idx])), float(np.mean(tau_hat[idx]))
        ale = abs(_db(p) - _db(ph))
        rae = abs(t - th) / t if t > 0 else (0.0 if th == 0 else float("inf"))
        rows.append({"tx": list(k), "records": idx, "P_dB": _db(p), "P_hat_dB": _db(ph), "tau_rms": t,
                     "tau_rms_hat": th, "ale": ale, "rae": rae})
    ale = np.array([r["ale"] for r in rows])
    rae = np.array([r["rae"] for r in rows])
    return {"tap_indexing": "natural delay order l = 0..N-1 (negative IDFT taps wrap to the end)",
            "n_positions": len(rows), "ale_db": _summary(ale), "rae": _summary(rae),
            "cdf": {"ale_db": np.sort(ale).tolist(), "rae": np.sort(rae).tolist()}, "per_position": rows}


def evaluate(cal: Calibrator, store: ParameterStore, indices=None, alpha: float = 1.0) -> dict:
    indices = np.arange(len(cal.dataset)) if indices is None else np.asarray(indices, dtype=int)
    predicted = cal.predict(store, indices)
    measured = cal.measured[indices] * np.sqrt(alpha)
    tx = np.array([cal.dataset.records[i].tx for i in indices]).reshape(-1, 3)
    report = compare(measured, predicted, tx, cal.bandwidth)
    for row in report["per_position"]:
        row["records"] = [cal.dataset.records[indices[i]].id for i in row["records"]]
    return report

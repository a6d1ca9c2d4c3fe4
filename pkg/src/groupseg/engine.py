"""Training-data engine: session loading, the full synthesis pipeline, non-brain
GMM labels and deterministic dataset emission."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .augment import (
    SpatialTransform,
    affine_matrix,
    apply_transform,
    blobs_from_params,
    grid_center,
    mirror_lateral,
    sample_affine,
    sample_blobs,
    sample_warp,
)
from .config import EngineConfig
from .core import (
    NONBRAIN_BASE,
    TRANSIENT_BASE,
    GridSpec,
    LabelMap,
    Volume,
    default_protocol,
    normalize,
    resample,
)
from .corrupt import aggregate_mask, brain_mask, corrupt_channel, mask_labels
from .noise import make_rng
from .synth import plan_channels, remap_from_params, render_labels, sample_label_means, sample_remap

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------

@dataclass
class Session:
    """One label map plus the co-registered real scans of an imaging session.

    Either paths (``label_path``, ``image_paths``) or in-memory volumes
    (``label_map``, ``images``) may be given.
    """

    label_path: str | None = None
    image_paths: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    label_map: LabelMap | None = None
    images: list[Volume] | None = None
    session_id: str | None = None

    def __post_init__(self):
        if self.label_path is None and self.label_map is None:
            raise ValueError("a session needs exactly one label map")
        if self.session_id is None:
            self.session_id = Path(self.label_path).name if self.label_path else "session"
        self._cache = {}

    @classmethod
    def from_volumes(cls, label_map: LabelMap, images=(), session_id: str = "session", **metadata) -> "Session":
        return cls(label_map=label_map, images=list(images), session_id=session_id, metadata=metadata)

    @property
    def n_real(self) -> int:
        return len(self.images) if self.images is not None else len(self.image_paths)

    def load(self) -> tuple[LabelMap, list[Volume]]:
        lm = self.label_map
        if lm is None:
            lm = io.read_volume(self.label_path, as_labels=True, protocol=None)
            if lm.protocol is None:
                lm = LabelMap(lm.data, lm.affine, default_protocol())
        images = self.images if self.images is not None else [io.read_volume(p) for p in self.image_paths]
        for i, img in enumerate(images):
            if not img.same_geometry(lm, atol=1e-4):
                raise ValueError(f"session {self.session_id}: image {i} is not aligned with the label map")
        return lm, list(images)

    def conformed(self, grid: GridSpec) -> tuple[LabelMap, list[Volume]]:
        """Label map and normalized images on ``grid`` centered on the brain."""
        key = (grid.shape, grid.spacing, grid.orientation)
        if key not in self._cache:
            lm, images = self.load()
            target = grid.with_center(brain_center(lm))
            lm_r = resample(lm, target, "nearest")
            images_r = [resample(normalize(img), target, "trilinear") for img in images]
            self._cache = {key: (lm_r, images_r)}
        return self._cache[key]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def brain_center(lm: LabelMap) -> np.ndarray:
    """World coordinate of the brain-label centroid (grid center when empty)."""
    idx = np.argwhere(brain_mask(lm))
    if idx.size == 0:
        return grid_center(lm)
    mid = np.append(idx.mean(axis=0), 1.0)
    return (lm.affine @ mid)[:3]


# --------------------------------------------------------------------------
# sample generation
# --------------------------------------------------------------------------

@dataclass
class TrainingSample:
    channels: list[Volume]
    label_map: LabelMap
    trace: dict
    session_id: str
    seed: int

    @property
    def n(self) -> int:
        return len(self.channels)


def generate_sample(session: Session, config: EngineConfig, seed: int) -> TrainingSample:
    """Synthesize one training sample; a pure function of (session, config, seed).

    Steps: conform to the working grid, random affine + warp applied to images
    and labels in one pass, background blobs, lateral flip, channel planning,
    real-scan remapping or label rendering, per-channel corruption and finally
    masking the label map with the aggregate brain mask.
    """
    lm, images = session.conformed(config.grid)
    order = config.policy.get("transform_order", "warp_then_affine")

    rng = make_rng(seed, 0)
    aff = sample_affine(rng, config)
    matrix = affine_matrix(aff, center=grid_center(lm))
    warp, warp_params = sample_warp(rng, lm.shape, config)
    t = SpatialTransform(matrix, warp if warp_params["warp_displacement"] > 0 else None)
    images, lm = apply_transform(images, lm, t, order)

    blob_params = sample_blobs(rng, config)
    lm = blobs_from_params(lm, blob_params)
    flipped = config["left_right_flipping"].fires(rng)
    if flipped:
        images, lm = mirror_lateral(images, lm)

    plan, plan_trace = plan_channels(make_rng(seed, 1), len(images), config)

    channels, masks, channel_traces = [], [], []
    for i in range(plan.n):
        crng = make_rng(seed, 2, i)
        if i < plan.n_real:
            src = plan.sources[i]
            remap = sample_remap(crng, config)
            image = remap_from_params(images[src], remap)
            record = {"kind": "real", "source": src, "remap": remap}
        else:
            means = sample_label_means(crng, lm, config)
            image = render_labels(lm, means)
            record = {"kind": "synth", "label_intensity_mean": {str(k): v for k, v in means.items()}}
        image, mask, ctrace = corrupt_channel(image, lm, crng, config)
        record["corruption"] = ctrace
        channels.append(image)
        masks.append(mask)
        channel_traces.append(record)

    lm = mask_labels(lm, aggregate_mask(masks))
    if not config.policy.get("keep_transients", False):
        lm = lm.strip_transients()

    trace = {
        "spatial": {
            "affine": aff.to_dict(),
            "transform_order": order,
            "warp": warp_params,
            "blobs": blob_params,
            "flip": {"fired": flipped},
        },
        "plan": plan_trace,
        "channels": channel_traces,
        "provenance": {"session": session.session_id, "seed": int(seed), "config_hash": config.hash()},
    }
    return TrainingSample(channels, lm, trace, session.session_id, int(seed))


# --------------------------------------------------------------------------
# non-brain labels
# --------------------------------------------------------------------------

class GaussianMixture1D:
    """EM fit of a 1-D Gaussian mixture with quantile initialization and restarts."""

    def __init__(self, k: int, tol: float = 1e-6, max_iter: int = 500, restarts: int = 3, seed: int = 0):
        self.k = k
        self.tol = tol
        self.max_iter = max_iter
        self.restarts = restarts
        self.seed = seed

    def _log_joint(self, x, means, variances, weights):
        return (
            np.log(weights)[None]
            - 0.5 * np.log(2 * np.pi * variances)[None]
            - 0.5 * (x[:, None] - means[None]) ** 2 / variances[None]
        )

    def _run(self, x, levels, floor):
        k = self.k
        means = np.quantile(x, levels)
        variances = np.full(k, max(x.var() / k, floor))
        weights = np.full(k, 1.0 / k)
        history = []
        for _ in range(self.max_iter):
            lj = self._log_joint(x, means, variances, weights)
            top = lj.max(axis=1, keepdims=True)
            norm = top[:, 0] + np.log(np.exp(lj - top).sum(axis=1))
            history.append(float(norm.sum()))
            if len(history) > 1 and abs(history[-1] - history[-2]) <= self.tol * abs(history[-2]):
                break
            resp = np.exp(lj - norm[:, None])
            nk = resp.sum(axis=0) + 1e-300
            weights = np.maximum(nk / x.size, 1e-300)
            means = (resp * x[:, None]).sum(axis=0) / nk
            variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, floor)
        return means, variances, weights, history

    def fit(self, x) -> "GaussianMixture1D":
        x = np.asarray(x, dtype=np.float64).ravel()
        floor = max(1e-6 * x.var(), 1e-12)
        rng = np.random.default_rng(self.seed)
        best = None
        for r in range(self.restarts):
            levels = (np.arange(self.k) + 0.5) / self.k
            if r > 0:
                levels = np.sort(np.clip(levels + rng.uniform(-0.5, 0.5, self.k) / self.k, 0, 1))
            result = self._run(x, levels, floor)
            if best is None or result[3][-1] > best[3][-1]:
                best = result
        self.means_, self.variances_, self.weights_, self.log_likelihoods_ = best
        return self

    def predict(self, x) -> np.ndarray:
        """Component index per sample, components ranked by ascending mean."""
        x = np.asarray(x, dtype=np.float64).ravel()
        comp = self._log_joint(x, self.means_, self.variances_, self.weights_).argmax(axis=1)
        rank = np.empty(self.k, dtype=int)
        rank[np.argsort(self.means_, kind="stable")] = np.arange(self.k)
        return rank[comp]


def fit_nonbrain_gmm(image: Volume, lm: LabelMap, k: int = 6, seed: int = 0) -> LabelMap:
    """Label non-zero voxels outside the brain by a k-component intensity GMM.

    Brain voxels keep their IDs. Selected voxels receive transient IDs
    NONBRAIN_BASE + 1 + rank of their most probable component by mean.
    """
    if not image.same_geometry(lm, atol=1e-4):
        raise ValueError("image and label map are not aligned")
    sel = (image.data != 0) & ~brain_mask(lm) & (lm.data < TRANSIENT_BASE)
    x = image.data[sel].astype(np.float64)
    if x.size == 0:
        raise ValueError("no non-zero voxels outside the brain")
    if x.size < k:
        warnings.warn(f"only {x.size} non-brain voxels; reducing GMM components from {k} to {x.size}")
        k = int(x.size)
    gmm = GaussianMixture1D(k, seed=seed).fit(x)
    data = lm.data.copy()
    data[sel] = NONBRAIN_BASE + 1 + gmm.predict(x)
    return lm.with_data(data)


# --------------------------------------------------------------------------
# dataset emission
# --------------------------------------------------------------------------

def sample_seed(master_seed: int, index: int) -> int:
    state = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)).generate_state(1, np.uint64)
    return int(state[0] & np.uint64(2**63 - 1))


def choose_session(seed: int, n_sessions: int, weights=None) -> int:
    p = None
    if weights is not None:
        p = np.asarray(weights, dtype=np.float64)
        p = p / p.sum()
    return int(make_rng(seed, 9).choice(n_sessions, p=p))


def write_sample(sample: TrainingSample, sample_dir: Path) -> dict:
    """Write channels, label map and trace; return the file -> checksum map."""
    sample_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, ch in enumerate(sample.channels):
        name = f"image_{i}.nii.gz"
        io.write_volume(ch, sample_dir / name)
        files[name] = io.sha256_file(sample_dir / name)
    io.write_volume(sample.label_map, sample_dir / "labels.nii.gz")
    files["labels.nii.gz"] = io.sha256_file(sample_dir / "labels.nii.gz")
    io.write_trace(sample.trace, sample_dir / "trace.json")
    files["trace.json"] = io.sha256_file(sample_dir / "trace.json")
    return files


def _emit_one(args) -> dict:
    index, sessions, config, out_dir = args
    seed = sample_seed(config.seed, index)
    which = choose_session(seed, len(sessions), config.policy.get("session_weights"))
    sample = generate_sample(sessions[which], config, seed)
    name = f"sample_{index:06d}"
    files = write_sample(sample, Path(out_dir) / name)
    return {
        "index": index,
        "dir": name,
        "seed": seed,
        "session": sample.session_id,
        "n_channels": sample.n,
        "config_hash": config.hash(),
        "files": files,
    }


def record_is_valid(record: dict, out_dir) -> bool:
    base = Path(out_dir) / record["dir"]
    for name, digest in record.get("files", {}).items():
        path = base / name
        if not path.exists() or io.sha256_file(path) != digest:
            return False
    return True


def emit_dataset(sessions, config: EngineConfig, count: int, out_dir, jobs: int = 1) -> Path:
    """Write ``count`` samples plus a JSON-lines manifest; resumes from an existing manifest.

    Sample ``i`` draws its seed from (config seed, i) only, so output does not
    depend on ``jobs`` or scheduling. Existing samples whose checksums match
    the manifest are kept as they are.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    sessions = list(sessions)
    if count > 0 and not sessions:
        raise ValueError("no sessions to sample from")

    done = {}
    if manifest.exists():
        for record in io.read_manifest(manifest):
            if record.get("config_hash") == config.hash() and record["index"] < count and record_is_valid(record, out_dir):
                done[record["index"]] = record
    todo = [i for i in range(count) if i not in done]
    log.info("emitting %d samples (%d already valid)", len(todo), len(done))

    tasks = [(i, sessions, config, str(out_dir)) for i in todo]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_emit_one, tasks))
    else:
        results = [_emit_one(t) for t in tasks]
    for record in results:
        done[record["index"]] = record

    io.write_manifest([done[i] for i in sorted(done)], manifest)
    return manifest


def validate_sample(sample_dir, record: dict | None = None) -> list[str]:
    """Problems found in a written sample (empty list when valid)."""
    sample_dir = Path(sample_dir)
    problems = []
    if record is not None and not record_is_valid(record, sample_dir.parent):
        problems.append("checksum mismatch")
    try:
        lm = io.read_volume(sample_dir / "labels.nii.gz", as_labels=True)
    except ValueError as exc:  # reader rejects IDs outside the sidecar protocol
        return problems + [f"labels: {exc}"]
    protocol = lm.protocol or default_protocol()
    bad = set(np.unique(lm.data).tolist()) - set(protocol.ids)
    if bad:
        problems.append(f"non-protocol labels {sorted(bad)}")
    images = sorted(sample_dir.glob("image_*.nii.gz"))
    if not 1 <= len(images) <= 4:
        problems.append(f"{len(images)} channels")
    for path in images:
        img = io.read_volume(path)
        if not img.same_geometry(lm, atol=1e-6):
            problems.append(f"{path.name}: geometry differs from label map")
        if img.data.min() < 0 or img.data.max() > 1 or not np.isfinite(img.data).all():
            problems.append(f"{path.name}: intensities outside [0, 1]")
    if not (sample_dir / "trace.json").exists():
        problems.append("missing trace")
    return problems


def default_jobs() -> int:
    return os.cpu_count() or 1

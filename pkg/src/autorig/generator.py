"""Autoregressive inference: grow the skeleton token by token, then skin it.

The loop seeds a KV cache with the shape tokens plus the start token, then
alternates: draw a joint position by reverse diffusion conditioned on the
latest output, pick its parent from the connectivity head, and append the
new entry's token. Choosing "self" as parent is the stop signal. Every
random draw comes from a fixed substream of the seed, so results do not
depend on how many steps earlier shapes took.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import sample_joint
from .geometry import NormalizationTransform, SampledShape, TriMesh, normalize_shape, sample_surface
from .model import Model
from .nn import no_grad
from .skeleton import InvalidSkeletonError, Skeleton, validate_skeleton

PARENT_MODES = ("argmax", "sample")


@dataclass(frozen=True)
class GenerateConfig:
    max_joints: int | None = None      # default: the model's limit
    diffusion_steps: int | None = None  # default: the model's inference step count
    parent_mode: str = "argmax"
    temperature: float = 1.0

    def __post_init__(self):
        if self.parent_mode not in PARENT_MODES:
            raise ValueError(f"parent_mode must be one of {PARENT_MODES}")
        if self.parent_mode == "sample" and not self.temperature > 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class StepTrace:
    step: int                      # 1-based joint index being generated
    parent_probs: np.ndarray       # over candidates 1..step (last is self)
    choice: int                    # selected candidate, 1-based
    accepted: bool                 # False only for the stop step
    seconds: float
    diffusion_seconds: float


@dataclass
class RigResult:
    skeleton: Skeleton             # in the input mesh's units
    point_weights: np.ndarray      # (L, K) rows over generated joints
    shape: SampledShape            # normalized surface samples used as input
    transform: NormalizationTransform
    trace: list = field(default_factory=list)
    truncated: bool = False
    seconds: float = 0.0

    def __post_init__(self):
        report = validate_skeleton(self.skeleton, max_joints=len(self.skeleton))
        if not report.ok:
            raise InvalidSkeletonError(report)
        self.point_weights = np.asarray(self.point_weights, dtype=np.float64)
        if self.point_weights.shape != (len(self.shape), len(self.skeleton)):
            raise ValueError(f"point weights {self.point_weights.shape} do not match "
                             f"(L={len(self.shape)}, K={len(self.skeleton)})")
        if np.abs(self.point_weights.sum(axis=1) - 1.0).max() > 1e-4:
            raise ValueError("skinning rows must sum to 1")

    @property
    def normalized_joints(self) -> np.ndarray:
        return self.transform.apply(self.skeleton.joints)


def select_parent(probabilities, mode: str = "argmax", temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> int:
    """Pick a candidate from a parent distribution; returns a 1-based index.

    argmax resolves ties toward the lowest index; sample draws from the
    distribution sharpened by 1/temperature.
    """
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.min() < -1e-9 or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError("probabilities must be non-negative and sum to 1")
    if mode == "argmax":
        return int(np.argmax(p)) + 1
    if mode != "sample":
        raise ValueError(f"parent_mode must be one of {PARENT_MODES}")
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    if rng is None:
        raise ValueError("sampling mode needs a random generator")
    logq = np.log(np.maximum(p, 1e-300)) / temperature
    q = np.exp(logq - logq.max())
    q /= q.sum()
    return int(rng.choice(p.size, p=q)) + 1


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), step])


def rig(model: Model, mesh: TriMesh, seed: int = 0,
        cfg: GenerateConfig = GenerateConfig(),
        joint_override: np.ndarray | None = None) -> RigResult:
    """Generate a skeleton and point skinning for one mesh.

    joint_override replaces the sampled joint position at step k with row
    k-1 (normalized units) while it has rows; used to replay a generation.
    Reaching max_joints without a stop sets the truncated flag.
    """
    t_total = time.perf_counter()
    limit = cfg.max_joints if cfg.max_joints is not None else model.config.max_joints
    if not 1 <= limit <= model.config.max_joints:
        raise ValueError(f"max_joints must lie in 1..{model.config.max_joints}")
    steps = cfg.diffusion_steps if cfg.diffusion_steps is not None \
        else model.config.inference_steps

    normed, transform = normalize_shape(mesh)
    shape = sample_surface(normed, model.config.num_points, _step_rng(seed, 0))
    cache, ctx = model.init_cache(shape)
    shape_out = ctx.shape_outputs[0]

    latest = np.array(ctx.latest.data[0])
    positions: list[np.ndarray] = []
    parents: list[int] = []
    outputs: list[np.ndarray] = []
    tokens: list[np.ndarray] = []
    trace: list[StepTrace] = []
    truncated = True

    with no_grad():
        for k in range(1, limit + 1):
            t_step = time.perf_counter()
            step_rng = _step_rng(seed, k)
            if joint_override is not None and k <= len(joint_override):
                j = np.asarray(joint_override[k - 1], dtype=np.float64).reshape(3)
                t_diff = 0.0
            else:
                t0 = time.perf_counter()
                j = sample_joint(model.denoiser, model.schedule, latest,
                                 step_rng, steps=steps)
                t_diff = time.perf_counter() - t0

            z = model.fuse(latest, j, k)
            self_tok = model.tokenize_skeleton_entry(j, k, j, k)
            if k > 1:
                if model.config.contextual_head_tokens:
                    cands = np.stack(outputs)
                else:
                    cands = np.stack(tokens)
            else:
                cands = None
            probs = model.connect_probabilities(z, cands, self_tok)
            choice = select_parent(probs, cfg.parent_mode, cfg.temperature, step_rng)
            stop = choice == k and k >= 2
            trace.append(StepTrace(k, probs, choice, not stop,
                                   time.perf_counter() - t_step, t_diff))
            if stop:
                truncated = False
                break
            if k == 1:
                parent_pos, parent_idx, parent_entry = j, 1, 0
            else:
                parent_pos, parent_idx, parent_entry = positions[choice - 1], choice, choice - 1
            token = model.tokenize_skeleton_entry(j, k, parent_pos, parent_idx)
            out, cache = model.kv_step(cache, token)
            positions.append(j)
            parents.append(parent_entry)
            outputs.append(out)
            tokens.append(np.array(token.data))
            latest = out

        reps = np.stack(outputs) if model.config.contextual_head_tokens else np.stack(tokens)
        weights = model.skinning_weights(shape_out, model._cast(reps)).data.astype(np.float64)

    skeleton = Skeleton(transform.invert(np.array(positions)),
                        np.array(parents, dtype=np.int64))
    return RigResult(skeleton, weights, shape, transform, trace, truncated,
                     time.perf_counter() - t_total)


@dataclass
class BatchResult:
    results: list                  # RigResult or None per input mesh
    failures: list                 # (index, message) pairs
    seconds: list                  # per-mesh wall-clock
    total_seconds: float

    @property
    def ok(self) -> bool:
        return not self.failures


def rig_batch(model: Model, meshes, seed: int = 0,
              cfg: GenerateConfig = GenerateConfig()) -> BatchResult:
    """rig() over a list of meshes with the same seed; failures are isolated.

    Each mesh is processed independently and deterministically, so permuting
    the inputs permutes the outputs.
    """
    results: list = []
    failures: list = []
    seconds: list = []
    t0 = time.perf_counter()
    for i, mesh in enumerate(meshes):
        t_mesh = time.perf_counter()
        try:
            results.append(rig(model, mesh, seed, cfg))
        except Exception as exc:  # noqa: BLE001 - isolation is the contract
            results.append(None)
            failures.append((i, f"{type(exc).__name__}: {exc}"))
        seconds.append(time.perf_counter() - t_mesh)
    return BatchResult(results, failures, seconds, time.perf_counter() - t0)


def rig_to_asset(result: RigResult, mesh: TriMesh, category: str | None = None):
    """Export a generation as a rig asset in the input mesh's units.

    Vertex skinning is copied from each vertex's nearest surface sample,
    then capped to the top influences per vertex.
    """
    from .dataset import RigAsset

    normed_verts = result.transform.apply(mesh.vertices)
    samples = result.shape.points
    dense = np.empty((len(normed_verts), result.point_weights.shape[1]))
    chunk = 4096
    for start in range(0, len(normed_verts), chunk):
        block = normed_verts[start:start + chunk]
        d2 = ((block[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
        dense[start:start + chunk] = result.point_weights[np.argmin(d2, axis=1)]
    return RigAsset.from_dense(mesh, result.skeleton, dense, category=category)

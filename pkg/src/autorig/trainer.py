"""Teacher-forced training: the three losses from one masked forward pass.

One batch runs the transformer once over [shape tokens, BOS, entry tokens];
causality in the attention mask makes the output at token t-1 a legal
condition for predicting step t, so every step of every example is scored
in parallel. Variable-length sequences are zero-padded and padded slots are
excluded from each loss by explicit masks.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    SampledShape,
    normalize_shape,
    random_pose_augment,
    sample_surface_detailed,
)
from .diffusion import noise_prediction_loss
from .model import Model, ModelConfig
from .nn import Tensor, no_grad
from .nn.layers import masked_softmax
from .nn.optim import Adam, clip_global_norm
from .nn.tensor import concatenate
from .skeleton import JointSequence, Skeleton, append_terminal, bfs_serialize

LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 20000
    p_aug: float = 0.5
    max_angle_deg: float = 45.0
    seed: int = 0
    grad_clip: float = 1.0
    shuffle_siblings: bool = True
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "warmup_steps", "total_steps",
                     "grad_clip", "checkpoint_every", "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.p_aug <= 1.0:
            raise ValueError("p_aug must lie in [0, 1]")
        if not 0.0 <= self.max_angle_deg <= 180.0:
            raise ValueError("max_angle_deg must lie in [0, 180]")


@dataclass
class TrainingExample:
    shape: SampledShape
    sequence: JointSequence
    point_weights: np.ndarray  # (L, K) over sequence-ordered joints

    def __post_init__(self):
        self.point_weights = np.asarray(self.point_weights, dtype=np.float64)
        k = self.sequence.num_joints
        if self.point_weights.shape != (len(self.shape), k):
            raise ValueError(f"point weights {self.point_weights.shape} do not match "
                             f"(L={len(self.shape)}, K={k})")
        if np.abs(self.point_weights.sum(axis=1) - 1.0).max() > 1e-4:
            raise ValueError("point skinning rows must sum to 1")
        parents = self.sequence.parents
        if parents[0] != 0 or any(not 0 <= parents[i] <= i for i in range(1, len(parents))):
            raise ValueError("sequence parents must point backwards")


@dataclass
class LossBreakdown:
    joint: float
    connect: float
    skinning: float

    @property
    def total(self) -> float:
        return self.joint + self.connect + self.skinning


@dataclass
class LossDetails:
    """Detached per-step views of one forward pass, for tests and evaluation."""

    step_joint_losses: np.ndarray    # (N,) flattened over batch, step order
    connect_probs: np.ndarray        # (B, P, P) masked softmax output
    connect_targets: np.ndarray      # (B, P) target column per step, -1 padded
    step_mask: np.ndarray            # (B, P) valid steps
    skinning: list                   # per example (L, K) predicted weights


def barycentric_point_weights(dense_vertex_weights: np.ndarray, faces: np.ndarray,
                              face_idx: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Interpolate per-vertex weights to surface samples; rows stay stochastic."""
    tri = faces[face_idx]  # (L, 3) vertex ids
    w = (dense_vertex_weights[tri] * bary[..., None]).sum(axis=1)
    return w / w.sum(axis=1, keepdims=True)


def prepare_example(asset, rng: np.random.Generator, cfg: TrainConfig,
                    model_cfg: ModelConfig) -> TrainingExample:
    """normalize -> maybe pose-augment -> sample surface -> shuffled BFS -> targets."""
    mesh, transform = normalize_shape(asset.mesh)
    sk = Skeleton(transform.apply(asset.skeleton.joints), asset.skeleton.parents.copy())
    dense = asset.dense_weights()
    if rng.random() < cfg.p_aug:
        mesh, sk = random_pose_augment(mesh, sk, dense, cfg.max_angle_deg, rng)
    shape, face_idx, bary = sample_surface_detailed(mesh, model_cfg.num_points, rng)
    sibling = rng if cfg.shuffle_siblings else None
    seq = bfs_serialize(sk, sibling_rng=sibling, max_joints=model_cfg.max_joints)
    point_w = barycentric_point_weights(dense, mesh.faces, face_idx, bary)
    point_w = point_w[:, seq.source_indices]
    if seq.num_joints < model_cfg.max_joints:
        seq = append_terminal(seq)
    return TrainingExample(shape, seq, point_w)


def _flat_entry_fields(examples):
    """Concatenate the real-entry tokenizer inputs of every example."""
    joints, indices, parent_joints, parent_indices = [], [], [], []
    for ex in examples:
        seq = ex.sequence
        k = seq.num_joints
        joints.append(seq.positions[:k])
        indices.append(np.arange(1, k + 1))
        parent_joints.append(seq.positions[seq.parents[:k]])
        parent_indices.append(seq.parents[:k] + 1)
    return (np.concatenate(joints), np.concatenate(indices),
            np.concatenate(parent_joints), np.concatenate(parent_indices))


def _pad_gather(flat: Tensor, lengths, width: int) -> Tensor:
    """Scatter flat per-example rows into a zero-padded (B, width, d) tensor."""
    d = flat.shape[-1]
    zero = Tensor(np.zeros((1, d), dtype=flat.dtype))
    padded_src = concatenate([flat, zero], axis=0)
    n_flat = flat.shape[0]
    idx = np.full((len(lengths), width), n_flat, dtype=np.int64)
    offset = 0
    for b, n in enumerate(lengths):
        idx[b, :n] = offset + np.arange(n)
        offset += n
    return padded_src[idx]


def compute_losses(model: Model, examples, rng: np.random.Generator,
                   draws=None, want_details: bool = False):
    """Teacher-forced losses for a batch; returns (total Tensor, LossBreakdown, details).

    draws, when given, fixes the diffusion (step, noise) pairs: a pair of
    arrays (m (N,), eps (N, 3)) flattened over examples then steps.
    """
    cfg = model.config
    batch = len(examples)
    if batch == 0:
        raise ValueError("empty batch")
    seq_lens = [len(ex.sequence) for ex in examples]          # steps incl. terminal
    joint_counts = [ex.sequence.num_joints for ex in examples]
    k_max = max(joint_counts)
    p_steps = max(seq_lens)
    n_points = len(examples[0].shape)
    if any(len(ex.shape) != n_points for ex in examples):
        raise ValueError("examples disagree on point count")

    points = np.stack([ex.shape.points for ex in examples])
    normals = np.stack([ex.shape.normals for ex in examples])
    shape_tokens = model.tokenize_shape_batch(points, normals)

    flat_tokens = model.tokenize_skeleton_entries(*_flat_entry_fields(examples))
    entry_tokens = _pad_gather(flat_tokens, joint_counts, k_max)  # (B, K_max, d)
    bos = Tensor(np.zeros((batch, 1, model.config.d), dtype=model.store.dtype)) + model.bos_token()
    skel_input = concatenate([bos, entry_tokens], axis=1)          # (B, 1+K_max, d)

    ctx = model.forward_transformer(shape_tokens, skel_input)
    skel_out = ctx.skeleton_outputs                                # (B, 1+K_max, d)

    # diffusion: condition at token t-1 predicts the position of step t
    b_idx = np.concatenate([np.full(n, b) for b, n in enumerate(seq_lens)])
    t_idx = np.concatenate([np.arange(n) for n in seq_lens])       # token index t-1
    cond_flat = skel_out[b_idx, t_idx]                             # (N, d)
    target_flat = np.concatenate([ex.sequence.positions for ex in examples])
    m_fixed, eps_fixed = draws if draws is not None else (None, None)
    step_losses = noise_prediction_loss(model.denoiser, model.schedule, cond_flat,
                                        target_flat, rng, m=m_fixed, eps=eps_fixed)
    n_steps_total = step_losses.shape[0]
    loss_joint = step_losses.sum() / n_steps_total

    # connectivity: fused queries against candidate tokens, BCE on probabilities
    step_indices = t_idx + 1
    z_prime_flat = model.fuse(cond_flat, target_flat, step_indices)
    z_prime = _pad_gather(z_prime_flat, seq_lens, p_steps)         # (B, P, d)
    self_flat = model.tokenize_skeleton_entries(target_flat, step_indices,
                                                target_flat, step_indices)
    self_tokens = _pad_gather(self_flat, seq_lens, p_steps)

    if cfg.contextual_head_tokens:
        joint_reps = skel_out[:, 1:, :]                            # output at entry k
    else:
        joint_reps = entry_tokens
    if p_steps > k_max:
        pad = Tensor(np.zeros((batch, p_steps - k_max, model.config.d),
                              dtype=model.store.dtype))
        cand_reps = concatenate([joint_reps, pad], axis=1)
    else:
        cand_reps = joint_reps[:, :p_steps, :]

    grid = model.connect_logit_grid(z_prime, cand_reps, self_tokens)  # (B, P, P)
    allow = np.zeros((batch, p_steps, p_steps), dtype=bool)
    targets = np.full((batch, p_steps), -1, dtype=np.int64)
    for b, ex in enumerate(examples):
        seq = ex.sequence
        kb = joint_counts[b]
        for p in range(seq_lens[b]):
            allow[b, p, :min(p, kb)] = True
            allow[b, p, p] = True
            q = int(seq.parents[p])
            targets[b, p] = p if q == p else q
    probs = masked_softmax(grid, allow, axis=-1)
    y = np.zeros((batch, p_steps, p_steps), dtype=model.store.dtype)
    rows_b, rows_p = np.nonzero(targets >= 0)
    y[rows_b, rows_p, targets[rows_b, rows_p]] = 1.0
    mask = Tensor(allow.astype(model.store.dtype))
    y_t = Tensor(y)
    p_clip = probs.clip(LOG_EPS, 1.0 - LOG_EPS)
    bce = (y_t * p_clip.log() + (Tensor(np.ones_like(y)) - y_t)
           * (Tensor(np.ones_like(y)) - p_clip).log()) * mask
    loss_connect = -(bce.sum()) / n_steps_total

    # skinning: cross-entropy of predicted point weights against targets
    joint_mask = np.zeros((batch, k_max), dtype=bool)
    gt_w = np.zeros((batch, n_points, k_max), dtype=model.store.dtype)
    for b, ex in enumerate(examples):
        joint_mask[b, :joint_counts[b]] = True
        gt_w[b, :, :joint_counts[b]] = ex.point_weights
    pred_w = model.skinning_weights(ctx.shape_outputs, joint_reps, joint_mask)
    ce = -(Tensor(gt_w) * pred_w.clip(LOG_EPS, 1.0).log()).sum(axis=-1)
    loss_skin = ce.sum() / (batch * n_points)

    total = loss_joint + loss_connect + loss_skin
    breakdown = LossBreakdown(float(loss_joint.data), float(loss_connect.data),
                              float(loss_skin.data))
    details = None
    if want_details:
        details = LossDetails(
            step_joint_losses=np.array(step_losses.data, dtype=np.float64),
            connect_probs=np.array(probs.data, dtype=np.float64),
            connect_targets=targets,
            step_mask=np.arange(p_steps)[None, :] < np.array(seq_lens)[:, None],
            skinning=[np.array(pred_w.data[b, :, :joint_counts[b]], dtype=np.float64)
                      for b in range(batch)],
        )
    return total, breakdown, details


def training_step(model: Model, examples, optimizer: Adam, lr: float,
                  rng: np.random.Generator, grad_clip: float = 1.0) -> LossBreakdown:
    """One optimizer update; aborts on a non-finite loss."""
    model.store.zero_grad()
    total, breakdown, _ = compute_losses(model, examples, rng)
    if not np.isfinite(breakdown.total):
        raise RuntimeError(
            f"non-finite loss: joint={breakdown.joint} connect={breakdown.connect} "
            f"skinning={breakdown.skinning}")
    total.backward()
    clip_global_norm(model.store, grad_clip)
    optimizer.step(lr)
    return breakdown


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp over warmup_steps, constant afterwards; step is 1-based."""
    return base_lr * min(1.0, step / max(warmup_steps, 1))


CSV_HEADER = ["step", "L_joint", "L_connect", "L_skinning", "total"]


def fit(model: Model, assets, cfg: TrainConfig, checkpoint_path=None,
        csv_path=None, callback=None) -> list:
    """Train on a list of rig assets; returns [(step, LossBreakdown), ...].

    Deterministic for a fixed seed in single-threaded execution. Assets with
    degenerate geometry are skipped and reported once. callback(step, loss)
    may return True to stop early.
    """
    if not assets:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.store)
    history = []
    skipped: set[int] = set()
    writer = None
    csv_file = None
    if csv_path is not None:
        csv_file = open(csv_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_file)
        writer.writerow(CSV_HEADER)
    try:
        for step in range(1, cfg.total_steps + 1):
            examples = []
            while len(examples) < cfg.batch_size:
                pick = int(rng.integers(0, len(assets)))
                try:
                    examples.append(prepare_example(assets[pick], rng, cfg, model.config))
                except DegenerateGeometryError as exc:
                    if pick not in skipped:
                        skipped.add(pick)
                        print(f"skipping degenerate asset {pick}: {exc}")
                    if len(skipped) == len(assets):
                        raise ValueError("every asset is degenerate") from exc
            loss = training_step(model, examples, optimizer,
                                 warmup_lr(cfg.learning_rate, step, cfg.warmup_steps),
                                 rng, cfg.grad_clip)
            if step % cfg.log_every == 0 or step == 1 or step == cfg.total_steps:
                history.append((step, loss))
                if writer is not None:
                    writer.writerow([step, f"{loss.joint:.6f}", f"{loss.connect:.6f}",
                                     f"{loss.skinning:.6f}", f"{loss.total:.6f}"])
                    csv_file.flush()
            if checkpoint_path is not None and step % cfg.checkpoint_every == 0:
                model.save(checkpoint_path)
            if callback is not None and callback(step, loss):
                break
    finally:
        if csv_file is not None:
            csv_file.close()
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return history


def teacher_forced_scores(model: Model, examples) -> tuple[float, float]:
    """(parent accuracy, mean skinning L1) under teacher forcing, no updates."""
    with no_grad():
        _, _, details = compute_losses(model, examples, np.random.default_rng(0),
                                       want_details=True)
    hits, total = 0, 0
    for b in range(len(examples)):
        for p in np.nonzero(details.step_mask[b])[0]:
            total += 1
            if int(np.argmax(details.connect_probs[b, p])) == details.connect_targets[b, p]:
                hits += 1
    l1s = [float(np.abs(w - ex.point_weights).sum(axis=1).mean())
           for w, ex in zip(details.skinning, examples)]
    return hits / total, float(np.mean(l1s))


def connect_bce(probabilities, target_one_hot) -> float:
    """Reference per-step connectivity loss: sum of per-candidate BCE terms."""
    q = np.clip(np.asarray(probabilities, dtype=np.float64), LOG_EPS, 1.0 - LOG_EPS)
    y = np.asarray(target_one_hot, dtype=np.float64)
    return float(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).sum())

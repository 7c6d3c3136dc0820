"""End-to-end acceptance gate: ten checks, one printed verdict line each.

Each test exercises a contract the package must honor (mask causality,
cache equivalence, analytic gradients, diffusion sanity, loss identities,
metric oracles, geometry identities, desk-scale overfit, generation
throughput, filter conformance) and prints a single line

    criterion NN <name> ... PASS (measured ...)

so the suite's stdout doubles as an acceptance report. Tolerances are
asserted, never just printed. Run with `pytest -s tests/test_acceptance.py`
to see the report lines; the two training-based checks (04, 08) dominate
the runtime.
"""

import itertools
import json
import os
import subprocess
import sys
import time

import numpy as np

from autorig.dataset import (FilterRules, RigAsset, filter_assets,
                             synth_generate, SynthParams)
from autorig.diffusion import (cosine_schedule, Denoiser, DenoiserConfig,
                               forward_noise, noise_prediction_loss,
                               sample_joint)
from autorig.generator import rig
from autorig.geometry import (forward_kinematics, lbs_deform, normalize_shape,
                              Pose, random_pose_augment, SampledShape, TriMesh)
from autorig.metrics import (chamfer_j2j, connectivity_accuracy, edit_distance,
                             match_joints, skeleton_report, skinning_metrics)
from autorig.model import Model, ModelConfig
from autorig.nn.layers import ParamStore
from autorig.nn.optim import Adam
from autorig.nn.tensor import concatenate, no_grad, Tensor
from autorig.skeleton import append_terminal, bfs_serialize, Skeleton
from autorig.trainer import (compute_losses, connect_bce, fit, prepare_example,
                             teacher_forced_scores, TrainConfig,
                             TrainingExample)


def _verdict(num: int, name: str, detail: str) -> None:
    print(f"criterion {num:02d} {name} ... PASS ({detail})")


def _unit_rows(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_shape(rng, n):
    return SampledShape(rng.uniform(-0.5, 0.5, (n, 3)), _unit_rows(rng, n))


def _random_tree(rng, k, spread=1.0):
    joints = rng.uniform(-spread, spread, (k, 3))
    parents = [0] + [int(rng.integers(0, i)) for i in range(1, k)]
    return Skeleton(joints, parents)


# ---------------------------------------------------------------------------
# 01: hybrid mask causality
# ---------------------------------------------------------------------------

def test_01_mask_causality():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=64, layers=2, heads=4, mlp_hidden=128, num_points=32,
                      max_joints=16, shape_tokenizer_hidden=(32, 64),
                      head_hidden=64, fusing_hidden=(128, 64),
                      denoiser_hidden=64, denoiser_depth=1, time_embed_dim=32)
    model = Model.create(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    L, k, d = 32, 8, 64
    shape_tokens = Tensor(rng.standard_normal((1, L, d)).astype(np.float32))
    skel_base = rng.standard_normal((1, k, d)).astype(np.float32)

    with no_grad():
        base = model.forward_transformer(shape_tokens, Tensor(skel_base.copy()))
    base_shape = base.shape_outputs.data.copy()
    base_skel = base.skeleton_outputs.data.copy()

    worst_shape = 0.0
    worst_prefix = 0.0
    for t in range(k):
        bumped = skel_base.copy()
        bumped[0, t] += rng.standard_normal(d).astype(np.float32)
        with no_grad():
            out = model.forward_transformer(shape_tokens, Tensor(bumped))
        worst_shape = max(worst_shape, float(
            np.abs(out.shape_outputs.data - base_shape).max()))
        if t > 0:
            worst_prefix = max(worst_prefix, float(
                np.abs(out.skeleton_outputs.data[:, :t] - base_skel[:, :t]).max()))
        # the perturbed position itself must react, or the check is vacuous
        assert np.abs(out.skeleton_outputs.data[:, t] - base_skel[:, t]).max() > 1e-4

    elapsed = time.perf_counter() - t0
    assert worst_shape <= 1e-6
    assert worst_prefix <= 1e-6
    assert elapsed < 60.0
    _verdict(1, "mask causality",
             f"max shape leak {worst_shape:.2e}, max prefix leak {worst_prefix:.2e}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 02: incremental decoding matches full recomputation
# ---------------------------------------------------------------------------

def test_02_kv_cache_equivalence():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=64, layers=2, heads=4, mlp_hidden=128, num_points=48,
                      max_joints=20, shape_tokenizer_hidden=(32, 64),
                      head_hidden=64, fusing_hidden=(128, 64),
                      denoiser_hidden=64, denoiser_depth=1, time_embed_dim=32)
    model = Model.create(cfg, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    mesh_shape = _random_shape(rng, cfg.num_points)
    n_steps = 16
    joints = rng.uniform(-0.8, 0.8, (n_steps, 3))

    # incremental pass, mirroring the generation loop but never stopping
    cache, ctx = model.init_cache(mesh_shape)
    shape_out = ctx.shape_outputs[0]
    latest = np.array(ctx.latest.data[0])
    outputs = []
    inc_probs, inc_parents = [], []
    parent_pos_hist, parent_idx_hist = [], []
    for k in range(1, n_steps + 1):
        j = joints[k - 1]
        z = model.fuse(latest, j, k)
        self_tok = model.tokenize_skeleton_entry(j, k, j, k)
        cands = np.stack(outputs) if k > 1 else None
        probs = model.connect_probabilities(z, cands, self_tok)
        inc_probs.append(probs)
        inc_parents.append(int(np.argmax(probs)) + 1)
        if k == 1:
            parent_pos, parent_idx = j, 1
        else:
            choice = int(np.argmax(probs[:k - 1])) + 1
            parent_pos, parent_idx = joints[choice - 1], choice
        parent_pos_hist.append(parent_pos)
        parent_idx_hist.append(parent_idx)
        token = model.tokenize_skeleton_entry(j, k, parent_pos, parent_idx)
        latest, cache = model.kv_step(cache, token)
        outputs.append(latest)
    inc_weights = model.skinning_weights(shape_out, np.stack(outputs))

    # full recomputation per step from the raw token sequence
    shape_tok = model.tokenize_shape(mesh_shape)[None]
    bos = model.bos_token().reshape(1, 1, -1)
    worst = 0.0
    for k in range(1, n_steps + 1):
        if k == 1:
            skel_in = bos
        else:
            prior = model.tokenize_skeleton_entries(
                joints[:k - 1], np.arange(1, k), np.stack(parent_pos_hist[:k - 1]),
                parent_idx_hist[:k - 1])
            skel_in = concatenate([bos, prior.reshape(1, k - 1, -1)], axis=-2)
        with no_grad():
            full = model.forward_transformer(Tensor(shape_tok.data), skel_in)
        j = joints[k - 1]
        z = model.fuse(np.array(full.latest.data[0]), j, k)
        self_tok = model.tokenize_skeleton_entry(j, k, j, k)
        cands = full.skeleton_outputs.data[0, 1:k] if k > 1 else None
        probs = model.connect_probabilities(z, cands, self_tok)
        worst = max(worst, float(np.abs(probs - inc_probs[k - 1]).max()))
        assert int(np.argmax(probs)) + 1 == inc_parents[k - 1]

    full_entries = model.tokenize_skeleton_entries(
        joints, np.arange(1, n_steps + 1), np.stack(parent_pos_hist),
        parent_idx_hist)
    skel_in = concatenate([bos, full_entries.reshape(1, n_steps, -1)], axis=-2)
    with no_grad():
        full = model.forward_transformer(Tensor(shape_tok.data), skel_in)
    full_weights = model.skinning_weights(
        full.shape_outputs[0], full.skeleton_outputs[0, 1:])
    w_err = float(np.abs(inc_weights.data - full_weights.data).max())
    out_err = float(np.abs(np.stack(outputs)
                           - full.skeleton_outputs.data[0, 1:]).max())

    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5
    assert out_err <= 1e-5
    assert w_err <= 1e-5
    assert elapsed < 60.0
    _verdict(2, "kv-cache equivalence",
             f"16 steps, max prob gap {worst:.2e}, max output gap {out_err:.2e}, "
             f"max weight gap {w_err:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 03: finite-difference gradient check over every trainable block
# ---------------------------------------------------------------------------

def _grad_example(rng, model_cfg, k):
    sk = _random_tree(rng, k, spread=0.4)
    seq = append_terminal(bfs_serialize(sk, max_joints=model_cfg.max_joints))
    shape = _random_shape(rng, model_cfg.num_points)
    w = rng.uniform(0.1, 1.0, (model_cfg.num_points, k))
    w /= w.sum(axis=1, keepdims=True)
    return TrainingExample(shape, seq, w)


def test_03_gradient_check():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=16, layers=1, heads=2, mlp_hidden=24, num_points=8,
                      max_joints=6, shape_tokenizer_hidden=(12, 16),
                      head_hidden=16, fusing_hidden=(24, 16),
                      denoiser_hidden=16, denoiser_depth=1, time_embed_dim=8)
    model = Model.create(cfg, np.random.default_rng(31), dtype=np.float64)
    rng = np.random.default_rng(32)
    examples = [_grad_example(rng, cfg, 3), _grad_example(rng, cfg, 2)]
    n_total = sum(len(ex.sequence) for ex in examples)
    m_draw = rng.integers(1, model.schedule.num_train_steps + 1, n_total)
    eps_draw = rng.standard_normal((n_total, 3))
    draws = (m_draw, eps_draw)

    def loss_value():
        total, _, _ = compute_losses(model, examples, np.random.default_rng(0),
                                     draws=draws)
        return total

    loss = loss_value()
    model.store.zero_grad()
    loss.backward()
    analytic = {name: np.array(p.grad, dtype=np.float64)
                for name, p in model.store.items()}

    eps = 1e-5
    pick = np.random.default_rng(33)
    block_err: dict = {}
    for name, p in model.store.items():
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(4, flat.size), replace=False)
        a_flat = analytic[name].reshape(-1)
        scale = max(float(np.abs(analytic[name]).max()), 1e-8)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            with no_grad():
                up = float(loss_value().data)
            flat[i] = keep - eps
            with no_grad():
                down = float(loss_value().data)
            flat[i] = keep
            numeric = (up - down) / (2 * eps)
            denom = max(scale, abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        block = name.split(".")[0]
        block_err[block] = max(block_err.get(block, 0.0), worst)

    required = {"shape_tok", "joint_mlp", "skel_tok", "pos_table", "bos",
                "blk0", "final_ln", "fuse", "connect", "skin", "denoiser"}
    missing = required - set(block_err)
    assert not missing, f"blocks without parameters checked: {sorted(missing)}"
    bad = {b: e for b, e in block_err.items() if e > 1e-4}
    elapsed = time.perf_counter() - t0
    assert not bad, f"gradient mismatch in blocks: {bad}"
    assert elapsed < 300.0
    worst_block = max(block_err, key=block_err.get)
    _verdict(3, "gradient check",
             f"{len(block_err)} blocks, worst rel err {block_err[worst_block]:.2e} "
             f"({worst_block}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 04: diffusion schedule sanity and a learnable point-mass target
# ---------------------------------------------------------------------------

def test_04_diffusion_sanity():
    t0 = time.perf_counter()
    sched = cosine_schedule(1000)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[-1] < 1e-3

    # forward noise from a fixed point: Var[x_m] = 1 - abar_m per axis
    var_rng = np.random.default_rng(41)
    n = 100_000
    j0 = np.zeros((n, 3))
    for m in (1, 500, 1000):
        eps = var_rng.standard_normal((n, 3))
        noisy = forward_noise(sched, j0, np.full(n, m), eps)
        want = 1.0 - sched.alpha_bar[m]
        got = float(noisy.var())
        assert abs(got - want) <= 0.02 * want, (m, got, want)

    # a tiny denoiser must learn to put all mass on one fixed point
    rng = np.random.default_rng(40)
    store = ParamStore(dtype=np.float32)
    dcfg = DenoiserConfig(cond_dim=8, hidden=64, depth=2, time_dim=16)
    den = Denoiser.create(store, rng, "pm", dcfg)
    target = np.array([0.25, -0.1, 0.4])
    c0 = rng.standard_normal(8).astype(np.float32)
    batch = 256
    cond = np.repeat(c0[None], batch, axis=0)
    adam = Adam(store)
    for _ in range(3000):
        store.zero_grad()
        loss = noise_prediction_loss(den, sched, Tensor(cond),
                                     np.repeat(target[None], batch, 0),
                                     rng).sum() / batch
        loss.backward()
        adam.step(1e-3)

    samples = sample_joint(den, sched, np.repeat(c0[None], 1000, 0),
                           np.random.default_rng(41), steps=50)
    mean_err = float(np.linalg.norm(samples.mean(axis=0) - target))
    max_std = float(samples.std(axis=0).max())
    elapsed = time.perf_counter() - t0
    assert mean_err <= 0.03
    assert max_std <= 0.05
    assert elapsed < 600.0
    _verdict(4, "diffusion sanity",
             f"var within 2%, sample mean err {mean_err:.4f}, "
             f"std {max_std:.4f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 05: loss identities
# ---------------------------------------------------------------------------

def test_05_loss_identities():
    # uniform skinning prediction on a K-joint rig scores exactly ln K
    cfg = ModelConfig(d=16, layers=1, heads=2, mlp_hidden=24, num_points=8,
                      max_joints=6, shape_tokenizer_hidden=(12, 16),
                      head_hidden=16, fusing_hidden=(24, 16),
                      denoiser_hidden=16, denoiser_depth=1, time_embed_dim=8)
    model = Model.create(cfg, np.random.default_rng(51), dtype=np.float64)
    for name, p in model.store.items():
        if name.startswith("skin."):
            p.data[...] = 0.0  # zero head: identical logits, uniform rows
    rng = np.random.default_rng(52)
    k = 5
    ex = _grad_example(rng, cfg, k)
    n_total = len(ex.sequence)
    draws = (np.ones(n_total, dtype=np.int64), np.zeros((n_total, 3)))
    with no_grad():
        _, parts, _ = compute_losses(model, [ex], np.random.default_rng(0),
                                     draws=draws)
    gap_k = abs(parts.skinning - np.log(k))
    assert gap_k <= 1e-6

    # two-candidate distribution (0.8, 0.2) against target (1, 0)
    bce = connect_bce(np.array([0.8, 0.2]), np.array([1.0, 0.0]))
    gap_b = abs(bce - (-2.0 * np.log(0.8)))
    assert gap_b <= 1e-6
    _verdict(5, "loss identities",
             f"uniform skinning gap {gap_k:.1e}, bce gap {gap_b:.1e}")


# ---------------------------------------------------------------------------
# 06: metric oracles
# ---------------------------------------------------------------------------

def _chamfer_oracle(a, b):
    fwd = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
    bwd = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
    return 0.5 * (fwd + bwd)


def _assignment_oracle(pred, gt, tau):
    n, m = len(pred), len(gt)
    dist = np.linalg.norm(pred[:, None] - gt[None, :], axis=2)
    best_cost, best_pairs = np.inf, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            cost = sum(dist[i, perm[i]] for i in range(n))
            if cost < best_cost:
                best_cost, best_pairs = cost, [(i, perm[i]) for i in range(n)]
    else:
        for perm in itertools.permutations(range(n), m):
            cost = sum(dist[perm[j], j] for j in range(m))
            if cost < best_cost:
                best_cost, best_pairs = cost, [(perm[j], j) for j in range(m)]
    matched = {i: j for i, j in best_pairs if dist[i, j] <= tau}
    tp = len(matched)
    return matched, tp / (n + m - tp), tp / n, tp / m


def _edit_oracle(pred, gt, matching):
    labeled, dangling = [], 0
    for parent, child in pred.bones():
        if int(parent) in matching and int(child) in matching:
            labeled.append({matching[int(parent)], matching[int(child)]})
        else:
            dangling += 1
    gt_bones = [{int(p), int(c)} for p, c in gt.bones()]
    missing = sum(1 for gb in gt_bones if gb not in labeled)
    extra = sum(1 for pb in labeled if pb not in gt_bones)
    return missing + extra + dangling


def _skinning_oracle(pred, gt, tau_w):
    precs, recs, l1s = [], [], []
    for row_p, row_g in zip(pred, gt):
        p_set = {i for i, w in enumerate(row_p) if w >= tau_w}
        g_set = {i for i, w in enumerate(row_g) if w >= tau_w}
        inter = len(p_set & g_set)
        precs.append(inter / len(p_set) if p_set else (0.0 if g_set else 1.0))
        recs.append(inter / len(g_set) if g_set else (0.0 if p_set else 1.0))
        l1s.append(sum(abs(a - b) for a, b in zip(row_p, row_g)))
    return float(np.mean(precs)), float(np.mean(recs)), float(np.mean(l1s))


def test_06_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(61)
    for trial in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        a = rng.uniform(-1, 1, (n, 3))
        b = rng.uniform(-1, 1, (m, 3))
        assert abs(chamfer_j2j(a, b) - _chamfer_oracle(a, b)) <= 1e-12

        tau = float(rng.uniform(0.3, 1.2))
        got = match_joints(a, b, tau)
        want = _assignment_oracle(a, b, tau)
        assert got[0] == want[0], (trial, got[0], want[0])
        for gv, wv in zip(got[1:], want[1:]):
            assert abs(gv - wv) <= 1e-12

        kp = int(rng.integers(2, 9))
        kg = int(rng.integers(2, 9))
        pred_sk = _random_tree(rng, kp, spread=0.7)
        gt_sk = _random_tree(rng, kg, spread=0.7)
        matching = match_joints(pred_sk.joints, gt_sk.joints, 0.5)[0]
        assert edit_distance(pred_sk, gt_sk, matching) == \
            _edit_oracle(pred_sk, gt_sk, matching)

        kw = int(rng.integers(2, 7))
        pw = rng.uniform(0, 1, (5, kw))
        pw /= pw.sum(axis=1, keepdims=True)
        gw = rng.uniform(0, 1, (5, kw))
        gw /= gw.sum(axis=1, keepdims=True)
        got_skin = skinning_metrics(pw, gw, tau_w=0.05)
        want_skin = _skinning_oracle(pw, gw, 0.05)
        for gv, wv in zip(got_skin, want_skin):
            assert abs(gv - wv) <= 1e-9

    # identical skeletons are scored perfect
    sk = _random_tree(np.random.default_rng(62), 7)
    rep = skeleton_report(sk, sk)
    assert rep.iou == 1.0 and rep.precision == 1.0 and rep.recall == 1.0
    assert rep.cd_j2j == 0.0 and rep.cd_j2b == 0.0 and rep.cd_b2b == 0.0
    assert rep.edit_distance == 0
    assert connectivity_accuracy(sk.parents, sk.parents) == 1.0
    elapsed = time.perf_counter() - t0
    _verdict(6, "metric oracles",
             f"200 random instances exact, identical pair perfect, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 07: geometry identities
# ---------------------------------------------------------------------------

def test_07_geometry_identities():
    rng = np.random.default_rng(71)
    asset = synth_generate(1, np.random.default_rng(70))[0]
    mesh, sk = asset.mesh, asset.skeleton
    weights = asset.dense_weights()

    # identity pose leaves vertices bit-identical through the blend
    rot, trans = forward_kinematics(sk, Pose.identity(len(sk.parents)))
    out = lbs_deform(mesh.vertices, weights, rot, trans)
    assert np.array_equal(out, np.asarray(mesh.vertices, dtype=np.float64))

    # pose augmentation bounded at 45 degrees preserves bone lengths
    worst_len = 0.0
    for _ in range(5):
        _, posed_sk = random_pose_augment(mesh, sk, weights, 45.0, rng)
        for parent, child in sk.bones():
            before = np.linalg.norm(sk.joints[child] - sk.joints[parent])
            after = np.linalg.norm(posed_sk.joints[child] - posed_sk.joints[parent])
            worst_len = max(worst_len, abs(after - before))
    assert worst_len <= 1e-6

    # one-hot skinning moves each vertex rigidly with its single joint
    k = len(sk.parents)
    owner = rng.integers(0, k, len(mesh.vertices))
    one_hot = np.zeros((len(mesh.vertices), k))
    one_hot[np.arange(len(mesh.vertices)), owner] = 1.0
    pose = Pose.from_axis_angle(_unit_rows(rng, k),
                                np.deg2rad(rng.uniform(-40, 40, k)))
    rot, trans = forward_kinematics(sk, pose)
    blended = lbs_deform(mesh.vertices, one_hot, rot, trans)
    worst_rigid = 0.0
    for j in range(k):
        rows = owner == j
        if not rows.any():
            continue
        rigid = mesh.vertices[rows] @ rot[j].T + trans[j]
        worst_rigid = max(worst_rigid, float(np.abs(blended[rows] - rigid).max()))
    assert worst_rigid <= 1e-9
    _verdict(7, "geometry identities",
             f"identity pose bit-exact, bone length drift {worst_len:.1e}, "
             f"one-hot rigidity gap {worst_rigid:.1e}")


# ---------------------------------------------------------------------------
# 08: desk-scale overfit on synthetic rigs
# ---------------------------------------------------------------------------

def test_08_desk_scale_overfit():
    t0 = time.perf_counter()
    assets = synth_generate(16, np.random.default_rng(88),
                            SynthParams(k_range=(4, 8)))
    cfg = TrainConfig(batch_size=8, learning_rate=5e-4, warmup_steps=100,
                      total_steps=6000, p_aug=0.0, shuffle_siblings=False,
                      seed=0, log_every=400, checkpoint_every=10 ** 9)
    model = Model.create(ModelConfig.toy(), np.random.default_rng(1))
    eval_examples = [prepare_example(a, np.random.default_rng(1000 + i), cfg,
                                     model.config)
                     for i, a in enumerate(assets)]
    gt_normed = []
    for a in assets:
        _, tf = normalize_shape(a.mesh)
        gt_normed.append(tf.apply(a.skeleton.joints))

    state = {"met": False, "step": 0, "acc": float("nan"), "l1": float("nan"),
             "cd_mean": float("nan"), "cd_max": float("nan")}

    def callback(step, loss):
        if step % 400 != 0:
            return False
        acc, l1 = teacher_forced_scores(model, eval_examples)
        cds = [chamfer_j2j(rig(model, a.mesh, seed=500 + i).normalized_joints,
                           gt_normed[i])
               for i, a in enumerate(assets)]
        state.update(step=step, acc=acc, l1=l1, cd_mean=float(np.mean(cds)),
                     cd_max=float(np.max(cds)))
        state["met"] = (state["cd_mean"] <= 0.05 and acc >= 0.95 and l1 <= 0.3)
        return state["met"]

    fit(model, assets, cfg, callback=callback)
    elapsed = time.perf_counter() - t0
    assert state["met"], (f"not converged by step {state['step']}: "
                          f"cd_mean {state['cd_mean']:.4f}, acc {state['acc']:.3f}, "
                          f"l1 {state['l1']:.3f}")
    assert state["step"] <= 20000
    assert elapsed <= 7200.0
    _verdict(8, "desk-scale overfit",
             f"step {state['step']}: cd-j2j mean {state['cd_mean']:.4f} "
             f"(max {state['cd_max']:.4f}), parent acc {state['acc']:.3f}, "
             f"skin l1 {state['l1']:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 09: generation throughput at full capacity
# ---------------------------------------------------------------------------

_THROUGHPUT_SCRIPT = """
import json
import numpy as np
from autorig.dataset import synth_generate
from autorig.generator import rig
from autorig.model import Model, ModelConfig

cfg = ModelConfig.toy(max_joints=64)
model = Model.create(cfg, np.random.default_rng(9))
for name, p in model.store.items():
    if name.startswith("connect."):
        p.data[...] = 0.0  # uniform parent probs: argmax never selects stop
mesh = synth_generate(1, np.random.default_rng(5))[0].mesh
result = rig(model, mesh, seed=3)
per = [t.seconds for t in result.trace]
print(json.dumps({
    "steps": len(result.trace), "wall": result.seconds,
    "truncated": result.truncated,
    "per_step_mean": float(np.mean(per)), "per_step_max": float(np.max(per)),
    "first_steps": [round(s, 4) for s in per[:3]],
}))
"""


def test_09_generation_throughput(tmp_path):
    script = tmp_path / "throughput_probe.py"
    script.write_text(_THROUGHPUT_SCRIPT)
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        env[var] = "1"
    proc = subprocess.run([sys.executable, str(script)], capture_output=True,
                          text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    data = json.loads(proc.stdout.strip().splitlines()[-1])
    assert data["steps"] == 64
    assert data["truncated"] is True
    assert data["wall"] <= 5.0, data
    _verdict(9, "generation throughput",
             f"64 joints in {data['wall']:.2f}s single-threaded, "
             f"per-step mean {data['per_step_mean'] * 1e3:.0f} ms, "
             f"max {data['per_step_max'] * 1e3:.0f} ms, "
             f"first steps {data['first_steps']}")


# ---------------------------------------------------------------------------
# 10: filter conformance on crafted offenders
# ---------------------------------------------------------------------------

def _grid_mesh(nx, ny, lo=-0.5, hi=0.5):
    xs = np.linspace(lo, hi, nx)
    ys = np.linspace(lo, hi, ny)
    verts = np.array([[x, y, 0.02 * np.sin(7 * x) * np.cos(5 * y)]
                      for y in ys for x in xs])
    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            faces.append([a, a + 1, a + nx])
            faces.append([a + 1, a + nx + 1, a + nx])
    return TriMesh(verts, np.array(faces))


def _uniform_skin(mesh, k):
    idx = [np.arange(min(4, k), dtype=np.int64) for _ in mesh.vertices]
    w = [np.full(len(ix), 1.0 / len(ix)) for ix in idx]
    return idx, w


def _chain_on_mesh(mesh, k):
    # joints strung between two mesh vertices, so every joint hugs the surface
    lo = mesh.vertices[np.argmin(mesh.vertices[:, 0])]
    hi = mesh.vertices[np.argmax(mesh.vertices[:, 0])]
    ts = np.linspace(0.05, 0.95, k)[:, None]
    joints = lo + ts * (hi - lo)
    return Skeleton(joints, [0] + list(range(k - 1)))


def test_10_filter_conformance():
    good = synth_generate(2, np.random.default_rng(101))

    mesh = _grid_mesh(12, 10)
    too_many = RigAsset(mesh, _chain_on_mesh(mesh, 65),
                        *_uniform_skin(mesh, 65), category="overgrown")

    base = _chain_on_mesh(mesh, 6)
    parents = list(base.parents)
    parents[2], parents[4] = 4, 2  # 2 <-> 4 loop, detached from the root
    cyclic = RigAsset(mesh, Skeleton(base.joints, parents),
                      *_uniform_skin(mesh, 6), category="cyclic")

    far_sk = Skeleton(base.joints + np.array([0.0, 0.0, 9.0]),
                      list(base.parents))
    misaligned = RigAsset(mesh, far_sk, *_uniform_skin(mesh, 6),
                          category="floating")

    tiny_mesh = _grid_mesh(5, 2)  # 10 vertices, 8 faces
    tiny = RigAsset(tiny_mesh, _chain_on_mesh(tiny_mesh, 3),
                    *_uniform_skin(tiny_mesh, 3), category="sliver")

    assets = [good[0], too_many, cyclic, misaligned, tiny, good[1]]
    kept, report = filter_assets(assets, FilterRules())

    rejected = {rec.index: [rule for rule, _ in rec.failures]
                for rec in report.records if not rec.passed}
    assert set(rejected) == {1, 2, 3, 4}, rejected
    assert rejected[1] == ["max-joints"]
    assert rejected[2] == ["tree"]
    assert rejected[3] == ["alignment"]
    assert rejected[4] == ["degenerate"]
    assert len(kept) == 2
    assert report.num_rejected == 4
    _verdict(10, "filter conformance",
             "4 crafted offenders rejected, labels "
             "[max-joints] [tree] [alignment] [degenerate], 2 clean kept")

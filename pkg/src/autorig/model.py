"""Shape/skeleton tokenizers, the hybrid-masked transformer, and the task heads.

Token layout per example: L shape tokens, then a learned start token, then
one token per already-known skeleton entry. Shape tokens attend only among
themselves; skeleton tokens attend all shape tokens plus a causal prefix of
skeleton tokens. All heads are pure functions of model parameters and their
stated inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule, cosine_schedule
from .geometry import SampledShape
from .nn import Tensor, no_grad
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import (
    ParamStore,
    add_dense,
    attention,
    dense,
    gelu,
    layer_norm,
    masked_softmax,
    softmax,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 1024
    layers: int = 12
    heads: int = 16
    mlp_hidden: int = 4096
    num_points: int = 1024
    max_joints: int = 64
    shape_tokenizer_hidden: tuple = (512, 1024)
    head_hidden: int = 1024
    fusing_hidden: tuple = (2048, 1024)
    denoiser_hidden: int = 1024
    denoiser_depth: int = 3
    time_embed_dim: int = 128
    diffusion_steps: int = 1000
    inference_steps: int = 50
    contextual_head_tokens: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"token dim {self.d} not divisible by {self.heads} heads")
        if self.max_joints < 1:
            raise ValueError("max_joints must be at least 1")
        if self.num_points < 1:
            raise ValueError("num_points must be at least 1")
        object.__setattr__(self, "shape_tokenizer_hidden", tuple(self.shape_tokenizer_hidden))
        object.__setattr__(self, "fusing_hidden", tuple(self.fusing_hidden))
        if self.shape_tokenizer_hidden[-1] != self.d:
            raise ValueError("shape tokenizer must end at the token dim")
        if self.fusing_hidden[-1] != self.d:
            raise ValueError("fusing module must end at the token dim")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Small configuration for tests and desk-scale training runs."""
        base = dict(d=128, layers=4, heads=4, mlp_hidden=256, num_points=256,
                    max_joints=16, shape_tokenizer_hidden=(64, 128), head_hidden=128,
                    fusing_hidden=(256, 128), denoiser_hidden=256, denoiser_depth=2,
                    time_embed_dim=64)
        base.update(overrides)
        return cls(**base)


def build_hybrid_mask(num_shape: int, num_skeleton: int) -> np.ndarray:
    """Boolean (L+k, L+k) attention mask.

    Shape queries see only shape keys; skeleton queries see every shape key
    plus skeleton keys up to and including their own position.
    """
    if num_shape < 1:
        raise ValueError("need at least one shape token")
    if num_skeleton < 0:
        raise ValueError("negative skeleton length")
    total = num_shape + num_skeleton
    allow = np.zeros((total, total), dtype=bool)
    allow[:, :num_shape] = True
    if num_skeleton:
        allow[:num_shape, num_shape:] = False
        allow[num_shape:, num_shape:] = np.tril(np.ones((num_skeleton, num_skeleton), dtype=bool))
    return allow


@dataclass
class Context:
    """Final-layer transformer outputs for one forward pass."""

    outputs: Tensor
    num_shape: int

    @property
    def shape_outputs(self) -> Tensor:
        return self.outputs[:, :self.num_shape, :]

    @property
    def skeleton_outputs(self) -> Tensor:
        return self.outputs[:, self.num_shape:, :]

    @property
    def latest(self) -> Tensor:
        """Output at the most recent sequence position, (B, d)."""
        return self.outputs[:, -1, :]


@dataclass
class KvCache:
    """Per-layer cached keys/values over all processed positions (one example)."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0
    num_shape: int = 0


class Model:
    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        self.denoiser = Denoiser(store, "denoiser", DenoiserConfig(
            cond_dim=config.d, hidden=config.denoiser_hidden,
            depth=config.denoiser_depth, time_dim=config.time_embed_dim))
        self.schedule: NoiseSchedule = cosine_schedule(config.diffusion_steps)

    # ---- construction and persistence ---------------------------------------

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator,
               dtype=np.float32) -> "Model":
        store = ParamStore(dtype=dtype)
        d = config.d

        dims = (6,) + config.shape_tokenizer_hidden
        for i in range(len(dims) - 1):
            add_dense(store, rng, f"shape_tok.{i}", dims[i], dims[i + 1])

        store.add("pos_table", 0.02 * rng.standard_normal((config.max_joints + 1, d)))
        store.add("bos", 0.02 * rng.standard_normal(d))

        inner = config.shape_tokenizer_hidden[0]
        add_dense(store, rng, "joint_mlp.0", 3, inner)
        add_dense(store, rng, "joint_mlp.1", inner, d)
        add_dense(store, rng, "skel_tok.0", 4 * d, d)
        add_dense(store, rng, "skel_tok.1", d, d)

        for i in range(config.layers):
            store.add(f"blk{i}.ln1.g", np.ones(d))
            store.add(f"blk{i}.ln1.b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                add_dense(store, rng, f"blk{i}.{proj}", d, d)
            store.add(f"blk{i}.ln2.g", np.ones(d))
            store.add(f"blk{i}.ln2.b", np.zeros(d))
            add_dense(store, rng, f"blk{i}.mlp1", d, config.mlp_hidden)
            add_dense(store, rng, f"blk{i}.mlp2", config.mlp_hidden, d)
        store.add("final_ln.g", np.ones(d))
        store.add("final_ln.b", np.zeros(d))

        add_dense(store, rng, "fuse.joint.0", 3, inner)
        add_dense(store, rng, "fuse.joint.1", inner, d)
        fdims = (3 * d,) + config.fusing_hidden
        for i in range(len(fdims) - 1):
            add_dense(store, rng, f"fuse.{i}", fdims[i], fdims[i + 1])

        add_dense(store, rng, "connect.0", 2 * d, config.head_hidden)
        add_dense(store, rng, "connect.1", config.head_hidden, 1)
        add_dense(store, rng, "skin.0", 2 * d, config.head_hidden)
        add_dense(store, rng, "skin.1", config.head_hidden, 1)

        Denoiser.create(store, rng, "denoiser", DenoiserConfig(
            cond_dim=d, hidden=config.denoiser_hidden,
            depth=config.denoiser_depth, time_dim=config.time_embed_dim))
        return cls(config, store)

    def save(self, path) -> None:
        manifest = {"format_version": FORMAT_VERSION, "config": asdict(self.config)}
        save_checkpoint(path, self.store.state_dict(), manifest)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "Model":
        arrays, manifest = load_checkpoint(path)
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')!r}")
        raw = dict(manifest["config"])
        for key in ("shape_tokenizer_hidden", "fusing_hidden"):
            raw[key] = tuple(raw[key])
        known = {f.name for f in ModelConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config fields {sorted(unknown)}")
        config = ModelConfig(**raw)
        model = cls.create(config, np.random.default_rng(0), dtype=dtype)
        try:
            model.store.load_state_dict(arrays)
        except ValueError as exc:
            raise ValueError(f"{path}: checkpoint does not match its manifest config: {exc}") from exc
        return model

    # ---- tokenizers -----------------------------------------------------------

    def _cast(self, arr) -> Tensor:
        return Tensor(np.ascontiguousarray(arr, dtype=self.store.dtype))

    def _mlp_chain(self, prefix: str, count: int, x: Tensor) -> Tensor:
        for i in range(count):
            if i:
                x = gelu(x)
            x = dense(self.store, f"{prefix}.{i}", x)
        return x

    def tokenize_shape_batch(self, points: np.ndarray, normals: np.ndarray) -> Tensor:
        """(B, L, 3)+(B, L, 3) -> (B, L, d) initial shape tokens."""
        points = np.asarray(points, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        if points.shape[-2] != self.config.num_points:
            raise ValueError(f"expected {self.config.num_points} points, got {points.shape[-2]}")
        norms = np.linalg.norm(normals, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("normals must be unit length")
        feats = self._cast(np.concatenate([points, normals], axis=-1))
        return self._mlp_chain("shape_tok", len(self.config.shape_tokenizer_hidden), feats)

    def tokenize_shape(self, shape: SampledShape) -> Tensor:
        """Single-shape form: one sampled shape -> (L, d)."""
        return self.tokenize_shape_batch(shape.points[None], shape.normals[None])[0]

    def positional_embedding(self, index) -> Tensor:
        """Learned table lookup; row 0 is reserved for the start token."""
        idx = np.asarray(index)
        if idx.min(initial=0) < 0 or idx.max(initial=0) > self.config.max_joints:
            raise ValueError(f"position index out of range 0..{self.config.max_joints}")
        return self.store["pos_table"][idx]

    def _joint_embed(self, prefix: str, positions: np.ndarray) -> Tensor:
        x = self._cast(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
        return self._mlp_chain(prefix, 2, x)

    def tokenize_skeleton_entries(self, joints: np.ndarray, indices: np.ndarray,
                                  parent_joints: np.ndarray, parent_indices: np.ndarray) -> Tensor:
        """Batched entry tokenizer: (n, 3), (n,), (n, 3), (n,) -> (n, d)."""
        joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
        parent_joints = np.asarray(parent_joints, dtype=np.float64).reshape(-1, 3)
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        parent_indices = np.asarray(parent_indices, dtype=np.int64).reshape(-1)
        if not (np.isfinite(joints).all() and np.isfinite(parent_joints).all()):
            raise ValueError("joint positions must be finite")
        if indices.min(initial=1) < 1 or parent_indices.min(initial=1) < 1:
            raise ValueError("skeleton entry indices are 1-based")
        je = self._joint_embed("joint_mlp", joints)
        pe = self._joint_embed("joint_mlp", parent_joints)
        gk = self.positional_embedding(indices)
        gp = self.positional_embedding(parent_indices)
        from .nn.tensor import concatenate
        feats = concatenate([je, gk, pe, gp], axis=-1)
        return self._mlp_chain("skel_tok", 2, feats)

    def tokenize_skeleton_entry(self, joint, index: int, parent_joint, parent_index: int) -> Tensor:
        """Single-entry form: one entry -> (d,) token."""
        return self.tokenize_skeleton_entries(
            np.reshape(joint, (1, 3)), [index], np.reshape(parent_joint, (1, 3)), [parent_index])[0]

    def bos_token(self) -> Tensor:
        return self.store["bos"] + self.positional_embedding(0)

    # ---- transformer -----------------------------------------------------------

    def _block(self, i: int, x: Tensor, allow: np.ndarray | None,
               cache: KvCache | None = None) -> Tensor:
        s = self.store
        h = layer_norm(x, s[f"blk{i}.ln1.g"], s[f"blk{i}.ln1.b"])
        q = dense(s, f"blk{i}.q", h)
        k = dense(s, f"blk{i}.k", h)
        v = dense(s, f"blk{i}.v", h)
        if cache is not None:
            cache.keys[i] = np.concatenate([cache.keys[i], k.data[0]], axis=0)
            cache.values[i] = np.concatenate([cache.values[i], v.data[0]], axis=0)
            k = Tensor(cache.keys[i][None])
            v = Tensor(cache.values[i][None])
        x = x + dense(s, f"blk{i}.o", attention(q, k, v, self.config.heads, allow))
        h2 = layer_norm(x, s[f"blk{i}.ln2.g"], s[f"blk{i}.ln2.b"])
        x = x + dense(s, f"blk{i}.mlp2", gelu(dense(s, f"blk{i}.mlp1", h2)))
        return x

    def _final_norm(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.store["final_ln.g"], self.store["final_ln.b"])

    def forward_transformer(self, shape_tokens: Tensor, skeleton_tokens: Tensor | None) -> Context:
        """Full-sequence pass: (B, L, d) shape plus (B, k, d) skeleton tokens."""
        from .nn.tensor import concatenate
        num_shape = shape_tokens.shape[-2]
        if num_shape != self.config.num_points:
            raise ValueError("shape token count does not match the configuration")
        if skeleton_tokens is not None and skeleton_tokens.shape[-1] != self.config.d:
            raise ValueError("skeleton token dim mismatch")
        if skeleton_tokens is None or skeleton_tokens.shape[-2] == 0:
            x = shape_tokens
            num_skel = 0
        else:
            x = concatenate([shape_tokens, skeleton_tokens], axis=-2)
            num_skel = skeleton_tokens.shape[-2]
        allow = build_hybrid_mask(num_shape, num_skel)
        for i in range(self.config.layers):
            x = self._block(i, x, allow)
        return Context(self._final_norm(x), num_shape)

    # ---- incremental decoding ----------------------------------------------------

    def init_cache(self, shape: SampledShape) -> tuple[KvCache, Context]:
        """Prime a cache with the shape tokens plus the start token.

        Returns the cache and the full-pass context; the context's latest
        output conditions the first joint, and its shape outputs are fixed
        for the whole generation (shape rows never see skeleton keys).
        """
        cache = KvCache(num_shape=self.config.num_points)
        with no_grad():
            shape_tok = self.tokenize_shape(shape)[None]
            bos = self.bos_token().reshape(1, 1, -1)
            from .nn.tensor import concatenate
            x = concatenate([shape_tok, bos], axis=-2)
            allow = build_hybrid_mask(self.config.num_points, 1)
            cache.keys = [np.zeros((0, self.config.d), dtype=self.store.dtype)
                          for _ in range(self.config.layers)]
            cache.values = [np.zeros((0, self.config.d), dtype=self.store.dtype)
                            for _ in range(self.config.layers)]
            for i in range(self.config.layers):
                x = self._block(i, x, allow, cache=cache)
            out = self._final_norm(x)
        cache.length = self.config.num_points + 1
        return cache, Context(out, self.config.num_points)

    def kv_step(self, cache: KvCache, token) -> tuple[np.ndarray, KvCache]:
        """Append one skeleton token; returns its final-layer output (d,).

        The new position may attend every cached position plus itself, which
        is exactly its row of the hybrid mask, so no mask is needed here.
        """
        if cache.length == 0 or not cache.keys:
            raise ValueError("cache not initialized; call init_cache first")
        data = token.data if isinstance(token, Tensor) else np.asarray(token)
        x = self._cast(data.reshape(1, 1, -1))
        with no_grad():
            for i in range(self.config.layers):
                x = self._block(i, x, None, cache=cache)
            out = self._final_norm(x)
        cache.length += 1
        return out.data[0, 0], cache

    # ---- heads -----------------------------------------------------------------

    def fuse(self, context_latest, j_sampled, k) -> Tensor:
        """Combine the latest context, a sampled position, and its index.

        Accepts (d,)+(3,)+int for one step or (B, d)+(B, 3)+(B,) batched;
        returns (d,) or (B, d).
        """
        from .nn.tensor import concatenate
        latest = context_latest if isinstance(context_latest, Tensor) else self._cast(context_latest)
        single = latest.ndim == 1
        if single:
            latest = latest.reshape(1, -1)
        k_arr = np.asarray(k).reshape(-1)
        if k_arr.min(initial=1) < 1:
            raise ValueError("joint index must be at least 1")
        je = self._joint_embed("fuse.joint", j_sampled)
        gk = self.positional_embedding(k_arr)
        z = concatenate([latest, je, gk], axis=-1)
        out = self._mlp_chain("fuse", len(self.config.fusing_hidden), z)
        return out[0] if single else out

    def _pair_logits(self, prefix: str, left: Tensor, right: Tensor) -> Tensor:
        """MLP(concat(left_i, right_j)) for all pairs, via a split first layer.

        left (B, n, d) and right (B, m, d) produce logits (B, n, m). The
        first dense layer splits into the two halves of its weight matrix,
        so the pair grid is an outer sum instead of a materialized concat.
        """
        s = self.store
        d = self.config.d
        w = s[prefix + ".0.w"]
        b = s[prefix + ".0.b"]
        lw = left @ w[:d, :]
        rw = right @ w[d:, :]
        grid = lw.reshape(*lw.shape[:-1], 1, lw.shape[-1]) \
            + rw.reshape(rw.shape[0], 1, *rw.shape[1:]) + b
        h = gelu(grid)
        out = h @ s[prefix + ".1.w"] + s[prefix + ".1.b"]
        return out.reshape(out.shape[:-1])

    def connect_logit_grid(self, z_prime: Tensor, candidate_tokens: Tensor,
                           self_tokens: Tensor) -> Tensor:
        """(B, P, d) fused steps x (B, P, d) candidates -> (B, P, P) logits.

        Row p holds the logits for prediction step p+1; column c < p is the
        pairing with candidate_tokens[:, c]; the diagonal is the pairing
        with that step's own self token (the stop candidate).
        """
        pair = self._pair_logits("connect", z_prime, candidate_tokens)
        from .nn.tensor import concatenate
        both = concatenate([z_prime, self_tokens], axis=-1)
        h = gelu(both @ self.store["connect.0.w"] + self.store["connect.0.b"])
        diag = (h @ self.store["connect.1.w"] + self.store["connect.1.b"]).reshape(h.shape[0], h.shape[1])
        p = pair.shape[1]
        eye = np.eye(p, dtype=bool)
        off = Tensor(np.where(eye, 0.0, 1.0).astype(pair.dtype))
        on = Tensor(eye.astype(pair.dtype))
        return pair * off + diag.reshape(diag.shape[0], diag.shape[1], 1) * on

    def connect_probabilities(self, z_prime, skeleton_tokens, self_token) -> np.ndarray:
        """Parent distribution over candidates {1..k}; the last slot is stop.

        skeleton_tokens is (k-1, d) (possibly empty) and self_token is (d,).
        """
        from .nn.tensor import concatenate
        d = self.config.d
        zp = z_prime if isinstance(z_prime, Tensor) else self._cast(z_prime)
        st = self_token if isinstance(self_token, Tensor) else self._cast(self_token)
        st = st.reshape(1, -1)
        if skeleton_tokens is not None and skeleton_tokens.shape[0]:
            sk = skeleton_tokens if isinstance(skeleton_tokens, Tensor) else self._cast(skeleton_tokens)
            cands = concatenate([sk, st], axis=0)
        else:
            cands = st
        with no_grad():
            w = self.store["connect.0.w"]
            h = gelu(zp.reshape(1, -1) @ w[:d, :] + cands @ w[d:, :] + self.store["connect.0.b"])
            logits = (h @ self.store["connect.1.w"] + self.store["connect.1.b"]).reshape(1, -1)
            probs = softmax(logits, axis=-1)
        return probs.data[0]

    def skinning_logits(self, shape_outputs: Tensor, joint_tokens: Tensor) -> Tensor:
        """(B, L, d) x (B, K, d) -> (B, L, K) pre-softmax scores."""
        return self._pair_logits("skin", shape_outputs, joint_tokens)

    def skinning_weights(self, shape_outputs, joint_tokens,
                         joint_mask: np.ndarray | None = None) -> Tensor:
        """Row-stochastic (L, K) or (B, L, K) skinning weights.

        joint_mask (B, K) marks valid joints for padded batches; masked
        columns get exactly zero weight.
        """
        ho = shape_outputs if isinstance(shape_outputs, Tensor) else self._cast(shape_outputs)
        to = joint_tokens if isinstance(joint_tokens, Tensor) else self._cast(joint_tokens)
        single = ho.ndim == 2
        if ho.ndim == 2:
            ho = ho.reshape(1, *ho.shape)
        if to.ndim == 2:
            to = to.reshape(1, *to.shape)
        logits = self.skinning_logits(ho, to)
        if joint_mask is None:
            weights = softmax(logits, axis=-1)
        else:
            allow = np.asarray(joint_mask, dtype=bool)[:, None, :]
            weights = masked_softmax(logits, allow, axis=-1)
        return weights[0] if single else weights

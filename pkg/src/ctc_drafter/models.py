"""Base decoder-only transformer, the attention draft module, and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import MASKED, ParamStore, ShapeError, Tensor


class ContextOverflow(RuntimeError):
    """Sequence plus cache would exceed ``max_seq_len``."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    draft_slots: int = 5
    label_horizon: int = 3
    draft_head: str = "transformer"  # or "linear" (per-slot residual heads on the anchor state)
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.label_horizon or 2 * self.label_horizon - 1 > self.draft_slots:
            raise ValueError(
                f"label_horizon={self.label_horizon} needs 1 <= m_max <= (L+1)/2 with L={self.draft_slots}"
            )
        if self.draft_head not in ("transformer", "linear"):
            raise ValueError(f"unknown draft_head {self.draft_head!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must leave room for BOS, EOS and BLANK")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Vocab:
    """Byte tokens followed by BOS, EOS and the CTC blank (259 ids by default).

    Smaller synthetic vocabularies keep the same layout: the last three ids are
    always BOS, EOS, BLANK.
    """

    size: int = 259

    @property
    def n_regular(self) -> int:
        return self.size - 3

    @property
    def bos(self) -> int:
        return self.size - 3

    @property
    def eos(self) -> int:
        return self.size - 2

    @property
    def blank(self) -> int:
        return self.size - 1

    def encode(self, text: str, bos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        if any(i >= self.n_regular for i in ids):
            raise ValueError("text bytes exceed this vocabulary")
        return ([self.bos] if bos else []) + ids

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < min(self.n_regular, 256)).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# parameter initialization


def _init(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_base_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    d, V, std = cfg.d_model, cfg.vocab_size, cfg.init_std
    proj_std = std / np.sqrt(2 * cfg.n_layers)
    dt = tc.default_dtype()
    p = ParamStore()

    def put(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True)

    put("base.tok_emb", _init(rng, (V, d), std))
    put("base.pos_emb", _init(rng, (cfg.max_seq_len, d), std))
    for i in range(cfg.n_layers):
        pre = f"base.layers.{i}."
        put(pre + "ln1.w", np.ones(d))
        put(pre + "ln1.b", np.zeros(d))
        put(pre + "attn.qkv.w", _init(rng, (d, 3 * d), std))
        put(pre + "attn.qkv.b", np.zeros(3 * d))
        put(pre + "attn.out.w", _init(rng, (d, d), proj_std))
        put(pre + "attn.out.b", np.zeros(d))
        put(pre + "ln2.w", np.ones(d))
        put(pre + "ln2.b", np.zeros(d))
        put(pre + "mlp.fc.w", _init(rng, (d, 4 * d), std))
        put(pre + "mlp.fc.b", np.zeros(4 * d))
        put(pre + "mlp.proj.w", _init(rng, (4 * d, d), proj_std))
        put(pre + "mlp.proj.b", np.zeros(d))
    put("base.ln_f.w", np.ones(d))
    put("base.ln_f.b", np.zeros(d))
    put("base.lm_head.weight", _init(rng, (d, V), std))
    return p


def init_draft_params(cfg: ModelConfig, seed: int = 1) -> ParamStore:
    rng = np.random.default_rng(seed)
    d, L, std = cfg.d_model, cfg.draft_slots, cfg.init_std
    dt = tc.default_dtype()
    p = ParamStore()

    def put(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True)

    if cfg.draft_head == "linear":
        for i in range(L):
            put(f"draft.heads.{i}.w", np.zeros((d, d)))
            put(f"draft.heads.{i}.b", np.zeros(d))
        return p
    put("draft.in.w", _init(rng, (d, d), std))
    put("draft.in.b", np.zeros(d))
    put("draft.slot_emb", _init(rng, (L, d), std))
    put("draft.ln_q.w", np.ones(d))
    put("draft.ln_q.b", np.zeros(d))
    put("draft.ln_kv.w", np.ones(d))
    put("draft.ln_kv.b", np.zeros(d))
    put("draft.rel_emb", _init(rng, (cfg.max_seq_len, d), std))  # indexed by anchor - position
    put("draft.attn.q.w", _init(rng, (d, d), std))
    put("draft.attn.q.b", np.zeros(d))
    put("draft.attn.kv.w", _init(rng, (d, 2 * d), std))
    put("draft.attn.kv.b", np.zeros(2 * d))
    put("draft.attn.out.w", _init(rng, (d, d), std))
    put("draft.attn.out.b", np.zeros(d))
    put("draft.ln2.w", np.ones(d))
    put("draft.ln2.b", np.zeros(d))
    put("draft.mlp.fc.w", _init(rng, (d, 4 * d), std))
    put("draft.mlp.fc.b", np.zeros(4 * d))
    put("draft.mlp.proj.w", _init(rng, (4 * d, d), std))
    put("draft.mlp.proj.b", np.zeros(d))
    put("draft.ln_f.w", np.ones(d))
    put("draft.ln_f.b", np.zeros(d))
    return p


# ---------------------------------------------------------------------------
# KV cache


class KVCache:
    """Per-session key/value buffers plus the last-layer hidden state of every cached position.

    ``length`` counts committed entries. A forward pass with ``commit=False``
    writes its keys/values just past ``length`` (the staging area); ``keep``
    then moves a chosen subset of staged rows down so they become committed.
    """

    def __init__(self, cfg: ModelConfig, dtype=None):
        dt = dtype or tc.default_dtype()
        shape = (cfg.n_layers, cfg.n_heads, cfg.max_seq_len, cfg.d_head)
        self.k = np.zeros(shape, dtype=dt)
        self.v = np.zeros(shape, dtype=dt)
        self.hidden = np.zeros((cfg.max_seq_len, cfg.d_model), dtype=dt)
        self.capacity = cfg.max_seq_len
        self.length = 0
        self.staged = 0

    def keep(self, staged_indices) -> None:
        """Commit staged rows ``staged_indices`` (in order) right after the committed prefix."""
        idx = np.asarray(staged_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.staged):
            raise IndexError(f"staged index out of range ({self.staged} staged)")
        src = self.length + idx
        dst = self.length + np.arange(idx.size)
        self.k[:, :, dst] = self.k[:, :, src]
        self.v[:, :, dst] = self.v[:, :, src]
        self.hidden[dst] = self.hidden[src]
        self.length += idx.size
        self.staged = 0

    def truncate(self, n: int) -> None:
        self.length = min(self.length, n)
        self.staged = 0


# ---------------------------------------------------------------------------
# models


def causal_mask(n: int, dtype=None) -> np.ndarray:
    m = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(m, MASKED, 0.0).astype(dtype or tc.default_dtype())


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = x.reshape(*lead, T, n_heads, d // n_heads)
    nd = x.ndim
    return x.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dh = x.shape
    nd = x.ndim
    x = x.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)
    return x.reshape(*lead, T, H * dh)


class BaseModel:
    """Decoder-only transformer with learned absolute positions and an untied LM head."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_base_params(cfg, seed)

    @property
    def lm_head(self) -> Tensor:
        return self.params["base.lm_head.weight"]

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def forward(self, tokens, cache: KVCache | None = None, positions=None, attn_mask=None, commit: bool = True):
        """Run the stack on ``tokens`` (shape ``[T]`` or ``[N, T]``).

        Returns ``(hidden, logits, cache)`` where ``hidden`` is the final-norm
        output that feeds the LM head. With a cache, ``tokens`` is one new
        chunk appended after the committed prefix; ``positions`` and
        ``attn_mask`` (additive, ``[T, T]`` over the new chunk) override the
        default consecutive positions and causal mask, which is how a flattened
        draft tree is verified in one pass.
        """
        cfg, P = self.cfg, self.params
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        N, T = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range for vocab_size={cfg.vocab_size}")
        past = cache.length if cache is not None else 0
        if cache is not None and N != 1:
            raise ValueError("cached forward takes a single sequence")
        if positions is None:
            positions = past + np.arange(T)
        positions = np.asarray(positions, dtype=np.int64)
        if past + T > cfg.max_seq_len or (positions.size and positions.max() >= cfg.max_seq_len):
            raise ContextOverflow(f"{past} cached + {T} new tokens exceeds max_seq_len={cfg.max_seq_len}")
        local = causal_mask(T) if attn_mask is None else np.asarray(attn_mask, dtype=tc.default_dtype())
        if local.shape != (T, T):
            raise ShapeError(f"attn_mask shape {local.shape} does not match {T} new tokens")
        mask = local if past == 0 else np.concatenate([np.zeros((T, past), dtype=local.dtype), local], axis=1)

        x = tc.add(tc.embedding(P["base.tok_emb"], ids), tc.embedding(P["base.pos_emb"], positions))
        for i in range(cfg.n_layers):
            pre = f"base.layers.{i}."
            h = tc.layer_norm(x, P[pre + "ln1.w"], P[pre + "ln1.b"])
            qkv = tc.linear(h, P[pre + "attn.qkv.w"], P[pre + "attn.qkv.b"])
            d = cfg.d_model
            q = _split_heads(qkv[..., :d], cfg.n_heads)
            k = _split_heads(qkv[..., d : 2 * d], cfg.n_heads)
            v = _split_heads(qkv[..., 2 * d :], cfg.n_heads)
            if cache is not None:
                cache.k[i, :, past : past + T] = k.data[0]
                cache.v[i, :, past : past + T] = v.data[0]
                if past:
                    k = Tensor(cache.k[i, :, : past + T][None])
                    v = Tensor(cache.v[i, :, : past + T][None])
            a = _merge_heads(tc.attention(q, k, v, mask))
            x = tc.add(x, tc.linear(a, P[pre + "attn.out.w"], P[pre + "attn.out.b"]))
            h = tc.layer_norm(x, P[pre + "ln2.w"], P[pre + "ln2.b"])
            h = tc.gelu(tc.linear(h, P[pre + "mlp.fc.w"], P[pre + "mlp.fc.b"]))
            x = tc.add(x, tc.linear(h, P[pre + "mlp.proj.w"], P[pre + "mlp.proj.b"]))
        hidden = tc.layer_norm(x, P["base.ln_f.w"], P["base.ln_f.b"])
        logits = tc.matmul(hidden, self.lm_head)
        if cache is not None:
            cache.hidden[past : past + T] = hidden.data[0]
            if commit:
                cache.length += T
                cache.staged = 0
            else:
                cache.staged = T
        if single:
            hidden, logits = hidden[0], logits[0]
        return hidden, logits, cache


class DraftModule:
    """Predicts ``L`` parallel slot distributions for each anchor from base hidden states.

    The transformer head builds one query per slot (projected anchor state
    plus a learned slot embedding); each query cross-attends to the hidden
    states at positions up to its anchor, never to sibling slots, then goes
    through an MLP and the base model's LM head. The ``linear`` head is the
    per-slot residual-block ablation working on the anchor state alone.
    """

    def __init__(self, cfg: ModelConfig, lm_head: Tensor, params: ParamStore | None = None, seed: int = 1):
        self.cfg = cfg
        self.lm_head = lm_head
        self.params = params if params is not None else init_draft_params(cfg, seed)

    def forward(self, hidden, anchor_positions) -> Tensor:
        """Return log-probs shaped ``[A, L, V]`` (or ``[N, A, L, V]`` for batched hidden)."""
        cfg, P = self.cfg, self.params
        H = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        single = H.ndim == 2
        if single:
            H = H.reshape(1, *H.shape)
        N, T, d = H.shape
        anchors = np.asarray(anchor_positions, dtype=np.int64)
        A, L = anchors.size, cfg.draft_slots
        if A == 0:
            out = Tensor(np.zeros((N, 0, L, cfg.vocab_size), dtype=H.dtype))
            return out[0] if single else out
        if anchors.min() < 0 or anchors.max() >= T:
            raise IndexError(f"anchor positions must lie in [0, {T})")

        h_anchor = H[:, anchors]  # [N, A, d]
        if cfg.draft_head == "linear":
            slots = []
            for i in range(L):
                z = tc.silu(tc.linear(h_anchor, P[f"draft.heads.{i}.w"], P[f"draft.heads.{i}.b"]))
                slots.append(tc.add(h_anchor, z))
            x = tc.stack(slots, axis=2)
        else:
            q0 = tc.linear(h_anchor, P["draft.in.w"], P["draft.in.b"]).reshape(N, A, 1, d)
            x = tc.add(tc.broadcast_to(q0, (N, A, L, d)), P["draft.slot_emb"])
            H_, dh = cfg.n_heads, cfg.d_head
            qn = tc.layer_norm(x, P["draft.ln_q.w"], P["draft.ln_q.b"])
            q = tc.linear(qn, P["draft.attn.q.w"], P["draft.attn.q.b"]).reshape(N, A, L, H_, dh).transpose(0, 1, 3, 2, 4)
            # keys/values: projected hidden state plus a learned offset-from-anchor embedding
            key = None if tc.grad_enabled() else self._weights_key()
            kv = self._kv_projection(H, key)
            rel = self._rel_projection(key)
            offset = np.clip(anchors[:, None] - np.arange(T)[None, :], 0, cfg.max_seq_len - 1)
            kv = tc.add(tc.broadcast_to(kv.reshape(N, 1, T, 2 * d), (N, A, T, 2 * d)), tc.embedding(rel, offset))
            k = kv[..., :d].reshape(N, A, T, H_, dh).transpose(0, 1, 3, 2, 4)
            v = kv[..., d:].reshape(N, A, T, H_, dh).transpose(0, 1, 3, 2, 4)
            visible = np.arange(T)[None, :] <= anchors[:, None]  # [A, T]
            mask = np.where(visible, 0.0, MASKED).astype(H.dtype)[:, None, None, :]
            a = tc.attention(q, k, v, mask).transpose(0, 1, 3, 2, 4).reshape(N, A, L, d)
            x = tc.add(x, tc.linear(a, P["draft.attn.out.w"], P["draft.attn.out.b"]))
            h = tc.layer_norm(x, P["draft.ln2.w"], P["draft.ln2.b"])
            h = tc.gelu(tc.linear(h, P["draft.mlp.fc.w"], P["draft.mlp.fc.b"]))
            x = tc.add(x, tc.linear(h, P["draft.mlp.proj.w"], P["draft.mlp.proj.b"]))
            x = tc.layer_norm(x, P["draft.ln_f.w"], P["draft.ln_f.b"])
        out = tc.log_softmax(tc.matmul(x, self.lm_head))
        return out[0] if single else out


    def _kv_projection(self, H: Tensor, key) -> Tensor:
        P = self.params

        def project(x):
            return tc.linear(tc.layer_norm(x, P["draft.ln_kv.w"], P["draft.ln_kv.b"]), P["draft.attn.kv.w"], P["draft.attn.kv.b"])

        if key is None or H.shape[0] != 1:
            return project(H)
        # decoding grows the hidden prefix a few rows at a time; only new or changed rows are projected
        h = H.data[0]
        reuse = 0
        memo = getattr(self, "_kv_memo", None)
        if memo is not None and memo[0] == key and memo[1].dtype == h.dtype:
            seen = memo[1]
            n = min(len(seen), len(h))
            differs = np.flatnonzero(np.any(seen[:n] != h[:n], axis=1))
            reuse = int(differs[0]) if differs.size else n
        fresh = project(Tensor(h[reuse:])).data
        kv = np.concatenate([memo[2][:reuse], fresh]) if reuse else fresh
        self._kv_memo = (key, h.copy(), kv)
        return Tensor(kv[None])

    def _weights_key(self):
        P = self.params
        return tuple(float(P[n].data.sum()) for n in ("draft.rel_emb", "draft.attn.kv.w", "draft.attn.kv.b",
                                                      "draft.ln_kv.w", "draft.ln_kv.b"))

    def _rel_projection(self, key) -> Tensor:
        P = self.params
        if key is None:
            return tc.matmul(P["draft.rel_emb"], P["draft.attn.kv.w"])
        # inference reuses the product until either weight changes
        if getattr(self, "_rel_key", None) != key:
            self._rel_key = key
            self._rel = Tensor(P["draft.rel_emb"].data @ P["draft.attn.kv.w"].data)
        return self._rel


def base_forward(model: BaseModel, tokens, cache: KVCache | None = None, **kw):
    return model.forward(tokens, cache, **kw)


def draft_forward(draft: DraftModule, hidden, anchor_positions) -> Tensor:
    return draft.forward(hidden, anchor_positions)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CTCD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(params: ParamStore, path, config: dict | ModelConfig | None = None) -> None:
    if isinstance(config, ModelConfig):
        config = config.to_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    footer_at = buf.tell()
    buf.write(json.dumps(config or {}, sort_keys=True).encode("utf-8"))
    buf.write(struct.pack("<Q", footer_at))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    blob = Path(path).read_bytes()

    def need(off, n):
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint (wanted {n} bytes at offset {off}, file has {len(blob)})")
        return blob[off : off + n]

    if need(0, 4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC.decode()!r}")
    version, count = struct.unpack("<II", need(4, 8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint (no footer)")
    (footer_at,) = struct.unpack("<Q", blob[-8:])
    if not 12 <= footer_at <= len(blob) - 8:
        raise CheckpointError(f"{path}: truncated checkpoint (footer offset {footer_at} out of range)")
    off = 12
    params = ParamStore()
    for _ in range(count):
        (n,) = struct.unpack("<H", need(off, 2))
        name = need(off + 2, n).decode("utf-8")
        off += 2 + n
        code, rank = struct.unpack("<BB", need(off, 2))
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", need(off, 4 * rank))
        off += 4 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(need(off, nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        off += nbytes
        params[name] = Tensor(arr, requires_grad=True)
    if off != footer_at:
        raise CheckpointError(f"{path}: tensor data ends at {off} but footer starts at {footer_at}")
    try:
        config = json.loads(blob[footer_at:-8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable config footer ({e})") from None
    return params, config


def assign_params(target: ParamStore, loaded: ParamStore) -> None:
    """Copy ``loaded`` arrays into ``target`` after checking every name and shape."""
    for name, t in target.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if loaded[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {loaded[name].shape} vs model {t.shape}")
    for name, t in target.items():
        t.data = loaded[name].data.astype(t.data.dtype)


def params_hash(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()[:16]


def load_base(path) -> BaseModel:
    loaded, conf = load_checkpoint(path)
    cfg = ModelConfig.from_dict(conf.get("model", conf))
    dt = next(iter(loaded.values())).dtype if loaded else tc.default_dtype()
    with tc.precision(dt):
        model = BaseModel(cfg)
    assign_params(model.params, loaded)
    return model


def load_draft(path, base: BaseModel) -> DraftModule:
    loaded, conf = load_checkpoint(path)
    cfg = ModelConfig.from_dict(conf.get("model", conf))
    if cfg.d_model != base.cfg.d_model or cfg.vocab_size != base.cfg.vocab_size:
        raise CheckpointError(
            f"draft checkpoint (d_model={cfg.d_model}, vocab={cfg.vocab_size}) does not match base "
            f"(d_model={base.cfg.d_model}, vocab={base.cfg.vocab_size})"
        )
    with tc.precision(base.lm_head.dtype):
        draft = DraftModule(cfg, base.lm_head)
    assign_params(draft.params, loaded)
    return draft

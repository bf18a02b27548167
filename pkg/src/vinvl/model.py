"""Word-tag-region transformer encoder.

The input layout is ``[CLS] w [SEP] q [SEP] | regions``.  Text and tag tokens
get learned sequential position embeddings; regions get none, so their order
carries no information and the encoder is equivariant to region permutations.
"""
from __future__ import annotations

import json
import math
import re
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .regions import POSITION_DIM, RegionFeature
from .tensor import (Tensor, concat, embedding_gather, gelu, layer_norm, matmul, reshape,
                     softmax_rows, transpose)

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)

KIND_PAD, KIND_TEXT, KIND_TAG, KIND_REGION = 0, 1, 2, 3
SEGMENT_TEXT, SEGMENT_TAG, SEGMENT_REGION = 0, 1, 2

MASK_FILL = -1e9
CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class TokenVocab:
    """Token table; the special tokens always occupy ids 0-4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def special_ids(self) -> set[int]:
        return {self.index[t] for t in SPECIAL_TOKENS}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> TokenVocab:
        seen = sorted({t for text in texts for t in split_words(text)})
        return cls(seen)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> TokenVocab:
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIAL_TOKENS}")
        return cls(tokens[len(SPECIAL_TOKENS):])


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: TokenVocab) -> list[int]:
    unk = vocab.unk_id
    return [vocab.index.get(t, unk) for t in split_words(text)]


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 64
    max_text_len: int = 35
    max_region_len: int = 50
    appearance_dim: int = 64
    position_dim: int = POSITION_DIM
    ln_eps: float = 1e-12
    init_std: float = 0.1
    # "pre": normalise each sub-layer input (plus a final norm); "post": normalise each residual sum
    norm: str = "pre"

    def __post_init__(self):
        if self.norm not in ("pre", "post"):
            raise ValueError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_text_len < 1 or self.max_region_len < 1:
            raise ValueError("maximum lengths must be >= 1")

    @property
    def region_dim(self) -> int:
        return self.appearance_dim + self.position_dim

    @property
    def max_positions(self) -> int:
        # room for [CLS] and two [SEP]
        return self.max_text_len + 3


@dataclass
class InputSequence:
    """One ``(w, q, v)`` input; ``w`` and ``q`` are raw word ids without special tokens."""

    w: list[int]
    q: list[int]
    regions: np.ndarray
    _truncated: bool = field(default=False, repr=False)

    def __post_init__(self):
        if isinstance(self.regions, (list, tuple)):
            self.regions = (np.stack([r.concat() if isinstance(r, RegionFeature) else np.asarray(r, float)
                                      for r in self.regions]) if len(self.regions) else np.zeros((0, 0)))
        self.regions = np.asarray(self.regions, dtype=np.float64)
        self.w, self.q = list(self.w), list(self.q)

    def truncated(self, config: ModelConfig) -> InputSequence:
        """Trim the longer of ``w``/``q`` until both fit, and keep the first regions."""
        w, q = list(self.w), list(self.q)
        while len(w) + len(q) > config.max_text_len:
            if len(w) >= len(q):
                w.pop()
            else:
                q.pop()
        return InputSequence(w, q, self.regions[:config.max_region_len], True)

    def text_ids(self, vocab: TokenVocab) -> list[int]:
        return [vocab.cls_id, *self.w, vocab.sep_id, *self.q, vocab.sep_id]

    def text_kinds(self) -> list[int]:
        return [KIND_TEXT] * (len(self.w) + 2) + [KIND_TAG] * (len(self.q) + 1)

    @property
    def n_text(self) -> int:
        return len(self.w) + len(self.q) + 3

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def kinds(self) -> np.ndarray:
        return np.array(self.text_kinds() + [KIND_REGION] * self.n_regions, dtype=np.int64)


# ----------------------------------------------------------------------------
# attention masks
# ----------------------------------------------------------------------------

def bidirectional_mask(kinds: np.ndarray) -> np.ndarray:
    real = np.asarray(kinds) != KIND_PAD
    return real[:, None] & real[None, :]


def seq2seq_mask(kinds: np.ndarray) -> np.ndarray:
    """Causal inside the text block; text sees tags/regions, never the reverse."""
    kinds = np.asarray(kinds)
    text = kinds == KIND_TEXT
    ctx = (kinds == KIND_TAG) | (kinds == KIND_REGION)
    n = len(kinds)
    causal = np.tril(np.ones((n, n), dtype=bool))
    return (text[:, None] & text[None, :] & causal) | ((text | ctx)[:, None] & ctx[None, :])


def build_bidirectional_mask(seq: InputSequence) -> np.ndarray:
    return bidirectional_mask(seq.kinds())


def build_seq2seq_mask(seq: InputSequence) -> np.ndarray:
    return seq2seq_mask(seq.kinds())


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded model input: text block of width T followed by a region block of width R."""

    token_ids: np.ndarray      # [B, T]
    text_pos: np.ndarray       # [B, T]
    segments: np.ndarray       # [B, T]
    regions: np.ndarray        # [B, R, P+6]
    kinds: np.ndarray          # [B, T+R]
    mask: np.ndarray           # [B, T+R, T+R]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def text_width(self) -> int:
        return self.token_ids.shape[1]


def collate(seqs: Sequence[InputSequence], vocab: TokenVocab, config: ModelConfig,
            mask: str = "bidirectional", token_overrides: Sequence[Sequence[int]] | None = None) -> Batch:
    """Pad sequences into one :class:`Batch`.

    ``token_overrides`` replaces each sequence's text ids (same length), which
    is how masked inputs are fed without rebuilding the sequences.
    """
    seqs = [s if s._truncated else s.truncated(config) for s in seqs]
    b = len(seqs)
    t = max(s.n_text for s in seqs)
    r = max(s.n_regions for s in seqs)
    token_ids = np.full((b, t), vocab.pad_id, dtype=np.int64)
    text_pos = np.zeros((b, t), dtype=np.int64)
    segments = np.zeros((b, t), dtype=np.int64)
    regions = np.zeros((b, r, config.region_dim))
    kinds = np.zeros((b, t + r), dtype=np.int64)
    builder = {"bidirectional": bidirectional_mask, "seq2seq": seq2seq_mask}[mask]
    masks = np.zeros((b, t + r, t + r), dtype=bool)
    for i, s in enumerate(seqs):
        ids = s.text_ids(vocab) if token_overrides is None else list(token_overrides[i])
        if len(ids) != s.n_text:
            raise ValueError("token override length does not match the sequence")
        n = s.n_text
        token_ids[i, :n] = ids
        text_pos[i, :n] = np.arange(n)
        tk = s.text_kinds()
        segments[i, :n] = [SEGMENT_TEXT if k == KIND_TEXT else SEGMENT_TAG for k in tk]
        kinds[i, :n] = tk
        if s.n_regions:
            if s.regions.shape[1] != config.region_dim:
                raise ValueError(f"region width {s.regions.shape[1]} != {config.region_dim}")
            regions[i, :s.n_regions] = s.regions
            kinds[i, t:t + s.n_regions] = KIND_REGION
        masks[i] = builder(kinds[i])
    return Batch(token_ids, text_pos, segments, regions, kinds, masks)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

Params = dict[str, Tensor]


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    h, s = config.hidden, config.init_std
    p: Params = {
        "word_emb": _normal(rng, (config.vocab_size, h), s, "word_emb"),
        "pos_emb": _normal(rng, (config.max_positions, h), s, "pos_emb"),
        "seg_emb": _normal(rng, (3, h), s, "seg_emb"),
        "region_proj": _normal(rng, (config.region_dim, h), s, "region_proj"),
        "emb_ln.g": _const(1.0, h, "emb_ln.g"),
        "emb_ln.b": _const(0.0, h, "emb_ln.b"),
    }
    for i in range(config.layers):
        pre = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            p[pre + f"W{w}"] = _normal(rng, (h, h), s, pre + f"W{w}")
            p[pre + f"b{w}"] = _const(0.0, h, pre + f"b{w}")
        p[pre + "ln1.g"] = _const(1.0, h, pre + "ln1.g")
        p[pre + "ln1.b"] = _const(0.0, h, pre + "ln1.b")
        p[pre + "W1"] = _normal(rng, (h, config.ff_dim), s, pre + "W1")
        p[pre + "b1"] = _const(0.0, config.ff_dim, pre + "b1")
        p[pre + "W2"] = _normal(rng, (config.ff_dim, h), s, pre + "W2")
        p[pre + "b2"] = _const(0.0, h, pre + "b2")
        p[pre + "ln2.g"] = _const(1.0, h, pre + "ln2.g")
        p[pre + "ln2.b"] = _const(0.0, h, pre + "ln2.b")
    if config.norm == "pre":
        p["final_ln.g"] = _const(1.0, h, "final_ln.g")
        p["final_ln.b"] = _const(0.0, h, "final_ln.b")
    p["mlm.W"] = _normal(rng, (h, config.vocab_size), s, "mlm.W")
    p["mlm.b"] = _const(0.0, config.vocab_size, "mlm.b")
    return p


def add_linear(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
               std: float = 0.02) -> None:
    params[f"{name}.W"] = _normal(rng, (n_in, n_out), std, f"{name}.W")
    params[f"{name}.b"] = _const(0.0, n_out, f"{name}.b")


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return matmul(x, params[f"{name}.W"]) + params[f"{name}.b"]


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------

def project_regions(regions, W: Tensor) -> Tensor:
    """Rows of ``concat(appearance, position)`` times ``W`` (no bias)."""
    if isinstance(regions, (list, tuple)):
        regions = np.stack([r.concat() for r in regions]) if regions else np.zeros((0, W.shape[0]))
    x = regions if isinstance(regions, Tensor) else Tensor(np.asarray(regions, dtype=np.float64))
    return matmul(x, W)


def embed(params: Params, batch: Batch, config: ModelConfig) -> Tensor:
    tok = (embedding_gather(params["word_emb"], batch.token_ids)
           + embedding_gather(params["pos_emb"], batch.text_pos)
           + embedding_gather(params["seg_emb"], batch.segments))
    parts = [tok]
    if batch.regions.shape[1]:
        reg = project_regions(batch.regions, params["region_proj"]) + params["seg_emb"][SEGMENT_REGION]
        parts.append(reg)
    x = concat(parts, axis=1) if len(parts) > 1 else tok
    return layer_norm(x, params["emb_ln.g"], params["emb_ln.b"], config.ln_eps)


def attention(params: Params, pre: str, x: Tensor, bias: np.ndarray, config: ModelConfig) -> Tensor:
    b, n, h = x.shape
    a = config.heads
    d = h // a

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, n, a, d)), (0, 2, 1, 3))

    q = heads(matmul(x, params[pre + "Wq"]) + params[pre + "bq"])
    k = heads(matmul(x, params[pre + "Wk"]) + params[pre + "bk"])
    v = heads(matmul(x, params[pre + "Wv"]) + params[pre + "bv"])
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(d)) + bias
    ctx = matmul(softmax_rows(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, h))
    return matmul(ctx, params[pre + "Wo"]) + params[pre + "bo"]


def forward(params: Params, batch: Batch, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Hidden states ``[B, N, H]`` and the [CLS] vectors ``[B, H]``."""
    x = embed(params, batch, config)
    bias = np.where(batch.mask, 0.0, MASK_FILL)[:, None, :, :]

    def norm(t: Tensor, name: str) -> Tensor:
        return layer_norm(t, params[name + ".g"], params[name + ".b"], config.ln_eps)

    def feed_forward(t: Tensor, pre: str) -> Tensor:
        return matmul(gelu(matmul(t, params[pre + "W1"]) + params[pre + "b1"]), params[pre + "W2"]) + params[pre + "b2"]

    for i in range(config.layers):
        pre = f"layer{i}."
        if config.norm == "pre":
            x = x + attention(params, pre, norm(x, pre + "ln1"), bias, config)
            x = x + feed_forward(norm(x, pre + "ln2"), pre)
        else:
            x = norm(x + attention(params, pre, x, bias, config), pre + "ln1")
            x = norm(x + feed_forward(x, pre), pre + "ln2")
    if config.norm == "pre":
        x = norm(x, "final_ln")
    return x, x[:, 0, :]


def encode(params: Params, seq: InputSequence, vocab: TokenVocab, config: ModelConfig,
           mask: str = "bidirectional") -> tuple[Tensor, Tensor]:
    """Single-sequence forward: hidden ``[n, H]`` and [CLS] vector ``[H]``."""
    hidden, cls = forward(params, collate([seq], vocab, config, mask), config)
    return hidden[0], cls[0]


def gather_rows(hidden: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Hidden vectors at ``(batch_idx[i], pos_idx[i])`` as an ``[M, H]`` tensor."""
    b, n, h = hidden.shape
    flat = reshape(hidden, (b * n, h))
    return embedding_gather(flat, np.asarray(batch_idx) * n + np.asarray(pos_idx))


def mlm_logits(params: Params, rows: Tensor) -> Tensor:
    return linear(params, "mlm", rows)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Params, config: ModelConfig, extra: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Named float64 tensors plus JSON metadata in one ``.npz`` container."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(config), "extra": extra or {}}
    payload = {f"param/{k}": v.data for k, v in params.items()}
    payload.update({f"aux/{k}": v for k, v in (arrays or {}).items()})
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    # fixed entry timestamps keep the archive bytes a function of the contents
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in payload.items():
            with zf.open(zipfile.ZipInfo(key + ".npy", _ZIP_EPOCH), "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig, dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k[6:]: Tensor(np.array(z[k]), requires_grad=True, name=k[6:])
                  for k in z.files if k.startswith("param/")}
        aux = {k[4:]: np.array(z[k]) for k in z.files if k.startswith("aux/")}
    return params, ModelConfig(**meta["config"]), meta["extra"], aux

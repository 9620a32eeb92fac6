"""Image-text matching backends.

Two backend families are defined by abstract contracts:

* :class:`DualEncoderBackend` scores a pair by encoding image and text
  separately and taking a temperature-scaled dot product of the
  L2-normalized vectors.
* :class:`FusionBackend` fuses image tokens and text through learned query
  embeddings into a single feature vector and projects it to a scalar.

The package ships deterministic toy implementations of both so every score
is reproducible on a laptop without pretrained weights.  Adapters wrapping
real pretrained models plug in behind the same two contracts: implement the
abstract methods, keep parameters as ``nn.Parameter`` so the training loop
and checkpoint format work unchanged.

All toy parameters are float64; scores are returned as 0-dim torch tensors
so gradients flow during training (call ``.item()`` at the boundary).
"""

from __future__ import annotations

import abc
import copy
import hashlib
import json
import re
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    DimMismatchError,
    EmptyTextError,
    ImageResolveError,
    ShrinkError,
)

BASE_TEXT_LEN = 77
EXTENDED_TEXT_LEN = 512
DEFAULT_TEXT_BUCKETS = 4096

# toy model sizes; small on purpose
DEFAULT_JOINT_DIM = 16
DEFAULT_MODEL_DIM = 32
DEFAULT_IMAGE_FEATURE_DIM = 32
DEFAULT_IMAGE_TOKENS = 4
DEFAULT_QUERIES = 4

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation into alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, n_buckets: int) -> int:
    """Stable hash bucket for a token (crc32, not process-salted)."""
    return zlib.crc32(token.encode("utf-8")) % n_buckets


def stable_seed(*parts) -> int:
    """Platform-stable 64-bit seed derived from the given parts."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def image_pseudo_feature(seed: int, image_ref: str, dim: int) -> np.ndarray:
    """Deterministic per-image feature derived by seeded hash of the reference."""
    if not image_ref:
        raise ImageResolveError("empty image reference")
    rng = np.random.default_rng(stable_seed("image", seed, image_ref))
    return rng.standard_normal(dim)


def image_pseudo_tokens(seed: int, image_ref: str, n_tokens: int,
                        dim: int) -> np.ndarray:
    """Deterministic per-image token grid for fusion backends."""
    if not image_ref:
        raise ImageResolveError("empty image reference")
    rng = np.random.default_rng(stable_seed("image-tokens", seed, image_ref))
    return rng.standard_normal((n_tokens, dim))


def _randn(g: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _linear(g: torch.Generator, d_in: int, d_out: int) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=torch.float64)
    with torch.no_grad():
        layer.weight.copy_(_randn(g, d_out, d_in) / np.sqrt(d_in))
        layer.bias.zero_()
    return layer


class HashTextEmbedder(nn.Module):
    """Token embeddings over a hash-bucketed vocabulary plus positional table.

    Texts longer than ``max_text_len`` are tail-truncated (head kept).
    """

    def __init__(self, n_buckets: int, d_model: int, max_text_len: int,
                 generator: torch.Generator):
        super().__init__()
        self.n_buckets = n_buckets
        self.d_model = d_model
        self.max_text_len = max_text_len
        self.token_table = nn.Parameter(_randn(generator, n_buckets, d_model) * 0.02)
        self.positional_table = nn.Parameter(
            _randn(generator, max_text_len, d_model) * 0.01)

    def token_ids(self, text: str) -> list[int]:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyTextError(f"no tokens in text {text!r}")
        return [token_bucket(t, self.n_buckets) for t in tokens[: self.max_text_len]]

    def forward(self, text: str) -> torch.Tensor:
        ids = self.token_ids(text)
        idx = torch.tensor(ids, dtype=torch.long)
        return self.token_table[idx] + self.positional_table[: len(ids)]

    def replace_positional_table(self, table: torch.Tensor) -> None:
        self.positional_table = nn.Parameter(table)
        self.max_text_len = table.shape[0]


class DualEncoderBackend(nn.Module, abc.ABC):
    """Contract for separate-encoder backends scored by normalized dot product."""

    kind: str = "dual"

    @abc.abstractmethod
    def encode_image(self, image_ref: str) -> torch.Tensor:
        """Image reference -> embedding of shape (d,)."""

    @abc.abstractmethod
    def encode_text(self, text: str) -> torch.Tensor:
        """Text -> embedding of shape (d,)."""

    @property
    @abc.abstractmethod
    def max_text_len(self) -> int:
        ...

    @property
    @abc.abstractmethod
    def positional_table(self) -> nn.Parameter:
        ...

    @abc.abstractmethod
    def replace_positional_table(self, table: torch.Tensor) -> None:
        """Swap in a new positional table and update max_text_len."""

    def config(self) -> dict:
        raise NotImplementedError(
            f"{type(self).__name__} does not support checkpointing")


class FusionBackend(nn.Module, abc.ABC):
    """Contract for query-fusion backends scored by a projection head."""

    kind: str = "fusion"
    feature_dim: int

    @abc.abstractmethod
    def features(self, image_ref: str, text: str) -> torch.Tensor:
        """Fused (image, text, queries) feature vector of shape (feature_dim,)."""

    @abc.abstractmethod
    def project(self, features: torch.Tensor) -> torch.Tensor:
        """Feature vector -> scalar matching score."""

    @property
    def guided_head(self) -> "GuidedProjectionHead | None":
        # nn.Module registers submodules in _modules; subclasses assign
        # self.guided_head through register_module instead
        return self._modules.get("guided_head")

    def project_guided(self, merged: torch.Tensor) -> torch.Tensor:
        head = self.guided_head
        if head is None:
            raise DimMismatchError("backend has no guided projection head")
        return head(merged)

    def config(self) -> dict:
        raise NotImplementedError(
            f"{type(self).__name__} does not support checkpointing")


class GuidedProjectionHead(nn.Module):
    """Scalar head over the 4d merged vector of two fusion features."""

    def __init__(self, feature_dim: int, generator: torch.Generator):
        super().__init__()
        self.feature_dim = feature_dim
        self.linear = _linear(generator, 4 * feature_dim, 1)

    def forward(self, merged: torch.Tensor) -> torch.Tensor:
        if merged.shape != (4 * self.feature_dim,):
            raise DimMismatchError(
                f"guided head expects dim {4 * self.feature_dim}, "
                f"got {tuple(merged.shape)}")
        return self.linear(merged).squeeze(-1)


class _ToyImageEncoder(nn.Module):
    """Trainable linear map over a seeded per-image pseudo-feature."""

    def __init__(self, seed: int, feature_dim: int, out_dim: int,
                 generator: torch.Generator):
        super().__init__()
        self.seed = seed
        self.feature_dim = feature_dim
        self.linear = _linear(generator, feature_dim, out_dim)
        self._cache: dict[str, torch.Tensor] = {}

    def raw_feature(self, image_ref: str) -> torch.Tensor:
        cached = self._cache.get(image_ref)
        if cached is None:
            feat = image_pseudo_feature(self.seed, image_ref, self.feature_dim)
            cached = torch.from_numpy(feat)
            self._cache[image_ref] = cached
        return cached

    def forward(self, image_ref: str) -> torch.Tensor:
        return self.linear(self.raw_feature(image_ref))


class _ToyTextEncoder(nn.Module):
    """Hash-bucket embedding bag: mean pool over tokens then a linear head."""

    def __init__(self, n_buckets: int, d_model: int, out_dim: int,
                 max_text_len: int, generator: torch.Generator):
        super().__init__()
        self.embedder = HashTextEmbedder(n_buckets, d_model, max_text_len, generator)
        self.head = _linear(generator, d_model, out_dim)

    def forward(self, text: str) -> torch.Tensor:
        return self.head(self.embedder(text).mean(dim=0))


class ToyDualEncoder(DualEncoderBackend):
    """Deterministic desk-scale dual encoder.

    Same seed gives byte-identical initial parameters; all parameters are
    trainable, including the temperature and the positional table.
    """

    kind = "toy-dual"

    def __init__(self, seed: int, d: int = DEFAULT_JOINT_DIM,
                 d_model: int = DEFAULT_MODEL_DIM,
                 n_buckets: int = DEFAULT_TEXT_BUCKETS,
                 max_text_len: int = BASE_TEXT_LEN,
                 image_feature_dim: int = DEFAULT_IMAGE_FEATURE_DIM):
        if d < 4:
            raise ValueError("joint dimension d must be at least 4")
        super().__init__()
        self.seed = seed
        self.d = d
        g = torch.Generator()
        g.manual_seed(stable_seed("toy-dual", seed))
        self.text_encoder = _ToyTextEncoder(n_buckets, d_model, d, max_text_len, g)
        self.image_encoder = _ToyImageEncoder(seed, image_feature_dim, d, g)
        self.temperature = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def encode_image(self, image_ref: str) -> torch.Tensor:
        return self.image_encoder(image_ref)

    def encode_text(self, text: str) -> torch.Tensor:
        return self.text_encoder(text)

    @property
    def max_text_len(self) -> int:
        return self.text_encoder.embedder.max_text_len

    @property
    def positional_table(self) -> nn.Parameter:
        return self.text_encoder.embedder.positional_table

    def replace_positional_table(self, table: torch.Tensor) -> None:
        self.text_encoder.embedder.replace_positional_table(table)

    def config(self) -> dict:
        emb = self.text_encoder.embedder
        return {
            "seed": self.seed,
            "d": self.d,
            "d_model": emb.d_model,
            "n_buckets": emb.n_buckets,
            "max_text_len": emb.max_text_len,
            "image_feature_dim": self.image_encoder.feature_dim,
        }


class _ToyImageTokenEncoder(nn.Module):
    """Linear map over a seeded per-image pseudo-token grid."""

    def __init__(self, seed: int, n_tokens: int, feature_dim: int,
                 d_model: int, generator: torch.Generator):
        super().__init__()
        self.seed = seed
        self.n_tokens = n_tokens
        self.feature_dim = feature_dim
        self.linear = _linear(generator, feature_dim, d_model)
        self._cache: dict[str, torch.Tensor] = {}

    def forward(self, image_ref: str) -> torch.Tensor:
        cached = self._cache.get(image_ref)
        if cached is None:
            feats = image_pseudo_tokens(self.seed, image_ref, self.n_tokens,
                                        self.feature_dim)
            cached = torch.from_numpy(feats)
            self._cache[image_ref] = cached
        return self.linear(cached)


class ToyFusionBackend(FusionBackend):
    """Deterministic desk-scale query-fusion backend.

    Learned query vectors attend over the concatenated image and text tokens
    (single-head dot-product attention); the attended queries are mean-pooled
    and mapped to the feature vector.  A plain head scores single texts and a
    guided head scores merged feature pairs.
    """

    kind = "toy-fusion"

    def __init__(self, seed: int, d: int = DEFAULT_JOINT_DIM,
                 d_model: int = DEFAULT_MODEL_DIM,
                 n_buckets: int = DEFAULT_TEXT_BUCKETS,
                 max_text_len: int = EXTENDED_TEXT_LEN,
                 image_feature_dim: int = DEFAULT_IMAGE_FEATURE_DIM,
                 n_image_tokens: int = DEFAULT_IMAGE_TOKENS,
                 n_queries: int = DEFAULT_QUERIES):
        if d < 4:
            raise ValueError("joint dimension d must be at least 4")
        super().__init__()
        self.seed = seed
        self.feature_dim = d
        g = torch.Generator()
        g.manual_seed(stable_seed("toy-fusion", seed))
        self.image_encoder = _ToyImageTokenEncoder(
            seed, n_image_tokens, image_feature_dim, d_model, g)
        self.text_embedder = HashTextEmbedder(n_buckets, d_model, max_text_len, g)
        # full-scale queries so attention starts non-uniform
        self.queries = nn.Parameter(_randn(g, n_queries, d_model))
        self.key_proj = _linear(g, d_model, d_model)
        self.value_proj = _linear(g, d_model, d_model)
        self.out_proj = _linear(g, d_model, d)
        self.proj = _linear(g, d, 1)
        self.guided_head = GuidedProjectionHead(d, g)

    def features(self, image_ref: str, text: str) -> torch.Tensor:
        image_tokens = self.image_encoder(image_ref)
        text_tokens = self.text_embedder(text)
        kv = torch.cat([image_tokens, text_tokens], dim=0)
        keys = self.key_proj(kv)
        values = self.value_proj(kv)
        scale = np.sqrt(self.queries.shape[1])
        attention = torch.softmax(self.queries @ keys.T / scale, dim=-1)
        pooled = (attention @ values).mean(dim=0)
        return self.out_proj(pooled)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape != (self.feature_dim,):
            raise DimMismatchError(
                f"projection head expects dim {self.feature_dim}, "
                f"got {tuple(features.shape)}")
        return self.proj(features).squeeze(-1)

    def config(self) -> dict:
        return {
            "seed": self.seed,
            "d": self.feature_dim,
            "d_model": self.text_embedder.d_model,
            "n_buckets": self.text_embedder.n_buckets,
            "max_text_len": self.text_embedder.max_text_len,
            "image_feature_dim": self.image_encoder.feature_dim,
            "n_image_tokens": self.image_encoder.n_tokens,
            "n_queries": self.queries.shape[0],
        }


def toy_backend(seed: int, d: int = DEFAULT_JOINT_DIM,
                kind: str = "dual") -> DualEncoderBackend | FusionBackend:
    """Deterministic toy backend of either family."""
    if kind in ("dual", ToyDualEncoder.kind):
        return ToyDualEncoder(seed=seed, d=d)
    if kind in ("fusion", ToyFusionBackend.kind):
        return ToyFusionBackend(seed=seed, d=d)
    raise ValueError(f"unknown toy backend kind {kind!r}")


# --- matching -------------------------------------------------------------

def match_vectors(image_vec: torch.Tensor, text_vec: torch.Tensor,
                  temperature: torch.Tensor | float) -> torch.Tensor:
    """exp(temperature) times the dot product of the L2-normalized vectors."""
    if image_vec.shape != text_vec.shape:
        raise DimMismatchError(
            f"image dim {tuple(image_vec.shape)} != text dim {tuple(text_vec.shape)}")
    image_unit = image_vec / image_vec.norm().clamp_min(1e-30)
    text_unit = text_vec / text_vec.norm().clamp_min(1e-30)
    if not torch.is_tensor(temperature):
        temperature = torch.tensor(float(temperature), dtype=image_vec.dtype)
    return torch.exp(temperature) * (image_unit @ text_unit)


def dual_match(backend: DualEncoderBackend, image_ref: str,
               text: str) -> torch.Tensor:
    """Dual-encoder matching score for one (image, text) pair."""
    image_vec = backend.encode_image(image_ref)
    text_vec = backend.encode_text(text)
    return match_vectors(image_vec, text_vec, backend.temperature)


def fusion_match(backend: FusionBackend, image_ref: str,
                 text: str) -> torch.Tensor:
    """Query-fusion matching score for one (image, text) pair."""
    return backend.project(backend.features(image_ref, text))


def match(backend: nn.Module, image_ref: str, text: str) -> torch.Tensor:
    """Dispatch to the backend family's matching function."""
    if isinstance(backend, DualEncoderBackend):
        return dual_match(backend, image_ref, text)
    if isinstance(backend, FusionBackend):
        return fusion_match(backend, image_ref, text)
    raise TypeError(f"not a matching backend: {type(backend).__name__}")


def merge_features(x1, x2) -> torch.Tensor:
    """Concatenate [x1, x2, x1 - x2, x1 * x2] into a 4d vector."""
    x1 = torch.as_tensor(x1, dtype=torch.float64) if not torch.is_tensor(x1) else x1
    x2 = torch.as_tensor(x2, dtype=torch.float64) if not torch.is_tensor(x2) else x2
    if x1.shape != x2.shape or x1.dim() != 1:
        raise DimMismatchError(
            f"expected equal 1-D shapes, got {tuple(x1.shape)} and {tuple(x2.shape)}")
    return torch.cat([x1, x2, x1 - x2, x1 * x2])


def extend_positional_table(backend: DualEncoderBackend, new_len: int,
                            seed: int | None = None) -> DualEncoderBackend:
    """Return a copy of the backend with a longer positional table.

    Rows 0..old_len-1 are copied bit-exactly; the fresh rows are drawn
    zero-mean with standard deviation matching the empirical std of the
    original rows, and are trainable like the rest of the table.
    """
    old_len = backend.max_text_len
    if new_len <= old_len:
        raise ShrinkError(f"new length {new_len} must exceed current {old_len}")
    extended = copy.deepcopy(backend)
    old = extended.positional_table.data
    std = float(old.std())
    if std == 0.0:
        std = 0.01
    if seed is None:
        seed = getattr(backend, "seed", 0)
    g = torch.Generator()
    g.manual_seed(stable_seed("extend-pos", seed, old_len, new_len))
    fresh = _randn(g, new_len - old_len, old.shape[1]) * std
    extended.replace_positional_table(torch.cat([old, fresh], dim=0))
    return extended


# --- checkpoints and debug dumps -------------------------------------------

_BACKEND_CLASSES = {
    ToyDualEncoder.kind: ToyDualEncoder,
    ToyFusionBackend.kind: ToyFusionBackend,
}

CHECKPOINT_FORMAT_VERSION = 1
_TENSOR_PREFIX = "tensor/"


def save_checkpoint(backend: nn.Module, path: str | Path) -> None:
    """Write a single-archive checkpoint with a JSON manifest of named tensors."""
    state = {name: value.detach().cpu().numpy()
             for name, value in backend.state_dict().items()}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backend_kind": backend.kind,
        "config": backend.config(),
        "tensors": sorted(state),
    }
    arrays = {_TENSOR_PREFIX + name: value for name, value in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.array(json.dumps(manifest)), **arrays)


def load_checkpoint(path: str | Path) -> nn.Module:
    """Reconstruct a toy backend from a checkpoint archive."""
    with np.load(path, allow_pickle=False) as npz:
        manifest = json.loads(str(npz["__manifest__"][()]))
        cls = _BACKEND_CLASSES.get(manifest["backend_kind"])
        if cls is None:
            raise ValueError(
                f"cannot reconstruct backend kind {manifest['backend_kind']!r}; "
                f"plugin backends must be rebuilt by their adapter")
        backend = cls(**manifest["config"])
        state = {name[len(_TENSOR_PREFIX):]: torch.from_numpy(npz[name].copy())
                 for name in npz.files if name.startswith(_TENSOR_PREFIX)}
    backend.load_state_dict(state)
    return backend


def parameter_hash(backend: nn.Module) -> str:
    """Stable hex digest over all named parameters."""
    digest = hashlib.sha256()
    for name, value in sorted(backend.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def dump_embeddings(backend: DualEncoderBackend, path: str | Path,
                    texts: Sequence[str] = (),
                    image_refs: Sequence[str] = ()) -> None:
    """Debug dump of raw embeddings (JSONL of {text|image_ref, vector})."""
    with open(path, "w", encoding="utf-8") as fh, torch.no_grad():
        for text in texts:
            vec = backend.encode_text(text).tolist()
            fh.write(json.dumps({"text": text, "vector": vec}) + "\n")
        for ref in image_refs:
            vec = backend.encode_image(ref).tolist()
            fh.write(json.dumps({"image_ref": ref, "vector": vec}) + "\n")


def dump_fusion_features(backend: FusionBackend, path: str | Path,
                         pairs: Iterable[tuple[str, str]]) -> None:
    """Debug dump of fused features (JSONL of {image_ref, text, vector})."""
    with open(path, "w", encoding="utf-8") as fh, torch.no_grad():
        for image_ref, text in pairs:
            vec = backend.features(image_ref, text).tolist()
            fh.write(json.dumps(
                {"image_ref": image_ref, "text": text, "vector": vec}) + "\n")

"""Modality tokens: text-anchored vectors for (modality, class) pairs.

A token starts life as a raw text-encoder output for the prompt
``"<class> in <modality>"``. At desk scale we either load such vectors from
a registry file or synthesize them with a deterministic hash-seeded
generator; a learnable linear projection maps them into the detector's
model space where they act as modality-context anchors.

Registry file format (JSON, UTF-8)::

    {"d_text": <int>, "tokens": {"<modality>|<class>": [floats...]}}

``|`` is forbidden inside modality and class names.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (DuplicateKeyError, RegistryFormatError, ShapeError,
                     TokenLookupError, ValidationError)

# Demo catalog: 27 (modality, class) pairs spanning five imaging domains.
MEDICAL_PROMPT_CATALOG: list[tuple[str, str]] = [
    ("CXR", "Aortic enlargement"),
    ("CXR", "Atelectasis"),
    ("CXR", "Calcification"),
    ("CXR", "Cardiomegaly"),
    ("CXR", "Consolidation"),
    ("CXR", "ILD"),
    ("CXR", "Infiltration"),
    ("CXR", "Lung Opacity"),
    ("CXR", "Nodule/Mass"),
    ("CXR", "Other lesion"),
    ("CXR", "Pleural effusion"),
    ("CXR", "Pleural thickening"),
    ("CXR", "Pneumothorax"),
    ("CXR", "Pulmonary fibrosis"),
    ("MRI", "Brain tumor"),
    ("Pathology (H&E stain)", "Epithelial"),
    ("Pathology (H&E stain)", "Lymphocyte"),
    ("Pathology (H&E stain)", "Neutrophil"),
    ("Pathology (H&E stain)", "Macrophage"),
    ("cardiac MRI", "Left heart ventricle"),
    ("cardiac MRI", "Myocardium"),
    ("cardiac MRI", "Right heart ventricle"),
    ("lung CT", "COVID-19 infection"),
    ("lung CT", "Nodule"),
    ("colon endoscope", "Neoplastic polyp"),
    ("colon endoscope", "Polyp"),
    ("colon endoscope", "Non-neoplastic polyp"),
]


@dataclass(frozen=True)
class PromptSpec:
    class_name: str
    modality_name: str
    rendered: str


@dataclass(frozen=True)
class RawEmbedding:
    vector: np.ndarray
    source: str  # "file" | "synthetic"


def build_prompt(class_name: str, modality_name: str) -> PromptSpec:
    """Render the fixed '<class> in <modality>' template."""
    for label, name in (("class", class_name), ("modality", modality_name)):
        if not name:
            raise ValidationError(f"empty {label} name")
        if name != name.strip():
            raise ValidationError(f"{label} name has leading/trailing whitespace: {name!r}")
    return PromptSpec(class_name=class_name, modality_name=modality_name,
                      rendered=f"{class_name} in {modality_name}")


# -- deterministic synthetic embeddings -------------------------------------

_M64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _M64
    return h


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, z ^ (z >> 31)


def synth_embedding(prompt: PromptSpec, d_text: int, seed64: int) -> RawEmbedding:
    """Deterministic unit-norm stand-in for a frozen text encoder.

    FNV-1a over (rendered prompt UTF-8 ++ seed64 as 8 LE bytes) seeds a
    splitmix64 stream; pairs of 53-bit uniforms feed Box-Muller; the result
    is L2-normalized. Same (prompt, d_text, seed) always gives the same
    vector.
    """
    if d_text < 2:
        raise ValidationError(f"d_text must be >= 2, got {d_text}")
    state = _fnv1a64(prompt.rendered.encode("utf-8")
                     + int(seed64).to_bytes(8, "little", signed=False))
    vals = np.empty(2 * ((d_text + 1) // 2), dtype=np.float64)
    for i in range(0, vals.size, 2):
        state, z1 = _splitmix64(state)
        state, z2 = _splitmix64(state)
        u1 = ((z1 >> 11) + 1) * 2.0 ** -53  # (0, 1]
        u2 = (z2 >> 11) * 2.0 ** -53        # [0, 1)
        r = math.sqrt(-2.0 * math.log(u1))
        vals[i] = r * math.cos(2.0 * math.pi * u2)
        vals[i + 1] = r * math.sin(2.0 * math.pi * u2)
    v = vals[:d_text]
    norm = float(np.sqrt((v * v).sum()))
    if norm == 0.0:
        raise ValidationError("degenerate synthetic embedding (zero norm)")
    return RawEmbedding(vector=v / norm, source="synthetic")


# -- registry ----------------------------------------------------------------


@dataclass
class TokenRegistry:
    """Immutable store of raw embeddings for every declared (d, c) pair."""

    d_text: int
    entries: dict = field(default_factory=dict)  # (modality, class) -> RawEmbedding
    modality_list: list = field(default_factory=list)
    class_list: list = field(default_factory=list)

    def embedding(self, modality: str, class_name: str) -> RawEmbedding:
        key = (modality, class_name)
        if key not in self.entries:
            raise TokenLookupError(f"undeclared (modality, class) pair {key}")
        return self.entries[key]

    def classes_of(self, modality: str) -> list:
        out = [c for (d, c) in self.entries if d == modality]
        if not out:
            raise TokenLookupError(f"modality {modality!r} not in registry")
        return out

    def pairs(self) -> list:
        return list(self.entries.keys())


def build_registry(pairs, d_text: int = 64, seed64: int = 1) -> TokenRegistry:
    """Synthesize one embedding per (modality, class) pair."""
    reg = TokenRegistry(d_text=d_text)
    for modality, class_name in pairs:
        key = (modality, class_name)
        if key in reg.entries:
            raise DuplicateKeyError(f"duplicate pair {key}")
        prompt = build_prompt(class_name, modality)
        reg.entries[key] = synth_embedding(prompt, d_text, seed64)
        if modality not in reg.modality_list:
            reg.modality_list.append(modality)
        if class_name not in reg.class_list:
            reg.class_list.append(class_name)
    return reg


def save_registry(reg: TokenRegistry, path) -> None:
    for modality, class_name in reg.entries:
        if "|" in modality or "|" in class_name:
            raise ValidationError(f"'|' not allowed in names: {(modality, class_name)}")
    doc = {
        "d_text": reg.d_text,
        "tokens": {f"{d}|{c}": [float(x) for x in emb.vector]
                   for (d, c), emb in reg.entries.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_registry(path) -> TokenRegistry:
    """Parse and validate a registry file; every defect gets its own error kind."""

    def reject_dupes(pairs):
        seen = set()
        for k, _ in pairs:
            if k in seen:
                raise DuplicateKeyError(f"duplicate registry key {k!r}")
            seen.add(k)
        return dict(pairs)

    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh, object_pairs_hook=reject_dupes)
    except DuplicateKeyError:
        raise
    except (OSError, json.JSONDecodeError) as e:
        raise RegistryFormatError(f"cannot read registry {path}: {e}") from e

    if not isinstance(doc, dict) or "d_text" not in doc or "tokens" not in doc:
        raise RegistryFormatError("registry must have 'd_text' and 'tokens' fields")
    d_text = doc["d_text"]
    if not isinstance(d_text, int) or d_text < 2:
        raise RegistryFormatError(f"bad d_text: {d_text!r}")

    reg = TokenRegistry(d_text=d_text)
    for key, vec in doc["tokens"].items():
        if not isinstance(key, str) or key.count("|") != 1:
            raise RegistryFormatError(f"token key must be '<modality>|<class>': {key!r}")
        modality, class_name = key.split("|")
        if not modality or not class_name:
            raise RegistryFormatError(f"empty name in key {key!r}")
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != d_text:
            raise ShapeError(f"entry {key!r} has length {arr.shape}, expected ({d_text},)")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"entry {key!r} has non-finite values")
        reg.entries[(modality, class_name)] = RawEmbedding(vector=arr, source="file")
        if modality not in reg.modality_list:
            reg.modality_list.append(modality)
        if class_name not in reg.class_list:
            reg.class_list.append(class_name)
    return reg


# -- projection into model space ---------------------------------------------


class TokenProjection:
    """Learnable linear map from text space to the detector's model space."""

    def __init__(self, d_model: int, d_text: int, rng: np.random.Generator):
        scale = 1.0 / math.sqrt(d_text)
        self.W = ad.param(rng.uniform(-scale, scale, size=(d_model, d_text)))

    @property
    def d_model(self) -> int:
        return self.W.shape[0]

    @property
    def d_text(self) -> int:
        return self.W.shape[1]

    def project(self, raw: np.ndarray) -> ad.Tensor:
        e = np.asarray(raw, dtype=np.float64)
        if e.shape != (self.d_text,):
            raise ShapeError(f"embedding has shape {e.shape}, expected ({self.d_text},)")
        col = ad.constant(e.reshape(-1, 1))
        return ad.reshape(ad.matmul(self.W, col), (self.d_model,))

    def parameters(self) -> list:
        return [("token_projection.W", self.W)]


def project_token(reg: TokenRegistry, proj: TokenProjection,
                  modality: str, class_name: str) -> ad.Tensor:
    """Model-space token for one declared pair; differentiable through W."""
    return proj.project(reg.embedding(modality, class_name).vector)


# -- clustering quality --------------------------------------------------------


def silhouette_score(vectors, labels) -> float:
    """Mean silhouette over points with Euclidean distance.

    Singleton-cluster points and points with a == b == 0 contribute 0.
    """
    X = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(list(labels))
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("vectors and labels must align")
    if X.shape[0] < 2:
        raise ValidationError("need at least 2 points")
    uniq = list(dict.fromkeys(y.tolist()))
    if len(uniq) < 2:
        raise ValidationError("need at least 2 distinct labels")

    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    total = 0.0
    n = X.shape[0]
    for i in range(n):
        same = (y == y[i])
        n_same = int(same.sum())
        if n_same == 1:
            continue  # singleton contributes 0
        a = dist[i][same].sum() / (n_same - 1)
        b = min(dist[i][y == lab].mean() for lab in uniq if lab != y[i])
        m = max(a, b)
        if m > 0.0:
            total += (b - a) / m
    return total / n

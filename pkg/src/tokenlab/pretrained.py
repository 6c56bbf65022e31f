"""Deterministic stand-ins for pretrained description encoders and the frozen cache.

An encoder is a fixed word-vector table: a word hashes (FNV-1a) to one of
``lm_vocab_size`` rows, and each row is a unit vector drawn from a Philox
stream keyed by ``(seed, row)``. Only the first ``round(quality * native_dim)``
coordinates are active, so ``quality`` sets how many semantic directions the
encoder can express. Rows below ``shared_fraction * lm_vocab_size`` use a seed
common to every encoder, giving different-domain encoders a partial overlap.

Cache file layout (little endian)::

    b"TLCACHE1" | u32 vocab_size | u32 native_dim | u64 fnv1a(payload)
    | float32[vocab_size * native_dim] payload (row major)
    | u32 name_length | name (UTF-8)
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .events import Vocabulary
from .kernels import fnv1a64

CACHE_MAGIC = b"TLCACHE1"
SHARED_SEED = 0x5EED
_WORD_RE = re.compile(r"[^a-z0-9]+")


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptionEncoderSpec:
    name: str
    native_dim: int
    quality: float
    seed: int
    lm_vocab_size: int = 8192
    shared_fraction: float = 0.5

    @property
    def active_dims(self) -> int:
        return max(1, min(self.native_dim, round(self.quality * self.native_dim)))


ENCODERS = {
    "tiny-clinical": DescriptionEncoderSpec("tiny-clinical", 768, 0.1, 11),
    "large-clinical": DescriptionEncoderSpec("large-clinical", 1024, 0.75, 11),
    "large-general": DescriptionEncoderSpec("large-general", 1024, 0.75, 29),
}


def get_encoder(name: str) -> DescriptionEncoderSpec:
    try:
        return ENCODERS[name]
    except KeyError:
        raise KeyError(f"unknown encoder {name!r}; known: {sorted(ENCODERS)}") from None


def tokenize_words(text: str) -> list[str]:
    return [w for w in _WORD_RE.split(text.lower()) if w]


def word_row(word: str, spec: DescriptionEncoderSpec) -> int:
    return fnv1a64(word.encode("utf-8")) % spec.lm_vocab_size


def _make_row_vector(spec: DescriptionEncoderSpec, row: int) -> np.ndarray:
    seed = SHARED_SEED if row < spec.shared_fraction * spec.lm_vocab_size else spec.seed
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, spec.native_dim, row])))
    vec = np.zeros(spec.native_dim)
    k = spec.active_dims
    vec[:k] = rng.standard_normal(k)
    vec /= np.linalg.norm(vec)
    return vec


@lru_cache(maxsize=1 << 16)
def _row_vector(spec: DescriptionEncoderSpec, row: int) -> np.ndarray:
    vec = _make_row_vector(spec, row)
    vec.flags.writeable = False
    return vec


def word_table(spec: DescriptionEncoderSpec) -> np.ndarray:
    """The full (lm_vocab_size, native_dim) table; initial state of a trainable encoder."""
    return np.stack([_make_row_vector(spec, r) for r in range(spec.lm_vocab_size)])


def encode_description(text: str, spec: DescriptionEncoderSpec) -> np.ndarray:
    """L2-normalized mean of the word vectors of ``text`` (float64)."""
    words = tokenize_words(text)
    if not words:
        raise ValueError("cannot encode empty description")
    mean = np.mean([_row_vector(spec, word_row(w, spec)) for w in words], axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValueError(f"degenerate description {text!r}")
    return mean / norm


# -- mappings -------------------------------------------------------------------

_TEMPLATES = {
    "LAB": "{} level measurement",
    "DIAGNOSIS": "diagnosis of {}",
    "MEDICATION": "{} administered",
    "PROCEDURE": "{} procedure performed",
    "INFUSION_START": "infusion of {} started",
    "INFUSION_END": "infusion of {} ended",
}
_LEXICON = (
    "potassium chloride sodium bicarbonate magnesium sulfate calcium gluconate phosphate "
    "heparin insulin regular glucose dextrose saline lactate ringer albumin propofol fentanyl "
    "midazolam norepinephrine vasopressin dopamine dobutamine epinephrine furosemide "
    "vancomycin cefepime piperacillin tazobactam meropenem metronidazole acetaminophen "
    "creatinine urea nitrogen hemoglobin hematocrit platelet count white blood cell troponin "
    "lactic acid bilirubin alanine aminotransferase arterial oxygen carbon dioxide ph serum "
    "renal hepatic cardiac pulmonary septic acute chronic kidney failure heart pneumonia "
    "respiratory distress hypertension diabetes mellitus atrial fibrillation embolism "
    "central venous catheter intubation ventilation dialysis transfusion packed red"
).split()


def describe_code(code: str) -> str:
    """Synthetic human-readable description of a ``FAMILY//number`` code."""
    family, _, _ = code.partition("//")
    h = fnv1a64(code.encode("utf-8"))
    n = len(_LEXICON)
    words = [_LEXICON[(h >> (16 * i)) % n] for i in range(3)]
    template = _TEMPLATES.get(family, family.lower().replace("_", " ") + " {}")
    text = template.format(" ".join(words))
    return text[0].upper() + text[1:]


@dataclass(frozen=True)
class MappingTable:
    entries: dict  # code -> description or None (fallback to the code string)
    coverage: float

    def __post_init__(self):
        if abs(self.recomputed_coverage() - self.coverage) > 1e-9:
            raise ValueError("stored coverage does not match entries")

    def recomputed_coverage(self) -> float:
        if not self.entries:
            return 0.0
        return sum(v is not None for v in self.entries.values()) / len(self.entries)

    def text_for(self, code: str) -> str:
        desc = self.entries[code]
        return code if desc is None else desc


ORIGINAL_COVERAGE = 0.25


def build_mapping(vocab: Vocabulary, mode: str = "enhanced", seed: int = 0) -> MappingTable:
    if mode == "enhanced":
        entries = {c: describe_code(c) for c in vocab.codes}
    elif mode == "original":
        n_keep = round(ORIGINAL_COVERAGE * vocab.size)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x3A9])))
        keep = set(rng.choice(vocab.size, size=n_keep, replace=False).tolist())
        entries = {c: (describe_code(c) if i in keep else None) for i, c in enumerate(vocab.codes)}
    else:
        raise ValueError(f"mapping mode must be 'original' or 'enhanced', got {mode!r}")
    coverage = sum(v is not None for v in entries.values()) / max(1, len(entries))
    return MappingTable(entries, coverage)


# -- cache ----------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingCache:
    encoder: str
    rows: np.ndarray  # float32 (vocab_size, native_dim), read-only
    digest: int

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def native_dim(self) -> int:
        return self.rows.shape[1]


def _payload(rows: np.ndarray) -> bytes:
    return np.ascontiguousarray(rows, dtype="<f4").tobytes()


def make_cache(rows: np.ndarray, encoder: str) -> EmbeddingCache:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    rows.flags.writeable = False
    return EmbeddingCache(encoder, rows, fnv1a64(_payload(rows)))


def compute_cache(vocab: Vocabulary, mapping: MappingTable, spec: DescriptionEncoderSpec) -> EmbeddingCache:
    rows = np.stack([encode_description(mapping.text_for(c), spec) for c in vocab.codes])
    return make_cache(rows, spec.name)


def cache_bytes(cache: EmbeddingCache) -> bytes:
    name = cache.encoder.encode("utf-8")
    head = CACHE_MAGIC + struct.pack("<IIQ", cache.vocab_size, cache.native_dim, cache.digest)
    return head + _payload(cache.rows) + struct.pack("<I", len(name)) + name


def save_cache(cache: EmbeddingCache, path) -> None:
    Path(path).write_bytes(cache_bytes(cache))


def cache_from_bytes(data: bytes) -> EmbeddingCache:
    if data[:8] != CACHE_MAGIC:
        raise CacheError("bad cache magic")
    if len(data) < 24:
        raise CacheError("truncated cache header")
    vocab_size, native_dim, digest = struct.unpack_from("<IIQ", data, 8)
    start = 24
    end = start + 4 * vocab_size * native_dim
    if len(data) < end + 4:
        raise CacheError("truncated cache payload")
    payload = data[start:end]
    if fnv1a64(payload) != digest:
        raise CacheError("cache digest mismatch")
    (name_len,) = struct.unpack_from("<I", data, end)
    if len(data) != end + 4 + name_len:
        raise CacheError("cache trailer length mismatch")
    try:
        name = data[end + 4:].decode("utf-8")
    except UnicodeDecodeError:
        raise CacheError("encoder name is not valid UTF-8") from None
    rows = np.frombuffer(payload, dtype="<f4").reshape(vocab_size, native_dim).astype(np.float32)
    rows.flags.writeable = False
    return EmbeddingCache(name, rows, digest)


def load_cache(path) -> EmbeddingCache:
    return cache_from_bytes(Path(path).read_bytes())


def build_cache(vocab: Vocabulary, mapping: MappingTable, spec: DescriptionEncoderSpec,
                path=None) -> EmbeddingCache:
    """Encode every code's description (or fallback string); persist when ``path`` is given."""
    cache = compute_cache(vocab, mapping, spec)
    if path is not None:
        save_cache(cache, path)
        reread = load_cache(path)
        if reread.digest != cache.digest:
            raise CacheError("digest mismatch on re-open")
    return cache


def frozen_lookup(code_ids, cache: EmbeddingCache, projection: np.ndarray):
    """Project each distinct cached row once and scatter back in input order.

    Returns ``(vectors, n_projected)``.
    """
    ids = np.asarray(code_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cache.vocab_size):
        raise IndexError("code id out of range for cache")
    if projection.shape[0] != cache.native_dim:
        raise ValueError("projection rows must equal the cache native_dim")
    uniq, inverse = np.unique(ids, return_inverse=True)
    projected = cache.rows[uniq].astype(projection.dtype) @ projection
    return projected[inverse.reshape(ids.shape)], len(uniq)


# -- trainable encoder structure -------------------------------------------------

def description_matrix(vocab: Vocabulary, mapping: MappingTable,
                       spec: DescriptionEncoderSpec) -> sp.csr_matrix:
    """Sparse (vocab_size, lm_vocab_size) word-averaging operator."""
    indptr, indices, data = [0], [], []
    for code in vocab.codes:
        words = tokenize_words(mapping.text_for(code))
        if not words:
            raise ValueError(f"empty description for {code!r}")
        rows = [word_row(w, spec) for w in words]
        counts: dict[int, int] = {}
        for r in rows:
            counts[r] = counts.get(r, 0) + 1
        for r, c in sorted(counts.items()):
            indices.append(r)
            data.append(c / len(rows))
        indptr.append(len(indices))
    return sp.csr_matrix((np.array(data), np.array(indices), np.array(indptr)),
                         shape=(vocab.size, spec.lm_vocab_size))


class EncoderResources:
    """Lazily built caches and trainable-encoder inputs for one vocabulary.

    When ``cache_dir`` is set, frozen caches are read from (or written to)
    ``<cache_dir>/<encoder>.<mapping>.tlcache``.
    """

    def __init__(self, vocab: Vocabulary, mapping_seed: int = 0, cache_dir=None):
        self.vocab = vocab
        self.mapping_seed = mapping_seed
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._mappings: dict = {}
        self._caches: dict = {}

    def mapping(self, mode: str) -> MappingTable:
        if mode not in self._mappings:
            self._mappings[mode] = build_mapping(self.vocab, mode, self.mapping_seed)
        return self._mappings[mode]

    def cache(self, encoder: str, mode: str) -> EmbeddingCache:
        key = (encoder, mode)
        if key not in self._caches:
            spec = get_encoder(encoder)
            path = None
            if self.cache_dir is not None:
                path = self.cache_dir / f"{encoder}.{mode}.tlcache"
                if path.exists():
                    cache = load_cache(path)
                    if cache.vocab_size != self.vocab.size or cache.encoder != encoder:
                        raise CacheError(f"{path}: cache does not match vocabulary/encoder")
                    self._caches[key] = cache
                    return cache
                self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._caches[key] = build_cache(self.vocab, self.mapping(mode), spec, path)
        return self._caches[key]

    def trainable(self, encoder: str, mode: str):
        spec = get_encoder(encoder)
        return description_matrix(self.vocab, self.mapping(mode), spec), word_table(spec)

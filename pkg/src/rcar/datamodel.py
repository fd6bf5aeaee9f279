"""Typed containers, feature-file I/O, manifests and the synthetic data generator."""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

FEATURE_MAGIC = b"XMRF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class RegionSet:
    """Region features of one image, ``K x d_raw`` float32."""

    features: np.ndarray
    image_id: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise DataError(f"region features must be a non-empty K x d matrix, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise DataError(f"image {self.image_id}: non-finite region feature")
        if not np.any(feats != 0, axis=1).all():
            raise DataError(f"image {self.image_id}: all-zero region row")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def num_regions(self) -> int:
        return self.features.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SentenceSet:
    """One tokenized caption, sentinels included."""

    token_ids: tuple[int, ...]
    caption_id: str
    image_id: str
    token_tags: tuple[str, ...] | None = None

    def __post_init__(self):
        ids = tuple(int(t) for t in self.token_ids)
        if len(ids) < 1:
            raise DataError(f"caption {self.caption_id}: empty token sequence")
        if min(ids) < 0:
            raise DataError(f"caption {self.caption_id}: negative token id")
        if ids[0] != START or ids[-1] != END:
            raise DataError(f"caption {self.caption_id}: missing <start>/<end> sentinels")
        object.__setattr__(self, "token_ids", ids)
        if self.token_tags is not None:
            tags = tuple(str(t) for t in self.token_tags)
            if len(tags) != len(ids):
                raise DataError(f"caption {self.caption_id}: {len(tags)} tags for {len(ids)} tokens")
            object.__setattr__(self, "token_tags", tags)

    @property
    def length(self) -> int:
        return len(self.token_ids)


class Vocabulary:
    """Word <-> index map with the four special tokens at fixed positions."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos = list(SPECIAL_TOKENS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> tuple[int, ...]:
        """Whitespace-tokenize ``text`` and wrap it in sentinels."""
        body = [self.stoi.get(w, UNK) for w in text.lower().split()]
        return (START, *body, END)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    pairs: tuple[tuple[str, str], ...]
    captions_per_image: int = 5

    def __post_init__(self):
        pairs = tuple((str(i), str(c)) for i, c in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        seen: dict[str, str] = {}
        for image_id, caption_id in pairs:
            if caption_id in seen and seen[caption_id] != image_id:
                raise DataError(f"caption {caption_id} maps to two images")
            seen[caption_id] = image_id
        if self.captions_per_image < 1:
            raise DataError("captions_per_image must be >= 1")
        object.__setattr__(self, "_caption_to_image", seen)

    def image_of(self, caption_id: str) -> str:
        try:
            return self._caption_to_image[str(caption_id)]
        except KeyError:
            raise DataError(f"unknown caption id {caption_id!r}") from None

    @property
    def image_ids(self) -> list[str]:
        return list(dict.fromkeys(i for i, _ in self.pairs))

    @property
    def caption_ids(self) -> list[str]:
        return [c for _, c in self.pairs]

    def captions_of(self, image_id: str) -> list[str]:
        return [c for i, c in self.pairs if i == image_id]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the desk-scale paired data generator.

    ``d`` is the raw region feature width. Concepts are one-hot directions in the
    first ``latent_concept_count`` channels; the remaining channels carry
    per-region nuisance energy that is irrelevant for matching.
    """

    num_pairs: int = 64
    K: int = 8
    L: int = 6
    d: int = 64
    latent_concept_count: int = 32
    noise_scale: float = 0.1
    seed: int = 0
    filler_count: int = 8
    nuisance_scale: float = 0.5
    vocab_size: int | None = None
    concepts: int | None = None  # concepts per pair; default min(K, L, latent_concept_count)

    def __post_init__(self):
        for name in ("num_pairs", "K", "L", "d", "latent_concept_count", "filler_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise_scale < 0 or self.nuisance_scale < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.concepts is not None and not 1 <= self.concepts <= min(self.K, self.L, self.latent_concept_count):
            raise ConfigError(f"concepts must lie in 1..min(K, L, latent_concept_count), got {self.concepts}")

    @property
    def concepts_per_pair(self) -> int:
        if self.concepts is not None:
            return self.concepts
        return min(self.K, self.L, self.latent_concept_count)

    def vocabulary(self) -> Vocabulary:
        words = [f"filler{i}" for i in range(self.filler_count)]
        words += [f"concept{i}" for i in range(self.latent_concept_count)]
        return Vocabulary(words)


# -- feature files -------------------------------------------------------------


def write_features(path: str | os.PathLike | io.BufferedIOBase, regions: Sequence[RegionSet]) -> None:
    """Write region sets sharing one ``K x d_raw`` shape to the XMRF format."""
    if not regions:
        raise DataError("no region sets to write")
    K, d_raw = regions[0].features.shape
    for r in regions:
        if r.features.shape != (K, d_raw):
            raise DataError(f"image {r.image_id}: shape {r.features.shape} != {(K, d_raw)}")
    own = not hasattr(path, "write")
    fh = open(path, "wb") if own else path
    try:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(regions), K, d_raw))
        for r in regions:
            fh.write(np.ascontiguousarray(r.features, dtype="<f4").tobytes())
    finally:
        if own:
            fh.close()


def read_feature_header(fh) -> tuple[int, int, int]:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise FormatError("truncated feature header")
    magic, version, n, K, d_raw = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if K < 1 or d_raw < 1:
        raise FormatError(f"invalid shape K={K}, d_raw={d_raw}")
    return n, K, d_raw


def load_features(path: str | os.PathLike, image_ids: Sequence[str] | None = None) -> Iterator[RegionSet]:
    """Stream RegionSets from an XMRF file.

    Image ids are not stored in the file; they default to the record index.
    """
    with open(path, "rb") as fh:
        n, K, d_raw = read_feature_header(fh)
        if image_ids is not None and len(image_ids) != n:
            raise DataError(f"{len(image_ids)} image ids for {n} records")
        nbytes = K * d_raw * 4
        for idx in range(n):
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"truncated record {idx}: {len(raw) // (4 * d_raw)} of {K} rows present")
            feats = np.frombuffer(raw, dtype="<f4").reshape(K, d_raw).astype(np.float32)
            if not np.isfinite(feats).all():
                raise DataError(f"record {idx}: non-finite feature value")
            yield RegionSet(feats, image_ids[idx] if image_ids is not None else str(idx))
        if fh.read(1):
            raise FormatError(f"trailing bytes after {n} records")


# -- manifests and captions ------------------------------------------------------


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    lines = [
        f"split: {manifest.split}",
        f"captions_per_image: {manifest.captions_per_image}",
        "pairs:",
    ]
    lines += [f"{i}\t{c}" for i, c in manifest.pairs]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    meta: dict[str, str] = {}
    pairs = []
    in_pairs = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if in_pairs:
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(f"{path}:{lineno}: expected '<image_id>\\t<caption_id>'")
                pairs.append((parts[0], parts[1]))
            elif line.strip() == "pairs:":
                in_pairs = True
            else:
                key, sep, value = line.partition(":")
                if not sep:
                    raise FormatError(f"{path}:{lineno}: expected 'key: value'")
                meta[key.strip()] = value.strip()
    if "split" not in meta:
        raise FormatError(f"{path}: missing 'split'")
    try:
        cpi = int(meta.get("captions_per_image", "5"))
    except ValueError:
        raise FormatError(f"{path}: captions_per_image is not an integer") from None
    return DatasetManifest(meta["split"], tuple(pairs), cpi)


def write_captions(path: str | os.PathLike, sentences: Sequence[SentenceSet]) -> None:
    """TSV: caption_id, image_id, space-separated token ids, space-separated tags."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            tags = " ".join(s.token_tags) if s.token_tags is not None else ""
            fh.write(f"{s.caption_id}\t{s.image_id}\t{' '.join(map(str, s.token_ids))}\t{tags}\n")


def read_captions(path: str | os.PathLike) -> list[SentenceSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            try:
                ids = tuple(int(t) for t in parts[2].split())
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer token id") from None
            tags = tuple(parts[3].split()) if len(parts) == 4 and parts[3] else None
            out.append(SentenceSet(ids, parts[0], parts[1], tags))
    return out


# -- synthetic data ---------------------------------------------------------------


def generate_synthetic(spec: SyntheticSpec):
    """Paired regions/captions sharing latent concepts.

    Each pair owns a distinct set of ``spec.concepts_per_pair`` concepts. The
    caption names every concept once and pads with filler words; the image holds
    one full-strength region per concept, and background regions carry an
    unrelated concept at half strength.
    """
    vocab = spec.vocabulary()
    if spec.vocab_size is not None and len(vocab) > spec.vocab_size:
        raise ConfigError(
            f"{spec.latent_concept_count} concepts + {spec.filler_count} fillers + specials "
            f"exceed vocabulary capacity {spec.vocab_size}"
        )
    C, s = spec.latent_concept_count, spec.concepts_per_pair
    if C > spec.d:
        raise ConfigError(f"latent_concept_count {C} exceeds feature width d={spec.d}")
    if math.comb(C, s) < spec.num_pairs:
        raise ConfigError(f"only {math.comb(C, s)} distinct concept sets for {spec.num_pairs} pairs")

    rng = np.random.default_rng(spec.seed)
    filler0 = len(SPECIAL_TOKENS)
    concept0 = filler0 + spec.filler_count

    used: set[frozenset[int]] = set()
    regions, sentences, pairs = [], [], []
    for p in range(spec.num_pairs):
        while True:
            concepts = rng.choice(C, size=s, replace=False)
            key = frozenset(concepts.tolist())
            if key not in used:
                used.add(key)
                break

        feats = np.zeros((spec.K, spec.d), dtype=np.float64)
        feats[np.arange(s), concepts] = 1.0
        others = np.setdiff1d(np.arange(C), concepts)
        for r in range(s, spec.K):
            pool = others if others.size else np.arange(C)
            feats[r, rng.choice(pool)] = 0.5
        if spec.d > C:
            feats[:, C:] = spec.nuisance_scale * rng.standard_normal((spec.K, spec.d - C))
        feats += spec.noise_scale * rng.standard_normal(feats.shape)
        feats = feats[rng.permutation(spec.K)]

        body = [concept0 + int(c) for c in concepts]
        tags = ["concept"] * s
        body += [filler0 + int(f) for f in rng.integers(0, spec.filler_count, size=spec.L - s)]
        tags += ["filler"] * (spec.L - s)
        order = rng.permutation(spec.L)
        body = [body[i] for i in order]
        tags = [tags[i] for i in order]

        image_id = caption_id = str(p)
        regions.append(RegionSet(feats.astype(np.float32), image_id))
        sentences.append(
            SentenceSet((START, *body, END), caption_id, image_id, ("<start>", *tags, "<end>"))
        )
        pairs.append((image_id, caption_id))

    manifest = DatasetManifest("synthetic", tuple(pairs), captions_per_image=1)
    return regions, sentences, manifest


def concept_overlap_scores(regions: Sequence[RegionSet], sentences: Sequence[SentenceSet], spec: SyntheticSpec) -> np.ndarray:
    """Brute-force ``[n_images, n_captions]`` count of shared full-strength concepts."""
    C = spec.latent_concept_count
    concept0 = len(SPECIAL_TOKENS) + spec.filler_count
    image_sets = []
    for r in regions:
        found = set()
        for row in r.features:
            c = int(np.argmax(row[:C]))
            if row[c] > 0.75:
                found.add(c)
        image_sets.append(found)
    caption_sets = [{t - concept0 for t in s.token_ids if concept0 <= t < concept0 + C} for s in sentences]
    out = np.zeros((len(regions), len(sentences)))
    for i, a in enumerate(image_sets):
        for j, b in enumerate(caption_sets):
            out[i, j] = len(a & b)
    return out


@dataclass
class PairedData:
    """Aligned regions + captions + manifest, the unit passed to training/eval."""

    regions: list[RegionSet]
    sentences: list[SentenceSet]
    manifest: DatasetManifest
    vocab_size: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {r.image_id for r in self.regions}
        for s in self.sentences:
            if s.image_id not in ids:
                raise DataError(f"caption {s.caption_id} references unknown image {s.image_id}")
            if max(s.token_ids) >= self.vocab_size:
                raise DataError(f"caption {s.caption_id}: token id beyond vocabulary size {self.vocab_size}")

    def image_index(self) -> dict[str, int]:
        return {r.image_id: i for i, r in enumerate(self.regions)}

    def caption_targets(self) -> np.ndarray:
        """Index into ``regions`` of each caption's image."""
        idx = self.image_index()
        return np.array([idx[s.image_id] for s in self.sentences], dtype=np.int64)

    def subset(self, image_indices: Sequence[int]) -> "PairedData":
        keep = [self.regions[i] for i in image_indices]
        ids = {r.image_id for r in keep}
        sents = [s for s in self.sentences if s.image_id in ids]
        pairs = tuple(p for p in self.manifest.pairs if p[0] in ids)
        man = DatasetManifest(self.manifest.split, pairs, self.manifest.captions_per_image)
        return PairedData(keep, sents, man, self.vocab_size, dict(self.extra))


def synthetic_dataset(spec: SyntheticSpec) -> PairedData:
    regions, sentences, manifest = generate_synthetic(spec)
    return PairedData(regions, sentences, manifest, len(spec.vocabulary()))


def save_dataset(directory: str | os.PathLike, data: PairedData) -> None:
    os.makedirs(directory, exist_ok=True)
    write_features(os.path.join(directory, "features.xmrf"), data.regions)
    write_captions(os.path.join(directory, "captions.tsv"), data.sentences)
    write_manifest(os.path.join(directory, "manifest.txt"), data.manifest)
    with open(os.path.join(directory, "image_ids.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(r.image_id for r in data.regions) + "\n")
    with open(os.path.join(directory, "vocab_size.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{data.vocab_size}\n")


def load_dataset(directory: str | os.PathLike) -> PairedData:
    def path(name):
        return os.path.join(directory, name)

    ids = None
    if os.path.exists(path("image_ids.txt")):
        with open(path("image_ids.txt"), encoding="utf-8") as fh:
            ids = [line.strip() for line in fh if line.strip()]
    regions = list(load_features(path("features.xmrf"), ids))
    sentences = read_captions(path("captions.tsv"))
    manifest = read_manifest(path("manifest.txt"))
    if os.path.exists(path("vocab_size.txt")):
        with open(path("vocab_size.txt"), encoding="utf-8") as fh:
            vocab_size = int(fh.read().strip())
    else:
        vocab_size = max(max(s.token_ids) for s in sentences) + 1
    return PairedData(regions, sentences, manifest, vocab_size)

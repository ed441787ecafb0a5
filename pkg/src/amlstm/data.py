"""Synthetic bimodal datasets and the on-disk feature container.

Each class is defined by a latent random-walk template over time, so the
class evidence is genuinely temporal (bag-of-frames statistics do not
separate the classes).  Video frames observe the template through one fixed
orthonormal embedding; audio observes it through another at 4x frame rate,
scaled by ``audio_informativeness`` so the audio channel can be made less
useful than video on purpose.

Containers are a `<name>.manifest` text file plus a `<name>.bin` blob; see
``save_container`` for the exact byte layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, DimensionError, FormatError, atomic_write_bytes
from .rng import Rng

AUDIO_RATE_RATIO = 4

CONTAINER_FORMAT = "amlstm-feature-container"
CONTAINER_VERSION = 1


@dataclass
class SampleRecord:
    id: str
    video: np.ndarray  # (T, d_v)
    audio: np.ndarray  # (T_a, d_a) raw, or (T, ratio*d_a) once aligned
    label: int


@dataclass
class SynthConfig:
    classes: int = 4
    samples_per_class: int = 10
    steps: int = 12          # video steps per sample; audio gets 4x
    d_v: int = 8
    d_a: int = 4
    noise_sigma: float = 0.1
    audio_informativeness: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "samples_per_class", "steps", "d_v", "d_a"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.audio_informativeness <= 1.0:
            raise ConfigError(
                f"audio_informativeness must be in [0, 1], got {self.audio_informativeness}"
            )


def _orthonormal(rng: Rng, d: int, k: int) -> np.ndarray:
    """(d, k) matrix with orthonormal columns, sign-fixed for determinism."""
    q, r = np.linalg.qr(rng.normal((d, k)))
    return q * np.where(np.diag(r) >= 0, 1.0, -1.0)


def generate(cfg: SynthConfig) -> list[SampleRecord]:
    """Deterministic synthetic dataset; labels balanced by construction."""
    root = Rng(cfg.seed)
    latent = min(4, cfg.d_v, cfg.d_a)
    embed_v = _orthonormal(root.child("embed_v"), cfg.d_v, latent)
    embed_a = _orthonormal(root.child("embed_a"), cfg.d_a, latent)

    records = []
    for c in range(cfg.classes):
        # class template: a latent random walk, normalized so the endpoint
        # variance is O(1) regardless of length
        walk = root.child("template", c).normal((cfg.steps, latent))
        template = np.cumsum(walk, axis=0) / np.sqrt(cfg.steps)
        audio_template = np.repeat(template, AUDIO_RATE_RATIO, axis=0)
        for j in range(cfg.samples_per_class):
            srng = root.child("sample", c, j)
            video = template @ embed_v.T
            if cfg.noise_sigma > 0:
                video = video + cfg.noise_sigma * srng.child("video").normal(video.shape)
            audio = cfg.audio_informativeness * (audio_template @ embed_a.T)
            if cfg.noise_sigma > 0:
                audio = audio + cfg.noise_sigma * srng.child("audio").normal(audio.shape)
            records.append(SampleRecord(
                id=f"c{c}s{j}", video=video, audio=audio, label=c))
    return records


def class_templates(cfg: SynthConfig) -> np.ndarray:
    """Noise-free video-space templates, one per class (for oracle checks)."""
    root = Rng(cfg.seed)
    latent = min(4, cfg.d_v, cfg.d_a)
    embed_v = _orthonormal(root.child("embed_v"), cfg.d_v, latent)
    out = np.empty((cfg.classes, cfg.steps, cfg.d_v))
    for c in range(cfg.classes):
        walk = root.child("template", c).normal((cfg.steps, latent))
        out[c] = (np.cumsum(walk, axis=0) / np.sqrt(cfg.steps)) @ embed_v.T
    return out


def split(records: list[SampleRecord], train_fraction: float, seed: int):
    """Per-class stratified split into (train, test), seed-deterministic."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_label: dict[int, list[SampleRecord]] = {}
    for rec in records:
        by_label.setdefault(rec.label, []).append(rec)
    rng = Rng(seed)
    train, test = [], []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 2:
            raise ConfigError(
                f"class {label} has {len(group)} sample(s); need >= 2 to split"
            )
        n_train = int(round(train_fraction * len(group)))
        n_train = min(max(n_train, 1), len(group) - 1)
        order = rng.child("split", label).permutation(len(group))
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    return train, test


# --- container --------------------------------------------------------------


@dataclass
class Container:
    records: list[SampleRecord]
    classes: int
    aligned: bool = False
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        for rec in self.records:
            if not 0 <= rec.label < self.classes:
                raise ConfigError(
                    f"record {rec.id!r} has label {rec.label} outside [0, {self.classes})"
                )

    @property
    def d_v(self) -> int:
        return self.records[0].video.shape[1] if self.records else 0

    @property
    def d_a(self) -> int:
        if not self.records:
            return 0
        audio = self.records[0].audio
        # raw waveforms (1-D) have no feature dimension until featurized
        return audio.shape[1] if audio.ndim == 2 else 0


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8", copy=False).tobytes(order="C")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.offset = 0
        self.what = what

    def take(self, n: int, piece: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"{self.what}: truncated while reading {piece}")
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self, piece: str) -> int:
        return struct.unpack("<I", self.take(4, piece))[0]

    def array(self, piece: str) -> np.ndarray:
        rank = self.u32(f"{piece} rank")
        if rank > 32:
            raise FormatError(f"{self.what}: implausible rank {rank} for {piece}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"{piece} dims"))
        count = 1
        for d in dims:
            count *= d
        payload = self.take(8 * count, f"{piece} payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)

    def done(self) -> bool:
        return self.offset == len(self.data)


def save_container(base, container: Container) -> None:
    """Write `<base>.manifest` + `<base>.bin`.

    Blob layout per record: u32 id length, UTF-8 id, u32 label, then the
    video and audio arrays each as u32 rank, u32 dims, little-endian float64
    payload.
    """
    chunks = []
    for rec in container.records:
        if rec.video.ndim != 2:
            raise DimensionError(f"record {rec.id!r}: video must be 2-D")
        if rec.audio.ndim not in (1, 2):
            raise DimensionError(f"record {rec.id!r}: audio must be 1-D or 2-D")
        encoded = rec.id.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", rec.label))
        chunks.append(_pack_array(rec.video))
        chunks.append(_pack_array(rec.audio))
    blob = b"".join(chunks)

    lines = [
        f"format={CONTAINER_FORMAT}",
        f"version={CONTAINER_VERSION}",
        f"records={len(container.records)}",
        f"classes={container.classes}",
        f"d_v={container.d_v}",
        f"d_a={container.d_a}",
        f"aligned={int(container.aligned)}",
        f"payload_bytes={len(blob)}",
    ]
    for i, stage in enumerate(container.provenance, start=1):
        lines.append(f"provenance.{i}={stage}")
    base = os.fspath(base)
    atomic_write_bytes(base + ".bin", blob)
    atomic_write_bytes(base + ".manifest", ("\n".join(lines) + "\n").encode("utf-8"))


def load_container(base) -> Container:
    base = os.fspath(base)
    manifest_path, bin_path = base + ".manifest", base + ".bin"
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    if not os.path.exists(bin_path):
        raise FileNotFoundError(f"missing data blob: {bin_path}")
    meta: dict[str, str] = {}
    provenance = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{manifest_path}: malformed line {line!r}")
            if key.startswith("provenance."):
                provenance.append(value)
            else:
                meta[key] = value
    if meta.get("format") != CONTAINER_FORMAT:
        raise FormatError(f"{manifest_path}: not a {CONTAINER_FORMAT} manifest")
    if meta.get("version") != str(CONTAINER_VERSION):
        raise FormatError(
            f"{manifest_path}: unsupported version {meta.get('version')!r}"
        )
    try:
        n_records = int(meta["records"])
        classes = int(meta["classes"])
        aligned = bool(int(meta["aligned"]))
        payload_bytes = int(meta["payload_bytes"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: bad or missing field ({exc})") from None

    with open(bin_path, "rb") as fh:
        blob = fh.read()
    if len(blob) != payload_bytes:
        raise FormatError(
            f"{bin_path}: payload is {len(blob)} bytes but manifest declares "
            f"{payload_bytes}"
        )

    reader = _Reader(blob, bin_path)
    records = []
    for k in range(n_records):
        id_len = reader.u32(f"record {k} id length")
        if id_len > len(blob):
            raise FormatError(f"{bin_path}: corrupted id length in record {k}")
        try:
            rec_id = reader.take(id_len, f"record {k} id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{bin_path}: undecodable id in record {k}: {exc}") from None
        label = reader.u32(f"record {k} label")
        video = reader.array(f"record {k} video")
        audio = reader.array(f"record {k} audio")
        records.append(SampleRecord(id=rec_id, video=video, audio=audio, label=label))
    if not reader.done():
        raise FormatError(f"{bin_path}: {len(blob) - reader.offset} trailing bytes")
    return Container(records=records, classes=classes, aligned=aligned,
                     provenance=provenance)

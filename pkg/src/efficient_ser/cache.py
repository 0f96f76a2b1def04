"""Frozen-prefix representation cache.

Each sample's output of the frozen stack (front-end, positional block and the
first ``split_layer`` transformer blocks, eval mode, batch of one) is written
once to a ``W2CC`` file.  Training batches are then built by zero-padding the
cached ``[frames, d]`` matrices to the longest sample in the batch, with no
attention mask, and only the remaining blocks and the heads are computed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AudioCache, Manifest, make_raw_batch, pad_stack
from .model import Model
from .objectives import multitask_loss
from .tensor import Tensor

MAGIC = b"W2CC"
VERSION = 1
HEADER = struct.Struct("<4sHHIIII")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
MANIFEST_NAME = "cache_manifest.json"


class CacheError(RuntimeError):
    pass


class CacheIntegrityError(CacheError):
    pass


class MissingCacheFile(CacheIntegrityError):
    pass


class BadMagic(CacheIntegrityError):
    pass


class TruncatedCache(CacheIntegrityError):
    pass


class HeaderMismatch(CacheIntegrityError):
    pass


class FingerprintMismatch(CacheIntegrityError):
    pass


class PartialBuildError(CacheError):
    pass


class CacheExistsError(CacheError):
    pass


class CacheContractError(CacheError):
    pass


@dataclass
class CacheEntry:
    sample_id: str
    split_layer: int
    payload: np.ndarray  # [frames, dim]
    dtype_code: int = 0

    @property
    def frames(self) -> int:
        return self.payload.shape[0]

    @property
    def dim(self) -> int:
        return self.payload.shape[1]


def encode_entry(entry: CacheEntry) -> bytes:
    if entry.frames < 1:
        raise CacheError(f"{entry.sample_id}: cache entry needs at least one frame")
    if not np.isfinite(entry.payload).all():
        raise CacheError(f"{entry.sample_id}: non-finite values in cached representation")
    ident = entry.sample_id.encode("utf-8")
    body = np.ascontiguousarray(entry.payload, dtype=DTYPES[entry.dtype_code]).tobytes()
    head = HEADER.pack(MAGIC, VERSION, entry.dtype_code, entry.split_layer, entry.frames, entry.dim, len(ident))
    return head + ident + body


def decode_entry(blob: bytes, source: str = "<bytes>") -> CacheEntry:
    if len(blob) >= len(MAGIC) and blob[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{source}: magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
    if len(blob) < HEADER.size:
        raise TruncatedCache(f"{source}: {len(blob)} bytes is shorter than the {HEADER.size}-byte header")
    _, version, dtype_code, split, frames, dim, id_len = HEADER.unpack_from(blob)
    if version != VERSION:
        raise CacheIntegrityError(f"{source}: unsupported cache version {version}")
    if dtype_code not in DTYPES:
        raise CacheIntegrityError(f"{source}: unknown dtype code {dtype_code}")
    itemsize = DTYPES[dtype_code].itemsize
    expected = HEADER.size + id_len + frames * dim * itemsize
    if len(blob) < expected:
        raise TruncatedCache(f"{source}: {len(blob)} bytes, header promises {expected}")
    if len(blob) > expected:
        raise CacheIntegrityError(f"{source}: {len(blob) - expected} trailing bytes")
    sample_id = blob[HEADER.size : HEADER.size + id_len].decode("utf-8")
    payload = np.frombuffer(blob, dtype=DTYPES[dtype_code], offset=HEADER.size + id_len).reshape(frames, dim)
    return CacheEntry(sample_id, split, payload.astype(np.float32), dtype_code)


def write_entry(path: Path, entry: CacheEntry) -> int:
    blob = encode_entry(entry)
    Path(path).write_bytes(blob)
    return len(blob)


def read_entry(path: Path) -> CacheEntry:
    path = Path(path)
    if not path.exists():
        raise MissingCacheFile(f"cache file {path} does not exist")
    return decode_entry(path.read_bytes(), str(path))


def prefix_fingerprint(model: Model, split_layer: int) -> str:
    """SHA-256 over the config and every parameter the cached prefix depends on."""
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    h.update(struct.pack("<I", split_layer))
    for path in model.paths():
        group = path.split(".")
        in_prefix = path.startswith(("fe.", "pos.")) or (
            path.startswith("encoder.layer.") and int(group[2]) < split_layer
        )
        if in_prefix:
            h.update(path.encode())
            h.update(np.ascontiguousarray(model.params[path].data, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class CacheManifest:
    fingerprint: str
    split_layer: int
    entries: dict[str, dict] = field(default_factory=dict)  # sample_id -> {"path", "frames"}
    dtype_code: int = 0
    root: Path = Path(".")
    total_bytes: int = 0

    def to_json(self) -> str:
        body = {
            "fingerprint": self.fingerprint,
            "split_layer": self.split_layer,
            "dtype": self.dtype_code,
            "total_bytes": self.total_bytes,
            "entries": [{"sample_id": k, **v} for k, v in sorted(self.entries.items())],
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, root: Path | str) -> "CacheManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        if not path.exists():
            raise MissingCacheFile(f"no cache manifest at {path} (partial or missing build)")
        body = json.loads(path.read_text(encoding="utf-8"))
        entries = {e["sample_id"]: {"path": e["path"], "frames": e["frames"]} for e in body["entries"]}
        return cls(body["fingerprint"], body["split_layer"], entries, body.get("dtype", 0), path.parent,
                   body.get("total_bytes", 0))

    def save(self) -> None:
        target = self.root / MANIFEST_NAME
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        os.replace(tmp, target)


def build_cache(
    dataset: Manifest,
    model: Model,
    split_layer: int,
    out_dir: Path | str,
    sample_ids: Sequence[str] | None = None,
    dtype_code: int = 0,
    workers: int = 1,
    audio: AudioCache | None = None,
) -> CacheManifest:
    """Cache ``forward_prefix`` for every sample, then write the manifest last."""
    plan = model.plan
    if plan.mode != "caching_partial" or plan.split_layer(model.config.n_layers) != split_layer:
        raise CacheContractError(
            f"cache split {split_layer} needs a caching_partial plan with n = {model.config.n_layers - split_layer}, "
            f"model has {plan.label}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = prefix_fingerprint(model, split_layer)
    existing = out_dir / MANIFEST_NAME
    if existing.exists():
        old = CacheManifest.load(out_dir)
        if old.fingerprint != fingerprint or old.split_layer != split_layer:
            raise CacheExistsError(f"{out_dir} holds a cache for a different model/split; refusing to overwrite")
    ids = list(sample_ids) if sample_ids is not None else [r.sample_id for r in dataset.records]
    audio = audio or AudioCache(dataset)
    (out_dir / "entries").mkdir(exist_ok=True)

    def one(sample_id: str) -> tuple[str, int, int]:
        rep = model.forward_prefix(Tensor(audio[sample_id][None]), split_layer)
        rel = f"entries/{sample_id}.w2cc"
        size = write_entry(out_dir / rel, CacheEntry(sample_id, split_layer, rep.data, dtype_code))
        return rel, rep.shape[0], size

    manifest = CacheManifest(fingerprint, split_layer, {}, dtype_code, out_dir)
    last_done = None
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, ids))
        else:
            results = []
            for sample_id in ids:
                results.append(one(sample_id))
                last_done = sample_id
    except OSError as exc:
        raise PartialBuildError(f"cache build failed after sample {last_done!r}: {exc}") from exc
    for sample_id, (rel, frames, size) in zip(ids, results):
        manifest.entries[sample_id] = {"path": rel, "frames": frames}
        manifest.total_bytes += size
    manifest.save()
    return manifest


def read_cached(manifest: CacheManifest, sample_id: str, fingerprint: str | None = None) -> CacheEntry:
    """Load one entry, validating its header against the manifest.

    Passing ``fingerprint`` checks it against the manifest before touching any payload.
    """
    if fingerprint is not None and fingerprint != manifest.fingerprint:
        raise FingerprintMismatch(
            f"cache fingerprint {manifest.fingerprint[:12]} does not match model {fingerprint[:12]}"
        )
    if sample_id not in manifest.entries:
        raise KeyError(f"sample {sample_id!r} is not in the cache manifest")
    info = manifest.entries[sample_id]
    entry = read_entry(manifest.root / info["path"])
    if entry.sample_id != sample_id:
        raise HeaderMismatch(f"{info['path']}: header id {entry.sample_id!r}, manifest id {sample_id!r}")
    if entry.split_layer != manifest.split_layer:
        raise HeaderMismatch(f"{info['path']}: split {entry.split_layer}, manifest split {manifest.split_layer}")
    if entry.frames != info["frames"]:
        raise HeaderMismatch(f"{info['path']}: {entry.frames} frames, manifest says {info['frames']}")
    return entry


@dataclass
class CachedBatch:
    ids: list[str]
    representations: np.ndarray  # [B, T_max, d], zero beyond true length
    true_lengths: np.ndarray
    labels: np.ndarray


class EntryStore:
    """Read-through memory of cache entries for repeated epochs."""

    def __init__(self, manifest: CacheManifest, fingerprint: str | None = None):
        self.manifest = manifest
        self.fingerprint = fingerprint
        self._store: dict[str, np.ndarray] = {}

    def __getitem__(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._store:
            self._store[sample_id] = read_cached(self.manifest, sample_id, self.fingerprint).payload
        return self._store[sample_id]


def assemble_batch(manifest: CacheManifest, sample_ids: Sequence[str], labels, store: EntryStore | None = None) -> CachedBatch:
    """Zero-pad cached representations along time to the batch maximum."""
    store = store or EntryStore(manifest)
    reps = []
    for sample_id in sample_ids:
        if sample_id not in manifest.entries:
            raise KeyError(f"sample {sample_id!r} is not cached")
        reps.append(store[sample_id])
    stacked, lengths = pad_stack(reps, axis=0)
    return CachedBatch(list(sample_ids), stacked.astype(np.float32), lengths, np.asarray(labels, dtype=np.float32))


def estimate_cache_bytes(hours: float, dim: int, frames_per_second: float = 50.0, itemsize: int = 4,
                         samples: int = 0, header_bytes: int = HEADER.size + 16) -> int:
    """Disk footprint of one cached layer: payload plus per-file headers."""
    frames = hours * 3600.0 * frames_per_second
    return int(round(frames * dim * itemsize)) + samples * header_bytes


@dataclass
class EquivalenceReport:
    split_layer: int
    tolerance: float
    uniform_prediction_diff: float
    uniform_loss_diff: float
    uniform_gradient_diff: float
    mixed_per_sample_diff: dict[str, float]
    mixed_longest_diff: float
    elapsed: float

    @property
    def passed(self) -> bool:
        return max(self.uniform_prediction_diff, self.uniform_loss_diff, self.uniform_gradient_diff,
                   self.mixed_longest_diff) <= self.tolerance


def _grads(model: Model) -> dict[str, np.ndarray]:
    return {p: model.params[p].grad.copy() for p in model.trainable_paths() if model.params[p].grad is not None}


def verify_cache_equivalence(
    model: Model,
    dataset: Manifest,
    split_layer: int,
    tolerance: float = 1e-5,
    uniform_ids: Sequence[str] | None = None,
    mixed_ids: Sequence[str] | None = None,
    cache: CacheManifest | None = None,
    seed: int = 0,
) -> EquivalenceReport:
    """Compare cached and raw-audio paths through the same weights.

    Uniform-length batch: one training-mode forward/backward on both paths with the
    same dropout stream; reports prediction, loss and gradient gaps.  Mixed-length
    batch: eval-mode predictions per sample; the longest sample carries no padding
    on either path and must agree.
    """
    start = time.perf_counter()
    plan = model.plan
    if plan.mode != "caching_partial" or plan.split_layer(model.config.n_layers) != split_layer:
        raise CacheContractError(f"model plan {plan.label} does not freeze exactly {split_layer} layers")
    fingerprint = prefix_fingerprint(model, split_layer)
    if cache is not None and cache.fingerprint != fingerprint:
        raise CacheContractError("cache was built from different weights than the model under test")
    audio = AudioCache(dataset)

    def cached_reps(ids):
        if cache is not None:
            return assemble_batch(cache, ids, dataset.labels(ids)).representations
        reps = [model.forward_prefix(Tensor(audio[i][None]), split_layer).data for i in ids]
        return pad_stack(reps)[0]

    uniform_pred = uniform_loss = uniform_grad = 0.0
    if uniform_ids:
        raw = make_raw_batch(dataset, uniform_ids, audio)
        if len(set(raw.true_lengths.tolist())) != 1:
            raise CacheContractError("uniform_ids must all have the same length")
        labels = Tensor(raw.labels)
        model.zero_grad()
        out_raw = model.forward(Tensor(raw.audio), True, T.make_rng(seed, 77))
        loss_raw = multitask_loss(out_raw.predictions, labels)
        loss_raw.backward()
        grads_raw = _grads(model)
        model.zero_grad()
        out_c = model.forward_from(Tensor(cached_reps(uniform_ids)), split_layer, True, T.make_rng(seed, 77))
        loss_c = multitask_loss(out_c.predictions, labels)
        loss_c.backward()
        grads_c = _grads(model)
        model.zero_grad()
        uniform_pred = float(np.abs(out_raw.predictions.data - out_c.predictions.data).max())
        uniform_loss = abs(loss_raw.item() - loss_c.item())
        uniform_grad = max(float(np.abs(grads_raw[p] - grads_c[p]).max()) for p in grads_raw)

    per_sample: dict[str, float] = {}
    longest = 0.0
    if mixed_ids:
        raw = make_raw_batch(dataset, mixed_ids, audio)
        with T.no_grad():
            pred_raw = model.forward(Tensor(raw.audio)).predictions.data
            pred_c = model.forward_from(Tensor(cached_reps(mixed_ids)), split_layer).predictions.data
        diffs = np.abs(pred_raw - pred_c).max(axis=1)
        per_sample = {i: float(d) for i, d in zip(mixed_ids, diffs)}
        top = raw.true_lengths.max()
        longest = float(max(d for d, n in zip(diffs, raw.true_lengths) if n == top))
    return EquivalenceReport(split_layer, tolerance, uniform_pred, uniform_loss, uniform_grad, per_sample, longest,
                             time.perf_counter() - start)

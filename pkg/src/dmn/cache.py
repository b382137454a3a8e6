"""Binary cache for filter banks, density sums and weight snapshots.

Every entry is one ``.dmn`` file plus a JSON manifest next to it.  Files
are written to a temporary name and renamed into place, so concurrent runs
never observe partial writes.  A file that fails any check on load is
treated as a miss and removed, so callers simply rebuild.  The byte layout
is described in ``docs/cache_format.md``.
"""
from dataclasses import dataclass
import hashlib
import json
import logging
import os
import struct
import tempfile
import zlib

import numpy as np

from .builder import DmnLayer
from .density import DensityAccumulator
from .errors import FormatError

log = logging.getLogger(__name__)

MAGIC = b"DMN1"
VERSION = 1
KIND_FILTERS = 1
KIND_DENSITY = 2
KIND_ARRAYS = 3
KIND_NAMES = {KIND_FILTERS: "filters", KIND_DENSITY: "density", KIND_ARRAYS: "arrays"}

_HEADER = struct.Struct("<4sIIIII32sQ")
_PROV = np.dtype([("cls", "<i4"), ("mu", "<i4"), ("eigenvalue", "<f8")])


def key_digest(key):
    return hashlib.sha256(key.encode("utf-8")).digest()


def make_key(**fields):
    """Canonical ``name=value;...`` text with names sorted."""
    return ";".join(f"{k}={fields[k]}" for k in sorted(fields))


def array_digest(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return hashlib.sha256(repr(a.shape).encode() + a.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Entry:
    kind: int
    k: int
    d: int
    count: int
    digest: bytes
    payload: np.ndarray
    extra: bytes


def encode(kind, k, d, count, key, payload, extra=b""):
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    head = _HEADER.pack(MAGIC, VERSION, kind, k, d, count, key_digest(key), payload.size)
    body = head + payload.tobytes() + extra
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(raw):
    if len(raw) < _HEADER.size + 4:
        raise FormatError("cache file truncated")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("cache checksum mismatch")
    magic, version, kind, k, d, count, digest, n = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported cache version {version}")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown entry kind {kind}")
    end = _HEADER.size + 8 * n
    if end > len(body):
        raise FormatError("payload truncated")
    payload = np.frombuffer(body, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)
    return Entry(kind, k, d, count, digest, payload, body[end:])


def _atomic_write(path, data):
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Cache:
    """Directory of cache entries addressed by key text."""

    def __init__(self, root):
        self.root = root

    def path(self, kind, key):
        return os.path.join(self.root, f"{KIND_NAMES[kind]}-{key_digest(key).hex()[:20]}.dmn")

    def _write(self, kind, key, data, manifest):
        path = self.path(kind, key)
        _atomic_write(path, data)
        meta = {"key": key, "kind": KIND_NAMES[kind], "bytes": len(data)}
        meta.update(manifest)
        _atomic_write(path + ".json", json.dumps(meta, indent=1, sort_keys=True, default=str).encode())
        return path

    def _read(self, kind, key):
        path = self.path(kind, key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "rb") as fh:
                entry = decode(fh.read())
            if entry.kind != kind or entry.digest != key_digest(key):
                raise FormatError("entry does not match the requested key")
            return entry
        except (FormatError, OSError, ValueError) as exc:
            log.warning("discarding corrupt cache entry %s: %s", path, exc)
            self.discard(kind, key)
            return None

    def discard(self, kind, key):
        path = self.path(kind, key)
        for p in (path, path + ".json"):
            if os.path.exists(p):
                os.unlink(p)

    # filters ---------------------------------------------------------------

    def save_layer(self, key, layer):
        prov = np.asarray(layer.provenance, dtype=_PROV).tobytes()
        extra = struct.pack("<I", layer.in_channels) + prov
        data = encode(KIND_FILTERS, layer.k, layer.dim, layer.n_filters, key, layer.filters, extra)
        manifest = dict(layer.meta)
        manifest["provenance"] = [[int(c), int(m), float(v)] for c, m, v in layer.provenance.tolist()]
        return self._write(KIND_FILTERS, key, data, manifest)

    def load_layer(self, key):
        e = self._read(KIND_FILTERS, key)
        if e is None:
            return None
        try:
            (channels,) = struct.unpack_from("<I", e.extra)
            prov = np.frombuffer(e.extra, dtype=_PROV, count=e.count, offset=4).copy()
            filters = e.payload.reshape(e.count, e.d)
        except ValueError as exc:
            log.warning("discarding corrupt filter entry: %s", exc)
            self.discard(KIND_FILTERS, key)
            return None
        meta = self.manifest(KIND_FILTERS, key) or {}
        meta.pop("provenance", None)
        return DmnLayer(filters, prov, e.k, channels, meta)

    # density ---------------------------------------------------------------

    def save_density(self, key, acc, k=0):
        extra = np.asarray(acc.counts, dtype="<u8").tobytes()
        data = encode(KIND_DENSITY, k, acc.d, acc.n_classes, key, acc.sums, extra)
        return self._write(KIND_DENSITY, key, data, {"d": acc.d, "n_classes": acc.n_classes})

    def load_density(self, key):
        e = self._read(KIND_DENSITY, key)
        if e is None:
            return None
        acc = DensityAccumulator(e.d, e.count)
        try:
            acc.sums = e.payload.reshape(e.count, e.d, e.d)
            acc.counts = np.frombuffer(e.extra, dtype="<u8", count=e.count).astype(np.int64)
        except ValueError as exc:
            log.warning("discarding corrupt density entry: %s", exc)
            self.discard(KIND_DENSITY, key)
            return None
        return acc

    # array bundles (weight snapshots) ---------------------------------------

    def save_arrays(self, key, arrays, manifest=None):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        shapes = b"".join(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) for a in arrays)
        flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        data = encode(KIND_ARRAYS, 0, 0, len(arrays), key, flat, shapes)
        return self._write(KIND_ARRAYS, key, data, manifest or {})

    def load_arrays(self, key):
        e = self._read(KIND_ARRAYS, key)
        if e is None:
            return None
        try:
            out, off, pos = [], 0, 0
            for _ in range(e.count):
                (ndim,) = struct.unpack_from("<I", e.extra, off)
                shape = struct.unpack_from(f"<{ndim}I", e.extra, off + 4)
                off += 4 + 4 * ndim
                size = int(np.prod(shape))
                if pos + size > e.payload.size:
                    raise FormatError("array bundle shorter than its shapes")
                out.append(e.payload[pos : pos + size].reshape(shape))
                pos += size
        except (struct.error, FormatError) as exc:
            log.warning("discarding corrupt array entry: %s", exc)
            self.discard(KIND_ARRAYS, key)
            return None
        return out

    def manifest(self, kind, key):
        path = self.path(kind, key) + ".json"
        try:
            with open(path) as fh:
                return json.load(fh)
        except (OSError, ValueError):
            return None

    def entries(self):
        """Manifests of every entry in the directory, sorted by file name."""
        if not os.path.isdir(self.root):
            return []
        out = []
        for name in sorted(os.listdir(self.root)):
            if name.endswith(".dmn"):
                info = describe(os.path.join(self.root, name))
                out.append(info)
        return out


def describe(path):
    """Header summary of a cache file, used by ``dmn inspect-cache``."""
    info = {"file": os.path.basename(path)}
    try:
        with open(path, "rb") as fh:
            e = decode(fh.read())
        info.update(kind=KIND_NAMES[e.kind], k=e.k, d=e.d, count=e.count,
                    key_sha256=e.digest.hex(), payload_values=int(e.payload.size), status="ok")
    except (FormatError, OSError) as exc:
        info.update(status=f"corrupt: {exc}")
    try:
        with open(path + ".json") as fh:
            man = json.load(fh)
        info["key"] = man.get("key")
    except (OSError, ValueError):
        pass
    return info

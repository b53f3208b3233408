"""Named parameter store with frozen/trainable flags and checkpoint IO.

Entries are insertion-ordered. Batch-norm running statistics are stored as
`buffer=True` entries: they round-trip through checkpoints and are mutated by
train-mode forwards, but they are not parameters, so counting and the
frozen/trainable partition ignore them.

Checkpoint format (single file): a UTF-8 header followed by a raw payload of
little-endian arrays.

    sideseg-checkpoint 1
    meta\t<json>                      (optional, single line)
    entry\t<name>\t<dtype>\t<shape>\t<frozen>\t<buffer>\t<offset>
    ...
    payload\t<total bytes>
    end
    <raw bytes>
"""

import hashlib
import json

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointManifestError,
    CheckpointVersionError,
)

_MAGIC = "sideseg-checkpoint"
_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class Entry:
    __slots__ = ("array", "frozen", "buffer")

    def __init__(self, array, frozen, buffer=False):
        self.array = array
        self.frozen = frozen
        self.buffer = buffer


class ParamStore:
    """Ordered map of name -> (array, frozen flag, buffer flag)."""

    def __init__(self):
        self.entries = {}
        self.meta = None

    def add(self, name, array, frozen, buffer=False):
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if any(c in name for c in "\t\n"):
            raise ValueError(f"parameter name {name!r} contains forbidden characters")
        arr = np.asarray(array)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        self.entries[name] = Entry(arr, bool(frozen), bool(buffer))

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name):
        return self.entries[name]

    def names(self, prefix=""):
        return [n for n in self.entries if n.startswith(prefix)]

    def param_items(self, which="all"):
        """(name, entry) pairs for parameters (buffers excluded)."""
        for name, e in self.entries.items():
            if e.buffer:
                continue
            if which == "trainable" and e.frozen:
                continue
            if which == "frozen" and not e.frozen:
                continue
            yield name, e

    def count(self, which="all"):
        if which not in ("all", "trainable", "frozen"):
            raise ValueError(f"unknown filter {which!r}")
        return sum(e.array.size for _, e in self.param_items(which))

    def group_count(self, prefix, which="all"):
        return sum(e.array.size for n, e in self.param_items(which) if n.startswith(prefix))

    def state_bytes(self, prefix="", include_buffers=True):
        """Concatenated raw bytes of matching entries, for bit-identity checks."""
        chunks = []
        for name in self.names(prefix):
            e = self.entries[name]
            if e.buffer and not include_buffers:
                continue
            chunks.append(e.array.tobytes())
        return b"".join(chunks)

    def state_hash(self, prefix="", include_buffers=True):
        return hashlib.sha256(self.state_bytes(prefix, include_buffers)).hexdigest()

    def clone(self):
        out = ParamStore()
        for name, e in self.entries.items():
            out.add(name, e.array.copy(), e.frozen, e.buffer)
        out.meta = None if self.meta is None else json.loads(json.dumps(self.meta))
        return out


class ParamView:
    """One forward pass's view of a store as autodiff tensors.

    Each parameter gets exactly one Tensor per view, so gradients accumulate
    correctly if a parameter is used more than once.
    """

    def __init__(self, store):
        from .autodiff import Tensor  # local import keeps module load order simple

        self._tensor_cls = Tensor
        self.store = store
        self._cache = {}

    def __call__(self, name):
        t = self._cache.get(name)
        if t is None:
            e = self.store.entries[name]
            if e.buffer:
                raise KeyError(f"{name!r} is a buffer; use .buffer()")
            t = self._tensor_cls(e.array, requires_grad=not e.frozen)
            self._cache[name] = t
        return t

    def buffer(self, name):
        e = self.store.entries[name]
        if not e.buffer:
            raise KeyError(f"{name!r} is a parameter; use the call syntax")
        return e.array

    def grads(self):
        """name -> gradient array for every touched trainable parameter."""
        out = {}
        for name, t in self._cache.items():
            if t.requires_grad:
                out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out


def save_checkpoint(store, path, meta=None):
    """Write the store to a single file; round-trips bit-identically."""
    if meta is None:
        meta = store.meta
    lines = [f"{_MAGIC} {_VERSION}"]
    if meta is not None:
        lines.append("meta\t" + json.dumps(meta, sort_keys=True))
    offset = 0
    blobs = []
    for name, e in store.entries.items():
        raw = e.array.astype(_DTYPES[e.array.dtype.name], copy=False).tobytes()
        shape = ",".join(str(d) for d in e.array.shape)
        lines.append(
            f"entry\t{name}\t{e.array.dtype.name}\t{shape}\t{int(e.frozen)}\t{int(e.buffer)}\t{offset}"
        )
        blobs.append(raw)
        offset += len(raw)
    lines.append(f"payload\t{offset}")
    lines.append("end")
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode("utf-8"))
        f.write(b"\n")
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Read a checkpoint; returns a ParamStore (with .meta if one was saved)."""
    with open(path, "rb") as f:
        blob = f.read()
    first_nl = blob.find(b"\n")
    if first_nl < 0:
        raise CheckpointFormatError("not a checkpoint: no header found")
    magic_line = blob[:first_nl].decode("utf-8", errors="replace").split()
    if len(magic_line) != 2 or magic_line[0] != _MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic line")
    if magic_line[1] != str(_VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint version {magic_line[1]}")
    end_marker = blob.find(b"\nend\n", first_nl)
    if end_marker < 0:
        raise CheckpointIntegrityError("truncated checkpoint: header end marker missing")
    header = blob[first_nl + 1:end_marker].decode("utf-8")
    payload = blob[end_marker + len(b"\nend\n"):]

    meta = None
    rows = []
    declared = None
    for line in header.splitlines():
        kind, _, rest = line.partition("\t")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "entry":
            rows.append(rest.split("\t"))
        elif kind == "payload":
            declared = int(rest)
        else:
            raise CheckpointFormatError(f"unknown header line kind {kind!r}")
    if declared is None:
        raise CheckpointFormatError("header missing payload size")
    if len(payload) != declared:
        raise CheckpointIntegrityError(
            f"payload is {len(payload)} bytes but manifest declares {declared}"
        )

    store = ParamStore()
    expected = 0
    name = None
    for row in rows:
        if len(row) != 6:
            raise CheckpointManifestError(f"malformed manifest row: {row!r}")
        name, dtype_name, shape_s, frozen_s, buffer_s, offset_s = row
        if dtype_name not in _DTYPES:
            raise CheckpointManifestError(f"entry {name!r}: unknown dtype {dtype_name!r}")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype_name).itemsize
        offset = int(offset_s)
        if offset != expected:
            raise CheckpointManifestError(
                f"entry {name!r}: offset {offset} disagrees with layout (expected {expected})"
            )
        if offset + nbytes > declared:
            raise CheckpointManifestError(f"entry {name!r}: extends past declared payload")
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype_name], count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape).astype(dtype_name)
        store.add(name, arr, frozen=frozen_s == "1", buffer=buffer_s == "1")
        expected = offset + nbytes
    if expected != declared:
        raise CheckpointManifestError(
            f"entry {name!r}: manifest covers {expected} bytes but payload declares {declared}"
        )
    store.meta = meta
    return store

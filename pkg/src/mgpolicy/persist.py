"""Binary containers for demo corpora and checkpoints.

Both formats are length-prefixed little-endian with a crc32 per array
payload, so any corrupted byte surfaces as a FormatError naming the
offset instead of silently loading garbage. Loads parse the whole file
before returning: no partial state escapes on error.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .envs import Demonstration
from .errors import FormatError, StorageError

CORPUS_MAGIC = b"MGPD"
CHECKPOINT_MAGIC = b"MGP1"
VERSION = 1


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.raw(b)

    def array(self, a: np.ndarray):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.pack("B", a.ndim)
        for d in a.shape:
            self.pack("I", d)
        payload = a.tobytes()
        self.pack("Q", len(payload))
        self.raw(payload)
        self.pack("I", zlib.crc32(payload))

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, label: str):
        self.data = data
        self.pos = 0
        self.label = label

    def fail(self, why: str):
        raise FormatError(f"{self.label}: {why} at offset {self.pos}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated (wanted {n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def text(self) -> str:
        n = self.unpack("H")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = self.unpack("B")
        if ndim > 8:
            self.fail(f"implausible ndim {ndim}")
        shape = tuple(self.unpack("I") for _ in range(ndim)) if ndim else ()
        nbytes = self.unpack("Q")
        start = self.pos
        payload = self.take(nbytes)
        crc = self.unpack("I")
        if zlib.crc32(payload) != crc:
            self.pos = start
            self.fail("checksum mismatch in array payload")
        a = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if int(np.prod(shape)) != a.size:
            self.fail(f"shape {shape} does not match {a.size} values")
        return a.reshape(shape)

    def expect_end(self):
        if self.pos != len(self.data):
            self.fail(f"{len(self.data) - self.pos} trailing bytes")


def _read_file(path, label: str) -> bytes:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"missing file: {path}")
    return path.read_bytes()


def _check_header(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        r.pos = 0
        r.fail(f"bad magic {got!r} (expected {magic!r})")
    ver = r.unpack("H")
    if ver != VERSION:
        r.pos = 4
        r.fail(f"unsupported version {ver}")


# ---- demo corpus -------------------------------------------------------------

def save_corpus(path, demos: list[Demonstration]):
    if not demos:
        raise FormatError("refusing to write an empty corpus")
    d0 = demos[0]
    w = _Writer()
    w.raw(CORPUS_MAGIC)
    w.pack("H", VERSION)
    w.text(d0.task)
    w.pack("I", d0.horizon)
    w.pack("I", len(demos))
    for d in demos:
        w.pack("q", d.seed)
        w.pack("B", 1 if d.success else 0)
        w.pack("I", int(d.meta.get("steps_to_success", 0)))
        w.array(d.observations)
        w.array(d.states)
        w.array(d.actions)
    Path(path).write_bytes(w.bytes())


def load_corpus(path) -> list[Demonstration]:
    r = _Reader(_read_file(path, str(path)), str(path))
    _check_header(r, CORPUS_MAGIC)
    task = r.text()
    horizon = r.unpack("I")
    count = r.unpack("I")
    demos = []
    for _ in range(count):
        seed = r.unpack("q")
        success = bool(r.unpack("B"))
        steps = r.unpack("I")
        obs = r.array()
        states = r.array()
        actions = r.array()
        demos.append(Demonstration(task=task, seed=seed, horizon=horizon,
                                   observations=obs, states=states, actions=actions,
                                   success=success,
                                   meta={"steps_to_success": steps}))
    r.expect_end()
    return demos


def export_corpus_csv(path, demos: list[Demonstration]):
    """Plain-text view: one row per (demo, step)."""
    import csv
    d0 = demos[0]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        obs_cols = [f"obs{i}" for i in range(d0.observations.shape[1])]
        wr.writerow(["demo", "seed", "t"] + obs_cols + ["state0", "state1", "a0", "a1"])
        for i, d in enumerate(demos):
            for t in range(d.horizon):
                wr.writerow([i, d.seed, t]
                            + [repr(float(v)) for v in d.observations[t]]
                            + [repr(float(v)) for v in d.states[t]]
                            + [repr(float(v)) for v in d.actions[t]])


# ---- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, config_hash: str, sections: dict[str, dict[str, np.ndarray]]):
    """sections: name -> ordered {array name -> float64 array}."""
    w = _Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.pack("H", VERSION)
    w.text(config_hash)
    w.pack("H", len(sections))
    for name, arrays in sections.items():
        w.text(name)
        w.pack("I", len(arrays))
        for arr_name, arr in arrays.items():
            w.text(arr_name)
            w.array(arr)
    Path(path).write_bytes(w.bytes())


def load_checkpoint(path) -> tuple[str, dict[str, dict[str, np.ndarray]]]:
    r = _Reader(_read_file(path, str(path)), str(path))
    _check_header(r, CHECKPOINT_MAGIC)
    config_hash = r.text()
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.unpack("H")):
        name = r.text()
        arrays: dict[str, np.ndarray] = {}
        for _ in range(r.unpack("I")):
            arr_name = r.text()
            arrays[arr_name] = r.array()
        sections[name] = arrays
    r.expect_end()
    return config_hash, sections


def file_sha256(path) -> str:
    return hashlib.sha256(_read_file(path, str(path))).hexdigest()

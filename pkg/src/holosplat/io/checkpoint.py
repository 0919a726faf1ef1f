"""Binary checkpoints: header + tagged, length-prefixed little-endian sections.

Layout::

    "MXGS" | u32 version | 8-byte stage tag
    repeated: 4-byte tag | u64 payload length | payload

Sections: GAUS (coarse Gaussians), HMET (hash metadata and box), HTAB (hash
tables), MLP1..MLP3, POOL, OPTM (optional optimiser moments), CONF (config
echo, JSON), STAT (extent and sampler queue, JSON), RNGS (generator state, JSON).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from holosplat.config import RunConfig, make_config
from holosplat.decoder import DecoderStack, Mlp
from holosplat.hashgrid import HashField
from holosplat.mixer import OffsetPool
from holosplat.model import Phi
from holosplat.optim import Adam
from holosplat.scene import GaussianSet
from holosplat.training import STAGES, TrainState

MAGIC = b"MXGS"
VERSION = 1
_HEADER = struct.Struct("<4sI8s")
_SECTION = struct.Struct("<4sQ")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class CorruptSection(CheckpointError):
    pass


# ----------------------------------------------------------------------------
# array packing
# ----------------------------------------------------------------------------

def _pack_array(a: np.ndarray) -> bytes:
    """u8 itemsize | u8 ndim | u64 shape[ndim] | data."""
    a = np.asarray(a)
    dt = _DTYPES[a.dtype.itemsize]
    return struct.pack("<BB", a.dtype.itemsize, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) \
        + np.ascontiguousarray(a, dtype=dt).tobytes()


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptSection(f"{self.where}: payload shorter than its contents")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self) -> np.ndarray:
        itemsize, ndim = self.unpack("<BB")
        if itemsize not in _DTYPES:
            raise CorruptSection(f"{self.where}: bad element size {itemsize}")
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[itemsize]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = self.take(n * itemsize)
        return np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptSection(f"{self.where}: {len(self.buf) - self.pos} trailing bytes")


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ----------------------------------------------------------------------------
# sections
# ----------------------------------------------------------------------------

def _gaus(gs: GaussianSet) -> bytes:
    return b"".join(_pack_array(a) for a in gs.arrays().values())


def _hmet(field: HashField) -> bytes:
    has_box = field.aabb is not None
    box = field.aabb if has_box else np.zeros((2, 3))
    return struct.pack("<5IB", field.n_levels, field.n_min, field.n_max, field.table_size,
                       field.features, int(has_box)) + struct.pack("<3I", *field.primes) \
        + np.asarray(box, "<f8").tobytes()


def _mlp(m: Mlp) -> bytes:
    dims = m.dims
    out = struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    return out + b"".join(_pack_array(p) for p in m.params())


def _optm(opt: Adam) -> bytes:
    out = [struct.pack("<ddd", opt.beta1, opt.beta2, opt.eps), struct.pack("<I", len(opt.state))]
    for name in sorted(opt.state):
        st = opt.state[name]
        raw = name.encode("utf-8")
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", st["step"]),
                _pack_array(st["m"]), _pack_array(st["v"])]
    return b"".join(out)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def encode_state(state: TrainState, *, with_optimizer: bool = True) -> bytes:
    stage = state.stage.encode("ascii").ljust(8, b"\0")
    phi = state.phi
    sections = [(b"GAUS", _gaus(state.coarse)), (b"HMET", _hmet(phi.field)),
                (b"HTAB", _pack_array(phi.field.tables))]
    for i, m in enumerate(phi.decoder.mlps(), 1):
        sections.append((f"MLP{i}".encode(), _mlp(m)))
    sections.append((b"POOL", _pack_array(phi.pool.offsets)))
    if with_optimizer:
        sections.append((b"OPTM", _optm(state.optim)))
    sections += [(b"CONF", _json(state.cfg.to_dict())),
                 (b"STAT", _json({"extent": state.extent, "queue": list(state.queue),
                                       "meta": state.meta})),
                 (b"RNGS", _json(_rng_state(state.rng)))]
    out = [_HEADER.pack(MAGIC, VERSION, stage)]
    for tag, payload in sections:
        out += [_SECTION.pack(tag, len(payload)), payload]
    return b"".join(out)


def save_checkpoint(path, state: TrainState, *, with_optimizer: bool = True) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    data = encode_state(state, with_optimizer=with_optimizer)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sections(data: bytes, where: str = "<checkpoint>") -> tuple[str, dict[str, bytes]]:
    """Split a checkpoint into (stage, {tag: payload}) after validating the framing."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{where}: not a checkpoint (bad magic)")
    if len(data) < _HEADER.size:
        raise Truncated(f"{where}: header truncated")
    _, version, stage = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatch(f"{where}: format version {version}, expected {VERSION}")
    stage = stage.rstrip(b"\0").decode("ascii", errors="replace")
    pos, sections = _HEADER.size, {}
    while pos < len(data):
        if pos + _SECTION.size > len(data):
            raise Truncated(f"{where}: section header truncated at byte {pos}")
        tag, n = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        if pos + n > len(data):
            raise Truncated(f"{where}: section {tag.decode(errors='replace')} truncated "
                            f"({len(data) - pos} of {n} bytes)")
        key = tag.decode("ascii", errors="replace")
        if key in sections:
            raise CorruptSection(f"{where}: duplicate section {key}")
        sections[key] = data[pos:pos + n]
        pos += n
    return stage, sections


def _need(sections, tag, where):
    if tag not in sections:
        raise CorruptSection(f"{where}: missing section {tag}")
    return sections[tag]


def decode_state(data: bytes, where: str = "<checkpoint>") -> TrainState:
    stage, sec = read_sections(data, where)
    if stage not in STAGES:
        raise CorruptSection(f"{where}: unknown stage tag {stage!r}")
    r = _Reader(_need(sec, "GAUS", where), f"{where}: GAUS")
    try:
        coarse = GaussianSet(*(r.array() for _ in range(5)))
    except ValueError as e:
        raise CorruptSection(f"{where}: GAUS: {e}") from None
    r.done()

    r = _Reader(_need(sec, "HMET", where), f"{where}: HMET")
    L, n_min, n_max, T, F, has_box = r.unpack("<5IB")
    primes = r.unpack("<3I")
    box = np.frombuffer(r.take(48), "<f8").reshape(2, 3).astype(np.float64)
    r.done()
    r = _Reader(_need(sec, "HTAB", where), f"{where}: HTAB")
    tables = r.array()
    r.done()
    try:
        field = HashField(L, n_min, n_max, T, F, tables, box if has_box else None, tuple(primes))
    except ValueError as e:
        raise CorruptSection(f"{where}: HASH: {e}") from None

    mlps = []
    for i in (1, 2, 3):
        r = _Reader(_need(sec, f"MLP{i}", where), f"{where}: MLP{i}")
        (nd,) = r.unpack("<I")
        dims = r.unpack(f"<{nd}I")
        params = [r.array() for _ in range(2 * (nd - 1))]
        r.done()
        try:
            m = Mlp(params[0::2], params[1::2])
        except ValueError as e:
            raise CorruptSection(f"{where}: MLP{i}: {e}") from None
        if list(dims) != m.dims:
            raise CorruptSection(f"{where}: MLP{i}: declared dims {dims} do not match weights")
        mlps.append(m)

    r = _Reader(_need(sec, "POOL", where), f"{where}: POOL")
    pool = OffsetPool(r.array())
    r.done()

    opt = Adam()
    if "OPTM" in sec:
        r = _Reader(sec["OPTM"], f"{where}: OPTM")
        b1, b2, eps = r.unpack("<ddd")
        opt = Adam((b1, b2), eps)
        (count,) = r.unpack("<I")
        for _ in range(count):
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode("utf-8")
            (step,) = r.unpack("<Q")
            opt.state[name] = {"step": step, "m": r.array(), "v": r.array()}
        r.done()

    try:
        conf = json.loads(_need(sec, "CONF", where))
        conf["background"] = tuple(conf["background"])
        cfg = make_config(conf.pop("profile"), **{k: v for k, v in conf.items()})
        stat = json.loads(_need(sec, "STAT", where))
        rng_state = json.loads(_need(sec, "RNGS", where))
        rng = np.random.Generator(getattr(np.random, rng_state["bit_generator"])())
        rng.bit_generator.state = rng_state
    except (ValueError, KeyError, AttributeError, TypeError) as e:
        raise CorruptSection(f"{where}: metadata: {e}") from None
    phi = Phi(field, DecoderStack(*mlps), pool)
    return TrainState(cfg, coarse, phi, opt, rng, float(stat["extent"]), stage,
                      [int(i) for i in stat["queue"]], dict(stat.get("meta", {})))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    return decode_state(data, str(path))


def section_bytes(path) -> dict[str, bytes]:
    """Raw section payloads, for byte-level comparisons between checkpoints."""
    p = Path(path)
    return read_sections(p.read_bytes(), str(p))[1]

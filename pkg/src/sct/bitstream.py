"""Bit-exact `.sct` container for trimmed code streams, plus the DEFLATE wrapper.

Layout (all multi-byte integers little-endian):

    header  : magic "SCT1" | version u8 | trueH u16 | trueW u16 |
              K u8 | B u8 | tileSize u8 | flags u8 | modelConfigHash u64
    payloads: K back-to-back iteration payloads, no length prefixes.

Payload k holds B bits for every tile still active at the start of k
(not stopped at any k' < k), tiles in raster order, bits in channel order,
packed MSB-first and zero-filled to a byte boundary per iteration. Payload
boundaries are implied: the reader tracks the mask it derives from the
codes themselves, so no side information is stored. With the SCT flag
clear, every tile is active every iteration and all-zero codes carry no
stop semantics.

`.sct.dz` is the zlib (DEFLATE) compression of the `.sct` bytes; its size is
what the true-bitrate measurements use.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .mask import CodeTensor, TileMask, decoder_mask_from_codes
from .tensor import ShapeError

MAGIC = b"SCT1"
FORMAT_VERSION = 1
FLAG_SCT = 0x01

_HEADER_STRUCT = struct.Struct("<4sBHHBBBBQ")
HEADER_SIZE = _HEADER_STRUCT.size


class FormatError(ValueError):
    """Malformed, truncated, or inconsistent bitstream."""


@dataclass(frozen=True)
class SctHeader:
    true_h: int
    true_w: int
    iterations: int
    code_depth: int
    tile_size: int = 16
    flags: int = FLAG_SCT
    model_hash: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def sct_enabled(self):
        return bool(self.flags & FLAG_SCT)

    @property
    def padded_h(self):
        return -(-self.true_h // self.tile_size) * self.tile_size

    @property
    def padded_w(self):
        return -(-self.true_w // self.tile_size) * self.tile_size

    @property
    def tile_grid(self):
        return (self.padded_h // self.tile_size, self.padded_w // self.tile_size)

    def pack(self):
        return _HEADER_STRUCT.pack(MAGIC, self.format_version, self.true_h, self.true_w,
                                   self.iterations, self.code_depth, self.tile_size,
                                   self.flags, self.model_hash)

    @classmethod
    def unpack(cls, data):
        if len(data) < HEADER_SIZE:
            raise FormatError(f"stream too short for header: {len(data)} < {HEADER_SIZE} bytes")
        magic, ver, th, tw, k, b, tile, flags, mhash = _HEADER_STRUCT.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if ver != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {ver}")
        if k < 1 or b < 1 or tile < 1:
            raise FormatError(f"degenerate header fields: K={k} B={b} tile={tile}")
        return cls(true_h=th, true_w=tw, iterations=k, code_depth=b, tile_size=tile,
                   flags=flags, model_hash=mhash, format_version=ver)


@dataclass
class SctBitstream:
    header: SctHeader
    payloads: list

    def to_bytes(self):
        return self.header.pack() + b"".join(self.payloads)

    @property
    def payload_bits(self):
        return [8 * len(p) for p in self.payloads]

    @property
    def total_bytes(self):
        return HEADER_SIZE + sum(len(p) for p in self.payloads)


def _pack_tiles(bits, active):
    """Pack the active tiles' bits (raster order, MSB-first, zero fill)."""
    if not active.any():
        return b""
    flat = bits[active].reshape(-1)
    return np.packbits(flat).tobytes()


def write(codes, masks, header):
    """Serialize one encode's code/mask sequence into an SctBitstream.

    codes must be post-masking; masks must be the encoder's natural masks
    (post-update, one per iteration). Consistency between the two is
    enforced: any nonzero bit on a stopped tile, or an unmarked all-zero
    code, is an error rather than silent corruption.
    """
    if len(codes) != header.iterations:
        raise FormatError(f"{len(codes)} code tensors for K={header.iterations}")
    grid = header.tile_grid
    for c in codes:
        if c.grid != grid or c.depth != header.code_depth:
            raise FormatError(f"codes {c.grid}x{c.depth} do not fit header grid {grid}, B={header.code_depth}")

    if header.sct_enabled:
        if masks is None or len(masks) != header.iterations:
            raise FormatError("SCT stream requires one mask per iteration")
        for k, (c, m) in enumerate(zip(codes, masks), start=1):
            if m.grid != grid:
                raise ShapeError(f"mask grid {m.grid} vs header {grid}")
            if c.bits[m.stopped].any():
                raise FormatError(f"nonzero bit on a stopped tile at iteration {k}")
        derived = decoder_mask_from_codes(codes)
        for k, (given, d) in enumerate(zip(masks, derived), start=1):
            if not np.array_equal(given.stopped, d.stopped):
                raise FormatError(f"mask at iteration {k} is not derivable from the codes")
        payloads = []
        prev_stopped = np.zeros(grid, dtype=bool)
        for c, m in zip(codes, masks):
            payloads.append(_pack_tiles(c.bits, ~prev_stopped))
            prev_stopped = m.stopped
    else:
        all_active = np.ones(grid, dtype=bool)
        payloads = [_pack_tiles(c.bits, all_active) for c in codes]

    return SctBitstream(header, payloads)


def read(stream):
    """Reconstruct (codes, masks) from a bitstream.

    Stopped tiles come back zero-filled; the masks equal the writer's.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = from_bytes(bytes(stream))
    header = stream.header
    grid = header.tile_grid
    depth = header.code_depth
    codes = []
    masks = []
    prev = TileMask.empty(grid)
    for k, payload in enumerate(stream.payloads, start=1):
        active = ~prev.stopped
        n_active = int(active.sum())
        n_bits = depth * n_active
        n_bytes = (n_bits + 7) // 8
        if len(payload) != n_bytes:
            raise FormatError(
                f"payload {k}: expected {n_bytes} bytes for {n_active} active tiles, got {len(payload)}")
        bits = np.zeros(grid + (depth,), dtype=np.uint8)
        if n_active:
            unpacked = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
            if unpacked[n_bits:].any():
                raise FormatError(f"payload {k}: nonzero fill bits")
            bits[active] = unpacked[:n_bits].reshape(n_active, depth)
        c = CodeTensor(bits, k)
        codes.append(c)
        if header.sct_enabled:
            zero = c.zero_tiles()
            stopped = prev.stopped | zero
            first = np.where(prev.stopped, prev.first_stop,
                             np.where(stopped, np.int32(k), np.int32(0)))
            prev = TileMask(stopped, first)
            masks.append(prev.copy())
        else:
            masks.append(TileMask.empty(grid))
    return codes, masks


def from_bytes(data):
    """Parse raw `.sct` bytes, checking payload sizes and trailing garbage."""
    header = SctHeader.unpack(data)
    grid = header.tile_grid
    depth = header.code_depth
    offset = HEADER_SIZE
    payloads = []
    prev_stopped = np.zeros(grid, dtype=bool)
    for k in range(1, header.iterations + 1):
        active = ~prev_stopped
        n_active = int(active.sum())
        n_bits = depth * n_active
        n_bytes = (n_bits + 7) // 8
        if offset + n_bytes > len(data):
            raise FormatError(
                f"truncated payload at iteration {k}, byte offset {offset}: "
                f"need {n_bytes} bytes, have {len(data) - offset}")
        payload = data[offset:offset + n_bytes]
        offset += n_bytes
        payloads.append(payload)
        if header.sct_enabled and n_active:
            unpacked = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:n_bits]
            tile_bits = unpacked.reshape(n_active, depth)
            zero_now = np.zeros(grid, dtype=bool)
            zero_now[active] = ~tile_bits.any(axis=1)
            prev_stopped = prev_stopped | zero_now
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} bytes of trailing garbage after payload {header.iterations}")
    return SctBitstream(header, payloads)


def compress(stream):
    """zlib (DEFLATE) wrap of the serialized stream; the true-bitrate bytes."""
    return zlib.compress(stream.to_bytes(), 9)


def decompress(data):
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise FormatError(f"corrupt compressed container: {exc}") from None
    return from_bytes(raw)


def truncate(stream, iterations):
    """Prefix stream containing only the first `iterations` payloads."""
    if not 1 <= iterations <= stream.header.iterations:
        raise ValueError(f"iterations must be in 1..{stream.header.iterations}")
    header = replace(stream.header, iterations=iterations)
    return SctBitstream(header, stream.payloads[:iterations])


@dataclass(frozen=True)
class BitrateReport:
    nominal_bpp: float
    trimmed_bpp: float
    compressed_bpp: float
    payload_bytes: int
    compressed_bytes: int


def bitrate_report(stream, true_h=None, true_w=None):
    """Nominal vs trimmed vs entropy-coded bits per true pixel.

    Nominal and trimmed count code bits only; compressed counts the whole
    `.sct.dz` container, header included, because those bytes are transmitted.
    """
    header = stream.header
    th = header.true_h if true_h is None else true_h
    tw = header.true_w if true_w is None else true_w
    if (th, tw) != (header.true_h, header.true_w):
        raise FormatError(f"dimensions {th}x{tw} disagree with header {header.true_h}x{header.true_w}")
    pixels = th * tw
    nominal = header.iterations * header.code_depth / float(header.tile_size ** 2)
    payload_bytes = sum(len(p) for p in stream.payloads)
    trimmed = 8.0 * payload_bytes / pixels
    compressed_bytes = len(compress(stream))
    compressed = 8.0 * compressed_bytes / pixels
    return BitrateReport(nominal_bpp=nominal, trimmed_bpp=trimmed, compressed_bpp=compressed,
                         payload_bytes=payload_bytes, compressed_bytes=compressed_bytes)

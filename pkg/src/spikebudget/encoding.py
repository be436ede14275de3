"""Spike encodings and binary container formats.

Converts frame images into stochastic spike trains (per-timestep Bernoulli
draws at the pixel intensity) and event streams into fixed-length binary
tensors. Also hosts the parsers for the IDX image container, the EVT1 event
file, and the optional ATIS event record.

All spike tensors are uint8 arrays with values in {0, 1}, indexed
(timestep, unit) or (timestep, batch, unit).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

EVT1_MAGIC = b"SPKEVT01"
EVT1_HEADER = struct.Struct("<8sHHI")

# One event on the wire: {u32 t_us, u16 x, u16 y, u8 polarity, u8 pad},
# padded to 12 bytes (4-byte struct alignment, 2 zero tail bytes).
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
_EVT1_WIRE_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p", "pad"],
        "formats": ["<u4", "<u2", "<u2", "u1", "u1"],
        "offsets": [0, 4, 6, 8, 9],
        "itemsize": 12,
    }
)


class FormatError(ValueError):
    """Raised when a binary container violates its format."""


@dataclass
class FrameImage:
    """A single intensity image with pixels scaled into [0, 1]."""

    pixels: np.ndarray  # (height, width)
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-d, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def make_events(t, x, y, p) -> np.ndarray:
    """Assemble parallel field arrays into an event record array."""
    t = np.asarray(t)
    events = np.empty(t.shape[0] if t.ndim else 1, dtype=EVENT_DTYPE)
    events["t"], events["x"], events["y"], events["p"] = t, x, y, p
    return events


def check_spike_tensor(spikes: np.ndarray) -> np.ndarray:
    """Validate that an array is a binary spike tensor; returns it unchanged."""
    spikes = np.asarray(spikes)
    if spikes.size == 0:
        raise ValueError("empty spike tensor")
    values = np.unique(spikes)
    if not np.isin(values, (0, 1)).all():
        raise ValueError("spike tensor entries must all be 0 or 1")
    return spikes


# ---------------------------------------------------------------------------
# Rate encoding of frames


def poisson_encode(image: FrameImage, timesteps: int, rng: np.random.Generator) -> np.ndarray:
    """Rate-encode an image: each pixel fires per timestep with p = intensity.

    Returns a (timesteps, height*width) uint8 tensor. Deterministic for a
    given rng state.
    """
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    flat = image.pixels.reshape(-1)
    draws = rng.random((timesteps, flat.shape[0]))
    return (draws < flat[None, :]).astype(np.uint8)


def encode_frames(pixels: np.ndarray, timesteps: int, rng: np.random.Generator) -> np.ndarray:
    """Batch rate encoding: (batch, units) intensities -> (T, batch, units) spikes."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValueError("expected a (batch, units) intensity array")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValueError("pixel intensities must lie in [0, 1]")
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    draws = rng.random((timesteps,) + pixels.shape)
    return (draws < pixels[None, :, :]).astype(np.uint8)


# ---------------------------------------------------------------------------
# Event streams


def bin_events(
    events: np.ndarray,
    timesteps: int,
    height: int,
    width: int,
    duration_us: int,
) -> np.ndarray:
    """Rasterize an event stream into a (T, 2*H*W) binary tensor.

    The time axis is split into `timesteps` equal bins over [0, duration_us);
    the unit index is polarity*H*W + y*W + x. A cell is 1 if at least one
    event landed there (logical OR, not a count).
    """
    if duration_us <= 0:
        raise ValueError("duration_us must be positive")
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    events = np.asarray(events, dtype=EVENT_DTYPE)
    out = np.zeros((timesteps, 2 * height * width), dtype=np.uint8)
    if events.shape[0] == 0:
        return out
    t = events["t"].astype(np.int64)
    if np.any(np.diff(t) < 0):
        raise ValueError("events must be sorted by timestamp")
    if t[-1] >= duration_us:
        raise ValueError(
            f"event at t={int(t[-1])}us falls outside duration {duration_us}us"
        )
    x = events["x"].astype(np.int64)
    y = events["y"].astype(np.int64)
    p = events["p"].astype(np.int64)
    if np.any(x >= width) or np.any(y >= height):
        raise ValueError("event coordinates out of bounds")
    if np.any(p > 1):
        raise ValueError("polarity must be 0 or 1")
    bins = t * timesteps // duration_us
    units = p * (height * width) + y * width + x
    out[bins, units] = 1
    return out


def synth_event_stream(
    rng: np.random.Generator,
    width: int,
    height: int,
    duration_us: int,
    rate: float,
) -> np.ndarray:
    """Generate a sorted random event stream at `rate` events per microsecond."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    count = int(rng.poisson(rate * duration_us)) if rate > 0 else 0
    t = np.sort(rng.integers(0, duration_us, size=count))
    x = rng.integers(0, width, size=count)
    y = rng.integers(0, height, size=count)
    p = rng.integers(0, 2, size=count)
    return make_events(t, x, y, p) if count else np.empty(0, dtype=EVENT_DTYPE)


# ---------------------------------------------------------------------------
# IDX container (big-endian MNIST format)


def parse_idx(raw: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Decode an IDX byte stream into (dims, uint8 array shaped to dims).

    Accepts only the unsigned-byte magics 0x00000803 (3-d images) and
    0x00000801 (1-d labels); the payload length must match the dimension
    product exactly.
    """
    if len(raw) < 4:
        raise FormatError("IDX stream shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("IDX stream truncated inside the dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = 1
    for d in dims:
        expected *= d
    if expected > 1 << 40:
        raise FormatError(f"IDX dimensions {dims} overflow any plausible payload")
    payload = raw[header_end:]
    if len(payload) < expected:
        raise FormatError(
            f"IDX payload truncated: expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise FormatError(
            f"IDX payload has {len(payload) - expected} trailing bytes"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return dims, data


def write_idx(data: np.ndarray) -> bytes:
    """Encode a uint8 array (1-d labels or 3-d images) as an IDX byte stream."""
    data = np.ascontiguousarray(data, dtype=np.uint8)
    if data.ndim == 1:
        magic = IDX_LABELS_MAGIC
    elif data.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    else:
        raise ValueError("IDX writer supports 1-d labels or 3-d images only")
    header = struct.pack(f">I{data.ndim}I", magic, *data.shape)
    return header + data.tobytes()


def load_idx_file(path) -> tuple[tuple[int, ...], np.ndarray]:
    """Read an IDX file, transparently decompressing gzip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


# ---------------------------------------------------------------------------
# EVT1 event file


def write_event_file(width: int, height: int, events: np.ndarray) -> bytes:
    """Serialize an event stream to EVT1 bytes (little-endian, 12 B/event)."""
    events = np.asarray(events, dtype=EVENT_DTYPE)
    _validate_events(events, width, height)
    wire = np.zeros(events.shape[0], dtype=_EVT1_WIRE_DTYPE)
    for name in ("t", "x", "y", "p"):
        wire[name] = events[name]
    header = EVT1_HEADER.pack(EVT1_MAGIC, width, height, events.shape[0])
    return header + wire.tobytes()


def parse_event_file(raw: bytes) -> tuple[int, int, np.ndarray]:
    """Decode EVT1 bytes into (width, height, events)."""
    if len(raw) < EVT1_HEADER.size:
        raise FormatError("EVT1 stream shorter than its header")
    magic, width, height, count = EVT1_HEADER.unpack_from(raw)
    if magic != EVT1_MAGIC:
        raise FormatError(f"bad EVT1 magic {magic!r}")
    body = raw[EVT1_HEADER.size:]
    if len(body) != count * _EVT1_WIRE_DTYPE.itemsize:
        raise FormatError(
            f"EVT1 length mismatch: header says {count} events, "
            f"body holds {len(body)} bytes"
        )
    wire = np.frombuffer(body, dtype=_EVT1_WIRE_DTYPE)
    raw_rows = np.frombuffer(body, dtype=np.uint8).reshape(-1, 12) if count else None
    if count and np.any(raw_rows[:, 9:] != 0):
        raise FormatError("EVT1 pad bytes must be zero")
    events = np.empty(count, dtype=EVENT_DTYPE)
    for name in ("t", "x", "y", "p"):
        events[name] = wire[name]
    _validate_events(events, width, height)
    return width, height, events


def _validate_events(events: np.ndarray, width: int, height: int) -> None:
    if events.shape[0] == 0:
        return
    if np.any(np.diff(events["t"].astype(np.int64)) < 0):
        raise FormatError("event timestamps must be non-decreasing")
    if np.any(events["x"] >= width) or np.any(events["y"] >= height):
        raise FormatError("event coordinates out of bounds")
    if np.any(events["p"] > 1):
        raise FormatError("polarity must be 0 or 1")


# ---------------------------------------------------------------------------
# Optional ATIS record decoder (native N-MNIST files)


def parse_atis(raw: bytes, width: int = 34, height: int = 34) -> np.ndarray:
    """Decode big-endian 5-byte ATIS records: x, y, polarity bit, 23-bit t_us."""
    if len(raw) % 5 != 0:
        raise FormatError("ATIS stream length must be a multiple of 5 bytes")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 5).astype(np.uint32)
    x = rec[:, 0]
    y = rec[:, 1]
    p = (rec[:, 2] >> 7) & 1
    t = ((rec[:, 2] & 0x7F) << 16) | (rec[:, 3] << 8) | rec[:, 4]
    events = make_events(t, x, y, p) if rec.shape[0] else np.empty(0, dtype=EVENT_DTYPE)
    _validate_events(events, width, height)
    return events

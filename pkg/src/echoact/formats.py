"""On-disk formats: PCM WAV, echo-profile / flow-window containers, model checkpoints.

Binary containers are little-endian.  After the payload an optional
metadata trailer may follow: ``b"META"``, u32 byte length, then UTF-8
``key=value`` lines.  Readers that only know the fixed layout can ignore it.
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .echo import EchoProfile, FlowWindow
from .errors import DataError

PROFILE_MAGIC = b"AEPF"
WINDOW_MAGIC = b"AEFW"
MODEL_MAGIC = b"AMDL"
VERSION = 1
_TRAILER = b"META"


# --------------------------------------------------------------------------- WAV


def write_wav(path: str | Path, data: np.ndarray, sample_rate: float, meta: dict | None = None) -> None:
    """16-bit PCM; ``data`` is ``(n,)`` or ``(channels, n)`` in [-1, 1] (clipped).

    ``meta`` is stored as a ``META`` RIFF chunk after the audio, which
    ordinary WAV readers skip.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] not in (1, 2):
        raise DataError("WAV export supports mono or 2-channel audio")
    pcm = np.clip(np.rint(data * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(data.shape[0])
        wf.setsampwidth(2)
        wf.setframerate(int(round(sample_rate)))
        wf.writeframes(pcm.T.tobytes())
    if meta:
        body = dump_kv(meta).encode()
        chunk = _TRAILER + struct.pack("<I", len(body)) + body + b"\0" * (len(body) % 2)
        with open(path, "r+b") as fh:
            fh.seek(0, 2)
            fh.write(chunk)
            size = fh.tell() - 8
            fh.seek(4)
            fh.write(struct.pack("<I", size))


def read_wav_meta(path: str | Path) -> dict[str, str]:
    """Contents of the ``META`` chunk written by :func:`write_wav` (empty if absent)."""
    buf = Path(path).read_bytes()
    if buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise DataError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(buf):
        name, size = buf[pos : pos + 4], struct.unpack_from("<I", buf, pos + 4)[0]
        if name == _TRAILER:
            return parse_kv(buf[pos + 8 : pos + 8 + size].decode())
        pos += 8 + size + size % 2
    return {}


def read_wav(path: str | Path) -> tuple[np.ndarray, float]:
    """Returns ``(channels, n)`` float64 samples and the sample rate."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM is supported")
            ch = wf.getnchannels()
            rate = float(wf.getframerate())
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, ch).T
    return pcm.astype(np.float64) / 32767.0, rate


# ----------------------------------------------------------------- key=value helpers


def dump_kv(meta: dict[str, object]) -> str:
    lines = []
    for k, v in meta.items():
        s = str(v)
        if "\n" in s or "=" in k:
            raise DataError(f"metadata entry {k!r} cannot be encoded as key=value")
        lines.append(f"{k}={s}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _trailer(meta: dict | None) -> bytes:
    if not meta:
        return b""
    body = dump_kv(meta).encode()
    return _TRAILER + struct.pack("<I", len(body)) + body


def _read_trailer(buf: bytes, offset: int) -> dict[str, str]:
    if offset == len(buf):
        return {}
    if buf[offset : offset + 4] != _TRAILER:
        raise DataError("unexpected bytes after payload")
    if len(buf) < offset + 8:
        raise DataError("truncated metadata trailer")
    (size,) = struct.unpack_from("<I", buf, offset + 4)
    if len(buf) != offset + 8 + size:
        raise DataError("metadata trailer length does not match the file")
    return parse_kv(buf[offset + 8 : offset + 8 + size].decode())


# ----------------------------------------------------------- profiles and windows


def _pack_tensor(magic: bytes, data: np.ndarray, extra: bytes = b"") -> bytes:
    if data.ndim != 3:
        raise DataError("containers hold 3-D tensors")
    head = struct.pack("<4sI3I", magic, VERSION, *data.shape)
    return head + extra + np.ascontiguousarray(data, dtype="<f4").tobytes()


def _unpack_tensor(buf: bytes, magic: bytes, extra_fmt: str = ""):
    if len(buf) < 20 or buf[:4] != magic:
        raise DataError(f"not a {magic.decode()} file")
    _, version, *dims = struct.unpack_from("<4sI3I", buf, 0)
    if version != VERSION:
        raise DataError(f"unsupported {magic.decode()} version {version}")
    offset = 20
    extra = ()
    if extra_fmt:
        extra = struct.unpack_from(extra_fmt, buf, offset)
        offset += struct.calcsize(extra_fmt)
    count = int(np.prod(dims))
    end = offset + 4 * count
    if len(buf) < end:
        raise DataError(f"truncated {magic.decode()} payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    return data, extra, _read_trailer(buf, end)


def write_profile(path: str | Path, profile: EchoProfile, meta: dict | None = None) -> None:
    """Complex profiles are stored as real parts then imaginary parts along the channel axis."""
    data = profile.data
    meta = {"frame_rate": repr(float(profile.frame_rate)), **(meta or {})}
    if np.iscomplexobj(data):
        data = np.concatenate([data.real, data.imag])
        meta["complex"] = "1"
    Path(path).write_bytes(_pack_tensor(PROFILE_MAGIC, data) + _trailer(meta))


def read_profile(path: str | Path) -> tuple[EchoProfile, dict[str, str]]:
    data, _, meta = _unpack_tensor(Path(path).read_bytes(), PROFILE_MAGIC)
    rate = float(meta.get("frame_rate", 50_000 / 600))
    data = data.astype(np.float64)
    if meta.get("complex") == "1":
        if data.shape[0] % 2:
            raise DataError("complex profile needs an even channel count")
        half = data.shape[0] // 2
        data = data[:half] + 1j * data[half:]
    return EchoProfile(data, rate), meta


def window_bytes(window: FlowWindow, meta: dict | None = None) -> bytes:
    meta = {"frame_rate": repr(float(window.frame_rate)), **(meta or {})}
    extra = struct.pack("<d", window.start_time)
    return _pack_tensor(WINDOW_MAGIC, window.data, extra) + _trailer(meta)


def write_window(path: str | Path, window: FlowWindow, meta: dict | None = None) -> None:
    Path(path).write_bytes(window_bytes(window, meta))


def read_window(path: str | Path) -> tuple[FlowWindow, dict[str, str]]:
    data, (start,), meta = _unpack_tensor(Path(path).read_bytes(), WINDOW_MAGIC, "<d")
    rate = float(meta.get("frame_rate", 50_000 / 600))
    return FlowWindow(data, start, rate), meta


# ------------------------------------------------------------------ checkpoints


def write_checkpoint(path: str | Path, descriptor: dict[str, object], tensors: dict[str, np.ndarray]) -> None:
    """``AMDL``, u32 version, u32 descriptor length + key=value text, u32 tensor count,
    then per tensor: u16 name length, name, u32 ndim, u32 dims, f32 data."""
    desc = dump_kv(descriptor).encode()
    parts = [struct.pack("<4sII", MODEL_MAGIC, VERSION, len(desc)), desc, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        bname = name.encode()
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not an AMDL checkpoint")
    _, version, dlen = struct.unpack_from("<4sII", buf, 0)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    descriptor = parse_kv(buf[off : off + dlen].decode())
    off += dlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    return descriptor, tensors

"""Depth file codecs, flat ``key = value`` configuration and JSON run manifests.

``png16`` stores ``round(meters * 256)`` in a 16-bit single-channel PNG with 0
marking missing pixels. ``pfm`` stores little-endian float32 with NaN for
missing pixels and round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .alignment import AlignmentConfig
from .errors import FormatError, ParameterError, RangeError
from .losses import LossConfig
from .scenegen import SceneConfig

__all__ = [
    "PNG16_SCALE",
    "PNG16_MAX",
    "read_depth",
    "write_depth",
    "read_pfm",
    "write_pfm",
    "read_png16",
    "write_png16",
    "format_for",
    "RunConfig",
    "parse_config",
    "load_config",
    "apply_config",
    "write_manifest",
    "read_manifest",
    "__version__",
]

__version__ = "0.1.0"

PNG16_SCALE = 256.0
PNG16_MAX = 65535 / PNG16_SCALE


def format_for(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "png16"
    if suffix == ".pfm":
        return "pfm"
    raise ParameterError(f"cannot infer depth format from {str(path)!r}; use .png or .pfm")


def write_png16(path, depth) -> None:
    """Write metric depth; NaN and non-positive entries are stored as missing (0)."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ParameterError(f"depth must be 2-D, got shape {d.shape}")
    valid = np.isfinite(d) & (d > 0)
    if np.any(np.isinf(d)):
        raise RangeError("infinite depth cannot be stored in png16")
    if np.any(d[valid] > PNG16_MAX):
        raise RangeError(f"depth {d[valid].max():.3f} m exceeds the png16 limit of {PNG16_MAX:.3f} m")
    code = np.where(valid, np.round(d * PNG16_SCALE), 0.0)
    if np.any(valid & (code == 0)):
        raise RangeError(f"depth below {0.5 / PNG16_SCALE} m rounds to the missing-value code")
    Image.fromarray(code.astype(np.uint16)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    """Read metric depth; missing pixels come back as NaN."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise FormatError(f"expected a 16-bit single-channel PNG, got mode {im.mode}", 0)
        code = np.asarray(im, dtype=np.float64)
    return np.where(code > 0, code / PNG16_SCALE, np.nan)


def write_pfm(path, data) -> None:
    d = np.asarray(data, dtype=np.float32)
    if d.ndim != 2:
        raise ParameterError(f"PFM grayscale needs a 2-D array, got shape {d.shape}")
    H, W = d.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(d[::-1]).astype("<f4").tobytes())


_TOKEN = re.compile(rb"\S+")


def _next_token(buf: bytes, pos: int):
    m = _TOKEN.search(buf, pos)
    if m is None:
        raise FormatError("truncated PFM header", len(buf))
    return m.group(), m.start(), m.end()


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM as float32, top row first."""
    buf = Path(path).read_bytes()
    magic, start, pos = _next_token(buf, 0)
    if magic != b"Pf":
        raise FormatError(f"expected grayscale PFM magic 'Pf', found {magic[:8]!r}", start)
    dims = []
    for _ in range(2):
        tok, start, pos = _next_token(buf, pos)
        if not tok.isdigit() or int(tok) == 0:
            raise FormatError(f"invalid PFM dimension {tok[:16]!r}", start)
        dims.append(int(tok))
    tok, start, pos = _next_token(buf, pos)
    try:
        scale = float(tok)
    except ValueError:
        raise FormatError(f"invalid PFM scale {tok[:16]!r}", start) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("PFM scale must be a nonzero finite number", start)
    if pos >= len(buf) or buf[pos : pos + 1] not in (b"\n", b"\r", b" ", b"\t"):
        raise FormatError("missing whitespace after PFM scale", pos)
    pos += 1
    W, H = dims
    nbytes = 4 * W * H
    if len(buf) - pos < nbytes:
        raise FormatError(f"PFM pixel data truncated: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return data[::-1].astype(np.float32)


def write_depth(path, depth, fmt: str | None = None) -> None:
    fmt = fmt or format_for(path)
    if fmt == "png16":
        write_png16(path, depth)
    elif fmt == "pfm":
        write_pfm(path, depth)
    else:
        raise ParameterError(f"unknown depth format {fmt!r}")


def read_depth(path, fmt: str | None = None) -> np.ndarray:
    """Read a depth or scalar field as float64; missing pixels are NaN."""
    fmt = fmt or format_for(path)
    if fmt == "png16":
        return read_png16(path)
    if fmt == "pfm":
        return read_pfm(path).astype(np.float64)
    raise ParameterError(f"unknown depth format {fmt!r}")


# -- configuration ---------------------------------------------------------

PRIOR_DEFAULTS = {"sigma_p": 0.01, "lambda_s": 1.0, "eps_reg": 1e-2}


@dataclass
class RunConfig:
    """Everything a config file can override."""

    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    prior: dict = field(default_factory=lambda: dict(PRIOR_DEFAULTS))

    @property
    def loss(self) -> LossConfig:
        return self.align.loss_cfg

    def to_dict(self) -> dict:
        align = dataclasses.asdict(self.align)
        return {"align": align, "scene": self.scene.to_dict(), "prior": dict(self.prior)}


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            # outliers: "mode:rate, mode:rate"
            items = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple((m.strip(), float(r)) for m, r in (p.split(":") for p in items))
        if like is None:
            return None if raw.lower() == "none" else int(raw)
        return raw
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParameterError(f"config line {lineno}: empty key")
        if key in out:
            raise ParameterError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _targets(key: str):
    """Resolve a possibly qualified key to the config sections that own it."""
    section, _, name = key.rpartition(".")
    sections = {
        "align": {f.name for f in fields(AlignmentConfig)} - {"loss_cfg"},
        "loss": {f.name for f in fields(LossConfig)},
        "scene": {f.name for f in fields(SceneConfig)},
        "prior": set(PRIOR_DEFAULTS),
    }
    if section:
        if section not in sections or name not in sections[section]:
            raise ParameterError(f"unknown config key {key!r}")
        return name, [section]
    owners = [s for s, names in sections.items() if name in names]
    if not owners:
        raise ParameterError(f"unknown config key {key!r}")
    return name, owners


def apply_config(entries: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates = {"align": {}, "loss": {}, "scene": {}, "prior": {}}
    current = {"align": base.align, "loss": base.loss, "scene": base.scene}
    for key, raw in entries.items():
        name, owners = _targets(key)
        for sec in owners:
            like = base.prior[name] if sec == "prior" else getattr(current[sec], name)
            updates[sec][name] = _coerce(raw, like, key)
    loss = replace(base.loss, **updates["loss"])
    align = replace(base.align, loss_cfg=loss, **updates["align"])
    scene = replace(base.scene, **updates["scene"])
    prior = {**base.prior, **updates["prior"]}
    return RunConfig(align, scene, prior)


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    """Defaults (or ``base``) overridden by the entries of a config file."""
    if path is None:
        return base or RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParameterError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return apply_config(parse_config(text), base)


# -- manifests ---------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_manifest(path, payload: dict) -> dict:
    """Write a JSON manifest, stamping the package version."""
    doc = {"version": __version__, **_jsonable(payload)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid manifest JSON: {exc.msg}", exc.pos) from None

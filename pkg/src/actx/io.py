"""On-disk formats: ACTX tensor container, PGM attention frames, configs,
datasets, and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .attention import AttentionBundle, AttentionHyper
from .model import ConjugateGroup, ModelParams, TrainConfig
from .synth import SynthSpec

MAGIC = b"ACTX"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBH")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class BadVersionError(ContainerError):
    pass


class BadDtypeError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(t: np.ndarray, dtype: int = 1) -> bytes:
    if dtype not in DTYPES:
        raise BadDtypeError(f"unknown dtype code {dtype}")
    arr = np.asarray(t)
    if arr.ndim == 0 or arr.size == 0 or arr.ndim > 0xFFFF:
        raise ContainerError(f"cannot store tensor of shape {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, dtype, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + extents + np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if dtype not in DTYPES:
        raise BadDtypeError(f"unknown dtype code {dtype}")
    off = _HEADER.size
    if len(buf) < off + 4 * ndim:
        raise TruncatedPayloadError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    width = DTYPES[dtype].itemsize
    need = int(np.prod(shape)) * width
    payload = buf[off:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"truncated payload: expected {need} bytes, found {len(payload)}")
    if len(payload) > need:
        raise ContainerError(f"{len(payload) - need} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(shape)
    return arr.astype(np.float64)


def write_tensor(path, t: np.ndarray, dtype: int = 1) -> None:
    _atomic_write(Path(path), encode_tensor(t, dtype))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up; out-of-range values are clamped."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(img: np.ndarray, comment: str | None = None) -> bytes:
    h, w = img.shape
    head = b"P5\n"
    if comment:
        head += b"# " + comment.encode("ascii") + b"\n"
    head += f"{w} {h}\n255\n".encode("ascii")
    return head + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1
    return np.frombuffer(buf[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def export_attention(bundle: AttentionBundle | dict, out_dir) -> dict:
    """Write per-frame PGMs for ``s_act``, ``s_att`` and ``c`` plus a JSON summary.

    ``s_att`` is multiplied by ``T*H*W`` before clamping, so a uniform map
    exports as all 255.
    """
    maps = bundle.arrays() if isinstance(bundle, AttentionBundle) else bundle
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create export directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"export directory {out} is not writable")
    s_act, s_att, c = (np.asarray(maps[k]) for k in ("s_act", "s_att", "c"))
    T, H, W = s_act.shape
    n = T * H * W
    scaled = {"s_act": (s_act, None), "c": (c, None),
              "s_att": (s_att * n, f"s_att scaled by T*H*W={n} then clamped to [0,1]")}
    files = []
    for name, (vol, comment) in scaled.items():
        for t in range(T):
            path = out / f"{name}_t{t:03d}.pgm"
            _atomic_write(path, encode_pgm(to_bytes(vol[t]), comment))
            files.append(path.name)
    summary = {
        "shape": [T, H, W],
        "s_att_frame_mass": [float(m) for m in s_att.sum(axis=(1, 2))],
        "s_frame_mass": [float(m) for m in np.asarray(maps["s"]).sum(axis=(1, 2))],
        "s_act_frame_mean": [float(m) for m in s_act.mean(axis=(1, 2))],
        "s_act_fraction_above_half": float(np.mean(s_act > 0.5)),
        "files": files,
    }
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2).encode())
    return summary


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


_HYPER_KEYS = {f.name for f in dataclasses.fields(AttentionHyper)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"hyper"}
# "seed" seeds training; the generator takes "data_seed"
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthSpec)} - {"seed"}
_RUN_KEYS = {"data", "out", "test_fraction", "backbone", "data_seed"}


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthSpec = dataclasses.field(default_factory=SynthSpec)
    data: str | None = None
    out: str | None = None
    test_fraction: float = 0.0
    backbone: int | None = None


def parse_run_config(raw: dict) -> RunConfig:
    """Flat key/value mapping -> RunConfig. Unknown keys are rejected."""
    unknown = set(raw) - _HYPER_KEYS - _TRAIN_KEYS - _SYNTH_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def pick(keys):
        out = {}
        for k in keys & set(raw):
            v = raw[k]
            out[k] = tuple(v) if isinstance(v, list) else v
        return out

    try:
        hyper = AttentionHyper(**pick(_HYPER_KEYS))
        train = TrainConfig(hyper=hyper, **pick(_TRAIN_KEYS))
        synth = SynthSpec(seed=int(raw.get("data_seed", 0)), **pick(_SYNTH_KEYS))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train=train, synth=synth, **pick(_RUN_KEYS - {"data_seed"}))


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return parse_run_config(raw)


def config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.update(d.pop("hyper"))
    return d


# ---------------------------------------------------------------------------
# datasets and checkpoints
# ---------------------------------------------------------------------------

def save_dataset(groups: list[ConjugateGroup], out_dir, dtype: int = 1) -> Path:
    """One container per map and an ``index.json`` listing group membership."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, g in enumerate(groups):
        entry = {"label": int(g.label), "action": f"g{i:04d}_action.actx", "conjugates": [], "mask": None}
        write_tensor(out / entry["action"], g.action, dtype)
        for j, c in enumerate(g.conjugates):
            name = f"g{i:04d}_conj{j}.actx"
            write_tensor(out / name, c, dtype)
            entry["conjugates"].append(name)
        if g.truth_mask is not None:
            entry["mask"] = f"g{i:04d}_mask.actx"
            write_tensor(out / entry["mask"], g.truth_mask, dtype)
        entries.append(entry)
    index = {"format": "actx-dataset", "version": 1, "groups": entries}
    _atomic_write(out / "index.json", json.dumps(index, indent=1).encode())
    return out / "index.json"


def load_dataset(data_dir) -> list[ConjugateGroup]:
    root = Path(data_dir)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.json in {root}")
    index = json.loads(index_path.read_text())
    groups = []
    for e in index["groups"]:
        mask = read_tensor(root / e["mask"]) if e.get("mask") else None
        groups.append(ConjugateGroup(
            label=int(e["label"]),
            action=read_tensor(root / e["action"]),
            conjugates=[read_tensor(root / c) for c in e["conjugates"]],
            truth_mask=mask,
        ))
    return groups


def save_checkpoint(params: ModelParams, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in params.arrays().items():
        fname = f"param_{name}.actx"
        write_tensor(out / fname, arr)
        tensors[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": "actx-checkpoint", "version": 1, "tensors": tensors, "config": config_dict(config)}
    path = out / "checkpoint.json"
    _atomic_write(path, json.dumps(manifest, indent=2).encode())
    return path


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    arrays = {}
    for name, meta in manifest["tensors"].items():
        arr = read_tensor(path.parent / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise ContainerError(f"{name}: shape {arr.shape} disagrees with manifest {meta['shape']}")
        arrays[name] = arr
    cfg = parse_run_config(manifest["config"]).train
    return ModelParams.from_arrays(arrays), cfg


_HISTORY_COLS = ["step", "loss", "class", "sim", "diff"]


def write_history(history: list[dict], path) -> None:
    """CSV, one optimization step per line."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_HISTORY_COLS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for h in history:
        writer.writerow({c: (int(h[c]) if c == "step" else repr(float(h[c]))) for c in _HISTORY_COLS})
    _atomic_write(Path(path), buf.getvalue().encode())


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{c: (int(v) if c == "step" else float(v)) for c, v in row.items()} for row in csv.DictReader(fh)]

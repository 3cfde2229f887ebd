"""On-disk formats: dataset directories, parameter checkpoints, key=value configs.

All binary payloads are little-endian and start with an 8-byte ASCII magic.
"""
from __future__ import annotations

import dataclasses
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .synth import Dataset, Split, SynthConfig, answer_vocabulary

DATA_MAGIC = b"VPLDS001"
CKPT_MAGIC = b"VPLCK001"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ configs

def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, kind, key: str):
    if kind is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise FormatError(f"{key}: not a boolean: {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise FormatError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def load_dataclass_config(cls, path_or_text, env_seed: bool = True):
    """Build dataclass ``cls`` from a key=value file. Unknown keys are errors.

    A string holding ``=`` or a newline (or an empty string) is parsed as
    config text; anything else names a file, which must exist.
    """
    if isinstance(path_or_text, str) and (not path_or_text or "=" in path_or_text or "\n" in path_or_text):
        text, source = path_or_text, "<config>"
    else:
        text, source = Path(path_or_text).read_text(), str(path_or_text)
    raw = parse_kv(text, source)
    types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise FormatError(f"{source}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, types[k], k) for k, v in raw.items()}
    if env_seed and "seed" in types and os.environ.get("VPL_SEED"):
        kwargs["seed"] = _coerce(os.environ["VPL_SEED"], int, "VPL_SEED")
    return cls(**kwargs)


def dump_kv(obj) -> str:
    return "".join(f"{f.name}={getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))


# ------------------------------------------------------------------ dataset

def _write_bin(path: Path, arr: np.ndarray, dtype: str):
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_bin(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"{path}: missing file")
    blob = path.read_bytes()
    if blob[:8] != DATA_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r} at byte offset 0")
    expected = 8 + 4 * count
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length mismatch at byte offset {min(len(blob), expected)}: "
                          f"expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=dtype, offset=8, count=count)


def write_dataset(ds: Dataset, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ds.config
    meta = {"format_version": FORMAT_VERSION, **dataclasses.asdict(cfg),
            "num_answers": len(ds.answers), "answers": ",".join(ds.answers)}
    (out / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    for name in ("train", "test"):
        s = ds.split(name)
        _write_bin(out / f"{name}.features.f32", s.features, "<f4")
        _write_bin(out / f"{name}.questions.u32",
                   np.concatenate([s.question_types[:, None], s.tokens], axis=1), "<u4")
        _write_bin(out / f"{name}.scores.f32", s.scores, "<f4")
        _write_bin(out / f"{name}.aux.u32",
                   np.concatenate([s.region_classes, s.salient[:, None]], axis=1), "<u4")
    return out


def read_dataset(path) -> Dataset:
    src = Path(path)
    meta_path = src / "meta.txt"
    if not meta_path.exists():
        raise FormatError(f"{meta_path}: missing file")
    meta = parse_kv(meta_path.read_text(), str(meta_path))
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise FormatError(f"{meta_path}: unsupported format_version {meta.get('format_version')!r}")
    types = SynthConfig.field_types()
    try:
        cfg = SynthConfig(**{k: _coerce(meta[k], types[k], k) for k in types})
    except KeyError as e:
        raise FormatError(f"{meta_path}: missing key {e.args[0]!r}") from None
    answers = meta.get("answers", "").split(",")
    if len(answers) != cfg.num_answers or int(meta.get("num_answers", -1)) != cfg.num_answers:
        raise FormatError(f"{meta_path}: answer vocabulary size does not match header dims")
    N, dv, L, K = cfg.regions_per_image, cfg.feature_dim, cfg.question_len, cfg.num_answers
    splits = {}
    for name, n in (("train", cfg.train_size), ("test", cfg.test_size)):
        feats = _read_bin(src / f"{name}.features.f32", "<f4", n * N * dv).reshape(n, N, dv)
        qs = _read_bin(src / f"{name}.questions.u32", "<u4", n * (L + 1)).reshape(n, L + 1)
        scores = _read_bin(src / f"{name}.scores.f32", "<f4", n * K).reshape(n, K)
        aux = _read_bin(src / f"{name}.aux.u32", "<u4", n * (N + 1)).reshape(n, N + 1)
        splits[name] = Split(feats.astype(np.float32), qs[:, 0].astype(np.int64), qs[:, 1:].astype(np.int64),
                             scores.astype(np.float32), aux[:, :N].astype(np.int64),
                             aux[:, N].astype(np.int64), cfg.annotators)
    if answers != answer_vocabulary(cfg):
        raise FormatError(f"{meta_path}: answer vocabulary does not match the generator layout")
    return Dataset(cfg, answers, splits["train"], splits["test"])


# --------------------------------------------------------------- checkpoint

def write_checkpoint(params: Mapping[str, np.ndarray], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            enc = name.encode("ascii")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r} at byte offset 0")
    off = 8

    def unpack(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError(f"{path}: truncated at byte offset {off}: need {size} more bytes, "
                              f"{len(blob) - off} remain")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = unpack("<I")
        name = bytes(unpack(f"<{nlen}s")[0]).decode("ascii")
        (rank,) = unpack("<I")
        shape = unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        start = off
        unpack(f"<{8 * n}x")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at byte offset {off}")
    return params

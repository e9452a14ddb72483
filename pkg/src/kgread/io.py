"""Checkpoint container, key/value config files, metrics and loss-curve files."""

from __future__ import annotations

import json
import struct
from dataclasses import MISSING, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"KGREADCKPT\x01\n"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u64 little-endian manifest length | manifest JSON | raw arrays
# manifest: {"config": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
# offsets count from the first byte after the manifest.


def save_checkpoint(path: str | Path, params: ModelParams, cfg: ModelConfig | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"config": cfg.to_dict() if cfg is not None else None, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig | None]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    start = len(MAGIC)
    (length,) = struct.unpack("<Q", raw[start:start + 8])
    manifest = json.loads(raw[start + 8:start + 8 + length])
    base = start + 8 + length
    arrays = {}
    for entry in manifest["tensors"]:
        lo = base + entry["offset"]
        buf = raw[lo:lo + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    cfg = ModelConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    params = ModelParams(arrays)
    if cfg is not None:
        params.check(cfg)
    return params, cfg


# ---------------------------------------------------------------------------
# key/value configuration


@dataclass
class RunConfig:
    """Everything one CLI run needs; each field's default is the documented default."""

    data: str = ""  # dataset directory with train.txt / valid.txt / test.txt
    out: str = "runs"  # output directory
    strategy: str = "bfs"  # bfs | onehop | paths | beam | none
    budget: int = 30  # edge budget per context
    seed: int = 0
    traverse_inverse: bool = True
    beam_width: int = 8
    max_hops: int = 2
    paths: str = ""  # precomputed path file for strategy "paths"
    scorer: str = "relpath"  # beam-search heuristic: relpath | transe
    scorer_dim: int = 32  # translational embeddings behind the beam-search scorer
    scorer_epochs: int = 100
    layers: int = 3
    heads: int = 8
    dim: int = 320
    ffn_dim: int = 1280
    dropout: float = 0.0
    init_std: float = 0.02
    no_cross_attention: bool = False
    full_attention: bool = False
    no_subgraph_repr: bool = False
    no_query_repr: bool = False
    lr: float = 2e-3  # peak learning rate; a choice, tune on valid
    epochs: int = 20  # total steps = epochs * number of batches
    batch_size: int = 512
    split: str = "test"

    MODEL_KEYS = ("layers", "heads", "dim", "ffn_dim", "dropout", "init_std",
                  "no_cross_attention", "full_attention", "no_subgraph_repr", "no_query_repr")

    def model_config(self, num_entities: int, num_relations: int) -> ModelConfig:
        return ModelConfig(num_entities, num_relations, **{k: getattr(self, k) for k in self.MODEL_KEYS})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        merged = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in values.items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        return RunConfig(**merged)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, text: str) -> Any:
    types = {f.name: f.type for f in fields(RunConfig)}
    kind = types[key]
    try:
        if kind in ("bool", bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = {f.name for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_run_config(path: str | Path) -> RunConfig:
    return RunConfig().updated(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))


def run_defaults() -> dict[str, Any]:
    return {f.name: f.default for f in fields(RunConfig) if f.default is not MISSING}


# ---------------------------------------------------------------------------
# metrics / loss curve


def write_json(path: str | Path, record: Any) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_loss_csv(path: str | Path) -> list[tuple[int, float, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "step,lr,loss":
        raise ValueError(f"{path}: missing 'step,lr,loss' header")
    out = []
    for line in lines[1:]:
        step, lr, loss = line.split(",")
        out.append((int(step), float(lr), float(loss)))
    return out

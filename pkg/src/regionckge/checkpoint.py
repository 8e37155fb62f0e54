"""Directory checkpoints of a :class:`ModelState`.

Layout::

    meta               key=value lines (format version, counts, step, config)
    entities.base      raw little-endian floats, row-major, row = entity id
    entities.offset
    relations.base     row = region id
    relations.extent
    entities.neighbors one line per entity: space-separated association set
    optimizer.<param>.m / .v   Adam moments (same encoding as the parameters)
    reservoir          old facts used by the balance loss, tab-separated
    entities.dict / relations.dict   vocabulary, when one is supplied
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import Vocab
from .training import Adam, ModelState, TrainConfig

FORMAT_VERSION = "regionckge-checkpoint/1"

_PARAM_FILES = {
    "ent_base": "entities.base",
    "ent_offset": "entities.offset",
    "rel_base": "relations.base",
    "rel_extent": "relations.extent",
}


class CheckpointError(ValueError):
    pass


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (frozenset, set)):
        return ",".join(sorted(value))
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def config_to_items(config: TrainConfig) -> dict[str, str]:
    return {name: format_value(getattr(config, name)) for name in TrainConfig.field_names()}


def config_from_items(items: dict[str, str]) -> TrainConfig:
    """Inverse of :func:`config_to_items`; unknown keys are ignored."""
    defaults = TrainConfig()
    kwargs = {}
    for name in TrainConfig.field_names():
        if name not in items:
            continue
        text = items[name]
        default = getattr(defaults, name)
        if isinstance(default, bool):
            kwargs[name] = parse_bool(text)
        elif isinstance(default, int):
            kwargs[name] = int(text)
        elif isinstance(default, float):
            kwargs[name] = float(text)
        elif isinstance(default, frozenset):
            kwargs[name] = frozenset(x for x in text.split(",") if x)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(float(x) for x in text.split(","))
        else:
            kwargs[name] = text
    return TrainConfig(**kwargs)


def write_kv(path: Path, items: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in items.items():
            f.write(f"{key}={value}\n")


def read_kv(path: Path) -> dict[str, str]:
    items = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CheckpointError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            items[key.strip()] = value.strip()
    return items


def _write_array(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tofile(path)


def _read_array(path: Path, rows: int, dim: int, dtype: np.dtype) -> np.ndarray:
    data = np.fromfile(path, dtype=dtype.newbyteorder("<"))
    if data.size != rows * dim:
        raise CheckpointError(f"{path}: expected {rows}x{dim} values, found {data.size}")
    return data.reshape(rows, dim).astype(dtype)


def save_checkpoint(model: ModelState, directory, vocab: Vocab | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = model.dtype
    meta = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype.name,
        "dim": str(model.dim),
        "n_entities": str(model.n_entities),
        "n_relations": str(model.n_relations),
        "n_regions": str(model.rel_base.shape[0]),
        "snapshot": str(model.snapshot),
        "epoch": str(model.epoch),
        "step": str(model.optimizer.t),
        "n_old_entities": str(model.n_old_entities),
        "best_valid": repr(float(model.best_valid)),
        "bad_evals": str(model.bad_evals),
        "stopped": format_value(model.stopped),
        "rng_state": json.dumps(model.rng.bit_generator.state, sort_keys=True),
        "optimizer_moments": ",".join(sorted(model.optimizer.m)),
    }
    meta.update({f"config.{k}": v for k, v in config_to_items(model.config).items()})
    write_kv(directory / "meta", meta)
    for name, fname in _PARAM_FILES.items():
        _write_array(directory / fname, getattr(model, name), dtype)
    for name in sorted(model.optimizer.m):
        _write_array(directory / f"optimizer.{name}.m", model.optimizer.m[name], dtype)
        _write_array(directory / f"optimizer.{name}.v", model.optimizer.v[name], dtype)
    with open(directory / "entities.neighbors", "w", encoding="utf-8", newline="\n") as f:
        for nb in model.neighbors:
            f.write(" ".join(str(j) for j in sorted(nb)) + "\n")
    np.savetxt(directory / "reservoir", model.reservoir.reshape(-1, 3), fmt="%d", delimiter="\t")
    if vocab is not None:
        vocab.write(directory)
    return directory


def load_checkpoint(directory, expect_version: str = FORMAT_VERSION) -> tuple[ModelState, Vocab | None]:
    directory = Path(directory)
    if not (directory / "meta").is_file():
        raise CheckpointError(f"no checkpoint at {directory} (missing meta)")
    meta = read_kv(directory / "meta")
    version = meta.get("format_version")
    if version != expect_version:
        raise CheckpointError(
            f"{directory}: checkpoint format {version!r} does not match expected {expect_version!r}")
    config = config_from_items({k[len("config."):]: v for k, v in meta.items()
                                if k.startswith("config.")})
    dtype = np.dtype(meta["dtype"])
    if dtype != np.dtype(config.dtype):
        raise CheckpointError(f"{directory}: meta dtype {dtype} disagrees with config {config.dtype}")
    model = ModelState(config)
    dim = int(meta["dim"])
    n_ent = int(meta["n_entities"])
    n_reg = int(meta["n_regions"])
    model.ent_base = _read_array(directory / "entities.base", n_ent, dim, dtype)
    model.ent_offset = _read_array(directory / "entities.offset", n_ent, dim, dtype)
    model.rel_base = _read_array(directory / "relations.base", n_reg, dim, dtype)
    model.rel_extent = _read_array(directory / "relations.extent", n_reg, dim, dtype)
    with open(directory / "entities.neighbors", encoding="utf-8") as f:
        lines = f.read().split("\n")[:n_ent]
    if len(lines) != n_ent:
        raise CheckpointError(f"{directory}: neighbour file has {len(lines)} rows, expected {n_ent}")
    model.neighbors = [set(int(x) for x in line.split()) for line in lines]
    model.snapshot = int(meta["snapshot"])
    model.epoch = int(meta["epoch"])
    model.n_old_entities = int(meta["n_old_entities"])
    model.best_valid = float(meta["best_valid"])
    model.bad_evals = int(meta["bad_evals"])
    model.stopped = parse_bool(meta["stopped"])
    model.rng = np.random.default_rng()
    model.rng.bit_generator.state = json.loads(meta["rng_state"])
    opt = Adam(config.lr, max_grad_norm=config.max_grad_norm)
    opt.t = int(meta["step"])
    for name in filter(None, meta.get("optimizer_moments", "").split(",")):
        shape = getattr(model, name).shape
        opt.m[name] = _read_array(directory / f"optimizer.{name}.m", shape[0], shape[1], dtype)
        opt.v[name] = _read_array(directory / f"optimizer.{name}.v", shape[0], shape[1], dtype)
    model.optimizer = opt
    res_path = directory / "reservoir"
    if res_path.stat().st_size:
        model.reservoir = np.loadtxt(res_path, dtype=np.int64, ndmin=2).reshape(-1, 3)
    vocab = None
    if (directory / "entities.dict").is_file():
        vocab = Vocab.read(directory)
    return model, vocab


__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "config_to_items", "config_from_items", "read_kv", "write_kv", "format_value",
           "parse_bool"]

"""Checkpoint files: a zip of ``.npy`` arrays plus a JSON header.

Entries are written in a fixed order with a fixed timestamp, so identical
parameters always give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unitrec.model import ModelConfig, UniTRec, param_shapes
from unitrec.tensor import Tensor

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    rng_seed: int = 0
    step: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: UniTRec, **kw) -> "Checkpoint":
        return cls(config=model.cfg, params=model.state_arrays(), rng_seed=model.seed, **kw)

    def to_model(self) -> UniTRec:
        params = {
            name: Tensor(self.params[name].copy(), requires_grad=True, name=name)
            for name in param_shapes(self.config)
        }
        return UniTRec(self.config, params=params, seed=self.rng_seed)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr, dtype=np.float64, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "rng_seed": ckpt.rng_seed,
        "step": ckpt.step,
        "has_optimizer": ckpt.adam_m is not None,
        "meta": ckpt.meta,
    }
    groups = [("params", ckpt.params)]
    if ckpt.adam_m is not None:
        groups += [("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)]
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", date_time=_EPOCH), json.dumps(header, sort_keys=True))
        for group, arrays in groups:
            for name in param_shapes(ckpt.config):
                info = zipfile.ZipInfo(f"{group}/{name}.npy", date_time=_EPOCH)
                zf.writestr(info, _npy_bytes(arrays[name]))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint, validating version and every parameter shape."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a checkpoint file ({exc})") from None
    with zf:
        names = set(zf.namelist())
        if "header.json" not in names:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(zf.read("header.json"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version {version!r}")
        try:
            cfg = ModelConfig(**header["config"])
        except TypeError as exc:
            raise CheckpointError(f"{path}: bad model config ({exc})") from None
        shapes = param_shapes(cfg)

        def read_group(group):
            out = {}
            for name, shape in shapes.items():
                entry = f"{group}/{name}.npy"
                if entry not in names:
                    raise CheckpointError(f"{path}: parameter {name!r} missing from {group}")
                arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
                if arr.shape != tuple(shape):
                    raise CheckpointError(
                        f"{path}: parameter {name!r} has shape {arr.shape}, config expects {tuple(shape)}"
                    )
                out[name] = arr
            return out

        params = read_group("params")
        adam_m = adam_v = None
        if header.get("has_optimizer"):
            adam_m, adam_v = read_group("adam_m"), read_group("adam_v")
    return Checkpoint(
        config=cfg,
        params=params,
        rng_seed=int(header.get("rng_seed", 0)),
        step=int(header.get("step", 0)),
        adam_m=adam_m,
        adam_v=adam_v,
        meta=header.get("meta", {}),
    )

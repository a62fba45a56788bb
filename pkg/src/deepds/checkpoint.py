"""Checkpoint directories.

Layout::

    <dir>/spec.txt     ArchitectureSpec as ``key = value`` lines
    <dir>/params.bin   raw little-endian tensor bytes, concatenated
    <dir>/index.json   name -> dtype, shape, offset, nbytes; plus trainer metadata
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import ArchitectureSpec, DownscalingModel, build_model

SPEC_FILE = "spec.txt"
PARAMS_FILE = "params.bin"
INDEX_FILE = "index.json"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _optimizer_tensors(name: str, optimizer: torch.optim.Optimizer, model: torch.nn.Module) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, value in optimizer.state.get(p, {}).items():
                t = value if torch.is_tensor(value) else torch.tensor(value)
                out[f"{name}.{names[id(p)]}.{key}"] = t
    return out


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: torch.nn.Module, tensors: dict[str, torch.Tensor]
) -> None:
    for pname, p in model.named_parameters():
        state = {k.split(".")[-1]: v.clone() for k, v in tensors.items() if k.rsplit(".", 1)[0] == pname}
        if state:
            optimizer.state[p] = state


def save_checkpoint(
    model: DownscalingModel,
    path,
    *,
    discriminator: torch.nn.Module | None = None,
    optimizers: dict | None = None,
    meta: dict | None = None,
) -> Path:
    """Write ``model`` (and optionally a discriminator and optimizer states) to ``path``.

    ``optimizers`` maps a name to ``(optimizer, module)``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if discriminator is not None:
        tensors.update({f"discriminator.{k}": v for k, v in discriminator.state_dict().items()})
    for name, (opt, module) in (optimizers or {}).items():
        tensors.update(_optimizer_tensors(f"optim_{name}", opt, module))

    index, offset = {}, 0
    tmp = path / (PARAMS_FILE + ".tmp")
    with open(tmp, "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    tmp.replace(path / PARAMS_FILE)
    (path / SPEC_FILE).write_text(model.spec.to_text())
    doc = {"format": 1, "total_bytes": offset, "tensors": index, "meta": meta or {}}
    (path / INDEX_FILE).write_text(json.dumps(doc, indent=1))
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        spec = ArchitectureSpec.from_text((path / SPEC_FILE).read_text())
        doc = json.loads((path / INDEX_FILE).read_text())
        blob = (path / PARAMS_FILE).read_bytes()
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"checkpoint corrupt: {exc}") from exc
    if len(blob) != doc.get("total_bytes"):
        raise CheckpointError(
            f"checkpoint corrupt: {PARAMS_FILE} has {len(blob)} bytes, index expects {doc.get('total_bytes')}"
        )
    tensors = {}
    for name, entry in doc["tensors"].items():
        start, n = entry["offset"], entry["nbytes"]
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if start < 0 or start + n > len(blob) or count * dtype.itemsize != n:
            raise CheckpointError(f"checkpoint corrupt: bad index entry for {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
        tensors[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    return Checkpoint(spec=spec, tensors=tensors, meta=doc.get("meta", {}))


def _load_module(module: torch.nn.Module, state: dict) -> torch.nn.Module:
    dtypes = {v.dtype for k, v in state.items() if v.is_floating_point()}
    if len(dtypes) == 1:
        module.to(dtypes.pop())
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"spec mismatch: {exc}") from exc
    return module


def load_checkpoint(path, expected_spec: ArchitectureSpec | None = None) -> DownscalingModel:
    ckpt = read_checkpoint(path)
    if expected_spec is not None and expected_spec != ckpt.spec:
        raise CheckpointError("spec mismatch between checkpoint and requested architecture")
    return _load_module(build_model(ckpt.spec), ckpt.group("model"))


def load_discriminator(path):
    from .networks import build_discriminator

    ckpt = read_checkpoint(path)
    state = ckpt.group("discriminator")
    if not state:
        raise CheckpointError("checkpoint has no discriminator")
    return _load_module(build_discriminator(ckpt.spec), state)

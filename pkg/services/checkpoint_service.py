"""Plain-text checkpoints: every parameter tensor as hexadecimal floats."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from engine import RngStream
from exceptions import DataError
from models.network_models import MlpSpec
from services.mlp_service import MlpClassifier

logger = logging.getLogger(__name__)

MAGIC = "CTXDROP-CKPT"
VERSION = 1


def save_checkpoint(model: MlpClassifier, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {VERSION}", f"spec {model.spec.model_dump_json()}"]
    for name, tensor in model.all_parameters().items():
        dims = " ".join(str(d) for d in tensor.shape)
        lines.append(f"param {name} {tensor.ndim} {dims}".rstrip())
        lines.append(" ".join(float(v).hex() for v in tensor.data.reshape(-1)))
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Path) -> MlpClassifier:
    """Rebuild the model from its stored spec and restore every tensor bit-exactly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split()[:1] != [MAGIC]:
        raise DataError(f"{path}: not a checkpoint (missing {MAGIC} header)")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(lines) < 2 or not lines[1].startswith("spec "):
        raise DataError(f"{path}: missing spec line")
    spec = MlpSpec.model_validate_json(lines[1][len("spec "):])
    model = MlpClassifier(spec, RngStream(0))
    params = model.all_parameters()

    seen = set()
    index = 2
    while index < len(lines) and lines[index] != "end":
        header = lines[index].split()
        if len(header) < 3 or header[0] != "param":
            raise DataError(f"{path}: malformed tensor header on line {index + 1}")
        name, ndim = header[1], int(header[2])
        shape = tuple(int(d) for d in header[3:3 + ndim])
        if name not in params:
            raise DataError(f"{path}: unknown parameter {name}")
        if params[name].shape != shape:
            raise DataError(f"{path}: {name} has shape {shape}, model expects {params[name].shape}")
        if index + 1 >= len(lines):
            raise DataError(f"{path}: values missing for {name}")
        values = [float.fromhex(v) for v in lines[index + 1].split()]
        if len(values) != int(np.prod(shape)):
            raise DataError(f"{path}: {name} holds {len(values)} values for shape {shape}")
        params[name].data[...] = np.array(values, dtype=np.float64).reshape(shape)
        seen.add(name)
        index += 2
    missing = set(params) - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    return model

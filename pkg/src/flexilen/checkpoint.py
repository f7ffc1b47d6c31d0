"""Versioned checkpoint files: JSON manifest plus little-endian float64 payload.

A checkpoint is a pair ``<prefix>.json`` / ``<prefix>.bin``. The manifest
records the format version, a run-config snapshot, the model layout, a named
parameter manifest (name, shape, element offset), an optional optimizer
section, and the training-epoch marker. Offsets tile the payload exactly and
round-trips are bit-identical; writes are atomic (write-then-rename).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backbone import FlnParams
from .config import BackboneConfig
from .training import AdamState

CHECKPOINT_FORMAT_VERSION = 1


def _manifest_entries(arrays: dict[str, np.ndarray], offset: int):
    entries = []
    for name in arrays:
        arr = arrays[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    return entries, offset


def save_checkpoint(
    prefix: str | Path,
    params: FlnParams,
    run_config: dict | None = None,
    epoch: int = 0,
    optimizer: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    param_arrays = {name: tensor.data for name, tensor in params.tensors.items()}
    param_entries, offset = _manifest_entries(param_arrays, 0)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "run_config": run_config or {},
        "model": {
            "backbone": {
                "d_model": params.cfg.d_model,
                "heads": params.cfg.heads,
                "layers": params.cfg.layers,
                "dec_hidden": params.cfg.dec_hidden,
                "modes": params.cfg.modes,
                "horizon": params.cfg.horizon,
                "pe_kind": params.cfg.pe_kind,
                "activation": params.cfg.activation,
                "decoder_sln": params.cfg.decoder_sln,
            },
            "lengths": params.lengths,
            "weight_sharing": params.weight_sharing,
            "independent_pe": params.independent_pe,
            "specialized_ln": params.specialized_ln,
        },
        "parameters": param_entries,
    }
    if extra:
        manifest["extra"] = extra
    blobs = [param_arrays[name].astype("<f8").tobytes() for name in param_arrays]
    if optimizer is not None:
        opt_arrays: dict[str, np.ndarray] = {}
        for slot in ("m", "v"):
            for name, arr in getattr(optimizer, slot).items():
                opt_arrays[f"{slot}.{name}"] = arr
        opt_entries, offset = _manifest_entries(opt_arrays, offset)
        manifest["optimizer"] = {"step": optimizer.step, "slots": opt_entries}
        blobs += [opt_arrays[name].astype("<f8").tobytes() for name in opt_arrays]

    tmp_json = Path(str(prefix) + ".json.tmp")
    tmp_bin = Path(str(prefix) + ".bin.tmp")
    tmp_json.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    tmp_bin.write_bytes(b"".join(blobs))
    tmp_json.replace(Path(str(prefix) + ".json"))
    tmp_bin.replace(Path(str(prefix) + ".bin"))


def load_checkpoint(
    prefix: str | Path,
) -> tuple[FlnParams, dict, AdamState | None]:
    """Rebuild parameters (and optimizer state if present) from disk."""
    prefix = Path(prefix)
    json_path = Path(str(prefix) + ".json")
    bin_path = Path(str(prefix) + ".bin")
    if not json_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"checkpoint {prefix} not found")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    payload = np.frombuffer(bin_path.read_bytes(), dtype="<f8")

    entries = list(manifest["parameters"])
    opt_section = manifest.get("optimizer")
    if opt_section:
        entries = entries + list(opt_section["slots"])
    expected = 0
    for entry in entries:
        if entry["offset"] != expected:
            raise ValueError(f"manifest offsets do not tile the payload at {entry['name']}")
        expected += int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
    if expected != payload.size:
        raise ValueError(
            f"payload size {payload.size} does not match manifest total {expected}"
        )

    model = manifest["model"]
    cfg = BackboneConfig(**model["backbone"])
    params = FlnParams(
        cfg,
        {k: int(v) for k, v in model["lengths"].items()},
        weight_sharing=model["weight_sharing"],
        independent_pe=model["independent_pe"],
        specialized_ln=model["specialized_ln"],
    )
    for entry in manifest["parameters"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        block = payload[entry["offset"] : entry["offset"] + size]
        params.tensors[entry["name"]] = Tensor(
            block.reshape(entry["shape"]).astype(np.float64), requires_grad=True
        )

    optimizer = None
    if opt_section:
        optimizer = AdamState(step=int(opt_section["step"]))
        for entry in opt_section["slots"]:
            size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            block = payload[entry["offset"] : entry["offset"] + size]
            slot, name = entry["name"].split(".", 1)
            getattr(optimizer, slot)[name] = block.reshape(entry["shape"]).astype(np.float64)
    return params, manifest, optimizer

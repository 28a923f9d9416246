"""Model persistence: JSON manifest plus a little-endian float32 weight blob.

The manifest carries the layer list with shape metadata, the embedding
boundary, any builder hyperparameters, and a sha256 checksum of the blob.
Weights are stored in declaration order, depth first through residual blocks.
"""
import json
from pathlib import Path

import numpy as np

from .fileio import f32_blob, sha256_hex, split_f32_blob, write_bytes_atomic, write_text_atomic
from .layers import (Affine, ClsPrepend, ClsSelect, Gelu, LayerNorm,
                     MLPBlock, PatchEmbed, PositionalAdd, ResidualAdd,
                     SelfAttention, Sigmoid, Softmax, Tanh)
from .network import Network

MODEL_FORMAT = "fiberwalk-model/1"


class ModelFormatError(ValueError):
    """Unreadable or corrupted model files."""


def _layer_entry(layer) -> dict:
    entry = {"kind": layer.kind, "meta": layer.meta()}
    if isinstance(layer, ResidualAdd):
        entry["inner"] = [_layer_entry(inner) for inner in layer.inner]
    else:
        entry["arrays"] = [[name, list(arr.shape)] for name, arr in _own_weights(layer)]
    return entry


def _own_weights(layer):
    if isinstance(layer, ResidualAdd):
        raise TypeError("residual blocks serialize through their inner layers")
    return layer.weights()


def _collect_arrays(layer, out: list):
    if isinstance(layer, ResidualAdd):
        for inner in layer.inner:
            _collect_arrays(inner, out)
    else:
        out.extend(arr for _, arr in layer.weights())


def save_model(net: Network, path) -> Path:
    """Write <path>.json and <path>.bin (or honor a .json path directly)."""
    path = Path(path)
    if path.suffix == ".json":
        base = path.with_suffix("")
    else:
        base = path
    arrays: list[np.ndarray] = []
    for layer in net.layers:
        _collect_arrays(layer, arrays)
    blob = f32_blob(arrays)
    manifest = {
        "format": MODEL_FORMAT,
        "dims": list(net.dims),
        "embed_boundary": net.embed_boundary,
        "embed_shape": list(net.embed_shape) if net.embed_shape else None,
        "hyper": net.hyper,
        "layers": [_layer_entry(layer) for layer in net.layers],
        "blob": {
            "file": base.name + ".bin",
            "dtype": "<f4",
            "count": sum(a.size for a in arrays),
            "sha256": sha256_hex(blob),
        },
    }
    write_bytes_atomic(base.with_suffix(".bin"), blob)
    write_text_atomic(base.with_suffix(".json"), json.dumps(manifest, indent=2) + "\n")
    return base.with_suffix(".json")


def model_checksum(path) -> str:
    manifest = json.loads(Path(path).read_text())
    return manifest["blob"]["sha256"]


def _entry_shapes(entry, shapes: list):
    if entry["kind"] == "residual_add":
        for inner in entry["inner"]:
            _entry_shapes(inner, shapes)
    else:
        shapes.extend(tuple(shape) for _, shape in entry["arrays"])


def _build_layer(entry, arrays: list):
    kind = entry["kind"]
    meta = entry.get("meta", {})
    if kind == "residual_add":
        return ResidualAdd([_build_layer(e, arrays) for e in entry["inner"]])
    values = [arrays.pop(0) for _ in entry["arrays"]]
    if kind == "affine":
        return Affine(values[0], values[1])
    if kind in ("sigmoid", "tanh", "gelu", "softmax"):
        cls = {"sigmoid": Sigmoid, "tanh": Tanh, "gelu": Gelu, "softmax": Softmax}[kind]
        return cls(meta["dim"])
    if kind == "layer_norm":
        return LayerNorm(values[0], values[1], width=meta["width"], eps=meta["eps"])
    if kind == "self_attention":
        return SelfAttention(*values, tokens=meta["tokens"])
    if kind == "mlp_block":
        return MLPBlock(*values, tokens=meta["tokens"])
    if kind == "patch_embed":
        return PatchEmbed(values[0], values[1], meta["image_side"], meta["patch_size"])
    if kind == "positional_add":
        return PositionalAdd(values[0])
    if kind == "cls_prepend":
        return ClsPrepend(values[0], tokens=meta["tokens"])
    if kind == "cls_select":
        return ClsSelect(meta["hidden"], tokens=meta["tokens"])
    raise ModelFormatError(f"unknown layer kind {kind!r}")


def load_model(path) -> Network:
    """Rebuild a network from its manifest; the blob checksum must match."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a model manifest ({exc})") from exc
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: unsupported model format")
    blob_info = manifest["blob"]
    blob = (path.parent / blob_info["file"]).read_bytes()
    digest = sha256_hex(blob)
    if digest != blob_info["sha256"]:
        raise ModelFormatError(
            f"{path}: weight blob checksum mismatch "
            f"(manifest {blob_info['sha256'][:12]}.., blob {digest[:12]}..)"
        )
    shapes: list[tuple] = []
    for entry in manifest["layers"]:
        _entry_shapes(entry, shapes)
    arrays = split_f32_blob(blob, shapes)
    layers = [_build_layer(entry, arrays) for entry in manifest["layers"]]
    embed_shape = manifest.get("embed_shape")
    return Network(tuple(layers), embed_boundary=manifest["embed_boundary"],
                   embed_shape=tuple(embed_shape) if embed_shape else None,
                   hyper=manifest.get("hyper", {}))

"""Checkpoint-to-.vglm / batch-to-.vglb conversion with round-trip checks.

A manifest JSON drives the export: it names the checkpoint (a torch
state_dict), maps each layer to an analyzer kind plus the state_dict
keys of its parameters, and points at the validation data.  Every layer
must map to a supported kind; anything else aborts with the offending
layer named.  Verification replays the same manifest as a torch graph
and compares logits against the analyzer engine on the exported pair.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from vfscan import engine as vf_engine
from vfscan import model_io
from vfscan.engine import LayerSpec, Network

SUPPORTED_KINDS = ("conv2d", "relu", "maxpool", "avgpool", "globalavgpool",
                   "linear", "batchnorm", "residual-add", "flatten")

_PARAM_ROLES = {
    "conv2d": ("weight", "bias"),
    "linear": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}


class BridgeError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    checkpoint: str
    out_model: str
    out_batch: str
    input_shape: tuple[int, int, int]
    classes: int
    layers: list[dict]
    data: str | None = None
    normalization: dict = field(default_factory=lambda: {"mean": [0.0], "std": [1.0]})
    base_dir: str = "."

    @classmethod
    def load(cls, path: str) -> "ExportManifest":
        with open(path) as f:
            raw = json.load(f)
        for key in ("checkpoint", "out_model", "out_batch", "input_shape",
                    "classes", "layers"):
            if key not in raw:
                raise BridgeError(f"{path}: manifest is missing {key!r}")
        return cls(
            checkpoint=raw["checkpoint"], out_model=raw["out_model"],
            out_batch=raw["out_batch"], input_shape=tuple(raw["input_shape"]),
            classes=int(raw["classes"]), layers=raw["layers"],
            data=raw.get("data"),
            normalization=raw.get("normalization", {"mean": [0.0], "std": [1.0]}),
            base_dir=os.path.dirname(os.path.abspath(path)),
        )

    def resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)


def _load_state(manifest: ExportManifest) -> dict:
    state = torch.load(manifest.resolve(manifest.checkpoint), map_location="cpu",
                       weights_only=True)
    if not isinstance(state, dict):
        raise BridgeError("checkpoint must hold a state_dict")
    return state


def _param(state: dict, key: str, layer_idx: int) -> np.ndarray:
    if key not in state:
        raise BridgeError(f"layer {layer_idx}: checkpoint has no parameter {key!r}")
    t = state[key]
    if t.dtype != torch.float32:
        raise BridgeError(
            f"layer {layer_idx}: parameter {key!r} is {t.dtype}, need float32 "
            "for a bit-exact export")
    return t.detach().numpy().astype(np.float32, copy=True)


def _layer_name(i: int, spec: dict) -> str:
    return f"layer {i} ({spec.get('kind', '?')})"


def build_network(manifest: ExportManifest, state: dict) -> Network:
    """Assemble the analyzer-side network from the manifest mapping."""
    layers = []
    for i, spec in enumerate(manifest.layers):
        kind = spec.get("kind")
        if kind not in SUPPORTED_KINDS:
            raise BridgeError(f"{_layer_name(i, spec)}: unsupported layer kind")
        l = LayerSpec(kind=kind, inputs=tuple(spec.get("inputs", (i - 1,))),
                      kernel=int(spec.get("kernel", 0)),
                      stride=int(spec.get("stride", 1)),
                      padding=int(spec.get("padding", 0)),
                      groups=int(spec.get("groups", 1)),
                      eps=float(spec.get("eps", 1e-5)))
        params = spec.get("params", {})
        for role, key in params.items():
            if role not in _PARAM_ROLES.get(kind, ()):
                raise BridgeError(
                    f"{_layer_name(i, spec)}: parameter role {role!r} not valid here")
            setattr(l, role, _param(state, key, i))
        missing = [r for r in _PARAM_ROLES.get(kind, ()) if r != "bias"
                   and getattr(l, r) is None]
        if missing:
            raise BridgeError(f"{_layer_name(i, spec)}: missing parameters {missing}")
        layers.append(l)
    return Network(layers, manifest.classes, manifest.input_shape)


def export_model(manifest: ExportManifest) -> str:
    """Write the .vglm; returns the output path."""
    state = _load_state(manifest)
    net = build_network(manifest, state)
    out = manifest.resolve(manifest.out_model)
    model_io.save_model(net, out)
    return out


def _load_batch_source(manifest: ExportManifest):
    if manifest.data is None:
        raise BridgeError("manifest names no validation data")
    blob = torch.load(manifest.resolve(manifest.data), map_location="cpu",
                      weights_only=True)
    images, labels = blob["images"], blob["labels"]
    mean = torch.tensor(manifest.normalization.get("mean", [0.0]),
                        dtype=torch.float32).view(1, -1, 1, 1)
    std = torch.tensor(manifest.normalization.get("std", [1.0]),
                       dtype=torch.float32).view(1, -1, 1, 1)
    images = (images.float() - mean) / std
    if images.shape[1:] != manifest.input_shape:
        raise BridgeError(
            f"validation images {tuple(images.shape[1:])} do not match "
            f"manifest input_shape {manifest.input_shape}")
    if int(labels.max()) >= manifest.classes:
        raise BridgeError(
            f"label {int(labels.max())} exceeds class count {manifest.classes}")
    return images, labels


def export_batch(manifest: ExportManifest) -> str:
    """Write the .vglb; returns the output path."""
    images, labels = _load_batch_source(manifest)
    out = manifest.resolve(manifest.out_batch)
    model_io.save_batch(images.numpy().astype(np.float32),
                        labels.numpy().astype(np.uint16), out)
    return out


def torch_forward(manifest: ExportManifest, state: dict,
                  x: torch.Tensor) -> torch.Tensor:
    """Replay the manifest graph in torch (the source-framework side)."""
    def p(key):
        return state[key]

    acts: list[torch.Tensor] = []
    for i, spec in enumerate(manifest.layers):
        kind = spec.get("kind")
        if kind not in SUPPORTED_KINDS:
            raise BridgeError(f"{_layer_name(i, spec)}: unsupported layer kind")
        inputs = spec.get("inputs", [i - 1])
        ins = [x if s == -1 else acts[s] for s in inputs]
        params = spec.get("params", {})
        if kind == "conv2d":
            out = F.conv2d(ins[0], p(params["weight"]),
                           p(params["bias"]) if "bias" in params else None,
                           stride=spec.get("stride", 1),
                           padding=spec.get("padding", 0),
                           groups=spec.get("groups", 1))
        elif kind == "relu":
            out = F.relu(ins[0])
        elif kind == "maxpool":
            out = F.max_pool2d(ins[0], spec["kernel"], spec.get("stride", 1),
                               spec.get("padding", 0))
        elif kind == "avgpool":
            out = F.avg_pool2d(ins[0], spec["kernel"], spec.get("stride", 1),
                               spec.get("padding", 0))
        elif kind == "globalavgpool":
            out = F.adaptive_avg_pool2d(ins[0], 1)
        elif kind == "linear":
            out = F.linear(ins[0], p(params["weight"]),
                           p(params["bias"]) if "bias" in params else None)
        elif kind == "batchnorm":
            out = F.batch_norm(ins[0], p(params["running_mean"]),
                               p(params["running_var"]), p(params["gamma"]),
                               p(params["beta"]), training=False,
                               eps=spec.get("eps", 1e-5))
        elif kind == "residual-add":
            out = ins[0] + ins[1]
        else:  # flatten
            out = torch.flatten(ins[0], 1)
        acts.append(out)
    return acts[-1]


def verify_roundtrip(manifest: ExportManifest) -> float:
    """Max |logit| gap between the torch replay and the analyzer engine,
    both evaluated on the exported model/batch pair."""
    state = _load_state(manifest)
    images, _ = _load_batch_source(manifest)
    with torch.no_grad():
        source_logits = torch_forward(manifest, state, images).numpy()

    net = model_io.load_model(manifest.resolve(manifest.out_model))
    batch, _ = model_io.load_batch(manifest.resolve(manifest.out_batch),
                                   n_classes=net.n_classes)
    engine_logits = vf_engine.forward(net, batch)
    if engine_logits.shape != source_logits.shape:
        raise BridgeError(
            f"logit shapes diverge: {engine_logits.shape} vs {source_logits.shape}")
    return float(np.max(np.abs(engine_logits - source_logits)))

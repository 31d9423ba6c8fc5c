"""Full biplanar network: 2D encoders, dimension bridge and dual-stream 3D decoder."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bridge, decoder, encoder
from .decoder import DecoderConfig, N_STAGES, FIRST_BRIDGED_STAGE
from .diff import ops
from .diff.array import DiffArray, no_grad, scope
from .drr import ProjectionSet
from .encoder import ModelConfig
from .params import ParamSpec, count, materialize
from .volume import LabelVolume

GROUPS = ("coronal", "sagittal")
VIEW_KEY = {"coronal": "cor", "sagittal": "sag"}


def decoder_config(cfg: ModelConfig) -> DecoderConfig:
    return DecoderConfig(base_channels=cfg.decoder_channels, xattn_heads=cfg.heads[-1],
                         num_classes=cfg.num_classes, in_channels=cfg.n_views,
                         conv_skip=cfg.conv_skip, transformer_skip=cfg.transformer_skip,
                         cross_attention=cfg.cross_attention,
                         bridge_widths=tuple(cfg.embed_dim * 2 ** k for k in range(4)))


def encoder_prefix(cfg: ModelConfig, group: str) -> str:
    if cfg.tie_encoders or group == "coronal":
        return "encoder"
    return "encoder_sag"


def model_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    dc = decoder_config(cfg)
    specs: dict[str, ParamSpec] = {}
    if cfg.transformer_skip:
        specs.update(encoder.encoder_specs(cfg, "encoder"))
        if not cfg.tie_encoders:
            specs.update(encoder.encoder_specs(cfg, "encoder_sag"))
        specs.update(bridge.bridge_specs(list(dc.bridge_widths)))
    specs.update(decoder.decoder_specs(dc))
    return specs


def count_params(cfg: ModelConfig) -> int:
    """Number of scalar weights, computed from shapes without allocating them."""
    return count(model_specs(cfg))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, DiffArray]:
    return materialize(model_specs(cfg), seed)


@dataclass
class PredictionPair:
    p: DiffArray  # coronal stream, (H, W, D, K+1)
    q: DiffArray  # sagittal stream

    def fused(self) -> np.ndarray:
        return 0.5 * (self.p.value + self.q.value)


@dataclass
class ForwardResult:
    pair: PredictionPair
    features: dict[str, DiffArray] = field(default_factory=dict)


def _inputs(proj) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(proj, ProjectionSet):
        return proj.stack("coronal"), proj.stack("sagittal")
    cor, sag = proj
    cor, sag = np.asarray(cor), np.asarray(sag)
    if cor.ndim == 2:
        cor, sag = cor[:, :, None], sag[:, :, None]
    return cor, sag


def forward(proj, params: dict, cfg: ModelConfig, keep_features: bool = False) -> ForwardResult:
    """Run both streams. ``proj`` is a ProjectionSet or a (coronal, sagittal) image pair.

    Coronal images are (H, D, N) and sagittal images are (W, D, N) for a
    volume of ``cfg.volume_dims`` = (H, W, D).
    """
    H, W, D = cfg.volume_dims
    cor, sag = _inputs(proj)
    if cor.shape[:2] != (H, D) or sag.shape[:2] != (W, D):
        raise ValueError(f"projection sizes {cor.shape[:2]}, {sag.shape[:2]} do not match "
                         f"volume dims {cfg.volume_dims}")
    if cor.shape[2] != cfg.n_views or sag.shape[2] != cfg.n_views:
        raise ValueError(f"expected {cfg.n_views} views per group")
    dc = decoder_config(cfg)
    dtype = params[next(iter(params))].dtype
    feats: dict[str, DiffArray] = {}
    stage_feats = {}
    for group, img in zip(GROUPS, (cor, sag)):
        view = VIEW_KEY[group]
        axis = bridge.MISSING_AXIS[view]
        stem = ops.broadcast_along_axis(ops.constant(img.astype(dtype)), axis, (H, W)[1 - axis])
        bridged = {}
        if cfg.transformer_skip:
            pyramid = encoder.encode(img, params, cfg, encoder_prefix(cfg, group))
            for k, level in enumerate(pyramid):
                i = k + FIRST_BRIDGED_STAGE
                bridged[i] = bridge.bridge_level(level, view, k, decoder.stage_dims(cfg.volume_dims, i),
                                                 params)
                if keep_features:
                    feats[f"encoder.{view}.level{k}"] = level
                    feats[f"bridge.{view}.level{k}"] = bridged[i]
        with scope(f"decoder3d.{view}"):
            stage_feats[group] = decoder.contract(stem, bridged, params, dc)
    if cfg.cross_attention:
        a, b = decoder.cross_attend(stage_feats["coronal"][-1], stage_feats["sagittal"][-1],
                                    params, dc.xattn_heads)
        stage_feats["coronal"][-1], stage_feats["sagittal"][-1] = a, b
    probs = {}
    for group in GROUPS:
        view = VIEW_KEY[group]
        with scope(f"decoder3d.{view}"):
            x = decoder.expand_path(stage_feats[group], params, dc)
            probs[group] = decoder.classify(x, params)
        if keep_features:
            for i, f in enumerate(stage_feats[group]):
                feats[f"decoder3d.{view}.stage{i}"] = f
            feats[f"decoder3d.{view}.final"] = x
    return ForwardResult(PredictionPair(probs["coronal"], probs["sagittal"]), feats)


def infer(proj, params: dict, cfg: ModelConfig, spacing=(1.0, 1.0, 1.0),
          class_names: dict[int, str] | None = None) -> LabelVolume:
    """Average the two streams' probabilities and take the per-voxel argmax."""
    with no_grad():
        pair = forward(proj, params, cfg).pair
    labels = np.argmax(pair.fused(), axis=-1).astype(np.uint16)
    return LabelVolume(labels, tuple(spacing), cfg.num_classes, class_names or {})


def dump_features(features: dict[str, DiffArray], directory) -> list[Path]:
    """Write each feature as a raw little-endian float32 blob with a JSON shape sidecar."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, arr in features.items():
        blob = out / f"{name}.f32"
        blob.write_bytes(np.ascontiguousarray(arr.value, dtype="<f4").tobytes())
        (out / f"{name}.json").write_text(json.dumps({"name": name, "shape": list(arr.shape),
                                                      "dtype": "<f4"}, sort_keys=True) + "\n")
        written.append(blob)
    return written

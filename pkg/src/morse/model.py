"""Full network for every arm of the ablation lattice.

============  ========  ========  =========
arm           use_smoe  dense     use_iar
============  ========  ========  =========
baseline      no        -         no
MoE           yes       yes       no
SMoE          yes       no        no
IAR           no        -         yes
IAR+MoE       yes       yes       yes
MORSE         yes       no        yes
============  ========  ========  =========
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import iar
from .autograd import Module, Parameter, Pointwise, Tensor, ops
from .config import BackboneConfig, ModelConfig
from .iar import PointSet, PositionalEncoder, RenderingHead
from .segnet import ExpertProjector, UNet
from .smoe import SMoE, ExpertMask, GateWeights


@dataclass
class ForwardOutput:
    logits: Tensor  # coarse logits [B, K, H, W]
    features: Tensor  # per-pixel coarse features fed to the rendering head
    gate: GateWeights | None = None


class SegModel(Module):
    def __init__(self, backbone: BackboneConfig, model: ModelConfig, seed: int):
        self.backbone_cfg = backbone
        self.model_cfg = model
        self.backbone = UNet(backbone, seed)
        feat_dim = backbone.base_channels
        if model.use_smoe:
            self.experts = ExpertProjector(self.backbone.block_channels, backbone.expert_dim, model.mlp_hidden, seed)
            self.smoe = SMoE(backbone.expert_count, backbone.expert_dim, model.gate_channels, model.mlp_hidden, seed)
            self.coarse_head = Pointwise(backbone.expert_dim, backbone.num_classes, seed, "coarse_head", gain=1.0)
            feat_dim = backbone.expert_dim
        if model.use_iar:
            self.pe = PositionalEncoder(model.pe_frequencies, model.pe_init_std, seed)
            self.head = RenderingHead(self.pe.out_dim + feat_dim, backbone.num_classes, model.head_hidden, seed)

    @property
    def use_smoe(self) -> bool:
        return self.model_cfg.use_smoe

    @property
    def use_iar(self) -> bool:
        return self.model_cfg.use_iar

    @property
    def dense(self) -> bool:
        return self.model_cfg.dense_moe

    def forward(self, images: Tensor, mask: ExpertMask | None = None) -> ForwardOutput:
        coarse = self.backbone(images)
        if not self.use_smoe:
            return ForwardOutput(coarse.logits, coarse.final_features)
        H, W = images.shape[-2:]
        feats = self.experts(coarse.block_features, (H, W))
        x_out, gate = self.smoe(feats, None if self.dense else mask)
        return ForwardOutput(self.coarse_head(x_out), x_out, gate)

    def render(self, features: Tensor, pts: PointSet) -> Tensor:
        """Rendered ``[K, P]`` logits for one sample's ``[C, H, W]`` features."""
        H, W = features.shape[-2:]
        pe_feats = iar.encode_positions(self.pe, pts.coords, H, W)
        point_feats = ops.point_sample(features, pts.coords)
        return iar.render_points(self.head, pe_feats, point_feats)

    def render_parameters(self) -> list[Parameter]:
        if not self.use_iar:
            return []
        return self.pe.parameters() + self.head.parameters()

    def core_parameters(self) -> list[Parameter]:
        """Everything the supervised loss can reach."""
        params = [p for n, p in self.named_parameters() if not n.startswith(("pe.", "head."))]
        if self.use_smoe:
            params = [p for p in params if p not in self.backbone.classifier.parameters()]
        return params

    def refine(self, out: ForwardOutput, index: int, n_points: int, k_p: int, rho: float, rng) -> tuple[np.ndarray, PointSet]:
        """Stitched ``[K, H, W]`` logits for one sample (inference path)."""
        logits = out.logits.data[index]
        if not self.use_iar or n_points == 0:
            return logits.copy(), PointSet.empty()
        pts = iar.select_points(logits, n_points, k_p, rho, rng)
        point_logits = self.render(Tensor(out.features.data[index]), pts)
        return iar.stitch(logits, pts, point_logits), pts


def build_model(backbone: BackboneConfig, model: ModelConfig, seed: int) -> SegModel:
    return SegModel(backbone, model, seed)

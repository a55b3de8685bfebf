"""
Model assembly.

Collects the frozen teacher, the trainable bottleneck, the prototype
extractor and the decoder under one ordered parameter map and runs the full
forward pass: mask -> encode -> fuse -> bottleneck -> INPs -> decode.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from datamodels import AnyADConfig, ModalityMask
from decoder import decode, init_decoder_params
from encoder import (
    FeatureBundle,
    apply_modality_mask,
    bottleneck,
    encode_frozen,
    init_bottleneck_params,
    init_encoder_params,
)
from inp import InpOutput, fused_query, init_prototype_params, run_inp
from tensorgrad import Tensor
from tensorgrad.layers import Params

logger = logging.getLogger(__name__)


@dataclass
class ForwardOutput:
    bundle: FeatureBundle
    f_bn: Tensor
    inp: InpOutput
    de0: Tensor
    de1: Tensor


class AnyADModel:
    """Named, ordered parameters plus the forward pass over them"""

    def __init__(self, cfg: AnyADConfig, params: Params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: AnyADConfig) -> "AnyADModel":
        """Teacher seeded by encoder.seed; student parts seeded by train.seed."""
        rng = np.random.default_rng(cfg.train.seed)
        dim = cfg.encoder.embed_dim
        params: Params = {}
        params.update(init_encoder_params(cfg.encoder))
        params.update(init_bottleneck_params(cfg.encoder, rng))
        params.update(init_prototype_params(cfg.inp, dim, rng))
        params.update(init_decoder_params(cfg.decoder, dim, rng))
        logger.debug(f"model initialized with {len(params)} tensors, {sum(p.size for p in params.values())} scalars")
        return cls(cfg, params)

    # parameter views

    def teacher_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("teacher.")}

    def trainable(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if not k.startswith("teacher.")]

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    # forward

    def encode(self, x: Union[Tensor, np.ndarray], mask: ModalityMask) -> FeatureBundle:
        x = x if isinstance(x, Tensor) else Tensor.wrap(x)
        return encode_frozen(apply_modality_mask(x, mask), self.cfg.encoder, self.params)

    def forward(self, x: Union[Tensor, np.ndarray], mask: ModalityMask, bundle: Optional[FeatureBundle] = None) -> ForwardOutput:
        if bundle is None:
            bundle = self.encode(x, mask)
        f_bn = bottleneck(bundle.en0, bundle.en1, self.params)
        inp = run_inp(fused_query(bundle.en0, bundle.en1), self.params)
        de0, de1 = decode(f_bn, inp.p, self.cfg.decoder, self.params)
        return ForwardOutput(bundle=bundle, f_bn=f_bn, inp=inp, de0=de0, de1=de1)

    @staticmethod
    def attachment_features(out: ForwardOutput) -> dict[str, Tensor]:
        return {"en0": out.bundle.en0, "en1": out.bundle.en1, "bn": out.f_bn}

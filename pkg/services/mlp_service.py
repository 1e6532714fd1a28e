"""The MLP classifier with dropout sites at the input and hidden outputs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from engine import RngStream, Tensor, constant, current_tape, no_tape, ops, parameter
from exceptions import DataError, UsageError
from models.network_models import DropoutVariant, MlpSpec, SiteConfig
from services.dropout_service import (
    DropoutSite,
    ForwardMode,
    MaskTrace,
    apply_site,
    broadcast_mask,
    build_site,
)


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor


@dataclass
class ForwardResult:
    log_probs: Tensor
    trace: MaskTrace


@dataclass
class PredictiveSampleSet:
    """K per-class probability rows for one input."""

    probabilities: np.ndarray  # (K, classes)

    @property
    def k(self) -> int:
        return self.probabilities.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.probabilities.mean(axis=0)


def build_mlp_spec(
    widths: Sequence[int],
    variant: DropoutVariant,
    site_stages: Optional[Iterable[int]] = None,
    **site_options,
) -> MlpSpec:
    """Spec with one site of ``variant`` at each requested stage (all by default)."""
    widths = list(widths)
    stages = list(range(len(widths) - 1)) if site_stages is None else list(site_stages)
    if variant == DropoutVariant.NONE:
        return MlpSpec(widths=widths)
    options = dict(site_options)
    if not variant.is_fixed_rate:
        options.pop("rate", None)
    elif options.get("rate") is None:
        options["rate"] = 0.2
    if variant != DropoutVariant.CONTEXTUAL_GATING:
        options.pop("gating_dropout_rate", None)
    sites = [
        SiteConfig(site_id=f"site{stage}", variant=variant, activation_shape=[widths[stage]], **options)
        for stage in stages
    ]
    return MlpSpec(widths=widths, sites=sites, site_stages=stages)


class MlpClassifier:
    """widths[0] -> hidden ReLU layers -> widths[-1] with log-softmax output.

    Stage 0 is the raw input (g is the identity there); stage s >= 1 is the
    ReLU output of hidden layer s. A site at stage s masks that activation.
    """

    def __init__(self, spec: MlpSpec, rng: RngStream):
        self.spec = spec
        self.layers: list[DenseLayer] = []
        for index, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            weight = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.layers.append(
                DenseLayer(
                    weight=parameter(weight, f"layer{index}.weight"),
                    bias=parameter(np.zeros(fan_out), f"layer{index}.bias"),
                )
            )
        self.sites: dict[int, DropoutSite] = {}
        for stage, config in zip(spec.site_stages, spec.sites):
            self.sites[stage] = build_site(config, rng.child(1000 + stage))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def ordered_sites(self) -> list[tuple[int, DropoutSite]]:
        return sorted(self.sites.items())

    def decoder_parameters(self) -> dict[str, Tensor]:
        named = {}
        for layer in self.layers:
            named[layer.weight.name] = layer.weight
            named[layer.bias.name] = layer.bias
        return named

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """theta (decoder), phi (encoder heads), eta (priors), concrete (global logits).

        Concrete priors are fixed and are not returned.
        """
        groups: dict[str, dict[str, Tensor]] = {
            "theta": self.decoder_parameters(),
            "phi": {},
            "eta": {},
            "concrete": {},
        }
        for _, site in self.ordered_sites:
            for name, tensor in site.named_parameters().items():
                attr = name.split(".", 1)[1]
                if attr == "eta":
                    if site.variant != DropoutVariant.CONCRETE:
                        groups["eta"][name] = tensor
                elif attr == "concrete_logit":
                    groups["concrete"][name] = tensor
                else:
                    groups["phi"][name] = tensor
        return groups

    def trainable_parameters(self) -> dict[str, Tensor]:
        named = {}
        for group in self.parameter_groups().values():
            named.update(group)
        return named

    def all_parameters(self) -> dict[str, Tensor]:
        named = self.decoder_parameters()
        for _, site in self.ordered_sites:
            named.update(site.named_parameters())
        return named

    def zero_grad(self) -> None:
        for tensor in self.all_parameters().values():
            tensor.zero_grad()

    def stage_activation(self, stage: int, x_prev: Tensor) -> Tensor:
        if stage == 0:
            return x_prev
        layer = self.layers[stage - 1]
        return ops.relu(ops.add_bias(ops.matmul(x_prev, layer.weight), layer.bias))

    @property
    def has_barrier_sites(self) -> bool:
        return any(site.uses_barrier for site in self.sites.values())

    def encoder_activation(self, stage: int, x_enc: Tensor) -> Tensor:
        """stage_activation with the decoder weights held constant."""
        if stage == 0:
            return x_enc
        layer = self.layers[stage - 1]
        weight, bias = constant(layer.weight.data), constant(layer.bias.data)
        return ops.relu(ops.add_bias(ops.matmul(x_enc, weight), bias))

    def forward_from(
        self,
        stage: int,
        x_prev: Tensor,
        mode: ForwardMode = ForwardMode.SAMPLE,
        rng: Optional[RngStream] = None,
        replay: Optional[MaskTrace] = None,
        with_pseudo: bool = False,
    ) -> ForwardResult:
        """Run stages ``stage``..H and the output layer; x_prev feeds ``stage``."""
        trace = MaskTrace()
        x = x_prev
        # encoder heads read a copy of the activations computed with theta held
        # constant, so q passes no gradient to theta but masks still link sites
        track = self.has_barrier_sites and current_tape() is not None
        x_enc = ops.stop_gradient(x_prev) if track else None
        for s in range(stage, self.spec.hidden_stages + 1):
            U = self.stage_activation(s, x)
            U_enc = self.encoder_activation(s, x_enc) if track else None
            site = self.sites.get(s)
            if site is None:
                x, x_enc = U, U_enc
                continue
            previous = replay.at_stage(s) if replay is not None else None
            head_input = U_enc if site.uses_barrier else None
            x, draw = apply_site(site, U, s, mode, rng, previous, with_pseudo, head_input)
            if track:
                mask = broadcast_mask(draw.mask, U_enc.shape, site.config.broadcast_dim, batched=True)
                x_enc = ops.mul(U_enc, mask)
            trace.draws.append(draw)
        out = self.layers[-1]
        logits = ops.add_bias(ops.matmul(x, out.weight), out.bias)
        return ForwardResult(log_probs=ops.log_softmax(logits), trace=trace)

    def forward(
        self,
        x: np.ndarray,
        mode: ForwardMode = ForwardMode.SAMPLE,
        rng: Optional[RngStream] = None,
        replay: Optional[MaskTrace] = None,
        with_pseudo: bool = False,
    ) -> ForwardResult:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.widths[0]:
            raise DataError(f"input of shape {x.shape} does not match input width {self.spec.widths[0]}")
        return self.forward_from(0, constant(x), mode, rng, replay, with_pseudo)


def log_likelihood(log_probs: Tensor, y: np.ndarray) -> Tensor:
    """Per-row selected log-softmax entry."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    classes = log_probs.shape[-1]
    if y.shape[0] != log_probs.shape[0]:
        raise DataError(f"{y.shape[0]} labels for {log_probs.shape[0]} rows")
    if np.any((y < 0) | (y >= classes)):
        raise DataError(f"label outside [0, {classes})")
    one_hot = np.zeros(log_probs.shape)
    one_hot[np.arange(y.shape[0]), y] = 1.0
    return ops.reduce_sum(ops.mul(log_probs, constant(one_hot)), -1)


def predict_point(model: MlpClassifier, x: np.ndarray) -> np.ndarray:
    """Class probabilities with every mask replaced by its expectation."""
    with no_tape():
        result = model.forward(x, ForwardMode.EXPECTED)
    return np.exp(result.log_probs.data)


def predictive_probabilities(model: MlpClassifier, x: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """(rows, K, classes) probabilities from K independent mask draws."""
    rows = []
    with no_tape():
        for draw in range(k):
            result = model.forward(x, ForwardMode.SAMPLE, rng.child(draw))
            rows.append(np.exp(result.log_probs.data))
    return np.stack(rows, axis=1)


def predictive_samples(
    model: MlpClassifier, x: np.ndarray, k: int, rng: RngStream, for_testing: bool = True
) -> list[PredictiveSampleSet]:
    if k < 1 or (for_testing and k < 2):
        raise UsageError(f"K={k} draws cannot support a two-sample test")
    probabilities = predictive_probabilities(model, x, k, rng)
    return [PredictiveSampleSet(probabilities=rows) for rows in probabilities]


def ensemble_predictive_samples(
    models: Sequence[MlpClassifier], x: np.ndarray, k: int, rng: RngStream
) -> list[list[PredictiveSampleSet]]:
    """Per model, per input sample sets; member m draws from ``rng.child(m)``."""
    return [predictive_samples(model, x, k, rng.child(m)) for m, model in enumerate(models)]


def parameter_overhead(model: MlpClassifier) -> dict[str, float]:
    """Encoder-head parameter count against the decoder's."""
    decoder = sum(t.data.size for t in model.decoder_parameters().values())
    encoder = sum(t.data.size for _, site in model.ordered_sites for t in site.encoder_parameters())
    return {
        "decoder_parameters": int(decoder),
        "encoder_parameters": int(encoder),
        "overhead_ratio": float(encoder) / float(decoder) if decoder else 0.0,
    }

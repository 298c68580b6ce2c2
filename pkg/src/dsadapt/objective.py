"""Loss weights, the twelve ablation settings, and total-loss composition."""

from __future__ import annotations

import re
from dataclasses import astuple, dataclass, fields

from .autodiff import Tensor


class UnknownConfigError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class LossWeights:
    alpha_da: float
    lambda_ae_s: float
    lambda_ae_t: float
    lambda_class: float
    lambda_breg: float
    separate_embedding: bool

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "separate_embedding" and v < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {v}")

    @property
    def uses_autoencoder(self) -> bool:
        return self.lambda_ae_s > 0 or self.lambda_ae_t > 0


@dataclass
class LossTerms:
    """Individual loss components; a term may be None when its weight is zero."""

    ae_s: Tensor | None = None
    ae_t: Tensor | None = None
    class_ce: Tensor | None = None
    da_s: Tensor | None = None
    da_t: Tensor | None = None
    breg: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self) if getattr(self, f.name) is not None}


def _row(alpha, ae_s, ae_t, cls, breg, sep):
    return LossWeights(alpha, ae_s, ae_t, cls, breg, sep)


ABLATION_CONFIGS: dict[str, LossWeights] = {
    "Baseline": _row(0.0, 0, 0, 1, 0, False),
    "Domain Adversarial (DA)": _row(0.1, 0, 0, 1, 0, False),
    "Bregman Divergence(BD)": _row(0.0, 0, 0, 1, 1, False),
    "Auto-Encoder (AE)": _row(0.0, 1, 1, 1, 0, False),
    "DA, AE": _row(0.1, 1, 1, 1, 0, False),
    "BD, AE": _row(0.0, 1, 1, 1, 1, False),
    "Direct Sum (DS)": _row(0.0, 0, 0, 1, 0, True),
    "DS, DA": _row(0.1, 0, 0, 1, 0, True),
    "DS, BD": _row(0.0, 0, 0, 1, 1, True),
    "DS, DA, AE": _row(0.1, 1, 1, 1, 0, True),
    "DS, BD, AE": _row(0.0, 1, 1, 1, 1, True),
    "Everything": _row(0.1, 1, 1, 1, 1, True),
}

_ALIASES = {
    "DA": "Domain Adversarial (DA)",
    "BD": "Bregman Divergence(BD)",
    "AE": "Auto-Encoder (AE)",
    "DS": "Direct Sum (DS)",
    "BD, BS, AE": "DS, BD, AE",
}


def _key(name: str) -> str:
    return re.sub(r"\s+", "", name).lower()


_LOOKUP = {_key(n): n for n in ABLATION_CONFIGS}
_LOOKUP.update({_key(a): n for a, n in _ALIASES.items()})


def canonical_name(name: str) -> str:
    try:
        return _LOOKUP[_key(name)]
    except KeyError:
        valid = ", ".join(f'"{n}"' for n in ABLATION_CONFIGS)
        raise UnknownConfigError(f"unknown config {name!r}; valid names: {valid}") from None


def ablation_config(name: str) -> LossWeights:
    """Weights for one ablation row. Matching ignores case and whitespace."""
    return ABLATION_CONFIGS[canonical_name(name)]


def compose_loss(terms: LossTerms, w: LossWeights) -> Tensor:
    """Weighted total loss.

    The adversarial terms enter with a plus sign: the domain head minimizes
    its cross-entropy, and the reversal layer in front of it hands the
    encoders ``-alpha`` times that gradient. Zero-weight terms are skipped
    entirely so they contribute no gradient path.
    """
    parts = [
        (w.lambda_ae_s, terms.ae_s, "ae_s"),
        (w.lambda_ae_t, terms.ae_t, "ae_t"),
        (w.lambda_class, terms.class_ce, "class_ce"),
        (w.lambda_breg, terms.breg, "breg"),
    ]
    if w.alpha_da > 0:
        parts += [(1.0, terms.da_s, "da_s"), (1.0, terms.da_t, "da_t")]
    total = None
    for weight, term, name in parts:
        if weight == 0:
            continue
        if term is None:
            raise ValueError(f"term {name} is required by weight {weight} but was not computed")
        piece = term if weight == 1 else term * weight
        total = piece if total is None else total + piece
    if total is None:
        return Tensor(0.0)
    return total


def config_tuple(w: LossWeights) -> tuple:
    return astuple(w)

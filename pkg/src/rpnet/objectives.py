"""Similarity and adversarial losses.

Every probability that enters a logarithm is floored at ``PROB_FLOOR``.
Expectations are mini-batch means.
"""

from __future__ import annotations

import math
from collections.abc import Mapping

import torch
from torch import nn
from torch.nn import functional as F

from .models import DiscriminatorOutput

PROB_FLOOR = 1e-7
_LOG_FLOOR = math.log(PROB_FLOOR)

_NORM_TYPES = (nn.modules.batchnorm._NormBase, nn.GroupNorm, nn.LayerNorm)


def _flog(p):
    return torch.log(p.clamp(min=PROB_FLOOR))


def similarity_loss(logits, labels):
    """Binary cross-entropy of same/different logits against 0/1 labels."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, device=logits.device)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels "
                         f"{tuple(labels.shape)} differ in shape")
    y = labels.to(logits.dtype)
    log_p = F.logsigmoid(logits).clamp(min=_LOG_FLOOR)
    log_q = F.logsigmoid(-logits).clamp(min=_LOG_FLOOR)
    return -(y * log_p + (1 - y) * log_q).mean()


def discriminator_loss(out_real: DiscriminatorOutput, labels, out_fake: DiscriminatorOutput):
    """Discriminator objective over real pairs and generated pairs.

    Real rows score ``-log p_same`` (label 1) or ``-log p_diff`` (label 0).
    Generated rows score ``-log(1 - p_same - p_diff)``, which under the
    three-way softmax is ``-log p_fake``. The two means are added 1:1.
    """
    if len(out_real) == 0 or len(out_fake) == 0:
        raise ValueError("discriminator_loss needs at least one real and one fake row")
    labels = torch.as_tensor(labels, device=out_real.probs.device)
    if labels.shape != (len(out_real),):
        raise ValueError("labels must give one 0/1 entry per real row")
    p_label = torch.where(labels == 1, out_real.p_same, out_real.p_diff)
    return -_flog(p_label).mean() - _flog(out_fake.p_fake).mean()


def generator_loss(out_generated: DiscriminatorOutput):
    """``-mean log p_same`` of the discriminator on (generated, conditioning) pairs."""
    if len(out_generated) == 0:
        raise ValueError("generator_loss needs at least one row")
    return -_flog(out_generated.p_same).mean()


def gan_value(d_real, d_fake):
    """Classic min-max GAN value ``E log D(x) + E log(1 - D(G(z)))``.

    Reference form only; training uses :func:`discriminator_loss` and
    :func:`generator_loss`.
    """
    return _flog(torch.as_tensor(d_real)).mean() + _flog(1 - torch.as_tensor(d_fake)).mean()


def weight_arrays(params):
    """Weight tensors subject to L2: conv/linear weights, no biases, no norm layers.

    ``params`` is either a module or a mapping of name -> array; for a
    mapping, names ending in ``bias`` or containing ``bn``/``norm`` are
    excluded.
    """
    if isinstance(params, nn.Module):
        out = []
        for module in params.modules():
            if isinstance(module, _NORM_TYPES):
                continue
            w = getattr(module, "weight", None)
            if isinstance(w, nn.Parameter) and w in set(module.parameters(recurse=False)):
                out.append(w)
        return out
    if isinstance(params, Mapping):
        return [torch.as_tensor(v) for k, v in params.items()
                if not (k.endswith("bias") or "bn" in k.lower() or "norm" in k.lower())]
    raise TypeError("params must be an nn.Module or a mapping of named arrays")


def l2_penalty(params, coefficient: float):
    if coefficient < 0:
        raise ValueError("L2 coefficient must be >= 0")
    ws = weight_arrays(params)
    if not ws:
        return torch.zeros(())
    total = sum((w * w).sum() for w in ws)
    return coefficient * total

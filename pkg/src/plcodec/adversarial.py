"""Non-binary adversarial loss.

Instead of real/fake, the discriminator predicts which texture codeword a
patch of the original carries; reconstructions are trained to earn their
original's codeword and the discriminator pins them to a dedicated class 0.
Codewords come from k-means over frozen extractor features.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .losses import FeatureExtractor

FAKE_CLASS = 0
_PROB_FLOOR = 1e-8


def fit_codebook(
    vectors: torch.Tensor, num_codes: int = 64, iters: int = 30, seed: int = 0
) -> torch.Tensor:
    """Plain Lloyd k-means over feature vectors [N, D] -> codebook [K, D].

    Deterministic: seeded sample init, fixed iteration count, empty clusters
    keep their previous centroid.
    """
    if vectors.ndim != 2 or len(vectors) < num_codes:
        raise ValueError("need at least num_codes feature vectors")
    v = vectors.detach().to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    centroids = v[torch.randperm(len(v), generator=gen)[:num_codes]].clone()
    for _ in range(iters):
        assign = torch.cdist(v, centroids).argmin(dim=1)
        for k in range(num_codes):
            members = v[assign == k]
            if len(members):
                centroids[k] = members.mean(dim=0)
    return centroids.to(vectors.dtype)


def nearest_code(features: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest codeword per feature vector; ties break to the
    lowest index."""
    flat = features.reshape(-1, features.shape[-1])
    d = torch.cdist(flat.to(codebook.dtype), codebook)
    return d.argmin(dim=1).reshape(features.shape[:-1])


def semantic_labels(
    x: torch.Tensor, extractor: FeatureExtractor, codebook: torch.Tensor
) -> torch.Tensor:
    """Per-position codeword classes of an image batch, [B, h, w] in 1..K.

    Uses the extractor's coarsest stage; class 0 stays reserved for
    reconstructions in the discriminator's vocabulary.
    """
    with torch.no_grad():
        feat = extractor(x)[-1]  # [B, D, h, w]
    vectors = feat.permute(0, 2, 3, 1)
    return nearest_code(vectors, codebook) + 1


class Discriminator(nn.Module):
    """Predicts a codeword class per coarse spatial position, plus the
    reserved reconstruction class; output grid matches the extractor's
    coarsest stage (stride 16)."""

    def __init__(self, num_codes: int = 64, width: int = 48):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for _ in range(4):
            layers += [nn.Conv2d(cin, width, 3, stride=2, padding=1), nn.GELU()]
            cin = width
        layers.append(nn.Conv2d(width, num_codes + 1, 1))
        self.net = nn.Sequential(*layers)
        self.num_classes = num_codes + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _floored_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy in nats with the predicted probability floored, so a
    confidently wrong discriminator cannot blow up the loss."""
    probs = torch.softmax(logits, dim=1)
    picked = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(_PROB_FLOOR)).mean()


def discriminator_loss(
    disc: Discriminator, x: torch.Tensor, x_hat: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Originals must earn their codeword class, reconstructions class 0.

    The reconstruction is detached; this loss trains the discriminator only.
    """
    real = _floored_ce(disc(x), labels)
    fake_target = torch.full_like(labels, FAKE_CLASS)
    fake = _floored_ce(disc(x_hat.detach()), fake_target)
    return real + fake


def adversarial_loss(
    disc: Discriminator, x_hat: torch.Tensor, labels: torch.Tensor
) -> torch.Tensor:
    """Reconstructions try to earn the original's codeword class.

    Runs the discriminator functionally on detached parameters: gradient
    reaches the reconstruction, never the discriminator.
    """
    frozen = {k: v.detach() for k, v in disc.named_parameters()}
    frozen.update({k: v for k, v in disc.named_buffers()})
    logits = torch.func.functional_call(disc, frozen, (x_hat,))
    return _floored_ce(logits, labels)

"""Training objectives: reconstruction, self-identification, neighborhood aggregation.

All three losses are scalar Tensors built on the autodiff graph so one
backward() call drives both encoder and decoder updates. The memory bank is
always treated as a constant: gradients flow through the query embeddings
only, never into the stored slots.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .membank import similarity_distribution, top_k_neighbors

# Own-slot probability mass above this signals aliased slot indices, not
# legitimate float noise (a softmax entry can round to 1.0 but not past it).
MASS_OVERFLOW_TOL = 1e-9


@dataclass
class MiniBatch:
    """One training batch: input vectors, augmented views, and bank alignment.

    inputs        per-sample flattened image vectors
    views         per-sample list of augmented view vectors, each nonempty
    slot_indices  memory bank slot owned by each sample, aligned by position
    prototypical  positions within the batch used for the aggregation term;
                  defaults to the whole batch
    """

    inputs: list
    views: list
    slot_indices: np.ndarray
    prototypical: np.ndarray = None

    def __post_init__(self):
        self.slot_indices = np.asarray(self.slot_indices, dtype=np.int64)
        if len(self.inputs) != len(self.views) or len(self.inputs) != len(self.slot_indices):
            raise ValueError("inputs, views and slot_indices must align")
        if len(self.inputs) == 0:
            raise ValueError("batch is empty")
        for vs in self.views:
            if len(vs) == 0:
                raise ValueError("every sample needs at least one augmented view")
        if self.prototypical is None:
            self.prototypical = np.arange(len(self.inputs))
        else:
            self.prototypical = np.asarray(self.prototypical, dtype=np.int64)
            if self.prototypical.size == 0:
                raise ValueError("prototypical subset is empty")
            if np.any(self.prototypical < 0) or np.any(self.prototypical >= len(self.inputs)):
                raise ValueError("prototypical indices must point into the batch")

    def __len__(self):
        return len(self.inputs)


@dataclass
class LossBreakdown:
    """Scalar values of each term plus the combined graph node for backward."""

    mse: float
    ss: float
    agg: float
    latent: float
    total: float
    lam: float
    total_tensor: Tensor


def mse_loss(x, x_hat):
    """Reconstruction error: sum over pixels, mean over the batch axis.

    A 1-d tensor counts as a batch of one; a 2-d tensor is (batch, pixels).
    """
    if x.data.shape != x_hat.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {x_hat.data.shape}")
    batch = x.data.shape[0] if x.data.ndim == 2 else 1
    return (x - x_hat).square().sum() * (1.0 / batch)


def sample_specific_loss(batch, bank, view_embeddings):
    """Self-identification term: each augmented view must find its source slot.

    For every sample, each view's embedding queries the bank and the
    probability landing on the sample's own slot is averaged across views;
    the loss is the batch mean of -log of that mass. Averaging keeps the
    inner mass a probability, so zero loss means perfect identification.
    """
    total = None
    for pos, slot in enumerate(batch.slot_indices):
        embs = view_embeddings[pos]
        if len(embs) == 0:
            raise ValueError("sample has no augmented views")
        mass = None
        for z in embs:
            probs = similarity_distribution(bank, z).probs
            hit = probs.take([int(slot)]).sum()
            mass = hit if mass is None else mass + hit
        mass = mass * (1.0 / len(embs))
        if float(mass.data) >= 1.0 + MASS_OVERFLOW_TOL:
            raise ValueError("own-slot probability mass exceeds 1; slot indices are aliased")
        term = -mass.log()
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def aggregation_loss(batch, bank, embeddings, k):
    """Neighborhood term: concentrate probability on the k nearest slots.

    Neighbor selection is a plain index computation on the current bank, so
    gradients flow only through the probabilities, not the choice of
    neighbors. Neighbors are recomputed from scratch on every call.
    """
    total = None
    for pos in batch.prototypical:
        z = embeddings[int(pos)]
        neighbors = top_k_neighbors(bank, z.data, k)
        probs = similarity_distribution(bank, z).probs
        mass = probs.take(neighbors.indices).sum()
        term = -mass.log()
        total = term if total is None else total + term
    return total * (1.0 / len(batch.prototypical))


def salad_loss(mse, ss, agg, lam):
    """Combine the three terms: total = mse + lam * (ss + agg).

    The latent terms only reference encoder outputs, so their gradients
    cannot reach decoder parameters; no explicit stop-gradient is needed.
    """
    latent = ss + agg
    total = mse + latent * float(lam)
    return LossBreakdown(
        mse=float(mse.data),
        ss=float(ss.data),
        agg=float(agg.data),
        latent=float(latent.data),
        total=float(total.data),
        lam=float(lam),
        total_tensor=total,
    )

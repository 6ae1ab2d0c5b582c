"""Feature memory bank: one unit-vector slot per training sample.

Slots are updated by a weighted moving average and renormalized to stay on
the unit sphere. Queries compute the temperature-scaled similarity softmax
over all slots, exact top-k cosine neighbors, and an anomaly-filtered view
used at inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor

BANK_MAGIC = b"SALADBNK"
BANK_VERSION = 1


@dataclass
class SimilarityDistribution:
    probs: object  # ndarray, or Tensor when the query was a Tensor
    query_index: int | None = None


@dataclass
class NeighborSet:
    indices: np.ndarray   # k distinct slot indices
    distances: np.ndarray  # cosine distances, nondecreasing


@dataclass
class BankView:
    """Read-only subset of a bank's slots; index_map maps back to slot ids."""

    slots: np.ndarray
    index_map: np.ndarray

    @property
    def size(self):
        return self.slots.shape[0]


class MemoryBank:
    def __init__(self, slots: np.ndarray, temperature: float = 0.1, update_rate: float = 0.5):
        slots = np.ascontiguousarray(slots, dtype=np.float64)
        if slots.ndim != 2:
            raise ValueError("slots must be an N x d array")
        if not 0.0 < temperature <= 1.0:
            raise ValueError("temperature must lie in (0, 1]")
        if not 0.0 <= update_rate <= 1.0:
            raise ValueError("update rate must lie in [0, 1]")
        self.slots = slots
        self.anomaly_flags = np.zeros(slots.shape[0], dtype=bool)
        self.temperature = temperature
        self.update_rate = update_rate
        self._slots_tensor = None

    @property
    def size(self):
        return self.slots.shape[0]

    @property
    def dim(self):
        return self.slots.shape[1]

    def slots_tensor(self) -> Tensor:
        """Constant snapshot of the slots for building differentiable graphs.

        Backed by a copy so later update_slot calls cannot corrupt a live
        graph; memoized until the next update.
        """
        if self._slots_tensor is None:
            self._slots_tensor = Tensor(self.slots.copy())
        return self._slots_tensor


def init_bank(n: int, d: int, seed: int, temperature: float = 0.1, update_rate: float = 0.5) -> MemoryBank:
    """Random unit-vector slots, isotropic, reproducible from the seed."""
    if n <= 0 or d <= 0:
        raise ValueError("bank size and dimension must be positive")
    rng = np.random.default_rng(seed)
    slots = rng.normal(size=(n, d))
    slots /= np.linalg.norm(slots, axis=1, keepdims=True)
    return MemoryBank(slots, temperature=temperature, update_rate=update_rate)


def update_slot(bank: MemoryBank, i: int, z: np.ndarray):
    """Moving-average update m_i <- (1-t) m_i + t z, then renormalize.

    The plain moving average drifts off the unit sphere; renormalizing keeps
    the cosine-similarity premise of every query intact.
    """
    if not 0 <= i < bank.size:
        raise IndexError(f"slot index {i} out of range for bank of size {bank.size}")
    z = np.asarray(z, dtype=np.float64)
    t = bank.update_rate
    merged = (1.0 - t) * bank.slots[i] + t * z
    norm = np.linalg.norm(merged)
    if norm < 1e-12:
        raise NumericError("slot update produced a near-zero vector")
    bank.slots[i] = merged / norm
    bank._slots_tensor = None


def similarity_distribution(bank: MemoryBank, z, query_index: int | None = None,
                            exclude_query_slot: bool = False) -> SimilarityDistribution:
    """Softmax of slot similarities at the bank temperature, over all N slots.

    Accepts a plain unit vector (returns ndarray probs) or a Tensor (returns
    Tensor probs so gradients can flow back into the query). The query's own
    slot is kept in the denominator unless exclude_query_slot is set, in
    which case its logit is suppressed far below the others.
    """
    if bank.size == 0:
        raise ValueError("empty bank")
    if exclude_query_slot and query_index is None:
        raise ValueError("exclude_query_slot requires query_index")

    if isinstance(z, Tensor):
        logits = (bank.slots_tensor() @ z) * (1.0 / bank.temperature)
        if exclude_query_slot:
            mask = np.zeros(bank.size)
            mask[query_index] = -1e9
            logits = logits + Tensor(mask)
        probs = logits.softmax_rows()
        return SimilarityDistribution(probs=probs, query_index=query_index)

    z = np.asarray(z, dtype=np.float64)
    logits = (bank.slots @ z) / bank.temperature
    if exclude_query_slot:
        logits[query_index] = -1e9
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return SimilarityDistribution(probs=e / e.sum(), query_index=query_index)


def top_k_neighbors(bank: MemoryBank, z: np.ndarray, k: int, exclude=None) -> NeighborSet:
    """The k slots minimizing cosine distance 1 - m.z, ties to lower index."""
    exclude = frozenset() if exclude is None else frozenset(exclude)
    available = bank.size - len(exclude)
    if k < 1 or k > available:
        raise ValueError(f"k={k} out of range for {available} available slots")
    z = np.asarray(z, dtype=np.float64)
    distances = 1.0 - bank.slots @ z
    order = np.argsort(distances, kind="stable")
    if exclude:
        order = order[~np.isin(order, list(exclude))]
    chosen = order[:k]
    return NeighborSet(indices=chosen.copy(), distances=distances[chosen].copy())


def discard_anomalous(bank: MemoryBank) -> BankView:
    """View exposing only slots not flagged anomalous."""
    keep = np.nonzero(~bank.anomaly_flags)[0]
    if keep.size == 0:
        raise ValueError("all bank slots are flagged anomalous; nothing to score against")
    return BankView(slots=bank.slots[keep], index_map=keep)


def full_view(bank: MemoryBank) -> BankView:
    return BankView(slots=bank.slots.copy(), index_map=np.arange(bank.size))


# -- snapshot serialization ----------------------------------------------
#
# Layout: 8-byte magic, 1 version byte, u32 N, u32 d, f64 update rate,
# f64 temperature, N*d float64 LE slot array, then the anomaly flags as an
# LSB-first bitmap of ceil(N/8) bytes.


def save_bank(path, bank: MemoryBank):
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(bytes([BANK_VERSION]))
        fh.write(struct.pack("<II", bank.size, bank.dim))
        fh.write(struct.pack("<dd", bank.update_rate, bank.temperature))
        fh.write(np.ascontiguousarray(bank.slots, dtype="<f8").tobytes())
        fh.write(np.packbits(bank.anomaly_flags, bitorder="little").tobytes())


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BANK_MAGIC:
            raise ValueError(f"not a bank snapshot: bad magic {magic!r}")
        version = fh.read(1)[0]
        if version != BANK_VERSION:
            raise ValueError(f"unsupported bank snapshot version {version}")
        n, d = struct.unpack("<II", fh.read(8))
        update_rate, temperature = struct.unpack("<dd", fh.read(16))
        slots = np.frombuffer(fh.read(n * d * 8), dtype="<f8").reshape(n, d).copy()
        flag_bytes = fh.read((n + 7) // 8)
        flags = np.unpackbits(np.frombuffer(flag_bytes, dtype=np.uint8), bitorder="little")[:n]
    bank = MemoryBank(slots, temperature=temperature, update_rate=update_rate)
    bank.anomaly_flags = flags.astype(bool)
    return bank

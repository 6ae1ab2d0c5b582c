"""Two-phase training loop: reconstruction warm-up, then progressive rounds.

Phase one trains the autoencoder with reconstruction plus the
self-identification term while the memory bank warms up. Phase two adds the
neighborhood aggregation term, growing the neighborhood size k each round so
embeddings first find themselves, then coalesce into prototype clusters.

Every epoch draws its shuffle order and augmentation seeds from a stream
keyed by (phase, epoch), so a run resumed from a round-boundary checkpoint
replays the remaining epochs bit-for-bit.
"""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataprep import bilinear_resize
from .losses import MiniBatch, aggregation_loss, mse_loss, salad_loss, sample_specific_loss
from .membank import save_bank, similarity_distribution, top_k_neighbors, update_slot
from .model import Adam, decode, encode, save_checkpoint

LOSS_CSV_COLUMNS = ("epoch", "mse", "ss", "agg", "total", "k")


@dataclass
class AugmentSpec:
    """Stochastic view generation: flip, crop-and-resize, pixel noise."""

    flip_prob: float = 0.5
    min_crop_area: float = 0.8
    noise_scale: float = 0.02
    n_views: int = 2

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0.0 < self.min_crop_area <= 1.0:
            raise ValueError("min_crop_area must lie in (0, 1]")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be nonnegative")
        if self.n_views < 1:
            raise ValueError("need at least one view")

    @classmethod
    def identity(cls, n_views=2):
        """A spec whose views equal the input exactly."""
        return cls(flip_prob=0.0, min_crop_area=1.0, noise_scale=0.0, n_views=n_views)


def augment(image, spec, seed):
    """Produce spec.n_views randomized views of a 2-d image, clipped to [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(spec.n_views):
        v = img
        if spec.flip_prob > 0.0 and rng.random() < spec.flip_prob:
            v = v[:, ::-1]
        if spec.min_crop_area < 1.0:
            scale = np.sqrt(rng.uniform(spec.min_crop_area, 1.0))
            ch = max(1, round(h * scale))
            cw = max(1, round(w * scale))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            v = bilinear_resize(v[top : top + ch, left : left + cw], h, w)
        if spec.noise_scale > 0.0:
            v = v + rng.normal(0.0, spec.noise_scale, size=(h, w))
        views.append(np.clip(v, 0.0, 1.0))
    return views


@dataclass
class TrainingConfig:
    """All training knobs. The defaults are the published operating point;
    desk_preset() shrinks the schedule for laptop-scale runs."""

    temperature: float = 0.1
    loss_weight: float = 0.25
    bank_update_rate: float = 0.5
    score_neighbors: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    pretrain_epochs: int = 50
    rounds: int = 10
    epochs_per_round: int = 50
    k_schedule: str = "linear"
    k_max: int = None
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    use_mse: bool = True
    use_ss: bool = True
    use_agg: bool = True
    init_seed: int = 0
    shuffle_seed: int = 1

    def __post_init__(self):
        if not 0.0 < self.temperature <= 1.0:
            raise ValueError("temperature must lie in (0, 1]")
        if not 0.0 <= self.bank_update_rate <= 1.0:
            raise ValueError("bank_update_rate must lie in [0, 1]")
        # zero is allowed so the plain-autoencoder baseline is expressible
        if self.loss_weight < 0.0:
            raise ValueError("loss_weight must be nonnegative")
        if self.batch_size < 1 or self.score_neighbors < 1 or self.epochs_per_round < 1:
            raise ValueError("counts must be positive")
        if self.pretrain_epochs < 0 or self.rounds < 0:
            raise ValueError("epoch and round counts cannot be negative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.k_schedule not in ("linear", "double"):
            raise ValueError("k_schedule must be 'linear' or 'double'")
        if self.k_max is not None and self.k_max < 1:
            raise ValueError("k_max must be positive")

    def effective_k_max(self):
        return self.score_neighbors if self.k_max is None else self.k_max


def paper_preset():
    """The full published schedule: 50 pretrain epochs, 10 rounds of 50."""
    return TrainingConfig()


def desk_preset():
    """Laptop-scale schedule: 20 pretrain epochs, 5 rounds of 10.

    The learning rate is raised to compensate for the short schedule; loss
    and bank constants stay at the published operating point.
    """
    return TrainingConfig(pretrain_epochs=20, rounds=5, epochs_per_round=10, learning_rate=3e-3)


@dataclass
class EpochStats:
    """Mean loss components over one epoch; k=0 marks no aggregation term."""

    epoch: int
    mse: float
    ss: float
    agg: float
    total: float
    k: int


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    neighbor_mass: list = field(default_factory=list)
    wall_clock: float = 0.0
    params: object = None
    bank: object = None
    seeds: dict = field(default_factory=dict)


def neighborhood_schedule(round_number, cfg):
    """Neighborhood size for a training round; grows toward k_max at round R."""
    if not 1 <= round_number <= cfg.rounds:
        raise ValueError(f"round {round_number} outside 1..{cfg.rounds}")
    k_max = cfg.effective_k_max()
    if cfg.k_schedule == "linear":
        return max(1, round(round_number / cfg.rounds * k_max))
    # doubling: halve k_max once per remaining round
    return max(1, round(k_max / 2 ** (cfg.rounds - round_number)))


def _epoch_rng(seed, phase, epoch):
    # phase 0 is pretraining; phases 1..R are the progressive rounds
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(phase, epoch)))


def _prepare(dataset, params, bank, cfg):
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset of {len(dataset)} is smaller than one batch of {cfg.batch_size}")
    if len(bank.slots) != len(dataset):
        raise ValueError("bank must hold exactly one slot per training sample")
    images = [np.asarray(s.image, dtype=np.float64) for s in dataset]
    flats = [im.reshape(-1) for im in images]
    if flats[0].size != params.arch.input_dim:
        raise ValueError(f"model expects {params.arch.input_dim} inputs, images have {flats[0].size}")
    bank.temperature = cfg.temperature
    bank.update_rate = cfg.bank_update_rate
    return images, flats, [s.label for s in dataset]


def _zero():
    return Tensor(np.float64(0.0))


def _mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _train_epoch(images, flats, params, bank, adam, cfg, rng, k):
    """One pass over the data; k=None leaves the aggregation term out."""
    perm = rng.permutation(len(flats))
    sums = np.zeros(4)
    n_batches = 0
    for start in range(0, len(perm), cfg.batch_size):
        idx = perm[start : start + cfg.batch_size]
        inputs = [flats[i] for i in idx]
        if cfg.use_ss:
            views = [
                [v.reshape(-1) for v in augment(images[i], cfg.augment, int(rng.integers(2**31)))]
                for i in idx
            ]
        else:
            views = [[x] for x in inputs]  # placeholder, never embedded
        batch = MiniBatch(inputs=inputs, views=views, slot_indices=idx)

        embeddings = [encode(params, Tensor(x)) for x in batch.inputs]
        if cfg.use_mse:
            mse_t = _mean([mse_loss(Tensor(x), decode(params, z)) for x, z in zip(batch.inputs, embeddings)])
        else:
            mse_t = _zero()
        if cfg.use_ss:
            view_embeddings = [[encode(params, Tensor(v)) for v in vs] for vs in batch.views]
            ss_t = sample_specific_loss(batch, bank, view_embeddings)
        else:
            ss_t = _zero()
        if k is not None and cfg.use_agg:
            agg_t = aggregation_loss(batch, bank, embeddings, min(k, len(bank.slots)))
        else:
            agg_t = _zero()

        breakdown = salad_loss(mse_t, ss_t, agg_t, cfg.loss_weight)
        adam.zero_grad()
        breakdown.total_tensor.backward()
        adam.step()
        for i, z in zip(idx, embeddings):
            update_slot(bank, int(i), z.data)

        sums += (breakdown.mse, breakdown.ss, breakdown.agg, breakdown.total)
        n_batches += 1
    means = sums / n_batches
    return EpochStats(epoch=0, mse=means[0], ss=means[1], agg=means[2], total=means[3], k=0 if k is None else k)


def _mean_neighbor_mass(flats, labels, params, bank, k):
    """Mean top-k probability mass of normal samples against the current bank."""
    k = min(k, len(bank.slots))
    masses = []
    for x, label in zip(flats, labels):
        if label != "normal":
            continue
        z = encode(params, Tensor(x)).data
        idx = top_k_neighbors(bank, z, k).indices
        masses.append(similarity_distribution(bank, z).probs[idx].sum())
    return float(np.mean(masses))


def append_loss_rows(path, stats, epoch_offset=0):
    """Append per-epoch rows to the loss CSV, writing the header when new."""
    path = Path(path)
    is_new = not path.exists()
    with open(path, "a") as fh:
        if is_new:
            fh.write(",".join(LOSS_CSV_COLUMNS) + "\n")
        for st in stats:
            cells = [repr(float(v)) for v in (st.mse, st.ss, st.agg, st.total)]
            fh.write(f"{st.epoch + epoch_offset},{','.join(cells)},{st.k}\n")


def _checkpoint(checkpoint_dir, stem, params, adam, bank, cfg, extra):
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {**asdict(cfg), **extra}
    save_checkpoint(out / f"{stem}.ckpt", params, adam, config=config)
    save_bank(out / f"{stem}.bank", bank)


def pretrain(dataset, params, bank, cfg, adam=None, loss_csv=None, checkpoint_dir=None):
    """Warm-up phase: reconstruction plus self-identification, no aggregation."""
    started = time.perf_counter()
    images, flats, labels = _prepare(dataset, params, bank, cfg)
    if adam is None:
        adam = Adam(params.all_tensors(), lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)

    stats = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        rng = _epoch_rng(cfg.shuffle_seed, 0, epoch)
        st = _train_epoch(images, flats, params, bank, adam, cfg, rng, k=None)
        st.epoch = epoch
        stats.append(st)
        if loss_csv:
            append_loss_rows(loss_csv, [st])
    if checkpoint_dir and cfg.pretrain_epochs > 0:
        _checkpoint(checkpoint_dir, "pretrain", params, adam, bank, cfg, {"phase": "pretrain"})
    return TrainReport(
        epochs=stats,
        wall_clock=time.perf_counter() - started,
        params=params,
        bank=bank,
        seeds={"init_seed": cfg.init_seed, "shuffle_seed": cfg.shuffle_seed},
    )


def train_progressive(
    dataset,
    params,
    bank,
    cfg,
    adam=None,
    start_round=1,
    loss_csv=None,
    checkpoint_dir=None,
):
    """Progressive phase: full objective with the neighborhood growing each round.

    Anomaly flags are stamped onto the bank from the dataset labels before
    the first epoch; they steer nothing here (no loss reads them) and exist
    purely so inference can skip flagged slots. At every round boundary the
    params, optimizer, and bank are checkpointed when checkpoint_dir is set.
    """
    started = time.perf_counter()
    images, flats, labels = _prepare(dataset, params, bank, cfg)
    if adam is None:
        adam = Adam(params.all_tensors(), lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    if not 1 <= start_round <= max(cfg.rounds, 1):
        raise ValueError(f"start_round {start_round} outside 1..{cfg.rounds}")

    bank.anomaly_flags[:] = np.array([lab == "anomalous" for lab in labels], dtype=bool)

    stats = []
    mass_series = []
    for round_number in range(start_round, cfg.rounds + 1):
        k_round = neighborhood_schedule(round_number, cfg)
        for epoch in range(1, cfg.epochs_per_round + 1):
            rng = _epoch_rng(cfg.shuffle_seed, round_number, epoch)
            st = _train_epoch(images, flats, params, bank, adam, cfg, rng, k=k_round)
            # global numbering continues after the configured pretraining epochs
            # so one append-only CSV covers both phases without collisions
            st.epoch = cfg.pretrain_epochs + (round_number - 1) * cfg.epochs_per_round + epoch
            stats.append(st)
            if loss_csv:
                append_loss_rows(loss_csv, [st])
        mass_series.append(
            {
                "round": round_number,
                "k": min(k_round, len(bank.slots)),
                "mass_at_round_k": _mean_neighbor_mass(flats, labels, params, bank, k_round),
                "mass_at_k_max": _mean_neighbor_mass(flats, labels, params, bank, cfg.effective_k_max()),
            }
        )
        if checkpoint_dir:
            _checkpoint(
                checkpoint_dir,
                f"round_{round_number:02d}",
                params,
                adam,
                bank,
                cfg,
                {"phase": "progressive", "round": round_number},
            )
    return TrainReport(
        epochs=stats,
        neighbor_mass=mass_series,
        wall_clock=time.perf_counter() - started,
        params=params,
        bank=bank,
        seeds={"init_seed": cfg.init_seed, "shuffle_seed": cfg.shuffle_seed},
    )

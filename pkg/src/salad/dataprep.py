"""Input pipeline: segmentation, resizing, grouped splitting, synthetic data.

Images are H x W float arrays in [0, 1] throughout. Every sample carries a
(patient id, body part) group so the split can keep all images of one body
part from one patient inside a single partition.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LABELS = ("normal", "anomalous", "unknown")

# split defaults: half the groups train, aiming for a mostly-normal train set
TRAIN_GROUP_FRACTION = 0.5
TRAIN_NORMAL_FRACTION = 0.95
TRAIN_ANOMALY_FRACTION = 0.05


@dataclass
class Sample:
    """One grayscale image with its label and patient/body-part identity."""

    image: np.ndarray
    label: str
    patient_id: str
    body_part: str
    ident: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 2:
            raise ValueError("image must be 2-d grayscale")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")

    @property
    def group_id(self):
        return (self.patient_id, self.body_part)


@dataclass
class GroupedSplit:
    """Disjoint train/validation/test partitions at group granularity."""

    train_groups: list
    val_groups: list
    test_groups: list
    train: list
    validation: list
    test: list
    stats: dict = field(default_factory=dict)


# ------------------------------------------------------------- segmentation


def hysteresis_segment(image, lo=0.1, hi=0.3, connectivity=8, largest_only=True):
    """Binary body-part mask from double thresholding.

    Pixels >= hi seed the mask; it grows to the connected components of
    pixels >= lo that contain a seed. By default only the largest surviving
    component is kept, isolating the dominant bright structure.
    """
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo} hi={hi}")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    img = np.asarray(image, dtype=np.float64)
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)

    candidates = img >= lo
    labels, count = ndimage.label(candidates, structure=structure)
    if count == 0:
        return np.zeros(img.shape, dtype=bool)

    seeded = np.unique(labels[img >= hi])
    seeded = seeded[seeded != 0]
    mask = np.isin(labels, seeded)
    if largest_only and mask.any():
        comp_labels, comp_count = ndimage.label(mask, structure=structure)
        sizes = ndimage.sum_labels(mask, comp_labels, index=np.arange(1, comp_count + 1))
        mask = comp_labels == (1 + int(np.argmax(sizes)))  # ties fall to scan order
    return mask


# ------------------------------------------------------------------ resizing


def bilinear_resize(image, out_h, out_w):
    """Classic bilinear sampling with half-pixel centers and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a nonempty 2-d array")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    in_h, in_w = img.shape

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)

    top = img[np.ix_(y0c, x0c)] * (1 - wx) + img[np.ix_(y0c, x1c)] * wx
    bottom = img[np.ix_(y1c, x0c)] * (1 - wx) + img[np.ix_(y1c, x1c)] * wx
    return top * (1 - wy) + bottom * wy


def resize_pad(image, target):
    """Resize so the major axis hits target, then zero-pad to a square.

    Padding splits symmetrically; an odd leftover puts the extra row or
    column on the bottom/right side.
    """
    if target < 1:
        raise ValueError("target must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a nonempty 2-d array")
    h, w = img.shape
    if h >= w:
        new_h, new_w = target, max(1, round(w * target / h))
    else:
        new_h, new_w = max(1, round(h * target / w)), target
    resized = bilinear_resize(img, new_h, new_w)
    out = np.zeros((target, target))
    top = (target - new_h) // 2
    left = (target - new_w) // 2
    out[top : top + new_h, left : left + new_w] = resized
    return out


# ----------------------------------------------------------------- splitting


def _categorize_groups(samples):
    groups = {}
    for s in samples:
        if not s.patient_id or not s.body_part:
            raise ValueError(f"sample {s.ident!r} is missing its group id")
        groups.setdefault(s.group_id, []).append(s)
    categories = {"normal": [], "abnormal": [], "mixed": []}
    for gid in sorted(groups):
        labels = {m.label for m in groups[gid]}
        if "unknown" in labels:
            raise ValueError(f"group {gid} contains unlabeled samples")
        if labels == {"normal"}:
            categories["normal"].append(gid)
        elif labels == {"anomalous"}:
            categories["abnormal"].append(gid)
        else:
            categories["mixed"].append(gid)
    return groups, categories


def _anomaly_fraction(groups, selected):
    total = anom = 0
    for gid in selected:
        for s in groups[gid]:
            total += 1
            anom += s.label == "anomalous"
    return anom / total if total else 0.0


def split_grouped(
    samples,
    seed,
    train_group_fraction=TRAIN_GROUP_FRACTION,
    train_anomaly_fraction=TRAIN_ANOMALY_FRACTION,
    tolerance=0.02,
):
    """Partition samples by group into train/validation/test.

    Train takes train_group_fraction of all groups, assembled so its image
    pool is mostly normal with roughly train_anomaly_fraction anomalous.
    Remaining groups alternate between validation and test within each
    category (normal, abnormal, mixed), keeping those counts within one of
    each other. Fully deterministic for a given seed.
    """
    groups, categories = _categorize_groups(samples)
    n_groups = len(groups)
    n_train = round(train_group_fraction * n_groups)
    if not 1 <= n_train < n_groups:
        raise ValueError(f"{n_groups} groups cannot support a {train_group_fraction:.0%} train share")

    rng = np.random.default_rng(seed)
    shuffled = {}
    for cat, gids in categories.items():
        order = rng.permutation(len(gids))
        shuffled[cat] = [gids[i] for i in order]

    # start from an all-normal train set, then swap anomaly-bearing groups in
    # (whole abnormal groups first, mixed after) while the anomalous image
    # fraction moves toward the target
    pool = shuffled["normal"] + shuffled["mixed"] + shuffled["abnormal"]
    train = pool[:n_train]
    removable = [g for g in train if g in set(categories["normal"])]
    supply = [g for g in shuffled["abnormal"] + shuffled["mixed"] if g not in set(train)]

    current = _anomaly_fraction(groups, train)
    for candidate in supply:
        if not removable:
            break
        trial = [g for g in train if g != removable[-1]] + [candidate]
        proposed = _anomaly_fraction(groups, trial)
        # skip candidates that overshoot and keep scanning: a whole abnormal
        # group may be too big a jump where a mixed group later fits
        if abs(proposed - train_anomaly_fraction) < abs(current - train_anomaly_fraction):
            removable.pop()
            train = trial
            current = proposed

    if abs(current - train_anomaly_fraction) > tolerance:
        counts = {cat: len(gids) for cat, gids in categories.items()}
        raise ValueError(
            "cannot reach the requested train anomaly fraction "
            f"{train_anomaly_fraction:.3f}: achieved {current:.3f} "
            f"with group counts {counts}"
        )

    train_set = set(train)
    val_groups, test_groups = [], []
    # the alternation phase carries across categories so odd category sizes
    # cancel instead of all donating their extra group to validation
    toggle = 0
    for cat in ("normal", "abnormal", "mixed"):
        leftovers = [g for g in shuffled[cat] if g not in train_set]
        for g in leftovers:
            (val_groups if toggle == 0 else test_groups).append(g)
            toggle ^= 1

    def manifest(gids):
        members = [s for g in sorted(gids) for s in groups[g]]
        return sorted(members, key=lambda s: s.ident)

    train_samples = manifest(train)
    stats = {
        "train_anomaly_fraction": current,
        "train_normal_fraction": 1.0 - current,
        "group_counts": {cat: len(gids) for cat, gids in categories.items()},
        "image_counts": {
            "train": len(train_samples),
            "validation": sum(len(groups[g]) for g in val_groups),
            "test": sum(len(groups[g]) for g in test_groups),
        },
    }
    return GroupedSplit(
        train_groups=sorted(train),
        val_groups=sorted(val_groups),
        test_groups=sorted(test_groups),
        train=train_samples,
        validation=manifest(val_groups),
        test=manifest(test_groups),
        stats=stats,
    )


# ------------------------------------------------------------ synthetic data


@dataclass
class SynthConfig:
    """Knobs for the generated dataset; defaults are desk-scale."""

    n_images: int = 512
    image_size: int = 32
    anomaly_fraction: float = 0.1
    images_per_group: int = 4
    noise_scale: float = 0.04
    defect_brightness: float = 0.4
    body_parts: tuple = ("arm", "leg")

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images cannot be negative")
        if self.image_size < 2:
            raise ValueError("image_size must be at least 2")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValueError("anomaly_fraction must lie in [0, 1]")
        if self.images_per_group < 1:
            raise ValueError("images_per_group must be positive")


def _part_anchors(part_index, size):
    """Canonical blob layout for one body part.

    Each part gets a fixed anchor pose for its three Gaussians; images of
    that part are jittered copies, so normals cluster by part the way real
    anatomy clusters by view instead of every image being one-of-a-kind.
    """
    rng = np.random.default_rng(9000 + part_index)
    centers = rng.uniform(0.2 * size, 0.8 * size, size=(3, 2))
    sigmas = rng.uniform(size / 8, size / 4, size=3)
    amps = rng.uniform(0.35, 0.7, size=3)
    return centers, sigmas, amps


def _blob_texture(rng, size, noise_scale, anchors):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    centers, sigmas, amps = anchors
    # whole-field shift and per-image exposure are nuisance factors: they
    # dominate raw pixel distance, so a detector must learn invariance to
    # them rather than memorize pixel positions
    dy = rng.uniform(-0.12 * size, 0.12 * size)
    dx = rng.uniform(-0.12 * size, 0.12 * size)
    for (cy, cx), sigma, amp in zip(centers, sigmas, amps):
        cy += dy + rng.uniform(-0.08 * size, 0.08 * size)
        cx += dx + rng.uniform(-0.08 * size, 0.08 * size)
        sigma *= rng.uniform(0.9, 1.1)
        amp *= rng.uniform(0.9, 1.1)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    img *= rng.uniform(0.45, 0.95) / img.max()
    img += rng.normal(0.0, noise_scale, size=(size, size))
    return img


def _paint_defect(rng, img, brightness):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    if rng.random() < 0.5:
        # bright bar at a random angle
        angle = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.25, 0.45) * size
        half_width = rng.uniform(0.6, 1.2)
        u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        mask = (np.abs(u) <= half_len) & (np.abs(v) <= half_width)
    else:
        # bright ring
        radius = rng.uniform(size / 6, size / 3)
        thickness = rng.uniform(0.8, 1.4)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.abs(dist - radius) <= thickness
    img = img.copy()
    img[mask] += brightness
    return img


def synth_generate(cfg, seed):
    """Deterministic synthetic dataset: blob textures, some with defects.

    Anomalous images are packed into whole abnormal pseudo-patient groups
    for half the anomaly budget and sprinkled into mixed groups for the
    rest, so the grouped split sees all three group categories.
    """
    rng = np.random.default_rng(seed)
    per = cfg.images_per_group
    n_anom = round(cfg.n_images * cfg.anomaly_fraction)
    n_groups = -(-cfg.n_images // per)

    n_full_groups = n_anom // (2 * per)
    rest = n_anom - n_full_groups * per
    mixed_quota = max(1, per // 2)

    anomalous_flags = np.zeros(cfg.n_images, dtype=bool)
    remaining = rest
    for g in range(n_groups):
        start = g * per
        members = range(start, min(start + per, cfg.n_images))
        if g < n_full_groups:
            for i in members:
                anomalous_flags[i] = True
        elif remaining > 0:
            for i in list(members)[:mixed_quota]:
                if remaining > 0:
                    anomalous_flags[i] = True
                    remaining -= 1

    anchor_table = [_part_anchors(p, cfg.image_size) for p in range(len(cfg.body_parts))]
    samples = []
    for i in range(cfg.n_images):
        g = i // per
        img = _blob_texture(rng, cfg.image_size, cfg.noise_scale, anchor_table[g % len(cfg.body_parts)])
        label = "normal"
        if anomalous_flags[i]:
            img = _paint_defect(rng, img, cfg.defect_brightness)
            label = "anomalous"
        img = np.clip(img, 0.0, 1.0)
        patient = f"p{g // len(cfg.body_parts):03d}"
        part = cfg.body_parts[g % len(cfg.body_parts)]
        samples.append(
            Sample(image=img, label=label, patient_id=patient, body_part=part, ident=f"img{i:04d}")
        )
    return samples


# ------------------------------------------------------------------------ IO


def write_image(path, image):
    """Save a [0,1] float image as 8-bit grayscale; format from the suffix."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_mask(path, mask):
    write_image(path, np.asarray(mask, dtype=np.float64))


def read_mask(path):
    return read_image(path) > 0.5


def write_manifest(path, samples, image_paths):
    """Dataset manifest CSV: path, label, patient id, body part."""
    if len(samples) != len(image_paths):
        raise ValueError("one image path per sample required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "patient_id", "body_part"])
        for s, p in zip(samples, image_paths):
            writer.writerow([p, s.label, s.patient_id, s.body_part])


def read_manifest(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = {"path", "label", "patient_id", "body_part"}
    if rows and not required.issubset(rows[0]):
        raise ValueError(f"manifest needs columns {sorted(required)}")
    return rows


def materialize_dataset(samples, out_dir, fmt="png"):
    """Write images plus manifest.csv into out_dir; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for s in samples:
        name = f"{s.ident}.{fmt}"
        write_image(out / name, s.image)
        rel_paths.append(name)
    manifest = out / "manifest.csv"
    write_manifest(manifest, samples, rel_paths)
    return manifest


def load_dataset(manifest_path):
    """Read a manifest and its images back into Sample objects."""
    base = Path(manifest_path).parent
    samples = []
    for row in read_manifest(manifest_path):
        img = read_image(base / row["path"])
        samples.append(
            Sample(
                image=img,
                label=row["label"],
                patient_id=row["patient_id"],
                body_part=row["body_part"],
                ident=Path(row["path"]).stem,
            )
        )
    return samples

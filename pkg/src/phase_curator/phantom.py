"""Synthetic abdominal phantoms with phase-dependent contrast patterns.

Each volume is a piecewise-constant body ellipsoid carrying four
"vascular" regions whose brightness varies with the phase the way contrast
agent does: the aorta peaks in the arterial phase, the portal tree and
kidneys in the venous phase, and the ureters in the delay phase; the
non-contrast phase shows every region at its baseline. The catch-all phase
is a structurally different chest-like volume. Gaussian noise and a random
integer translation provide variation; everything derives from one
(seed, phase, index) stream so samples are reproducible voxel for voxel.

Series descriptions are sampled from the mining vocabulary, optionally
corrupted to a wrong class's vocabulary to emulate unreliable tags.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mining import ScanMeta
from .phases import CONTRAST_MEMBERS, PhaseLabel, PhaseTarget
from .rng import Rng, mix_seed

# per-phase mean intensity of each region (body tissue sits at 0.32);
# each contrast phase elevates only its defining structures so that the
# visual evidence for a phase is spatially concentrated
DEFAULT_INTENSITY = {
    PhaseLabel.NC: {"aorta": 0.42, "portal": 0.42, "kidneys": 0.45, "ureters": 0.40},
    PhaseLabel.A: {"aorta": 0.95, "portal": 0.42, "kidneys": 0.45, "ureters": 0.40},
    PhaseLabel.V: {"aorta": 0.52, "portal": 0.88, "kidneys": 0.85, "ureters": 0.44},
    PhaseLabel.D: {"aorta": 0.42, "portal": 0.42, "kidneys": 0.45, "ureters": 0.95},
}

REGIONS = ("aorta", "portal", "kidneys", "ureters")

# the region whose enhancement defines each contrast phase
PHASE_FOCUS = {
    PhaseLabel.A: ("aorta",),
    PhaseLabel.V: ("portal", "kidneys"),
    PhaseLabel.D: ("ureters",),
}

_BACKGROUND = 0.05
_BODY = 0.32
_SPINE = 0.98

DESCRIPTION_VOCAB = {
    "NC": ["PRECONTRAST", "Non-Contrast", "Non Contrast", "C-", "NoC"],
    "A": ["arterial", "Liver 3P C+ A", "A Phase", "Liver 4P A", "HAP", "30s"],
    "V": ["venous", "PVP", "Portal", "Liver 3P C+ V", "V phase", "70s"],
    "D": ["delay", "Liver 3P C+ D", "D-phase", "Liver 4P D", "180s"],
    "O": ["Topo", "MIP", "scout", "monitor", "reformatted", "chest"],
    "Contrast": ["ABD C+", "with contrast", "Body C+", "POSTCONTRAST", "AbdPel C"],
}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (16, 64, 64)
    noise_sigma: float = 0.10
    jitter_voxels: int = 2
    coarse_label_fraction: float = 0.2
    # probability that a series description is drawn from a wrong class
    corruption_rate: float = 0.1
    intensity: dict = field(default_factory=lambda: {p: dict(t) for p, t in DEFAULT_INTENSITY.items()})
    seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        if any(x < 8 for x in self.dims):
            raise ValueError(f"phantom dims must be at least 8 voxels per axis, got {self.dims}")
        if not 0.0 <= self.coarse_label_fraction <= 1.0:
            raise ValueError("coarse_label_fraction must lie in [0,1]")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0,1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.jitter_voxels < 0:
            raise ValueError("jitter_voxels must be >= 0")


@dataclass
class PhantomSample:
    volume: np.ndarray
    true_phase: PhaseLabel
    training_target: PhaseTarget
    meta: ScanMeta

    def __post_init__(self):
        if self.training_target.is_coarse and self.true_phase not in CONTRAST_MEMBERS:
            raise ValueError("coarse targets are only valid for A/V/D phases")


def _grid(dims):
    d, h, w = dims
    return np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )


def _ellipsoid(grid, center, radii) -> np.ndarray:
    gd, gh, gw = grid
    return (
        ((gd - center[0]) / radii[0]) ** 2
        + ((gh - center[1]) / radii[1]) ** 2
        + ((gw - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _capsule(grid, a, b, radius) -> np.ndarray:
    """Voxels within `radius` of the segment a-b."""
    gd, gh, gw = grid
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    denom = float(ab @ ab)
    pd, ph, pw = gd - a[0], gh - a[1], gw - a[2]
    if denom == 0.0:
        dist2 = pd**2 + ph**2 + pw**2
        return dist2 <= radius**2
    t = np.clip((pd * ab[0] + ph * ab[1] + pw * ab[2]) / denom, 0.0, 1.0)
    dist2 = (pd - t * ab[0]) ** 2 + (ph - t * ab[1]) ** 2 + (pw - t * ab[2]) ** 2
    return dist2 <= radius**2


def _abdomen_masks(dims, offset) -> dict[str, np.ndarray]:
    """Disjoint region masks inside the body, all shifted by `offset`."""
    d, h, w = dims
    od, oh, ow = offset
    grid = _grid(dims)

    def pt(fd, fh, fw):
        return (fd * (d - 1) + od, fh * (h - 1) + oh, fw * (w - 1) + ow)

    body = _ellipsoid(grid, pt(0.5, 0.5, 0.5), (0.48 * d, 0.42 * h, 0.46 * w))
    # bright bone anchor shared by every phase; pins the intensity range so
    # per-volume min-max scaling is phase-independent
    spine = _capsule(grid, pt(0.05, 0.80, 0.50), pt(0.95, 0.80, 0.50), 0.045 * w)
    aorta = _capsule(grid, pt(0.08, 0.38, 0.50), pt(0.92, 0.38, 0.50), 0.078 * w)
    # compact portal cluster: trunk plus two short branches, liver area
    trunk_a, trunk_b = pt(0.60, 0.52, 0.44), pt(0.36, 0.44, 0.34)
    portal = _capsule(grid, trunk_a, trunk_b, 0.055 * w)
    portal |= _capsule(grid, trunk_b, pt(0.24, 0.38, 0.26), 0.042 * w)
    portal |= _capsule(grid, trunk_b, pt(0.30, 0.36, 0.44), 0.042 * w)
    kidneys = _ellipsoid(grid, pt(0.60, 0.60, 0.32), (0.20 * d, 0.13 * h, 0.11 * w))
    kidneys |= _ellipsoid(grid, pt(0.60, 0.60, 0.68), (0.20 * d, 0.13 * h, 0.11 * w))
    # ureters run inferiorly and converge on a midline junction
    junction = pt(0.90, 0.56, 0.50)
    ureters = _capsule(grid, pt(0.60, 0.57, 0.40), junction, 0.055 * w)
    ureters |= _capsule(grid, pt(0.60, 0.57, 0.60), junction, 0.055 * w)
    ureters |= _ellipsoid(grid, junction, (0.14 * d, 0.08 * h, 0.11 * w))

    masks = {"body": body}
    taken = np.zeros(dims, dtype=bool)
    for name, mask in (
        ("spine", spine),
        ("aorta", aorta),
        ("portal", portal),
        ("kidneys", kidneys),
        ("ureters", ureters),
    ):
        mask = mask & body & ~taken
        taken |= mask
        masks[name] = mask
    return masks


def _chest_masks(dims, offset) -> dict[str, np.ndarray]:
    d, h, w = dims
    od, oh, ow = offset
    grid = _grid(dims)

    def pt(fd, fh, fw):
        return (fd * (d - 1) + od, fh * (h - 1) + oh, fw * (w - 1) + ow)

    body = _ellipsoid(grid, pt(0.5, 0.5, 0.5), (0.48 * d, 0.44 * h, 0.47 * w))
    lungs = _ellipsoid(grid, pt(0.45, 0.45, 0.28), (0.34 * d, 0.30 * h, 0.17 * w))
    lungs |= _ellipsoid(grid, pt(0.45, 0.45, 0.72), (0.34 * d, 0.30 * h, 0.17 * w))
    heart = _ellipsoid(grid, pt(0.55, 0.52, 0.50), (0.18 * d, 0.14 * h, 0.12 * w))
    spine = _capsule(grid, pt(0.05, 0.78, 0.50), pt(0.95, 0.78, 0.50), 0.035 * w)
    lungs &= body
    heart &= body & ~lungs
    spine &= body & ~lungs & ~heart
    return {"body": body, "lungs": lungs, "heart": heart, "spine": spine}


def region_masks(config: PhantomConfig, phase: PhaseLabel, index: int) -> dict[str, np.ndarray]:
    """The exact (jittered) masks used for sample (config.seed, phase, index)."""
    stream = Rng(mix_seed(config.seed, int(phase), index))
    offset = _draw_jitter(stream, config.jitter_voxels)
    if phase == PhaseLabel.O:
        return _chest_masks(config.dims, offset)
    return _abdomen_masks(config.dims, offset)


def _draw_jitter(stream: Rng, jitter: int) -> tuple[int, int, int]:
    if jitter == 0:
        return (0, 0, 0)
    return tuple(stream.randint(2 * jitter + 1) - jitter for _ in range(3))


def generate_sample(
    config: PhantomConfig,
    phase: PhaseLabel,
    index: int,
    coarse: bool = False,
) -> PhantomSample:
    """One deterministic sample for (config.seed, phase, index).

    Stream draw order is fixed: jitter, noise, description corruption coin,
    description pick. The volume therefore never depends on the labeling
    choices.
    """
    phase = PhaseLabel(phase)
    stream = Rng(mix_seed(config.seed, int(phase), index))
    offset = _draw_jitter(stream, config.jitter_voxels)

    vol = np.full(config.dims, _BACKGROUND, dtype=np.float64)
    if phase == PhaseLabel.O:
        masks = _chest_masks(config.dims, offset)
        vol[masks["body"]] = _BODY
        vol[masks["lungs"]] = 0.10
        vol[masks["heart"]] = 0.55
        vol[masks["spine"]] = _SPINE
    else:
        masks = _abdomen_masks(config.dims, offset)
        vol[masks["body"]] = _BODY
        vol[masks["spine"]] = _SPINE
        table = config.intensity[phase]
        for region in REGIONS:
            vol[masks[region]] = table[region]

    if config.noise_sigma > 0:
        vol += stream.normal_array(config.dims, 0.0, config.noise_sigma)
        vol = np.clip(vol, 0.0, 1.0)

    if coarse and phase not in CONTRAST_MEMBERS:
        raise ValueError(f"coarse target requested for non-contrast phase {phase.name}")
    target = PhaseTarget.contrast() if coarse else PhaseTarget.exact(phase)

    described_as = "Contrast" if coarse else phase.name
    if config.corruption_rate > 0 and stream.uniform() < config.corruption_rate:
        others = [c for c in DESCRIPTION_VOCAB if c != described_as]
        described_as = others[stream.randint(len(others))]
    vocab = DESCRIPTION_VOCAB[described_as]
    description = vocab[stream.randint(len(vocab))]

    meta = ScanMeta(
        study_uid=f"study-{phase.name}-{index:05d}",
        series_uid=f"series-{phase.name}-{index:05d}",
        patient_id=f"pat-{phase.name}-{index:05d}",
        study_description="CT Abdomen Liver Dynamic",
        series_description=description,
        protocol="LIVER DYNAMIC",
        slice_count=config.dims[0],
        slice_spacing_mm=2.5,
        axial=True,
        post_procedure=False,
    )
    return PhantomSample(
        volume=vol.astype(np.float32),
        true_phase=phase,
        training_target=target,
        meta=meta,
    )


def _split_counts(total: int, fractions: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment; sums exactly to total."""
    raw = [total * f for f in fractions]
    base = [int(x) for x in raw]
    short = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def generate_dataset(
    config: PhantomConfig,
    counts: dict[PhaseLabel, int],
    splits: tuple[float, float, float],
    out_dir: str | Path,
) -> dict:
    """Write volumes and per-split manifests under `out_dir`.

    Studies bundle scans of several phases for one synthetic patient;
    patients never cross splits. The coarse-label fraction applies to the
    train split's A/V/D scans only.

    Returns a summary dict with per-split scan and study counts.
    """
    from .volio import open_manifest_writer, write_rvol

    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {splits}")
    if any(c < 0 for c in counts.values()):
        raise ValueError("phase counts must be >= 0")

    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)

    phases = [PhaseLabel(p) for p in counts]
    per_split = {p: _split_counts(counts[p], splits) for p in phases}
    next_index = {p: 0 for p in phases}

    split_names = ("train", "val", "test")
    summary = {"splits": {}, "volumes": 0}
    for si, split in enumerate(split_names):
        compose_rng = Rng(mix_seed(config.seed, 101, si))
        coarse_rng = Rng(mix_seed(config.seed, 202, si))
        pools = {p: per_split[p][si] for p in phases}
        rows = []
        study_no = 0
        while any(pools.values()):
            study_no += 1
            study_uid = f"{split}-study-{study_no:05d}"
            patient_id = f"{split}-pat-{study_no:05d}"
            chosen = [p for p in phases if pools[p] > 0 and compose_rng.uniform() < 0.85]
            if not chosen:
                chosen = [max((p for p in phases if pools[p] > 0), key=lambda p: pools[p])]
            for phase in chosen:
                pools[phase] -= 1
                index = next_index[phase]
                next_index[phase] += 1
                coarse = (
                    split == "train"
                    and phase in CONTRAST_MEMBERS
                    and coarse_rng.uniform() < config.coarse_label_fraction
                )
                sample = generate_sample(config, phase, index, coarse=coarse)
                series_uid = f"{split}-series-{phase.name}-{index:05d}"
                sample.meta.study_uid = study_uid
                sample.meta.series_uid = series_uid
                sample.meta.patient_id = patient_id
                vol_path = out / "volumes" / f"{series_uid}.rvol"
                write_rvol(vol_path, sample.volume, (2.5, 0.8, 0.8))
                rows.append(
                    {
                        "study_uid": sample.meta.study_uid,
                        "series_uid": sample.meta.series_uid,
                        "patient_id": sample.meta.patient_id,
                        "study_description": sample.meta.study_description,
                        "series_description": sample.meta.series_description,
                        "protocol": sample.meta.protocol,
                        "slice_count": sample.meta.slice_count,
                        "slice_spacing_mm": sample.meta.slice_spacing_mm,
                        "axial": sample.meta.axial,
                        "post_procedure": sample.meta.post_procedure,
                        "volume_path": str(Path("volumes") / f"{series_uid}.rvol"),
                        "true_phase": sample.true_phase.name,
                        "training_target": sample.training_target.encode(),
                        "phantom_index": index,
                        "split": split,
                    }
                )
        with open_manifest_writer(out / f"{split}.jsonl", "manifest") as writer:
            for row in rows:
                writer.write(row)
        summary["splits"][split] = {"scans": len(rows), "studies": study_no}
        summary["volumes"] += len(rows)
    return summary

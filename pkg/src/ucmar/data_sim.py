"""Procedural CT phantoms, metal implants and metal-artifact synthesis.

Parallel-beam geometry throughout. Image pixel centres sit at integer offsets
from the grid centre ``(n - 1) / 2``; detector bins have unit (pixel) spacing
and are centred the same way.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, InvalidInput
from .raster_io import read_raster, write_raster

MIN_GRID = 32
MAX_IMPLANTS = 4
RAY_STEP = 0.5
RECON_CLAMP = (0.0, 1.5)


@dataclass(frozen=True)
class ScanGeometry:
    n_angles: int = 180
    n_detectors: int | None = None  # None: smallest count covering the grid diagonal
    beam_hardening_coeffs: tuple[float, float, float] = (0.6, 0.06, 0.0)
    photon_count: float = 1e5  # math.inf disables Poisson noise
    metal_attenuation: float = 4.0
    # Converts pixel-unit line integrals to optical depth for the noise model.
    attenuation_scale: float = 0.05

    def __post_init__(self):
        if self.n_angles < 2:
            raise InvalidArgument(f"n_angles must be >= 2, got {self.n_angles}")
        if self.n_detectors is not None and self.n_detectors < 1:
            raise InvalidArgument(f"n_detectors must be positive, got {self.n_detectors}")
        if len(self.beam_hardening_coeffs) != 3:
            raise InvalidArgument("beam_hardening_coeffs needs exactly three coefficients")
        if not self.photon_count > 0:
            raise InvalidArgument(f"photon_count must be > 0, got {self.photon_count}")
        if not self.attenuation_scale > 0:
            raise InvalidArgument("attenuation_scale must be > 0")
        object.__setattr__(self, "beam_hardening_coeffs", tuple(float(c) for c in self.beam_hardening_coeffs))

    @property
    def noise_enabled(self):
        return math.isfinite(self.photon_count)

    def detectors_for(self, grid_size):
        minimum = min_detectors(grid_size)
        n = minimum if self.n_detectors is None else self.n_detectors
        if n < minimum:
            raise InvalidArgument(f"n_detectors={n} < ceil(grid*sqrt(2))={minimum} for grid {grid_size}")
        return n

    def angles(self):
        return np.arange(self.n_angles) * (np.pi / self.n_angles)


def min_detectors(grid_size):
    return int(math.ceil(grid_size * math.sqrt(2)))


@dataclass
class Sinogram:
    values: np.ndarray  # (n_angles, n_detectors)
    angles: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class MetalMask:
    mask: np.ndarray  # bool (H, W)
    implant_count: int

    @property
    def area(self):
        return int(self.mask.sum())


@dataclass
class PairedSample:
    corrupted: np.ndarray
    clean: np.ndarray
    mask: MetalMask
    sample_id: str

    @property
    def grid_size(self):
        return self.clean.shape[0]


def check_image(image, name="image"):
    """Validate a CTImage raster and return it as a float array."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise InvalidArgument(f"{name} must be a square 2-D raster, got shape {image.shape}")
    if image.shape[0] < MIN_GRID:
        raise InvalidArgument(f"{name} grid {image.shape[0]} is below the minimum {MIN_GRID}")
    if not np.all(np.isfinite(image)):
        raise InvalidInput(f"{name} contains non-finite values")
    return image


def _pixel_grid(n):
    c = (n - 1) / 2.0
    coords = np.arange(n) - c
    return coords, c


def _ellipse(n, cx, cy, a, b, theta):
    coords, _ = _pixel_grid(n)
    x = coords[None, :]
    y = coords[:, None]
    ct, st = math.cos(theta), math.sin(theta)
    xr = (x - cx) * ct + (y - cy) * st
    yr = -(x - cx) * st + (y - cy) * ct
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def generate_phantom(seed, grid_size):
    """Random ellipse phantom with values in [0, 1] and a maximum of exactly 1.

    A large body ellipse is filled first; 2-7 smaller ellipses with distinct
    attenuations are painted over it, so every phantom has internal edges.
    """
    if grid_size < MIN_GRID:
        raise InvalidArgument(f"grid_size must be >= {MIN_GRID}, got {grid_size}")
    rng = np.random.default_rng(seed)
    n = grid_size
    half = n / 2.0
    img = np.zeros((n, n))

    n_inner = int(rng.integers(2, 8))
    values = np.concatenate(([rng.uniform(0.25, 0.55)], rng.choice(np.linspace(0.05, 1.0, 20), n_inner, replace=False)))

    a = half * rng.uniform(0.72, 0.88)
    b = half * rng.uniform(0.55, 0.75)
    theta = rng.uniform(-0.3, 0.3)
    body = _ellipse(n, rng.normal(0, 0.02 * n), rng.normal(0, 0.02 * n), a, b, theta)
    img[body] = values[0]

    for k in range(n_inner):
        r = math.sqrt(rng.uniform(0, 0.55))
        phi = rng.uniform(0, 2 * np.pi)
        cx, cy = r * a * math.cos(phi), r * b * math.sin(phi)
        ea = half * rng.uniform(0.06, 0.3)
        eb = ea * rng.uniform(0.4, 1.0)
        region = _ellipse(n, cx, cy, ea, eb, rng.uniform(0, np.pi)) & body
        img[region] = values[k + 1]

    return img / img.max()


def _capsule(n, x0, y0, x1, y1, radius):
    coords, _ = _pixel_grid(n)
    x = coords[None, :]
    y = coords[:, None]
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return (x - x0 - t * dx) ** 2 + (y - y0 - t * dy) ** 2 <= radius * radius


def _implant_blob(rng, n):
    scale = n / 64.0
    r = math.sqrt(rng.uniform(0, 1)) * 0.3 * n
    phi = rng.uniform(0, 2 * np.pi)
    cx, cy = r * math.cos(phi), r * math.sin(phi)
    if rng.uniform() < 0.5:
        a = rng.uniform(1.5, 5.0) * scale
        b = rng.uniform(1.5, 4.0) * scale
        return _ellipse(n, cx, cy, a, b, rng.uniform(0, np.pi))
    length = rng.uniform(3.0, 9.0) * scale
    angle = rng.uniform(0, np.pi)
    hx, hy = 0.5 * length * math.cos(angle), 0.5 * length * math.sin(angle)
    return _capsule(n, cx - hx, cy - hy, cx + hx, cy + hy, rng.uniform(1.2, 2.5) * scale)


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)


def generate_metal_mask(seed, grid_size, implant_count):
    """Place ``implant_count`` separated convex implants (ellipses or rods).

    Each implant is one 4-connected component and no two implants touch, even
    diagonally. Total area stays within 0.1%-10% of the image.
    """
    if not 1 <= implant_count <= MAX_IMPLANTS:
        raise InvalidArgument(f"implant_count must be in [1, {MAX_IMPLANTS}], got {implant_count}")
    if grid_size < MIN_GRID:
        raise InvalidArgument(f"grid_size must be >= {MIN_GRID}, got {grid_size}")
    rng = np.random.default_rng(seed)
    n = grid_size
    lo, hi = 0.001 * n * n, 0.10 * n * n
    for _ in range(1000):
        mask = np.zeros((n, n), dtype=bool)
        ok = True
        for _ in range(implant_count):
            blob = _implant_blob(rng, n)
            _, count = ndimage.label(blob, structure=_FOUR_CONNECTED)
            halo = ndimage.binary_dilation(mask, structure=_EIGHT_CONNECTED)
            if count != 1 or np.any(blob & halo):
                ok = False
                break
            mask |= blob
        if ok and lo <= mask.sum() <= hi:
            return MetalMask(mask=mask, implant_count=implant_count)
    raise InvalidArgument(f"could not place {implant_count} implants on a {n}x{n} grid")


def forward_project(image, geometry):
    """Parallel-beam Radon transform by bilinear sampling along each ray.

    Rays are sampled every ``RAY_STEP`` pixels over the full detector width;
    the line integral is the sample sum times the step.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise InvalidArgument(f"image must be square 2-D, got {image.shape}")
    n = image.shape[0]
    n_det = geometry.detectors_for(n)
    angles = geometry.angles()
    t = np.arange(n_det) - (n_det - 1) / 2.0
    half_len = (n_det - 1) / 2.0 + 1.0
    n_samples = int(math.ceil(2 * half_len / RAY_STEP)) + 1
    s = np.linspace(-half_len, half_len, n_samples)
    step = s[1] - s[0]
    centre = (n - 1) / 2.0

    values = np.empty((len(angles), n_det))
    for k, theta in enumerate(angles):
        ct, st = math.cos(theta), math.sin(theta)
        x = t[:, None] * ct - s[None, :] * st
        y = t[:, None] * st + s[None, :] * ct
        samples = ndimage.map_coordinates(
            image, [y.ravel() + centre, x.ravel() + centre], order=1, mode="constant", cval=0.0
        )
        values[k] = samples.reshape(n_det, n_samples).sum(axis=1) * step
    return Sinogram(values=values, angles=angles)


def ramp_filter(n_det):
    """Frequency response of the discrete Ram-Lak kernel, zero-padded to the next
    power of two at least ``2 * n_det``."""
    size = max(64, 1 << int(math.ceil(math.log2(2 * n_det))))
    n = np.concatenate((np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)))
    kernel = np.zeros(size)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * n) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def _normalize(recon, normalization):
    recon = np.clip(recon, *RECON_CLAMP)
    if normalization == "minmax":
        lo, hi = recon.min(), recon.max()
        if hi == lo:
            return np.zeros_like(recon)
        return (recon - lo) / (hi - lo)
    if normalization == "window":
        return np.clip(recon, 0.0, 1.0)
    if normalization == "none":
        return recon
    raise InvalidArgument(f"unknown normalization {normalization!r}")


def fbp_reconstruct(sinogram, geometry, grid_size, normalization="minmax"):
    """Ram-Lak filtered back-projection onto a ``grid_size`` square.

    The result is clamped to [0, 1.5] and then normalized: ``"minmax"`` rescales
    per image to [0, 1], ``"window"`` clips to the fixed [0, 1] tissue window,
    ``"none"`` keeps the clamped values.
    """
    values = sinogram.values if isinstance(sinogram, Sinogram) else np.asarray(sinogram)
    n_det = geometry.detectors_for(grid_size)
    if values.shape != (geometry.n_angles, n_det):
        raise InvalidArgument(
            f"sinogram shape {values.shape} does not match geometry ({geometry.n_angles}, {n_det})"
        )
    filt = ramp_filter(n_det)
    padded = np.zeros((values.shape[0], len(filt)))
    padded[:, :n_det] = values
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * filt, axis=1))[:, :n_det]

    coords, _ = _pixel_grid(grid_size)
    x = coords[None, :]
    y = coords[:, None]
    det_centre = (n_det - 1) / 2.0
    det_index = np.arange(n_det)
    recon = np.zeros((grid_size, grid_size))
    for theta, proj in zip(geometry.angles(), filtered):
        t = x * math.cos(theta) + y * math.sin(theta) + det_centre
        recon += np.interp(t.ravel(), det_index, proj, left=0.0, right=0.0).reshape(t.shape)
    recon *= np.pi / (2 * geometry.n_angles)
    return _normalize(recon, normalization)


def corrupt_sinogram(sinogram, metal_path, geometry, rng):
    """Beam hardening as a cubic in metal path length, then Poisson photon noise."""
    c1, c2, c3 = geometry.beam_hardening_coeffs
    m = metal_path
    p = sinogram + c1 * m + c2 * m**2 + c3 * m**3
    if geometry.noise_enabled:
        n0 = geometry.photon_count
        kappa = geometry.attenuation_scale
        counts = rng.poisson(n0 * np.exp(-kappa * p))
        counts = np.maximum(counts, 1)
        p = -np.log(counts / n0) / kappa
    return p


def synthesize_pair(clean, mask, geometry, seed, sample_id="sample", normalization="window"):
    """Insert metal into ``clean``, corrupt its sinogram and reconstruct.

    The returned sample's target is ``clean`` itself; the corrupted image is the
    reconstruction of the metal-corrupted sinogram.
    """
    clean = check_image(clean, "clean")
    metal = mask.mask if isinstance(mask, MetalMask) else np.asarray(mask, dtype=bool)
    if metal.shape != clean.shape:
        raise InvalidArgument(f"mask shape {metal.shape} != image shape {clean.shape}")
    n = clean.shape[0]
    implant = np.array(clean, dtype=np.float64)
    implant[metal] = geometry.metal_attenuation
    sino = forward_project(implant, geometry).values
    metal_path = forward_project(metal.astype(np.float64), geometry).values

    rng = np.random.default_rng(seed)
    corrupted_sino = corrupt_sinogram(sino, metal_path, geometry, rng)
    corrupted = fbp_reconstruct(corrupted_sino, geometry, n, normalization=normalization)
    if not isinstance(mask, MetalMask):
        mask = MetalMask(mask=metal, implant_count=int(ndimage.label(metal, _FOUR_CONNECTED)[1]))
    return PairedSample(
        corrupted=corrupted.astype(np.float32),
        clean=np.asarray(clean, dtype=np.float32),
        mask=mask,
        sample_id=sample_id,
    )


# --------------------------------------------------------------------------
# Dataset assembly and on-disk layout


@dataclass
class DatasetConfig:
    n_train: int = 200
    n_test: int = 50
    grid_size: int = 64
    seed: int = 0
    mask_bank_size: int = 90
    n_test_masks: int = 10
    implant_count_range: tuple[int, int] = (1, 3)
    normalization: str = "window"
    geometry: ScanGeometry = field(default_factory=ScanGeometry)

    def __post_init__(self):
        if isinstance(self.geometry, dict):
            self.geometry = ScanGeometry(**self.geometry)
        self.implant_count_range = tuple(self.implant_count_range)
        lo, hi = self.implant_count_range
        if not 1 <= lo <= hi <= MAX_IMPLANTS:
            raise InvalidArgument(f"implant_count_range {self.implant_count_range} outside [1, {MAX_IMPLANTS}]")
        if self.n_train < 1 or self.n_test < 0:
            raise InvalidArgument("n_train must be >= 1 and n_test >= 0")
        if not 1 <= self.n_test_masks < self.mask_bank_size:
            raise InvalidArgument("need 1 <= n_test_masks < mask_bank_size")
        if self.grid_size < MIN_GRID:
            raise InvalidArgument(f"grid_size must be >= {MIN_GRID}")
        if self.normalization not in ("minmax", "window", "none"):
            raise InvalidArgument(f"unknown normalization {self.normalization!r}")

    def to_dict(self):
        d = asdict(self)
        d["implant_count_range"] = list(self.implant_count_range)
        d["geometry"]["beam_hardening_coeffs"] = list(self.geometry.beam_hardening_coeffs)
        return d


@dataclass
class PairedDataset:
    config: DatasetConfig
    train: list[PairedSample]
    test: list[PairedSample]
    seeds: dict

    def by_id(self):
        return {s.sample_id: s for s in self.train + self.test}


def _derive_seeds(seed, tag, count):
    ss = np.random.SeedSequence([seed, zlib.crc32(tag.encode())])
    return [int(x) for x in ss.generate_state(count)] if count else []


def dataset_plan(config):
    """Seeds and mask assignments for every sample, without any synthesis.

    Train and test draw from disjoint phantom seeds and disjoint parts of the
    implant bank.
    """
    bank_seeds = _derive_seeds(config.seed, "mask-bank", config.mask_bank_size)
    count_rng = np.random.default_rng(_derive_seeds(config.seed, "implant-counts", 1)[0])
    lo, hi = config.implant_count_range
    implant_counts = [int(c) for c in count_rng.integers(lo, hi + 1, size=config.mask_bank_size)]
    n_train_masks = config.mask_bank_size - config.n_test_masks
    assign_rng = np.random.default_rng(_derive_seeds(config.seed, "assignment", 1)[0])

    plan = {"mask_bank": [{"seed": s, "implant_count": c} for s, c in zip(bank_seeds, implant_counts)], "samples": []}
    for split, count, pool in (
        ("train", config.n_train, range(n_train_masks)),
        ("test", config.n_test, range(n_train_masks, config.mask_bank_size)),
    ):
        phantom_seeds = _derive_seeds(config.seed, f"phantom-{split}", count)
        noise_seeds = _derive_seeds(config.seed, f"noise-{split}", count)
        mask_ids = assign_rng.choice(list(pool), size=count) if count else []
        for i in range(count):
            plan["samples"].append(
                {
                    "sample_id": f"{split}-{i:04d}",
                    "split": split,
                    "phantom_seed": phantom_seeds[i],
                    "noise_seed": noise_seeds[i],
                    "mask_index": int(mask_ids[i]),
                }
            )
    return plan


def build_dataset(config):
    plan = dataset_plan(config)
    n = config.grid_size
    masks = [generate_metal_mask(m["seed"], n, m["implant_count"]) for m in plan["mask_bank"]]
    splits = {"train": [], "test": []}
    for entry in plan["samples"]:
        clean = generate_phantom(entry["phantom_seed"], n)
        sample = synthesize_pair(
            clean,
            masks[entry["mask_index"]],
            config.geometry,
            entry["noise_seed"],
            sample_id=entry["sample_id"],
            normalization=config.normalization,
        )
        splits[entry["split"]].append(sample)
    return PairedDataset(config=config, train=splits["train"], test=splits["test"], seeds=plan)


MANIFEST = "manifest.json"


def save_dataset(dataset, root):
    root = Path(root)
    (root / "rasters").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in (("train", dataset.train), ("test", dataset.test)):
        for s in samples:
            for kind, arr in (("corrupted", s.corrupted), ("clean", s.clean), ("mask", s.mask.mask)):
                write_raster(root / "rasters" / f"{s.sample_id}.{kind}.ucmr", arr)
            entries.append({"sample_id": s.sample_id, "split": split, "implant_count": s.mask.implant_count})
    manifest = {
        "format": "ucmr-dataset",
        "version": 1,
        "config": dataset.config.to_dict(),
        "samples": entries,
        "seeds": dataset.seeds,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root / MANIFEST


def _config_from_dict(d):
    d = dict(d)
    geom = dict(d.pop("geometry"))
    geom["beam_hardening_coeffs"] = tuple(geom["beam_hardening_coeffs"])
    return DatasetConfig(geometry=ScanGeometry(**geom), **d)


def load_dataset(root):
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{root / MANIFEST}: not valid JSON ({exc})") from exc
    for key in ("config", "samples", "seeds"):
        if key not in manifest:
            raise InvalidInput(f"{root / MANIFEST}: missing field '{key}'")
    try:
        config = _config_from_dict(manifest["config"])
    except (TypeError, KeyError) as exc:
        raise InvalidInput(f"{root / MANIFEST}: bad field 'config' ({exc})") from exc
    splits = {"train": [], "test": []}
    for entry in manifest["samples"]:
        try:
            sid, split, count = entry["sample_id"], entry["split"], entry["implant_count"]
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"{root / MANIFEST}: bad field 'samples' ({exc})") from exc
        if split not in splits:
            raise InvalidInput(f"{root / MANIFEST}: bad field 'split' value {split!r}")
        base = root / "rasters" / sid
        splits[split].append(
            PairedSample(
                corrupted=read_raster(f"{base}.corrupted.ucmr"),
                clean=read_raster(f"{base}.clean.ucmr"),
                mask=MetalMask(mask=read_raster(f"{base}.mask.ucmr"), implant_count=count),
                sample_id=sid,
            )
        )
    return PairedDataset(config=config, train=splits["train"], test=splits["test"], seeds=manifest["seeds"])


def with_geometry(config, **changes):
    return replace(config, geometry=replace(config.geometry, **changes))

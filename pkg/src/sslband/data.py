"""Hyperspectral cubes on disk, dataset manifests, splits and synthetic data.

HSC1 cube layout, all little-endian::

    offset 0   4 bytes   magic b"HSC1"
    offset 4   5 x u32   H, W, C, subject_id, session_id
    offset 24  C x f32   band center wavelengths in nm, strictly increasing
    then       C*H*W f32 band planes, band-major, each plane row-major

Manifest layout: first line ``#HSCMANIFEST v1``, then one
``relative_path,subject_id,session_id`` record per line. Paths are relative to
the manifest's directory. Other lines starting with ``#`` are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

CUBE_MAGIC = b"HSC1"
MANIFEST_HEADER = "#HSCMANIFEST v1"
_HEADER = struct.Struct("<5I")


@dataclass
class HyperCube:
    bands: np.ndarray  # (C, H, W) float32
    wavelengths: np.ndarray  # (C,) nm
    subject_id: int
    session_id: int = 0

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32)
        if self.bands.ndim != 3:
            raise ConfigError(f"cube bands must be (C, H, W), got {self.bands.shape}")
        if self.wavelengths.shape != (self.bands.shape[0],):
            raise ConfigError("need exactly one wavelength per band")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise ConfigError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.bands)):
            raise ConfigError("cube contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bands.shape  # type: ignore[return-value]


def encode_cube(cube: HyperCube) -> bytes:
    c, h, w = cube.shape
    return b"".join(
        [
            CUBE_MAGIC,
            _HEADER.pack(h, w, c, cube.subject_id, cube.session_id),
            cube.wavelengths.astype("<f4").tobytes(),
            cube.bands.astype("<f4").tobytes(),
        ]
    )


def decode_cube(raw: bytes) -> HyperCube:
    if len(raw) < 4 or raw[:4] != CUBE_MAGIC:
        raise FormatError("bad HSC1 magic", 0)
    if len(raw) < 4 + _HEADER.size:
        raise FormatError("truncated HSC1 header", len(raw))
    h, w, c, subject, session = _HEADER.unpack_from(raw, 4)
    if min(h, w, c) == 0:
        raise FormatError("zero cube extent in header", 4)
    wl_at = 4 + _HEADER.size
    data_at = wl_at + 4 * c
    end = data_at + 4 * c * h * w
    if len(raw) < data_at:
        raise FormatError("truncated wavelength table", len(raw))
    wavelengths = np.frombuffer(raw, dtype="<f4", count=c, offset=wl_at)
    bad = np.flatnonzero(~(np.diff(wavelengths) > 0))
    if bad.size:
        raise FormatError("wavelengths not strictly increasing", wl_at + 4 * (int(bad[0]) + 1))
    if len(raw) < end:
        raise FormatError(f"truncated band payload, expected {end} bytes, got {len(raw)}", len(raw))
    if len(raw) > end:
        raise FormatError("trailing bytes after band payload", end)
    bands = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=data_at).reshape(c, h, w)
    nonfinite = np.flatnonzero(~np.isfinite(bands.ravel()))
    if nonfinite.size:
        raise FormatError("non-finite band value", data_at + 4 * int(nonfinite[0]))
    return HyperCube(bands.astype(np.float32), wavelengths.astype(np.float32), subject, session)


def write_cube(path: str | Path, cube: HyperCube):
    Path(path).write_bytes(encode_cube(cube))


def read_cube(path: str | Path) -> HyperCube:
    try:
        return decode_cube(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.detail}", exc.offset) from None


# ----------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    subject_id: int
    session_id: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def subjects(self) -> np.ndarray:
        return np.array([e.subject_id for e in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: DatasetManifest, path: str | Path):
    lines = [MANIFEST_HEADER] + [f"{e.path},{e.subject_id},{e.session_id}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc.strerror}") from None
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing '{MANIFEST_HEADER}' header", 0)
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            rel, subject, session = parts[0], int(parts[1]), int(parts[2])
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: expected 'relative_path,subject_id,session_id'") from None
        entries.append(ManifestEntry(rel, subject, session))
    return DatasetManifest(path.parent, entries)


@dataclass
class Dataset:
    """All cubes of a manifest stacked into one (N, C, H, W) array."""

    x: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray
    wavelengths: np.ndarray

    @property
    def num_bands(self) -> int:
        return self.x.shape[1]

    def select(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.subjects[idx], self.sessions[idx], self.wavelengths)

    def band_subset(self, bands) -> "Dataset":
        bands = list(bands)
        return Dataset(self.x[:, bands], self.subjects, self.sessions, self.wavelengths[bands])


def load_dataset(manifest: DatasetManifest) -> Dataset:
    if not manifest.entries:
        raise ConfigError("manifest has no entries")
    cubes = []
    for e in manifest.entries:
        cube = read_cube(manifest.root / e.path)
        if cube.subject_id != e.subject_id or cube.session_id != e.session_id:
            raise FormatError(f"{e.path}: header ids ({cube.subject_id},{cube.session_id}) disagree with manifest")
        if cubes and (cube.shape != cubes[0].shape or not np.array_equal(cube.wavelengths, cubes[0].wavelengths)):
            raise FormatError(f"{e.path}: band layout differs from {manifest.entries[0].path}")
        cubes.append(cube)
    return Dataset(
        np.stack([c.bands for c in cubes]),
        np.array([c.subject_id for c in cubes], dtype=np.int64),
        np.array([c.session_id for c in cubes], dtype=np.int64),
        cubes[0].wavelengths.astype(np.float64),
    )


# ----------------------------------------------------------------------------
# preprocessing and splits


def mean_spectrum(x: np.ndarray) -> np.ndarray:
    """Per-band mean over every pixel of every cube in ``x`` (N, C, H, W)."""
    return x.mean(axis=(0, 2, 3), dtype=np.float64)


def normalize(x: np.ndarray, spectrum: np.ndarray) -> np.ndarray:
    return (x - spectrum.reshape(1, -1, 1, 1)).astype(x.dtype)


def normalize_splits(train: np.ndarray, *others: np.ndarray):
    """Subtract the training set's mean spectrum from every split.

    Returns ``(spectrum, train_normalized, *others_normalized)``.
    """
    spectrum = mean_spectrum(train)
    return (spectrum, normalize(train, spectrum), *(normalize(o, spectrum) for o in others))


@dataclass
class SplitSpec:
    gallery_cubes_per_subject: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.gallery_cubes_per_subject < 1:
            raise ConfigError("gallery_cubes_per_subject must be >= 1")


def split_gallery_probe(subjects, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Random per-subject gallery/probe split of cube indices.

    ``subjects`` is a manifest, a dataset or an array of subject ids. Subjects
    are visited in ascending id order so the split only depends on ``spec``.
    """
    if isinstance(subjects, (DatasetManifest, Dataset)):
        subjects = subjects.subjects
    subjects = np.asarray(subjects)
    rng = np.random.default_rng(spec.seed)
    gallery, probe = [], []
    g = spec.gallery_cubes_per_subject
    for s in np.unique(subjects):
        idx = np.flatnonzero(subjects == s)
        if idx.size <= g:
            raise ConfigError(f"subject {s} has {idx.size} cubes; need more than {g} for a gallery/probe split")
        perm = rng.permutation(idx)
        gallery.extend(sorted(perm[:g]))
        probe.extend(sorted(perm[g:]))
    return np.array(gallery, dtype=np.int64), np.array(probe, dtype=np.int64)


# ----------------------------------------------------------------------------
# synthetic data


def default_wavelengths(num_bands: int, start: float = 400.0, step: float = 10.0) -> np.ndarray:
    return start + step * np.arange(num_bands, dtype=np.float64)


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    f -= f.mean()
    return f / f.std()


def _jitter(img: np.ndarray, shift, angle: float, scale: float) -> np.ndarray:
    h, w = img.shape
    ca, sa = np.cos(angle) / scale, np.sin(angle) / scale
    matrix = np.array([[ca, -sa], [sa, ca]])
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ (center + np.asarray(shift))
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")


def _random_pose(rng: np.random.Generator):
    return rng.uniform(-1.0, 1.0, 2), np.deg2rad(rng.uniform(-3.0, 3.0)), rng.uniform(0.97, 1.03)


def synthesize(
    num_subjects: int,
    cubes_per_subject: int,
    num_bands: int,
    height: int,
    width: int,
    informative_bands,
    snr: float = 10.0,
    seed: int = 0,
    wavelengths=None,
    shared_amplitude: tuple[float, float] = (0.5, 1.5),
) -> list[HyperCube]:
    """Cubes whose subject identity lives only on ``informative_bands``.

    Informative bands hold a per-subject spatial template scaled by a
    per-subject spectral signature. The other bands hold one periodic pattern
    shared by all subjects, scaled by a base spectrum drawn from
    ``shared_amplitude``. Each cube (session) jitters the template by a small
    random affine map, places the shared pattern at a random circular offset
    and adds white Gaussian noise with standard deviation ``band amplitude /
    snr`` (``snr=inf`` means no noise). A constant per-band radiance offset
    sits on top.
    """
    informative = sorted(set(int(b) for b in informative_bands))
    if not informative:
        raise ConfigError("informative_bands must not be empty")
    if informative[0] < 0 or informative[-1] >= num_bands:
        raise ConfigError(f"informative bands {informative} outside [0, {num_bands})")
    if num_subjects < 2 or cubes_per_subject < 1:
        raise ConfigError("need >= 2 subjects and >= 1 cube per subject")
    if not snr > 0:
        raise ConfigError("snr must be > 0")
    wl = default_wavelengths(num_bands) if wavelengths is None else np.asarray(wavelengths, dtype=np.float64)

    rng = np.random.default_rng(seed)
    sigma = max(height, width) / 10
    shared = _smooth_field(rng, height, width, sigma)
    base_spectrum = rng.uniform(*shared_amplitude, num_bands)
    base_spectrum[informative] = 0.0
    offsets = rng.uniform(1.0, 3.0, num_bands)
    templates = [_smooth_field(rng, height, width, sigma) for _ in range(num_subjects)]
    signatures = np.zeros((num_subjects, num_bands))
    signatures[:, informative] = rng.choice([-1.0, 1.0], (num_subjects, len(informative))) * rng.uniform(
        0.5, 1.5, (num_subjects, len(informative))
    )

    cubes = []
    for s in range(num_subjects):
        for k in range(cubes_per_subject):
            tp = _jitter(templates[s], *_random_pose(rng))
            # the periodic shared field lands at a random offset, so it carries no fixed spatial cue
            sh = np.roll(shared, (rng.integers(height), rng.integers(width)), axis=(0, 1))
            signal = base_spectrum[:, None, None] * sh + signatures[s][:, None, None] * tp
            # per-band amplitude of the unit-variance pattern; never mixes subjects into noise bands
            amplitude = np.abs(base_spectrum + signatures[s])
            noise_std = np.zeros(num_bands) if np.isinf(snr) else amplitude / snr
            cube = offsets[:, None, None] + signal + noise_std[:, None, None] * rng.standard_normal(signal.shape)
            cubes.append(HyperCube(cube, wl, subject_id=s, session_id=k))
    return cubes


def gen_synthetic(
    out_dir: str | Path,
    num_subjects: int,
    cubes_per_subject: int,
    num_bands: int,
    height: int,
    width: int,
    informative_bands,
    snr: float = 10.0,
    seed: int = 0,
) -> DatasetManifest:
    """Write a synthetic dataset as HSC1 cubes plus ``manifest.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "cubes").mkdir(parents=True, exist_ok=True)
    cubes = synthesize(num_subjects, cubes_per_subject, num_bands, height, width, informative_bands, snr, seed)
    manifest = DatasetManifest(out)
    for cube in cubes:
        rel = f"cubes/s{cube.subject_id:03d}_k{cube.session_id:02d}.hsc"
        write_cube(out / rel, cube)
        manifest.entries.append(ManifestEntry(rel, cube.subject_id, cube.session_id))
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def dataset_from_cubes(cubes: list[HyperCube]) -> Dataset:
    return Dataset(
        np.stack([c.bands for c in cubes]),
        np.array([c.subject_id for c in cubes], dtype=np.int64),
        np.array([c.session_id for c in cubes], dtype=np.int64),
        cubes[0].wavelengths.astype(np.float64),
    )

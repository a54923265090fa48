"""Procedural real/fake benchmark, PPM image I/O and JSONL manifests.

"Real" images are smooth band-limited Gaussian-field textures.  Each fake
generator starts from a freshly drawn real texture and adds one artifact
family:

=========  ===================================================
G-TRAIN    periodic grid overlay (period 8)
G-A        intensity quantization banding
G-B        spectral notch (annulus removed from the spectrum)
G-C        checkerboard from strided upsampling
G-D        blockwise DCT high-coefficient suppression (8x8)
G-E        additive fixed-pattern noise (one pattern per corpus)
G-F        ringing from an unsharp mask applied after a blur
=========  ===================================================

G-TRAIN is the only fake source in the training split; the test split holds
250 fakes per generator plus one shared pool of real images.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import fft as sfft
from scipy import ndimage, optimize

from capdet.labels import Label
from capdet.rng import Rng

REAL_TAG = "REAL"
TRAIN_FAKE = "G-TRAIN"
HELDOUT_FAKES = ("G-A", "G-B", "G-C", "G-D", "G-E", "G-F")
FAKE_GENERATORS = (TRAIN_FAKE,) + HELDOUT_FAKES
GENERATORS = (REAL_TAG,) + FAKE_GENERATORS
SPLITS = ("train", "test")


# ---------------------------------------------------------------- PPM


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class ImageDimensionError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


def to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def encode_ppm(image: np.ndarray) -> bytes:
    hwc = to_bytes(image)
    h, w, _ = hwc.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + hwc.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(buf: bytes, size: int | None = None) -> np.ndarray:
    if buf[:2] != b"P6":
        raise UnsupportedFormatError(f"unsupported format {buf[:2]!r}: only binary PPM (P6) is read")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise MalformedHeaderError("malformed header: expected width, height and maxval")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise MalformedHeaderError(f"malformed header token {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeaderError("malformed header: missing separator before payload")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"unsupported maxval {maxval}: only 8-bit PPM is read")
    if w < 1 or h < 1:
        raise MalformedHeaderError(f"malformed header: dimensions {w}x{h}")
    if size is not None and (w, h) != (size, size):
        raise ImageDimensionError(f"image is {w}x{h}, expected {size}x{size}")
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {need} bytes")
    hwc = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (hwc.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_image(path, size: int | None = None) -> np.ndarray:
    """Binary PPM -> float32 (3, H, W) in [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_ppm(buf, size)
    except ImageFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


# ---------------------------------------------------------------- textures


def _freq_radius(size: int) -> np.ndarray:
    f = np.fft.fftfreq(size)
    return np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)


def real_texture(rng: Rng, size: int = 32) -> np.ndarray:
    """Smooth band-limited colour texture, float64 (3, size, size) in [0, 1]."""
    radius = _freq_radius(size)
    cutoff = rng.uniform((), 0.06, 0.14)
    lowpass = np.exp(-0.5 * (radius / cutoff) ** 2)
    noise = rng.normal((4, size, size)).astype(np.float64)
    fields = np.real(np.fft.ifft2(np.fft.fft2(noise) * lowpass))
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    lum, chroma = fields[0], fields[1:]
    contrast = rng.uniform((), 0.09, 0.15)
    means = rng.uniform((3,), 0.35, 0.65)
    img = means[:, None, None] + contrast * (0.85 * lum[None] + 0.4 * chroma)
    return np.clip(img, 0.0, 1.0)


def _seams(img: np.ndarray, amp: float) -> np.ndarray:
    # bright rows/columns on the 8-pixel decoder lattice, phase locked to the origin
    out = img.copy()
    out[:, 0::8, :] += amp
    out[:, :, 0::8] += amp
    return out


def _grid(img: np.ndarray, rng: Rng) -> np.ndarray:
    return _seams(img, rng.uniform((), 0.05, 0.08))


def _banding(img: np.ndarray, rng: Rng) -> np.ndarray:
    levels = int(rng.integers(5, 8))
    return np.round(img * (levels - 1)) / (levels - 1)


def _notch(img: np.ndarray, rng: Rng) -> np.ndarray:
    size = img.shape[-1]
    radius = _freq_radius(size)
    centre = rng.uniform((), 0.05, 0.08)
    keep = np.abs(radius - centre) > 0.035
    keep[0, 0] = True
    out = np.real(np.fft.ifft2(np.fft.fft2(img) * keep))
    return out


def _checkerboard(img: np.ndarray, rng: Rng) -> np.ndarray:
    # kernel-3 stride-2 transposed conv: output pixels receive 4/2/2/1 kernel
    # taps depending on row/column parity
    size = img.shape[-1]
    small = img.reshape(3, size // 2, 2, size // 2, 2).mean(axis=(2, 4))
    up = small.repeat(2, axis=1).repeat(2, axis=2)
    even = 1.0 + (np.arange(size) % 2 == 0)
    overlap = even[:, None] * even[None, :]
    amp = rng.uniform((), 0.03, 0.045)
    return up + amp * (overlap - overlap.mean())


def _dct_blocks(img: np.ndarray, rng: Rng) -> np.ndarray:
    size = img.shape[-1]
    b = 8
    keep_sum = int(rng.integers(1, 3))
    u, v = np.indices((b, b))
    mask = (u + v) <= keep_sum
    blocks = img.reshape(3, size // b, b, size // b, b).transpose(0, 1, 3, 2, 4)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho") * mask
    rec = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    return rec.transpose(0, 1, 3, 2, 4).reshape(3, size, size)


def fixed_pattern(seed: int, size: int = 32) -> np.ndarray:
    return Rng(seed, "corpus/G-E/pattern").normal((3, size, size)).astype(np.float64)


def _fixed_noise(img: np.ndarray, pattern: np.ndarray, rng: Rng) -> np.ndarray:
    amp = rng.uniform((), 0.035, 0.05)
    return _seams(img + amp * pattern, rng.uniform((), 0.035, 0.055))


def _ringing(img: np.ndarray, rng: Rng) -> np.ndarray:
    blurred = ndimage.gaussian_filter(img, sigma=(0, 0.8, 0.8), mode="wrap")
    amount = rng.uniform((), 3.0, 4.0)
    soft = ndimage.gaussian_filter(blurred, sigma=(0, 1.2, 1.2), mode="wrap")
    return _seams(blurred + amount * (blurred - soft), rng.uniform((), 0.035, 0.055))


def render(generator: str, seed: int, split: str, index: int, size: int = 32, pattern=None) -> np.ndarray:
    """Deterministic image for one corpus cell; float64 (3, size, size)."""
    rng = Rng(seed, f"corpus/{split}/{generator}/{index}")
    img = real_texture(rng.stream("texture"), size)
    art = rng.stream("artifact")
    if generator == REAL_TAG:
        out = img
    elif generator == TRAIN_FAKE:
        out = _grid(img, art)
    elif generator == "G-A":
        out = _banding(img, art)
    elif generator == "G-B":
        out = _notch(img, art)
    elif generator == "G-C":
        out = _checkerboard(img, art)
    elif generator == "G-D":
        out = _dct_blocks(img, art)
    elif generator == "G-E":
        out = _fixed_noise(img, fixed_pattern(seed, size) if pattern is None else pattern, art)
    elif generator == "G-F":
        out = _ringing(img, art)
    else:
        raise ValueError(f"unknown generator {generator!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- designed statistics


def _gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).mean(axis=0)


def grid_score(img: np.ndarray) -> float:
    """Strength of a period-8 row/column line pattern."""
    g = _gray(img)
    score = 0.0
    for prof in (g.mean(axis=1), g.mean(axis=0)):
        d = prof - np.roll(prof, 1)
        folded = np.abs(d).reshape(-1, 8).mean(axis=0)
        score += folded.max() - np.median(folded)
    return float(score)


def zero_step_fraction(img: np.ndarray) -> float:
    q = to_bytes(img).astype(np.int16)
    return float((np.diff(q, axis=1) == 0).mean())


def notch_band_fraction(img: np.ndarray) -> float:
    g = _gray(img)
    spec = np.abs(np.fft.fft2(g - g.mean())) ** 2
    r = _freq_radius(g.shape[0])
    band = (r > 0.03) & (r < 0.11)
    return float(spec[band].sum() / (spec.sum() + 1e-12))


def checker_energy(img: np.ndarray) -> float:
    g = _gray(img)
    c = g[0::2, 0::2] - g[0::2, 1::2] - g[1::2, 0::2] + g[1::2, 1::2]
    return float(np.abs(c).mean())


def blockiness(img: np.ndarray) -> float:
    g = _gray(img)
    d = np.abs(np.diff(g, axis=1))
    boundary = d[:, 7::8].mean()
    inside = np.delete(d, np.s_[7::8], axis=1).mean()
    return float(boundary / (inside + 1e-6))


def pattern_correlation(img: np.ndarray, pattern: np.ndarray) -> float:
    x = np.asarray(img, dtype=np.float64)
    hp = x - ndimage.gaussian_filter(x, sigma=(0, 1.5, 1.5), mode="wrap")
    return float((hp * pattern).mean())


def laplacian_energy(img: np.ndarray) -> float:
    g = _gray(img)
    lap = -4 * g + np.roll(g, 1, 0) + np.roll(g, -1, 0) + np.roll(g, 1, 1) + np.roll(g, -1, 1)
    return float(np.mean(lap * lap))


def designed_statistic(generator: str, img: np.ndarray, seed: int | None = None) -> float:
    """The statistic each fake generator was designed to move."""
    if generator == TRAIN_FAKE:
        return grid_score(img)
    if generator == "G-A":
        return zero_step_fraction(img)
    if generator == "G-B":
        return notch_band_fraction(img)
    if generator == "G-C":
        return checker_energy(img)
    if generator == "G-D":
        return blockiness(img)
    if generator == "G-E":
        if seed is None:
            raise ValueError("G-E statistic needs the corpus seed")
        return pattern_correlation(img, fixed_pattern(seed, img.shape[-1]))
    if generator == "G-F":
        return laplacian_energy(img)
    raise ValueError(f"no designed statistic for {generator!r}")


# ---------------------------------------------------------------- manifest


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    path: str
    label: Label
    generator: str
    split: str

    def to_json(self) -> dict:
        return {"path": self.path, "label": self.label.text, "generator": self.generator, "split": self.split}

    def check(self) -> None:
        if self.generator not in GENERATORS:
            raise ManifestError(f"unknown generator {self.generator!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if (self.label is Label.REAL) != (self.generator == REAL_TAG):
            raise ManifestError(f"label {self.label.text} inconsistent with generator {self.generator}")
        if self.split == "train" and self.generator not in (REAL_TAG, TRAIN_FAKE):
            raise ManifestError(f"generator {self.generator} may only appear in the test split")


@dataclass
class Manifest:
    records: list[LabeledImage]
    seed: int | None = None
    root: Path = field(default_factory=Path)
    image_size: int = 32

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(Counter((r.split, r.generator) for r in self.records))

    def filter(self, split: str | None = None, generator: str | None = None) -> "Manifest":
        recs = [
            r
            for r in self.records
            if (split is None or r.split == split) and (generator is None or r.generator == generator)
        ]
        return Manifest(recs, self.seed, self.root, self.image_size)

    def resolve(self, record: LabeledImage) -> Path:
        return self.root / record.path

    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def load_images(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3, self.image_size, self.image_size), np.float32)
        return np.stack([read_image(self.resolve(r), self.image_size) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen: dict[str, tuple[str, str]] = {}
        for r in self.records:
            r.check()
            cell = (r.split, r.generator)
            if r.path in seen and seen[r.path] != cell:
                raise ManifestError(f"path {r.path} appears in two cells {seen[r.path]} and {cell}")
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path}")
            seen[r.path] = cell
        c = self.counts()
        if c.get(("train", REAL_TAG), 0) != c.get(("train", TRAIN_FAKE), 0):
            raise ManifestError("train split must hold equal counts of REAL and G-TRAIN")


_REQUIRED = {"path": str, "label": str, "generator": str, "split": str}


def parse_record(obj, lineno: int) -> LabeledImage:
    if not isinstance(obj, dict) or set(obj) != set(_REQUIRED):
        raise ManifestError(f"line {lineno}: record must have exactly keys {sorted(_REQUIRED)}")
    for k, typ in _REQUIRED.items():
        if not isinstance(obj[k], typ):
            raise ManifestError(f"line {lineno}: field {k!r} must be a string")
    if obj["label"] not in ("real", "fake"):
        raise ManifestError(f"line {lineno}: label must be 'real' or 'fake'")
    rec = LabeledImage(obj["path"], Label.from_text(obj["label"]), obj["generator"], obj["split"])
    try:
        rec.check()
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None
    return rec


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    path.write_text("".join(line + "\n" for line in lines))
    meta = {"seed": manifest.seed, "image_size": manifest.image_size, "counts": _counts_json(manifest)}
    path.with_name("corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _counts_json(manifest: Manifest) -> dict[str, int]:
    return {f"{s}/{g}": n for (s, g), n in sorted(manifest.counts().items())}


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(parse_record(obj, lineno))
    seed, size = None, 32
    meta_path = path.with_name("corpus.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        seed, size = meta.get("seed"), meta.get("image_size", 32)
    m = Manifest(records, seed, path.parent, size)
    m.validate()
    return m


# ---------------------------------------------------------------- corpus


def corpus_plan(n_train: int, n_test: int) -> list[tuple[str, str, int]]:
    """(split, generator, count) cells in generation order."""
    plan = [("train", REAL_TAG, n_train), ("train", TRAIN_FAKE, n_train), ("test", REAL_TAG, n_test)]
    plan += [("test", g, n_test) for g in FAKE_GENERATORS]
    return plan


def generate_corpus(out_dir, n_train: int = 1000, n_test: int = 250, seed: int = 42, image_size: int = 32) -> Manifest:
    if n_train < 1 or n_test < 1:
        raise ValueError("corpus counts must be >= 1")
    out = Path(out_dir)
    records = []
    pattern = fixed_pattern(seed, image_size)
    for split, gen, count in corpus_plan(n_train, n_test):
        cell = out / split / gen
        cell.mkdir(parents=True, exist_ok=True)
        label = Label.REAL if gen == REAL_TAG else Label.FAKE
        for i in range(count):
            rel = f"{split}/{gen}/{i:05d}.ppm"
            write_ppm(out / rel, render(gen, seed, split, i, image_size, pattern))
            records.append(LabeledImage(rel, label, gen, split))
    manifest = Manifest(records, seed, out, image_size)
    manifest.validate()
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def eval_subset(manifest: Manifest, generator: str) -> Manifest:
    """Fakes of ``generator`` followed by the shared REAL test pool."""
    fakes = manifest.filter("test", generator)
    reals = manifest.filter("test", REAL_TAG)
    return Manifest(fakes.records + reals.records, manifest.seed, manifest.root, manifest.image_size)


def learnability_floor(manifest: Manifest, generator: str = TRAIN_FAKE, split: str = "train") -> float:
    """Train accuracy of a 1-feature logistic regression (weight + bias)
    separating REAL from ``generator`` on its designed statistic."""
    sub = [r for r in manifest.records if r.split == split and r.generator in (REAL_TAG, generator)]
    x = np.array([designed_statistic(generator, read_image(manifest.resolve(r)), manifest.seed) for r in sub])
    y = np.array([int(r.label) for r in sub], dtype=np.float64)
    z = (x - x.mean()) / (x.std() + 1e-12)

    def nll(theta):
        t = theta[0] * z + theta[1]
        return float(np.mean(np.logaddexp(0.0, t) - y * t))

    theta = optimize.minimize(nll, np.zeros(2), method="BFGS").x
    pred = (theta[0] * z + theta[1]) >= 0
    return float((pred == y.astype(bool)).mean())


def iter_images(manifest: Manifest, records: Iterable[LabeledImage]):
    for r in records:
        yield r, read_image(manifest.resolve(r), manifest.image_size)

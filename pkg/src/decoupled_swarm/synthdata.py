"""Synthetic multi-center segmentation data.

A case is an ellipse "atrium" with one to three thin "veins" attached. Centers
differ in image appearance (feature skew: gamma/gain/bias/noise) and in how
their annotators draw labels (label skew: opening + random erosion, or
closing + random dilation). Local test labels only receive the deterministic
part of the skew; the generic test set keeps clean labels and unmodified
appearance.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

SKEW_KINDS = ("none", "open_erode", "close_dilate")


@dataclass
class SegSample:
    image: np.ndarray          # (1, H, W), z-scored
    label: np.ndarray          # (H, W) uint8 in {0, 1}
    clean_label: np.ndarray    # (H, W) uint8, before any annotation skew
    case_id: int = -1


@dataclass(frozen=True)
class Intensity:
    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class CenterSpec:
    center_id: int
    n_train: int = 12
    n_test: int = 4
    intensity: Intensity = field(default_factory=Intensity)
    label_skew: str = "none"
    r_range: tuple[int, int] = (1, 2)
    # radius of the deterministic open/close applied to train and local-test labels
    det_radius: int = 2
    # chance that a pixel inside the random erosion/dilation band actually flips
    flip_prob: float = 0.3

    def validate(self, height: int, width: int) -> None:
        if self.label_skew not in SKEW_KINDS:
            raise ValueError(f"center {self.center_id}: unknown label_skew {self.label_skew!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(f"center {self.center_id}: n_train and n_test must be >= 1")
        lo, hi = self.r_range
        rmax = min(height, width) // 8
        if not 1 <= lo <= hi <= rmax:
            raise ValueError(f"center {self.center_id}: r_range {self.r_range} outside [1, {rmax}]")
        if not 1 <= self.det_radius <= rmax:
            raise ValueError(f"center {self.center_id}: det_radius {self.det_radius} outside [1, {rmax}]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"center {self.center_id}: flip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class GeomConfig:
    height: int = 32
    width: int = 32
    semi_axis_range: tuple[float, float] = (5.0, 8.0)
    vein_length_range: tuple[float, float] = (4.0, 8.0)
    vein_half_width: float = 1.0
    # centre-to-centre distance of a vein pair where it leaves the body
    pair_separation: float = 3.5
    body_contrast: float = 0.5
    vein_contrast: float = 0.35
    field_amplitude: float = 0.1
    noise_std: float = 0.05
    blur_sigma: float = 0.7


def default_centers() -> list[CenterSpec]:
    """Four centers in the roles of A/B (appearance shift only), C (open+erode), D (close+dilate)."""
    return [
        CenterSpec(0, intensity=Intensity(gain=1.2, bias=0.1, gamma=0.7, noise_std=0.04)),
        CenterSpec(1, intensity=Intensity(gain=0.8, bias=-0.1, gamma=1.4, noise_std=0.08)),
        CenterSpec(2, intensity=Intensity(gain=1.0, bias=0.0, gamma=1.15, noise_std=0.05),
                   label_skew="open_erode"),
        CenterSpec(3, intensity=Intensity(gain=1.1, bias=0.05, gamma=0.85, noise_std=0.06),
                   label_skew="close_dilate"),
    ]


# ---------------------------------------------------------------------------
# morphology

def disk_offsets(r: int) -> list[tuple[int, int]]:
    if r < 1:
        raise ValueError(f"structuring element radius must be >= 1, got {r}")
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _shifted(mask: np.ndarray, dy: int, dx: int, fill: bool) -> np.ndarray:
    """``out[..., y, x] = mask[..., y + dy, x + dx]`` with ``fill`` outside the grid."""
    h, w = mask.shape[-2:]
    out = np.full(mask.shape, fill, dtype=bool)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[..., yd, xd] = mask[..., ys, xs]
    return out


def erode(label: np.ndarray, r: int, border: int = 0) -> np.ndarray:
    m = np.asarray(label).astype(bool)
    out = np.ones_like(m)
    for dy, dx in disk_offsets(r):
        out &= _shifted(m, dy, dx, bool(border))
    return out.astype(np.uint8)


def dilate(label: np.ndarray, r: int, border: int = 0) -> np.ndarray:
    m = np.asarray(label).astype(bool)
    out = np.zeros_like(m)
    for dy, dx in disk_offsets(r):
        out |= _shifted(m, dy, dx, bool(border))
    return out.astype(np.uint8)


def morphology(label: np.ndarray, op: str, r: int) -> np.ndarray:
    """Binary morphology with a disk of radius ``r`` over the last two axes.

    Pixels outside the grid count as background.
    """
    if op == "erode":
        return erode(label, r)
    if op == "dilate":
        return dilate(label, r)
    if op == "open":
        return dilate(erode(label, r), r)
    if op == "close":
        # the intermediate dilation may spill past the grid; keep it on a padded canvas
        m = np.asarray(label)
        pad = [(0, 0)] * (m.ndim - 2) + [(r, r), (r, r)]
        closed = erode(dilate(np.pad(m, pad), r), r)
        return np.ascontiguousarray(closed[..., r:-r, r:-r])
    raise ValueError(f"unknown morphology op {op!r}")


# ---------------------------------------------------------------------------
# generation

def _zscore(img: np.ndarray) -> np.ndarray:
    return (img - img.mean()) / img.std()


def _segment_distance(yy, xx, y0, x0, y1, x1):
    vy, vx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / (vy * vy + vx * vx), 0.0, 1.0)
    return np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))


def _draw_case(rng: np.random.Generator, g: GeomConfig):
    h, w = g.height, g.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy = h / 2 + rng.uniform(-2.5, 2.5)
    cx = w / 2 + rng.uniform(-2.5, 2.5)
    a, b = rng.uniform(*g.semi_axis_range, size=2)
    rot = rng.uniform(0, np.pi)
    u = (yy - cy) * np.cos(rot) + (xx - cx) * np.sin(rot)
    v = -(yy - cy) * np.sin(rot) + (xx - cx) * np.cos(rot)
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    n_veins = int(rng.integers(1, 4))
    base = rng.uniform(0, 2 * np.pi)
    angles = [base]
    if n_veins >= 2:
        angles.append(base + g.pair_separation / min(a, b))
    if n_veins == 3:
        angles.append(base + np.pi + rng.uniform(-0.4, 0.4))
    veins = np.zeros((h, w), dtype=bool)
    for ang in angles:
        # ray length from the centre to the ellipse boundary along ang
        du, dv = np.cos(ang) * np.cos(rot) + np.sin(ang) * np.sin(rot), \
            -np.cos(ang) * np.sin(rot) + np.sin(ang) * np.cos(rot)
        edge = 1.0 / np.sqrt((du / a) ** 2 + (dv / b) ** 2)
        length = edge + rng.uniform(*g.vein_length_range)
        y1, x1 = cy + length * np.cos(ang), cx + length * np.sin(ang)
        veins |= _segment_distance(yy, xx, cy, cx, y1, x1) <= g.vein_half_width
    protrusion = veins & ~body
    label = (body | veins).astype(np.uint8)

    tissue = g.body_contrast * body + g.vein_contrast * protrusion
    tissue = gaussian_filter(tissue.astype(float), g.blur_sigma)
    fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([h, w])
    phase = rng.uniform(0, 2 * np.pi, size=2)
    bg = g.field_amplitude * (np.cos(fy * yy + phase[0]) + np.sin(fx * xx + phase[1])) / 2
    img = 0.3 + tissue + bg + rng.normal(0.0, g.noise_std, size=(h, w))
    return label, protrusion, img


def generate_case(rng: np.random.Generator, geom: GeomConfig = GeomConfig(), case_id: int = -1) -> SegSample:
    for _ in range(10):
        label, protrusion, img = _draw_case(rng, geom)
        if label.any() and protrusion.any():
            return SegSample(_zscore(img)[None], label, label.copy(), case_id)
    raise RuntimeError("generate_case: degenerate geometry after 10 attempts")


def _random_band(mask: np.ndarray, grown: np.ndarray, rng, flip_prob: float) -> np.ndarray:
    """Pixels of the band ``grown ^ mask`` selected with probability ``flip_prob``."""
    band = (grown != mask)
    return band & (rng.random(mask.shape) < flip_prob)


def skew_label(clean: np.ndarray, spec: CenterSpec, rng: np.random.Generator, split: str) -> np.ndarray:
    if spec.label_skew == "none" or split == "generic":
        return clean.copy()
    det_op = "open" if spec.label_skew == "open_erode" else "close"
    base = morphology(clean, det_op, spec.det_radius)
    if split == "test":
        return base
    if split != "train":
        raise ValueError(f"unknown split {split!r}")
    radius = int(rng.integers(spec.r_range[0], spec.r_range[1] + 1))
    for r in (radius, spec.r_range[0]):
        if spec.label_skew == "open_erode":
            flip = _random_band(base, erode(base, r), rng, spec.flip_prob)
            out = (base.astype(bool) & ~flip).astype(np.uint8)
        else:
            flip = _random_band(base, dilate(base, r), rng, spec.flip_prob)
            out = (base.astype(bool) | flip).astype(np.uint8)
        if out.any():
            return out
    raise RuntimeError(f"center {spec.center_id}: label skew emptied the label")


def transform_intensity(image: np.ndarray, inten: Intensity, rng: np.random.Generator) -> np.ndarray:
    """Rescale to [0, 1], then gamma -> gain -> bias -> noise -> z-score."""
    x = image[0]
    x = (x - x.min()) / (x.max() - x.min())
    x = x ** inten.gamma
    x = inten.gain * x + inten.bias
    if inten.noise_std > 0:
        x = x + rng.normal(0.0, inten.noise_std, size=x.shape)
    return _zscore(x)[None]


def apply_center_skew(sample: SegSample, spec: CenterSpec, rng: np.random.Generator, split: str) -> SegSample:
    image = transform_intensity(sample.image, spec.intensity, rng)
    label = skew_label(sample.clean_label, spec, rng, split)
    return SegSample(image, label, sample.clean_label.copy(), sample.case_id)


def case_rng(seed: int, case_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, case_id, stream]))


@dataclass
class CenterData:
    spec: CenterSpec
    train: list[SegSample]
    test: list[SegSample]


@dataclass
class FederationData:
    centers: list[CenterData]
    generic: list[SegSample]
    geom: GeomConfig = GeomConfig()
    seed: int = 0


def build_federation_data(specs: list[CenterSpec], seed: int, n_generic: int = 24,
                          geom: GeomConfig = GeomConfig()) -> FederationData:
    ids = [s.center_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate center ids {ids}")
    if n_generic < 1:
        raise ValueError("n_generic must be >= 1")
    for s in specs:
        s.validate(geom.height, geom.width)
    case_id = 0
    centers = []
    for spec in sorted(specs, key=lambda s: s.center_id):
        splits = {}
        for split, n in (("train", spec.n_train), ("test", spec.n_test)):
            cases = []
            for _ in range(n):
                clean = generate_case(case_rng(seed, case_id), geom, case_id)
                cases.append(apply_center_skew(clean, spec, case_rng(seed, case_id, 1), split))
                case_id += 1
            splits[split] = cases
        centers.append(CenterData(spec, splits["train"], splits["test"]))
    generic = []
    for _ in range(n_generic):
        generic.append(generate_case(case_rng(seed, case_id), geom, case_id))
        case_id += 1
    return FederationData(centers, generic, geom, seed)


def augment(sample: SegSample, rng: np.random.Generator, noise_std: float = 0.05) -> SegSample:
    """Joint random 90-degree rotation and flip, plus Gaussian noise on the image."""
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))

    def geo(a):
        a = np.rot90(a, k, axes=(-2, -1))
        return np.flip(a, axis=-1) if flip else a

    image = geo(sample.image) + rng.normal(0.0, noise_std, size=sample.image.shape)
    return SegSample(np.ascontiguousarray(image), np.ascontiguousarray(geo(sample.label)),
                     np.ascontiguousarray(geo(sample.clean_label)), sample.case_id)


def onehot(label: np.ndarray, classes: int = 2) -> np.ndarray:
    """``(..., H, W)`` integer label -> ``(..., C, H, W)`` one-hot floats."""
    label = np.asarray(label)
    out = (label[..., None, :, :] == np.arange(classes)[:, None, None]).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# on-disk layout

def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = parts[4]
    return np.frombuffer(data[:w * h], dtype=np.uint8).reshape(h, w).copy()


def _quantize(img: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(img.min()), float(img.max())
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    return np.round((img - lo) / scale).astype(np.uint8), lo, scale


def _write_case(folder: Path, split: str, s: SegSample) -> dict:
    stem = f"case{s.case_id:05d}"
    q, lo, scale = _quantize(s.image[0])
    write_pgm(folder / f"{stem}_image.pgm", q)
    write_pgm(folder / f"{stem}_label.pgm", s.label * 255)
    write_pgm(folder / f"{stem}_clean.pgm", s.clean_label * 255)
    (folder / f"{stem}_image.f64").write_bytes(s.image[0].astype("<f8").tobytes())
    return {"case_id": s.case_id, "split": split, "stem": stem, "quant_offset": lo, "quant_scale": scale}


def _spec_dict(spec: CenterSpec) -> dict:
    d = asdict(spec)
    d["r_range"] = list(spec.r_range)
    return d


def save_dataset(data: FederationData, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "seed": data.seed, "geom": _jsonable(asdict(data.geom)), "centers": [], "generic": []}
    for c in data.centers:
        folder = root / f"center{c.spec.center_id}"
        folder.mkdir(exist_ok=True)
        cases = [_write_case(folder, "train", s) for s in c.train] + [_write_case(folder, "test", s) for s in c.test]
        manifest["centers"].append({"spec": _spec_dict(c.spec), "dir": folder.name, "cases": cases})
    folder = root / "generic"
    folder.mkdir(exist_ok=True)
    manifest["generic"] = [_write_case(folder, "generic", s) for s in data.generic]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root / "manifest.json"


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _read_case(folder: Path, entry: dict) -> SegSample:
    stem = entry["stem"]
    h, w = read_pgm(folder / f"{stem}_label.pgm").shape
    image = np.frombuffer((folder / f"{stem}_image.f64").read_bytes(), dtype="<f8").astype(np.float64)
    label = (read_pgm(folder / f"{stem}_label.pgm") > 127).astype(np.uint8)
    clean = (read_pgm(folder / f"{stem}_clean.pgm") > 127).astype(np.uint8)
    return SegSample(image.reshape(1, h, w), label, clean, entry["case_id"])


def load_dataset(root: str | Path) -> FederationData:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    centers = []
    for c in manifest["centers"]:
        sd = dict(c["spec"])
        sd["intensity"] = Intensity(**sd["intensity"])
        sd["r_range"] = tuple(sd["r_range"])
        spec = CenterSpec(**sd)
        folder = root / c["dir"]
        train = [_read_case(folder, e) for e in c["cases"] if e["split"] == "train"]
        test = [_read_case(folder, e) for e in c["cases"] if e["split"] == "test"]
        centers.append(CenterData(spec, train, test))
    g = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["geom"].items()}
    generic = [_read_case(root / "generic", e) for e in manifest["generic"]]
    return FederationData(centers, generic, GeomConfig(**g), manifest["seed"])

"""Composite construction, corpus manifests, synthetic corpora, and batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import load_mask, load_rgb, save_image, save_mask

AREA_RANGE = (0.05, 0.3)
MAX_PLACEMENT_TRIES = 32


class ManifestError(ValueError):
    pass


@dataclass
class CompositeSample:
    background: np.ndarray  # [3, H, W]
    composite: np.ndarray  # [3, H, W]
    mask: np.ndarray  # [1, H, W], binary

    @property
    def fg_fraction(self) -> float:
        return float(self.mask.mean())

    def mask_pyramid(self, levels: int = 4) -> list[np.ndarray]:
        out = [self.mask]
        for _ in range(levels - 1):
            m = out[-1]
            c, h, w = m.shape
            out.append(m.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4)))
        return out


@dataclass
class Skipped:
    reason: str


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a ``[C, H, W]`` array."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy[:, None]) + bot * fy[:, None]).astype(np.float32)


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return img[:, ys][:, :, xs]


def composite(
    fg_image: np.ndarray,
    fg_mask: np.ndarray,
    bg_image: np.ndarray,
    rng: np.random.Generator,
    image_size: int | None = None,
    area_range: tuple[float, float] = AREA_RANGE,
) -> CompositeSample | Skipped:
    """Paste the masked foreground onto the background at a random scale and position.

    The background is first resized to ``image_size`` (square) when given; the
    pasted mask covers a fraction of the canvas inside ``area_range``.
    """
    if fg_mask.sum() == 0:
        return Skipped("empty foreground mask")
    bg = bg_image if image_size is None else resize_bilinear(bg_image, image_size, image_size)
    _, H, W = bg.shape
    ys, xs = np.nonzero(fg_mask[0])
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    fg = fg_image[:, y0:y1, x0:x1]
    fm = fg_mask[:, y0:y1, x0:x1]
    bh, bw = fm.shape[1:]
    fill = float(fm.mean())
    lo, hi = area_range
    s_max = min(H / bh, W / bw)
    r_max = min(hi, fill * (bh * s_max) * (bw * s_max) / (H * W))
    if r_max < lo:
        return Skipped(f"foreground cannot reach area fraction {lo} (max {r_max:.4f})")
    for _ in range(MAX_PLACEMENT_TRIES):
        ratio = rng.uniform(lo, r_max)
        s = min(np.sqrt(ratio * H * W / (fill * bh * bw)), s_max)
        th = int(min(H, max(1, round(bh * s))))
        tw = int(min(W, max(1, round(bw * s))))
        mask_r = (resize_nearest(fm, th, tw) > 0.5).astype(np.float32)
        frac = mask_r.sum() / (H * W)
        top = int(rng.integers(0, H - th + 1))
        left = int(rng.integers(0, W - tw + 1))
        if not lo <= frac <= hi:
            continue
        fg_r = resize_bilinear(fg, th, tw)
        comp = bg.copy()
        mask = np.zeros((1, H, W), np.float32)
        mask[:, top : top + th, left : left + tw] = mask_r
        region = comp[:, top : top + th, left : left + tw]
        np.copyto(region, fg_r, where=mask_r.astype(bool))
        return CompositeSample(background=bg.astype(np.float32), composite=comp.astype(np.float32), mask=mask)
    return Skipped("no placement within the area range after retries")


# -- manifests -------------------------------------------------------------------


@dataclass
class CorpusManifest:
    foregrounds: list[tuple[Path, Path]] = field(default_factory=list)
    backgrounds: list[Path] = field(default_factory=list)
    split: str = "train"

    def write(self, path) -> None:
        path = Path(path)
        root = path.parent
        lines = [f"# composite corpus", f"SPLIT {self.split}"]
        lines += [f"FG {_rel(i, root)} {_rel(m, root)}" for i, m in self.foregrounds]
        lines += [f"BG {_rel(b, root)}" for b in self.backgrounds]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> CorpusManifest:
        path = Path(path)
        root = path.parent
        out = cls()
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "FG" and len(parts) == 3:
                out.foregrounds.append((root / parts[1], root / parts[2]))
            elif tag == "BG" and len(parts) == 2:
                out.backgrounds.append(root / parts[1])
            elif tag == "SPLIT" and len(parts) == 2 and parts[1] in ("train", "test"):
                out.split = parts[1]
            else:
                raise ManifestError(f"{path}:{lineno}: cannot parse {raw!r}")
        if not out.foregrounds or not out.backgrounds:
            raise ManifestError(f"{path}: manifest needs at least one FG and one BG entry")
        return out


def _rel(p: Path, root: Path) -> str:
    p = Path(p)
    try:
        return str(p.relative_to(root))
    except ValueError:
        return str(p)


class Corpus:
    """All images of a manifest, decoded into memory."""

    def __init__(self, foregrounds: list[tuple[np.ndarray, np.ndarray]], backgrounds: list[np.ndarray]):
        self.foregrounds = foregrounds
        self.backgrounds = backgrounds

    @classmethod
    def from_manifest(cls, manifest: CorpusManifest | str | Path) -> Corpus:
        if not isinstance(manifest, CorpusManifest):
            manifest = CorpusManifest.read(manifest)
        fgs = []
        for img_path, mask_path in manifest.foregrounds:
            img, mask = load_rgb(img_path), load_mask(mask_path)
            if img.shape[1:] != mask.shape[1:]:
                raise ManifestError(f"{img_path} and {mask_path} have different sizes")
            fgs.append((img, mask))
        return cls(fgs, [load_rgb(p) for p in manifest.backgrounds])

    def make_sample(self, fg_index: int, rng: np.random.Generator, image_size: int | None) -> CompositeSample | Skipped:
        bg = self.backgrounds[int(rng.integers(len(self.backgrounds)))]
        img, mask = self.foregrounds[fg_index]
        return composite(img, mask, bg, rng, image_size)


# -- synthetic corpus ------------------------------------------------------------------


def _synth_foreground(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Bright smooth-gradient ellipse with an exact mask on a neutral canvas."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    cy, cx = rng.uniform(0.35, 0.65, 2)
    ry, rx = rng.uniform(0.2, 0.35, 2)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    mask = ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.float32)
    c0 = rng.uniform(0.55, 1.0, 3)
    c1 = rng.uniform(0.55, 1.0, 3)
    t = np.clip((u / rx + 1) / 2, 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    img = np.where(mask[None] > 0, img, 0.5)
    return img.astype(np.float32), mask[None]


def _synth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Dark, warm, stroke-textured field."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    base = np.array([rng.uniform(0.3, 0.6), rng.uniform(0.08, 0.3), rng.uniform(0.05, 0.25)])
    img = np.repeat(base[:, None, None], size, axis=1).repeat(size, axis=2)
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(6, 20)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.08, 3)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img = img + amp[:, None, None] * wave[None]
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def synth_corpus(out_dir, n_fg: int = 16, n_bg: int = 16, size: int = 64, seed: int = 0) -> CorpusManifest:
    """Write procedural foregrounds, masks and backgrounds plus ``manifest.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = CorpusManifest()
    for i in range(n_fg):
        img, mask = _synth_foreground(rng, size)
        ip, mp = out / f"fg_{i:03d}.ppm", out / f"fg_{i:03d}_mask.pgm"
        save_image(img, ip)
        save_mask(mask, mp)
        manifest.foregrounds.append((ip, mp))
    for i in range(n_bg):
        bp = out / f"bg_{i:03d}.ppm"
        save_image(_synth_background(rng, size), bp)
        manifest.backgrounds.append(bp)
    manifest.write(out / "manifest.txt")
    return manifest


# -- batching -------------------------------------------------------------------------------


@dataclass
class Batch:
    composite: np.ndarray  # [B, 3, H, W]
    background: np.ndarray
    mask: np.ndarray  # [B, 1, H, W]


def collate(samples: list[CompositeSample]) -> Batch:
    return Batch(
        composite=np.stack([s.composite for s in samples]),
        background=np.stack([s.background for s in samples]),
        mask=np.stack([s.mask for s in samples]),
    )


class DataStream:
    """Seeded epoch-shuffled stream of composite batches with resumable state."""

    def __init__(self, corpus: Corpus, batch_size: int, image_size: int | None, seed: int):
        self.corpus = corpus
        self.batch_size = batch_size
        self.image_size = image_size
        self.rng = np.random.default_rng(seed)
        self.order: list[int] = []
        self.cursor = 0
        self.skipped: list[str] = []

    def _next_index(self) -> int:
        if self.cursor >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(len(self.corpus.foregrounds))]
            self.cursor = 0
        idx = self.order[self.cursor]
        self.cursor += 1
        return idx

    def next_batch(self) -> Batch:
        samples: list[CompositeSample] = []
        misses = 0
        while len(samples) < self.batch_size:
            result = self.corpus.make_sample(self._next_index(), self.rng, self.image_size)
            if isinstance(result, Skipped):
                self.skipped.append(result.reason)
                misses += 1
                if misses > 10 * self.batch_size + len(self.corpus.foregrounds):
                    raise RuntimeError(f"corpus yields no usable composites (last: {result.reason})")
                continue
            samples.append(result)
        return collate(samples)

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": list(self.order), "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = [int(i) for i in state["order"]]
        self.cursor = int(state["cursor"])

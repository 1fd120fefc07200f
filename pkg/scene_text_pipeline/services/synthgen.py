# services/synthgen.py

import hashlib
import logging
import math
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from ..config import RenderRanges, RenderSettings, dump_flat_config
from . import imaging
from .errors import (
    EmptyVocabulary,
    InvalidManifest,
    InvalidVocabulary,
    MissingGlyph,
    OutOfAlphabet,
    InvalidLabel,
    UnwritableOutput,
    UsageError,
    WordTooWide,
)
from .shared_config import (
    ATLAS_INDEX_NAME,
    BLANK_ID,
    DEFAULT_MAX_RENDER_WIDTH,
    LABELS_NAME,
    MANIFEST_NAME,
    RENDER_SNAPSHOT_NAME,
)

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


# ---------------- Vocabulary ----------------
@dataclass(frozen=True)
class Vocabulary:
    words: Tuple[str, ...]

    def __post_init__(self):
        for word in self.words:
            if not word:
                raise InvalidVocabulary("vocabulary contains an empty word")
            bad = [ch for ch in word if unicodedata.category(ch) == "Cc"]
            if bad:
                raise InvalidVocabulary(f"word {word!r} contains control character U+{ord(bad[0]):04X}")

    def __len__(self) -> int:
        return len(self.words)

    def codepoints(self) -> List[str]:
        return sorted({ch for word in self.words for ch in word})


def load_vocabulary(path: Path) -> Vocabulary:
    """One word per UTF-8 line; lines are trimmed, blanks dropped, text NFC-normalized."""
    try:
        raw = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise InvalidVocabulary(f"{path} is not valid UTF-8: {e}")
    except OSError as e:
        raise InvalidVocabulary(f"cannot read vocabulary {path}: {e}")

    words = [nfc(line.strip()) for line in raw.splitlines()]
    words = [w for w in words if w]
    if not words:
        raise EmptyVocabulary(f"{path} holds no usable words")
    logger.info(f"📥 Loaded {len(words)} words from {path}")
    return Vocabulary(tuple(words))


# ---------------- Label map ----------------
@dataclass(frozen=True)
class LabelMap:
    """Codepoint <-> class id. Id 0 is the CTC blank; codepoints take ids 1..L."""

    codepoints: Tuple[str, ...]
    _ids: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.codepoints)) != len(self.codepoints):
            raise InvalidLabel("label map codepoints must be unique")
        object.__setattr__(self, "_ids", {ch: i + 1 for i, ch in enumerate(self.codepoints)})

    @property
    def num_labels(self) -> int:
        return len(self.codepoints)

    @property
    def num_classes(self) -> int:
        return len(self.codepoints) + 1

    def __contains__(self, ch: str) -> bool:
        return ch in self._ids

    def id_of(self, ch: str) -> int:
        try:
            return self._ids[ch]
        except KeyError:
            raise OutOfAlphabet(ch)

    def as_dict(self) -> Dict[str, int]:
        return dict(self._ids)

    def encode(self, text: str) -> List[int]:
        text = nfc(text)
        ids = []
        for ch in text:
            if ch not in self._ids:
                raise OutOfAlphabet(ch, text)
            ids.append(self._ids[ch])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for i in ids:
            if not 1 <= i <= len(self.codepoints):
                raise InvalidLabel(f"label id {i} outside 1..{len(self.codepoints)}")
            chars.append(self.codepoints[i - 1])
        return "".join(chars)

    def missing(self, text: str) -> List[str]:
        return [ch for ch in nfc(text) if ch not in self._ids]

    def to_tsv(self) -> str:
        return "".join(f"{i + 1}\tU+{ord(ch):04X}\n" for i, ch in enumerate(self.codepoints))

    @classmethod
    def from_tsv(cls, text: str) -> "LabelMap":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                ident, code = line.split("\t")
                entries.append((int(ident), chr(int(code.strip()[2:], 16))))
            except ValueError:
                raise InvalidLabel(f"label map line {lineno} is malformed: {line!r}")
        entries.sort()
        if [i for i, _ in entries] != list(range(1, len(entries) + 1)):
            raise InvalidLabel("label map ids must run 1..L without gaps")
        return cls(tuple(ch for _, ch in entries))

    def to_compact(self) -> str:
        return ",".join(f"{ord(ch):04X}" for ch in self.codepoints)

    @classmethod
    def from_compact(cls, text: str) -> "LabelMap":
        return cls(tuple(chr(int(code, 16)) for code in text.split(",") if code))


def build_label_map(vocab: Vocabulary, punctuation: str = "") -> LabelMap:
    """Ids follow ascending codepoint order, starting at 1 (0 stays the blank)."""
    chars = set(vocab.codepoints()) | set(nfc(punctuation))
    labels = LabelMap(tuple(sorted(chars)))
    logger.info(f"🔤 Label map covers {labels.num_labels} codepoints (+ blank {BLANK_ID})")
    return labels


def save_label_map(labels: LabelMap, path: Path) -> None:
    Path(path).write_text(labels.to_tsv(), encoding="utf-8")


def load_label_map(path: Path) -> LabelMap:
    try:
        return LabelMap.from_tsv(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InvalidManifest(f"cannot read label map {path}: {e}")


# ---------------- Glyph atlas ----------------
@dataclass(frozen=True)
class Glyph:
    bitmap: np.ndarray  # alpha mask in [0, 1]
    advance: float
    voffset: int


@dataclass
class GlyphAtlas:
    glyphs: Dict[str, Glyph]

    def glyph(self, ch: str) -> Glyph:
        try:
            return self.glyphs[ch]
        except KeyError:
            raise MissingGlyph(ch)

    def check_coverage(self, chars: Iterable[str]) -> None:
        for ch in sorted(set(chars)):
            if ch not in self.glyphs:
                raise MissingGlyph(ch)


def load_glyph_atlas(directory: Path) -> GlyphAtlas:
    """Reads `atlas.idx` lines: U+XXXX <tab> bitmap.pgm <tab> advance <tab> voffset."""
    directory = Path(directory)
    index = directory / ATLAS_INDEX_NAME
    try:
        lines = index.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InvalidManifest(f"cannot read glyph atlas index {index}: {e}")

    glyphs: Dict[str, Glyph] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or not parts[0].upper().startswith("U+"):
            raise InvalidManifest(f"{index}:{lineno}: expected 'U+XXXX\\tbitmap\\tadvance\\tvoffset'")
        try:
            ch = chr(int(parts[0][2:], 16))
            advance, voffset = float(parts[2]), int(parts[3])
        except ValueError:
            raise InvalidManifest(f"{index}:{lineno}: bad codepoint or metrics")
        glyphs[ch] = Glyph(imaging.load_pgm(directory / parts[1]), advance, voffset)
    logger.info(f"🔡 Loaded glyph atlas with {len(glyphs)} glyphs from {directory}")
    return GlyphAtlas(glyphs)


def save_glyph_atlas(atlas: GlyphAtlas, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for ch in sorted(atlas.glyphs):
        g = atlas.glyphs[ch]
        name = f"u{ord(ch):04x}.pgm"
        imaging.save_pgm(g.bitmap, directory / name)
        lines.append(f"U+{ord(ch):04X}\t{name}\t{g.advance:g}\t{g.voffset}")
    (directory / ATLAS_INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_background_pool(directory: Optional[Path]) -> List[np.ndarray]:
    if directory is None:
        return []
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        logger.warning(f"⚠️ No PGM backgrounds in {directory}; using uniform backgrounds only")
    return [imaging.load_pgm(p) for p in paths]


# ---------------- Render parameters ----------------
@dataclass(frozen=True)
class RenderSpec:
    glyph_scale: float = 1.0
    stroke_intensity: float = 1.0
    stroke_thickness: int = 0
    kerning: float = 0.0
    skew_deg: float = 0.0
    rotation_deg: float = 0.0
    corner_jitter: Tuple[Tuple[float, float], ...] = ((0.0, 0.0),) * 4
    foreground_color: float = 0.0
    background_mode: str = "uniform"
    background_color: float = 1.0
    background_index: int = 0
    background_offset: Tuple[float, float] = (0.0, 0.0)
    blend_alpha: Tuple[float, float] = (1.0, 1.0)
    texture_strength: float = 0.0
    texture_index: int = 0
    texture_offset: Tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    noise_seed: int = 0


def sample_render_spec(
    rng: np.random.Generator,
    ranges: RenderRanges,
    pool_size: int = 0,
    background_crop_probability: float = 0.5,
    fg_texture_probability: float = 0.3,
) -> RenderSpec:
    """Draws every field uniformly from its range, in a fixed order, from `rng`."""

    def uniform(bounds):
        return float(rng.uniform(bounds[0], bounds[1]))

    glyph_scale = uniform(ranges.glyph_scale)
    stroke_intensity = uniform(ranges.stroke_intensity)
    stroke_thickness = int(rng.integers(ranges.stroke_thickness[0], ranges.stroke_thickness[1] + 1))
    kerning = uniform(ranges.kerning)
    skew = uniform(ranges.skew_deg)
    rotation = uniform(ranges.rotation_deg)
    jitter = tuple((uniform(ranges.corner_jitter), uniform(ranges.corner_jitter)) for _ in range(4))
    fg_color = uniform(ranges.foreground_color)
    bg_color = uniform(ranges.background_color)
    alpha = (uniform(ranges.blend_alpha), uniform(ranges.blend_alpha))
    noise_sigma = uniform(ranges.noise_sigma)
    noise_seed = int(rng.integers(0, 2**63 - 1))

    use_crop = float(rng.random()) < background_crop_probability
    bg_index = int(rng.integers(0, max(pool_size, 1)))
    bg_offset = (float(rng.random()), float(rng.random()))
    use_texture = float(rng.random()) < fg_texture_probability
    texture_strength = uniform(ranges.texture_strength)
    tex_index = int(rng.integers(0, max(pool_size, 1)))
    tex_offset = (float(rng.random()), float(rng.random()))

    has_pool = pool_size > 0
    return RenderSpec(
        glyph_scale=glyph_scale,
        stroke_intensity=stroke_intensity,
        stroke_thickness=stroke_thickness,
        kerning=kerning,
        skew_deg=skew,
        rotation_deg=rotation,
        corner_jitter=jitter,
        foreground_color=fg_color,
        background_mode="crop" if (has_pool and use_crop) else "uniform",
        background_color=bg_color,
        background_index=bg_index,
        background_offset=bg_offset,
        blend_alpha=alpha,
        texture_strength=texture_strength if (has_pool and use_texture) else 0.0,
        texture_index=tex_index,
        texture_offset=tex_offset,
        noise_sigma=noise_sigma,
        noise_seed=noise_seed,
    )


# ---------------- Rendering ----------------
def _layout(masks: Sequence[np.ndarray], glyphs: Sequence[Glyph], kerning: float, padding: int) -> np.ndarray:
    """Places glyph masks left to right on a transparent canvas."""
    top = min(g.voffset for g in glyphs)
    cursor = float(padding)
    placed = []
    for g, m in zip(glyphs, masks):
        x = int(math.floor(cursor + 0.5))
        y = padding + g.voffset - top
        placed.append((y, x, m))
        cursor += g.advance + kerning
    height = max(y + m.shape[0] for y, _, m in placed) + padding
    width = max(max(x + m.shape[1] for _, x, m in placed), int(math.ceil(cursor))) + padding
    canvas = np.zeros((height, width), dtype=np.float64)
    for y, x, m in placed:
        x = max(x, 0)
        h, w = m.shape
        np.maximum(canvas[y:y + h, x:x + w], m, out=canvas[y:y + h, x:x + w])
    return canvas


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _foreground_transform(spec: RenderSpec, height: int, width: int) -> Tuple[np.ndarray, int, int]:
    """Scale, skew and rotate about the canvas centre, then jitter the corners; returns (H, out_h, out_w)."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    theta = math.radians(spec.rotation_deg)
    rotate = np.array([[math.cos(theta), -math.sin(theta), 0.0], [math.sin(theta), math.cos(theta), 0.0], [0.0, 0.0, 1.0]])
    skew = np.array([[1.0, -math.tan(math.radians(spec.skew_deg)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale = np.diag([spec.glyph_scale, spec.glyph_scale, 1.0])
    h = _translation(cx, cy) @ rotate @ skew @ scale @ _translation(-cx, -cy)

    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])

    def project(m, pts):
        homog = np.hstack([pts, np.ones((len(pts), 1))]) @ m.T
        return homog[:, :2] / homog[:, 2:3]

    moved = project(h, corners)
    jitter = np.asarray(spec.corner_jitter, dtype=np.float64)
    if np.any(jitter != 0.0):
        h = imaging.homography_from_corners(moved, moved + jitter) @ h
        moved = project(h, corners)

    low = moved.min(axis=0)
    high = moved.max(axis=0)
    h = _translation(-low[0], -low[1]) @ h
    out_w = int(math.ceil(high[0] - low[0] - 1e-9)) + 1
    out_h = int(math.ceil(high[1] - low[1] - 1e-9)) + 1
    return h, out_h, out_w


def render_word(
    word: str,
    spec: RenderSpec,
    atlas: GlyphAtlas,
    bg_pool: Sequence[np.ndarray] = (),
    label_map: Optional[LabelMap] = None,
    padding: int = 4,
    max_width: int = DEFAULT_MAX_RENDER_WIDTH,
) -> Tuple[np.ndarray, List[int]]:
    """
    Renders one word: glyph layout -> stroke dilation -> scale/skew/rotation and corner
    jitter on the alpha mask -> optional foreground texture -> composite over a uniform
    or cropped background -> Gaussian noise, clamped to [0, 1].
    Returns the image and the word's label ids.
    """
    word = nfc(word)
    if not word:
        raise InvalidVocabulary("cannot render an empty word")
    glyphs = [atlas.glyph(ch) for ch in word]
    labels = label_map.encode(word) if label_map is not None else []

    masks = [g.bitmap for g in glyphs]
    if spec.stroke_thickness > 0:
        size = 2 * spec.stroke_thickness + 1
        masks = [ndimage.grey_dilation(m, size=(size, size)) for m in masks]
    canvas = _layout(masks, glyphs, spec.kerning, padding)

    h, out_h, out_w = _foreground_transform(spec, *canvas.shape)
    if out_w > max_width:
        raise WordTooWide(f"{word!r} renders {out_w}px wide, above the {max_width}px cap")
    mask = imaging.warp_perspective(canvas, h, fill=0.0, out_shape=(out_h, out_w))

    left, right = spec.blend_alpha
    profile = np.linspace(left, right, out_w) if out_w > 1 else np.array([left])
    alpha = np.clip(mask * spec.stroke_intensity * profile[None, :], 0.0, 1.0)

    foreground = np.full((out_h, out_w), spec.foreground_color)
    if spec.texture_strength > 0.0 and bg_pool:
        texture = imaging.crop_region(bg_pool[spec.texture_index % len(bg_pool)], out_h, out_w, *spec.texture_offset)
        foreground = foreground * (1.0 - spec.texture_strength + spec.texture_strength * texture)

    if spec.background_mode == "crop" and bg_pool:
        background = imaging.crop_region(bg_pool[spec.background_index % len(bg_pool)], out_h, out_w, *spec.background_offset)
    else:
        background = np.full((out_h, out_w), spec.background_color)

    image = imaging.alpha_composite(foreground, alpha, background)
    if spec.noise_sigma > 0.0:
        noise = np.random.default_rng(spec.noise_seed).normal(0.0, spec.noise_sigma, image.shape)
        image = np.clip(image + noise, 0.0, 1.0)
    return image, labels


# ---------------- Seeds ----------------
def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Per-item seed: splitmix64 of the base seed, then of (that + index)."""
    return splitmix64((splitmix64(base_seed & MASK64) + index) & MASK64)


# ---------------- Manifest ----------------
@dataclass
class DatasetManifest:
    root: Path
    records: List[Tuple[str, str]]
    base_seed: Optional[int] = None
    config_hash: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, index: int) -> Path:
        return self.root / self.records[index][0]

    @property
    def texts(self) -> List[str]:
        return [text for _, text in self.records]


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    lines = []
    if manifest.base_seed is not None:
        lines.append(f"# base_seed = {manifest.base_seed}")
    if manifest.config_hash is not None:
        lines.append(f"# config_hash = {manifest.config_hash}")
    lines.append(f"# count = {len(manifest.records)}")
    lines.extend(f"{rel}\t{text}" for rel, text in manifest.records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Path, verify_images: bool = True) -> DatasetManifest:
    """Reads `<relative-path>\\t<text>` records; a directory argument means its manifest.tsv."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_bytes().decode("utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise InvalidManifest(f"cannot read manifest {path}: {e}")

    header: Dict[str, str] = {}
    records: List[Tuple[str, str]] = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
            continue
        rel, sep, text = line.partition("\t")
        if not sep or not rel or not text:
            raise InvalidManifest(f"{path}:{lineno}: expected '<path>\\t<text>'")
        if nfc(text) != text:
            logger.warning(f"⚠️ {path}:{lineno}: ground truth was not NFC; normalizing")
            text = nfc(text)
        records.append((rel, text))

    manifest = DatasetManifest(
        root=path.parent,
        records=records,
        base_seed=int(header["base_seed"]) if "base_seed" in header else None,
        config_hash=header.get("config_hash"),
    )
    if verify_images:
        missing = [rel for rel, _ in records if not (manifest.root / rel).is_file()]
        if missing:
            raise InvalidManifest(f"{len(missing)} manifest images are missing, first: {missing[0]}")
    return manifest


# ---------------- Dataset generation ----------------
def render_snapshot(ranges: RenderRanges, settings: RenderSettings) -> str:
    values: Dict[str, object] = dict(ranges.model_dump())
    for key in ("punctuation", "max_width", "padding", "background_crop_probability", "fg_texture_probability"):
        values[key] = getattr(settings, key)
    return dump_flat_config(values)


class DatasetGenerator:
    """Renders manifest-indexed word datasets; image i depends only on (base_seed, i) and the inputs."""

    def __init__(
        self,
        vocab: Vocabulary,
        atlas: GlyphAtlas,
        label_map: LabelMap,
        ranges: RenderRanges,
        settings: RenderSettings = RenderSettings(),
        bg_pool: Sequence[np.ndarray] = (),
        threads: int = 1,
    ):
        self.vocab = vocab
        self.atlas = atlas
        self.label_map = label_map
        self.ranges = ranges
        self.settings = settings
        self.bg_pool = list(bg_pool)
        self.threads = max(1, threads)
        self.snapshot = render_snapshot(ranges, settings)
        self.config_hash = hashlib.sha256(self.snapshot.encode("utf-8")).hexdigest()[:16]

    def render_index(self, base_seed: int, index: int) -> Tuple[str, np.ndarray]:
        rng = np.random.default_rng(derive_seed(base_seed, index))
        word = self.vocab.words[int(rng.integers(0, len(self.vocab)))]
        spec = sample_render_spec(
            rng,
            self.ranges,
            pool_size=len(self.bg_pool),
            background_crop_probability=self.settings.background_crop_probability,
            fg_texture_probability=self.settings.fg_texture_probability,
        )
        image, _ = render_word(
            word, spec, self.atlas, self.bg_pool, self.label_map,
            padding=self.settings.padding, max_width=self.settings.max_width,
        )
        return word, image

    def generate_dataset(self, count: int, base_seed: int, out_dir: Path) -> DatasetManifest:
        if count < 1:
            raise UsageError(f"count must be >= 1, got {count}")
        self.atlas.check_coverage(self.vocab.codepoints())
        for ch in self.vocab.codepoints():
            self.label_map.id_of(ch)

        out_dir = Path(out_dir)
        image_dir = out_dir / "images"
        try:
            image_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UnwritableOutput(f"cannot create output directory {out_dir}: {e}")

        width = max(6, len(str(count - 1)))

        def work(index: int) -> Tuple[str, str]:
            word, image = self.render_index(base_seed, index)
            rel = f"images/{index:0{width}d}.pgm"
            imaging.save_pgm(image, out_dir / rel)
            return rel, word

        logger.info(f"🎨 Rendering {count} images (seed {base_seed}, {self.threads} thread(s)) into {out_dir}")
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            records = list(tqdm(pool.map(work, range(count)), total=count, desc="Rendering word images"))

        manifest = DatasetManifest(out_dir, records, base_seed=base_seed, config_hash=self.config_hash)
        try:
            write_manifest(manifest, out_dir / MANIFEST_NAME)
            save_label_map(self.label_map, out_dir / LABELS_NAME)
            (out_dir / RENDER_SNAPSHOT_NAME).write_text(self.snapshot, encoding="utf-8")
        except OSError as e:
            raise UnwritableOutput(f"cannot write dataset files into {out_dir}: {e}")
        logger.info(f"✅ Dataset written: {out_dir / MANIFEST_NAME}")
        return manifest


def generate_dataset(
    vocab: Vocabulary,
    count: int,
    base_seed: int,
    out_dir: Path,
    atlas: GlyphAtlas,
    ranges: RenderRanges = RenderRanges(),
    settings: RenderSettings = RenderSettings(),
    bg_pool: Sequence[np.ndarray] = (),
    threads: int = 1,
) -> DatasetManifest:
    labels = build_label_map(vocab, settings.punctuation)
    generator = DatasetGenerator(vocab, atlas, labels, ranges, settings, bg_pool, threads)
    return generator.generate_dataset(count, base_seed, out_dir)

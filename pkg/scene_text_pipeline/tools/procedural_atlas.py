# tools/procedural_atlas.py

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np

from ..services import imaging
from ..services.synthgen import Glyph, GlyphAtlas, save_glyph_atlas

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

GLYPH_HEIGHT = 20
STROKE = 2

# Stroke recipes on a 12 x 20 grid (x right, y down; x-height 8..16, ascenders from 2).
#   ("L", x1, y1, x2, y2)               line
#   ("C", cx, cy, r)                    circle outline
#   ("D", cx, cy, r)                    filled dot
#   ("A", cx, cy, rx, ry, start, end)   elliptic arc, degrees
GLYPH_STROKES: Dict[str, List[Tuple]] = {
    "a": [("C", 6, 12, 4), ("L", 10, 8, 10, 16)],
    "b": [("L", 2, 2, 2, 16), ("C", 6, 12, 4)],
    "c": [("A", 6, 12, 4, 4, 40, 320)],
    "d": [("L", 10, 2, 10, 16), ("C", 6, 12, 4)],
    "e": [("A", 6, 12, 4, 4, 30, 360), ("L", 2, 12, 10, 12)],
    "h": [("L", 2, 2, 2, 16), ("A", 6, 12, 4, 4, 180, 360), ("L", 10, 12, 10, 16)],
    "i": [("L", 6, 8, 6, 16), ("D", 6, 4, 1)],
    "k": [("L", 2, 2, 2, 16), ("L", 2, 12, 10, 8), ("L", 5, 11, 10, 16)],
    "l": [("L", 6, 2, 6, 16)],
    "n": [("L", 2, 8, 2, 16), ("A", 6, 12, 4, 4, 180, 360), ("L", 10, 12, 10, 16)],
    "o": [("C", 6, 12, 4)],
    "p": [("L", 2, 8, 2, 19), ("C", 6, 12, 4)],
    "r": [("L", 2, 8, 2, 16), ("A", 6, 12, 4, 4, 180, 300)],
    "t": [("L", 6, 3, 6, 16), ("L", 2, 8, 10, 8)],
    "v": [("L", 2, 8, 6, 16), ("L", 6, 16, 10, 8)],
    "x": [("L", 2, 8, 10, 16), ("L", 10, 8, 2, 16)],
    "z": [("L", 2, 8, 10, 8), ("L", 10, 8, 2, 16), ("L", 2, 16, 10, 16)],
    ".": [("D", 3, 15, 1)],
    ",": [("L", 3, 15, 2, 18)],
    "-": [("L", 2, 12, 8, 12)],
    ":": [("D", 3, 9, 1), ("D", 3, 15, 1)],
}

PUNCTUATION_WIDTH = 6
LETTER_WIDTH = 12


def draw_glyph(strokes: Sequence[Tuple], width: int, height: int = GLYPH_HEIGHT) -> np.ndarray:
    canvas = np.zeros((height, width), dtype=np.float32)
    for stroke in strokes:
        kind, *v = stroke
        if kind == "L":
            cv2.line(canvas, (v[0], v[1]), (v[2], v[3]), 1.0, STROKE, cv2.LINE_AA)
        elif kind == "C":
            cv2.circle(canvas, (v[0], v[1]), v[2], 1.0, STROKE, cv2.LINE_AA)
        elif kind == "D":
            cv2.circle(canvas, (v[0], v[1]), v[2], 1.0, -1, cv2.LINE_AA)
        elif kind == "A":
            cv2.ellipse(canvas, (v[0], v[1]), (v[2], v[3]), 0, v[4], v[5], 1.0, STROKE, cv2.LINE_AA)
        else:
            raise ValueError(f"unknown stroke kind {kind!r}")
    return np.clip(canvas.astype(np.float64), 0.0, 1.0)


def build_procedural_atlas(chars: str = "") -> GlyphAtlas:
    """Stroke-drawn glyphs for every recipe in GLYPH_STROKES (or just `chars`)."""
    selected = chars or "".join(GLYPH_STROKES)
    glyphs = {}
    for ch in selected:
        width = LETTER_WIDTH if ch.isalpha() else PUNCTUATION_WIDTH
        glyphs[ch] = Glyph(draw_glyph(GLYPH_STROKES[ch], width), advance=float(width + 1), voffset=0)
    return GlyphAtlas(glyphs)


def make_backgrounds(count: int, seed: int, shape: Tuple[int, int] = (64, 256)) -> List[np.ndarray]:
    """Smooth random grey textures in [0.5, 1]."""
    rng = np.random.default_rng(seed)
    backgrounds = []
    for _ in range(count):
        noise = rng.normal(size=shape).astype(np.float32)
        sigma = float(rng.uniform(2.0, 8.0))
        smooth = cv2.GaussianBlur(noise, (0, 0), sigma).astype(np.float64)
        backgrounds.append(0.5 + 0.5 * imaging.minmax_normalize(smooth))
    return backgrounds


def write_backgrounds(out_dir: Path, count: int, seed: int) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, bg in enumerate(make_backgrounds(count, seed)):
        path = out_dir / f"bg_{i:03d}.pgm"
        imaging.save_pgm(bg, path)
        paths.append(path)
    return paths


def make_vocabulary(letters: str, size: int, seed: int, min_len: int = 3, max_len: int = 6) -> List[str]:
    """`size` distinct random words over `letters`."""
    rng = np.random.default_rng(seed)
    words: List[str] = []
    seen = set()
    while len(words) < size:
        length = int(rng.integers(min_len, max_len + 1))
        word = "".join(letters[int(i)] for i in rng.integers(0, len(letters), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Write the procedural glyph atlas (and optionally a background pool).",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--out", type=Path, required=True, help="Atlas directory to create.")
    parser.add_argument("--backgrounds-out", type=Path, default=None)
    parser.add_argument("--backgrounds", type=int, default=8, help="Number of background textures.")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    atlas = build_procedural_atlas()
    save_glyph_atlas(atlas, args.out)
    logger.info(f"✅ Wrote {len(atlas.glyphs)} glyphs to {args.out}")
    if args.backgrounds_out is not None:
        write_backgrounds(args.backgrounds_out, args.backgrounds, args.seed)
        logger.info(f"✅ Wrote {args.backgrounds} backgrounds to {args.backgrounds_out}")

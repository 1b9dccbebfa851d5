"""A 5x7 bitmap alphabet for rendering synthetic label text.

Two alphabets are exposed: the main latin-style set, and an alternate
set built by rotating each glyph 180 degrees, which stands in for a
visually different writing system. Glyphs are addressed by integer id.
"""

from __future__ import annotations

import numpy as np

GLYPH_W = 5
GLYPH_H = 7

_RAW = {
    "A": [
        " XXX ",
        "X   X",
        "X   X",
        "XXXXX",
        "X   X",
        "X   X",
        "X   X",
    ],
    "B": [
        "XXXX ",
        "X   X",
        "X   X",
        "XXXX ",
        "X   X",
        "X   X",
        "XXXX ",
    ],
    "C": [
        " XXX ",
        "X   X",
        "X    ",
        "X    ",
        "X    ",
        "X   X",
        " XXX ",
    ],
    "D": [
        "XXXX ",
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        "XXXX ",
    ],
    "E": [
        "XXXXX",
        "X    ",
        "X    ",
        "XXXX ",
        "X    ",
        "X    ",
        "XXXXX",
    ],
    "F": [
        "XXXXX",
        "X    ",
        "X    ",
        "XXXX ",
        "X    ",
        "X    ",
        "X    ",
    ],
    "G": [
        " XXX ",
        "X   X",
        "X    ",
        "X XXX",
        "X   X",
        "X   X",
        " XXX ",
    ],
    "H": [
        "X   X",
        "X   X",
        "X   X",
        "XXXXX",
        "X   X",
        "X   X",
        "X   X",
    ],
    "J": [
        "XXXXX",
        "   X ",
        "   X ",
        "   X ",
        "   X ",
        "X  X ",
        " XX  ",
    ],
    "K": [
        "X   X",
        "X  X ",
        "X X  ",
        "XX   ",
        "X X  ",
        "X  X ",
        "X   X",
    ],
    "L": [
        "X    ",
        "X    ",
        "X    ",
        "X    ",
        "X    ",
        "X    ",
        "XXXXX",
    ],
    "M": [
        "X   X",
        "XX XX",
        "X X X",
        "X X X",
        "X   X",
        "X   X",
        "X   X",
    ],
    "N": [
        "X   X",
        "XX  X",
        "X X X",
        "X  XX",
        "X   X",
        "X   X",
        "X   X",
    ],
    "P": [
        "XXXX ",
        "X   X",
        "X   X",
        "XXXX ",
        "X    ",
        "X    ",
        "X    ",
    ],
    "R": [
        "XXXX ",
        "X   X",
        "X   X",
        "XXXX ",
        "X X  ",
        "X  X ",
        "X   X",
    ],
    "S": [
        " XXXX",
        "X    ",
        "X    ",
        " XXX ",
        "    X",
        "    X",
        "XXXX ",
    ],
    "T": [
        "XXXXX",
        "  X  ",
        "  X  ",
        "  X  ",
        "  X  ",
        "  X  ",
        "  X  ",
    ],
    "U": [
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        " XXX ",
    ],
    "V": [
        "X   X",
        "X   X",
        "X   X",
        "X   X",
        " X X ",
        " X X ",
        "  X  ",
    ],
    "Y": [
        "X   X",
        "X   X",
        " X X ",
        "  X  ",
        "  X  ",
        "  X  ",
        "  X  ",
    ],
    "2": [
        " XXX ",
        "X   X",
        "    X",
        "   X ",
        "  X  ",
        " X   ",
        "XXXXX",
    ],
    "3": [
        "XXXX ",
        "    X",
        "    X",
        " XXX ",
        "    X",
        "    X",
        "XXXX ",
    ],
    "4": [
        "X  X ",
        "X  X ",
        "X  X ",
        "XXXXX",
        "   X ",
        "   X ",
        "   X ",
    ],
    "7": [
        "XXXXX",
        "    X",
        "   X ",
        "  X  ",
        " X   ",
        " X   ",
        " X   ",
    ],
}

CHARS = sorted(_RAW)


def _to_bits(rows: list[str]) -> np.ndarray:
    grid = np.zeros((GLYPH_H, GLYPH_W), dtype=np.uint8)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            grid[y, x] = 1 if ch == "X" else 0
    return grid


MAIN = np.stack([_to_bits(_RAW[c]) for c in CHARS])
# 180 degree rotations stand in for a second writing system
ALT = np.stack([np.rot90(g, 2).copy() for g in MAIN])

N_GLYPHS = MAIN.shape[0]


def glyph(index: int, alphabet: str = "main") -> np.ndarray:
    """Bitmap for glyph ``index``; alphabet is 'main' or 'alt'."""
    table = MAIN if alphabet == "main" else ALT
    return table[index % N_GLYPHS]

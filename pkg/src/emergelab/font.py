"""Embedded 5x7 bitmap font for the uppercase Latin alphabet."""

import numpy as np

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

_ROWS = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
}

FONT_WIDTH = 5
FONT_HEIGHT = 7
SCALE = 2
GLYPH_WIDTH = FONT_WIDTH * SCALE    # 10 px
GLYPH_HEIGHT = FONT_HEIGHT * SCALE  # 14 px


def _build() -> np.ndarray:
    out = np.zeros((len(ALPHABET), FONT_HEIGHT, FONT_WIDTH), dtype=bool)
    for i, ch in enumerate(ALPHABET):
        rows = _ROWS[ch]
        assert len(rows) == FONT_HEIGHT and all(len(r) == FONT_WIDTH for r in rows), ch
        out[i] = [[c == "1" for c in r] for r in rows]
    return out


BITMAPS = _build()
"""Boolean array of shape (26, 7, 5); row 0 is the top of the glyph."""

GLYPHS = BITMAPS.repeat(SCALE, axis=1).repeat(SCALE, axis=2)
"""Scaled glyph masks of shape (26, 14, 10)."""

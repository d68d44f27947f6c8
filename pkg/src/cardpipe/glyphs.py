"""Built-in 5x7 bitmap digit font shared by the renderer and the template recognizer.

Every glyph touches all four edges of its 5x7 cell and is 8-connected, so the
inked bounding box of a rendered digit is exactly its cell.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

GLYPH_ROWS = 7
GLYPH_COLS = 5
GLYPH_ASPECT = 0.6

_FONT = {
    0: (".###.",
        "#...#",
        "#..##",
        "#.#.#",
        "##..#",
        "#...#",
        ".###."),
    1: ("..#..",
        ".##..",
        "#.#..",
        "..#..",
        "..#..",
        "..#..",
        "#####"),
    2: (".###.",
        "#...#",
        "....#",
        "...#.",
        "..#..",
        ".#...",
        "#####"),
    3: ("#####",
        "...#.",
        "..#..",
        "...#.",
        "....#",
        "#...#",
        ".###."),
    4: ("...#.",
        "..##.",
        ".#.#.",
        "#..#.",
        "#####",
        "...#.",
        "...#."),
    5: ("#####",
        "#....",
        "####.",
        "....#",
        "....#",
        "#...#",
        ".###."),
    6: ("..##.",
        ".#...",
        "#....",
        "####.",
        "#...#",
        "#...#",
        ".###."),
    7: ("#####",
        "....#",
        "...#.",
        "..#..",
        ".#...",
        ".#...",
        ".#..."),
    8: (".###.",
        "#...#",
        "#...#",
        ".###.",
        "#...#",
        "#...#",
        ".###."),
    9: (".###.",
        "#...#",
        "#...#",
        ".####",
        "....#",
        "...#.",
        ".##.."),
}

BITMAPS = {
    d: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
    for d, rows in _FONT.items()
}


def glyph_width(height: int) -> int:
    """Pixel width used for a glyph rendered at ``height`` pixels."""
    return max(1, int(round(GLYPH_ASPECT * height)))


@lru_cache(maxsize=4096)
def _scaled(digit: int, height: int, width: int) -> np.ndarray:
    rows = (np.arange(height) * GLYPH_ROWS) // height
    cols = (np.arange(width) * GLYPH_COLS) // width
    out = BITMAPS[digit][np.ix_(rows, cols)]
    out.setflags(write=False)
    return out


def glyph_mask(digit: int, height: int, width: int | None = None) -> np.ndarray:
    """Nearest-neighbour scaled boolean mask of ``digit`` (read-only)."""
    if digit not in BITMAPS:
        raise ValueError(f"no glyph for digit {digit!r}")
    if height < 1:
        raise ValueError("glyph height must be positive")
    if width is None:
        width = glyph_width(height)
    return _scaled(int(digit), int(height), int(width))


def templates(height: int, width: int | None = None) -> list[np.ndarray]:
    """All ten digit masks at one size, indexed by digit."""
    return [glyph_mask(d, height, width) for d in range(10)]

"""Twelve tissue-filter fixtures with hand-derived decisions.

Constant patches are unchanged by blurring, so their decision follows from the
HSV value of a single colour (checked against ``colorsys``).  The two speck
cases exercise blurring: a lone saturated pixel on white keeps only the
Gaussian peak weight 1/(2 pi sigma^2) ~ 0.04 of its saturation, below 0.07.
"""
import colorsys

import numpy as np

SIZE = 33


def constant(rgb):
    return np.broadcast_to(np.array(rgb, dtype=np.uint8), (SIZE, SIZE, 3)).copy()


def speck(width):
    patch = constant((255, 255, 255))
    c = SIZE // 2 - width // 2
    patch[c : c + width, c : c + width] = (255, 0, 0)
    return patch


# name, patch, expected decision
CASES = [
    ("white", constant((255, 255, 255)), False),
    ("black", constant((0, 0, 0)), False),
    ("gray", constant((128, 128, 128)), False),
    ("red", constant((255, 0, 0)), True),
    ("green", constant((0, 255, 0)), True),
    ("blue", constant((0, 0, 255)), True),
    ("sat-just-above", constant((255, 235, 235)), True),  # S = 20/255 = 0.078
    ("sat-just-below", constant((255, 240, 240)), False),  # S = 15/255 = 0.059
    ("val-just-above", constant((28, 0, 0)), True),  # V = 28/255 = 0.110
    ("val-just-below", constant((23, 0, 0)), False),  # V = 23/255 = 0.090
    ("single-speck", speck(1), False),
    ("blob", speck(5), True),
]
assert len(CASES) == 12


def hsv_rule(rgb, s_thr=0.07, v_thr=0.1):
    """Decision for a constant patch straight from the stdlib HSV conversion."""
    _, s, v = colorsys.rgb_to_hsv(*(int(c) / 255.0 for c in rgb))
    return s > s_thr and v > v_thr

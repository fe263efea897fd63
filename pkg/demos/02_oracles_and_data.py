"""Constraint oracles: geometry, JSON round trips, and infraction counting.

An oracle labels every point as inside (1) or outside (0) a support region.
This demo builds the checkerboard used throughout, composes a custom
constraint from primitives, and shows that uniform samples over the square
violate the checkerboard half the time.
"""

import numpy as np

from genneg import oracles
from genneg.oracles import (Checkerboard, Disc, HalfSpace, Intersection,
                            evaluate, infraction_rate, make_checkerboard_dataset)

board = Checkerboard()
probes = np.array([[0.5, 0.5], [0.5, 1.5], [-0.5, 0.5], [2.5, 0.0]])
print("checkerboard labels:", evaluate(board, probes), "for", probes.tolist())

# every spec round-trips through JSON with a "kind" discriminator
text = oracles.to_json(board)
print("serialized:", text.replace("\n", " "))
assert np.array_equal(evaluate(oracles.from_json(text), probes),
                      evaluate(board, probes))

# combinators build richer constraints from the primitives
ring = Intersection(parts=(Disc(center=(0.0, 0.0), radius=2.0),
                           Disc(center=(0.0, 0.0), radius=1.0, inside=False),
                           HalfSpace(normal=(0.0, 1.0), offset=0.0)))
print("upper half-annulus labels:",
      evaluate(ring, np.array([[0.0, 1.5], [0.0, 0.5], [0.0, -1.5]])))

# training data is uniform over the positive cells, so it never infracts
data = make_checkerboard_dataset(1000, seed=0)
print("dataset infraction:", infraction_rate(data, board))

# uniform samples over the full square hit the negative cells half the time
rng = np.random.default_rng(1)
uniform = rng.uniform(-2, 2, size=(100_000, 2))
rate, stderr = infraction_rate(uniform, board)
print(f"uniform-square infraction: {rate:.4f} +- {stderr:.4f} (want ~0.5)")

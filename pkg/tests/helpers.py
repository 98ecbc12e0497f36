"""
Graph and mask builders shared by the test modules.
"""
import numpy as np

from sparse_graph_attention.modules.sparse_core import csr_from_coo

FIGURE_SNIPPET = "x = a + 1"

SAMPLE_PROGRAM = """
a = 3
b = a * a + 1
if b < 10 {
    c = b - b
} else {
    c = 2 * a + a
}
while c > 0 {
    c = ( c - c ) * 1
}
"""


def path_mask(n: int):
    """Path graph 0-1-...-(n-1) with self-loops."""
    rows, cols = [], []
    for i in range(n):
        rows.append(i)
        cols.append(i)
        if i + 1 < n:
            rows += [i, i + 1]
            cols += [i + 1, i]
    return csr_from_coo(n, n, rows, cols, np.ones(len(rows)))


def random_symmetric_mask(n: int, rng, density: float = 0.3):
    upper = np.triu(rng.random((n, n)) < density, k=1)
    dense = upper | upper.T | np.eye(n, dtype=bool)
    r, c = np.nonzero(dense)
    return csr_from_coo(n, n, r, c, np.ones(r.size))

"""Pure numpy implementations of the hot kernels.

Same signatures and tie-breaking as the compiled module ``_ckernels``.
"""

import numpy as np

_CHUNK = 1 << 22  # max pair count materialised at once


def nearest(points, codebook):
    """Index of and squared distance to the nearest codeword, per point.

    Ties go to the lowest codeword index.  Squared distances are summed
    coordinate by coordinate in index order.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    n, d = points.shape
    m = codebook.shape[0]
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    rows = max(1, _CHUNK // max(m, 1))
    for start in range(0, n, rows):
        block = points[start : start + rows]
        diff = block[:, None, 0] - codebook[None, :, 0]
        acc = diff * diff
        for j in range(1, d):
            diff = block[:, None, j] - codebook[None, :, j]
            acc = acc + diff * diff
        arg = np.argmin(acc, axis=1)
        idx[start : start + rows] = arg
        best[start : start + rows] = acc[np.arange(acc.shape[0]), arg]
    return idx, best


def conv_gather(xi, filters, table):
    """out[p, k] = sum_q sum_c filters[k, q, c] * xi[table[p, q], c].

    ``table`` entries equal to -1 read zero (padding / non-integer index).
    """
    xi = np.asarray(xi, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    padded = np.vstack([xi, np.zeros((1, xi.shape[1]))])
    gathered = padded[table]  # (P, Q, C); index -1 hits the zero row
    return np.einsum("pqc,kqc->pk", gathered, filters)


def conv_gather_adjoint(upstream, filters, table, n_in):
    """Adjoint of :func:`conv_gather` in the input: returns d(out)/d(xi)^T g."""
    upstream = np.asarray(upstream, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    contrib = np.einsum("pk,kqc->pqc", upstream, filters)
    grad = np.zeros((n_in + 1, filters.shape[2]))
    np.add.at(grad, table, contrib)
    return grad[:n_in]


def conv_gather_filter_grad(upstream, xi, table):
    """Gradient of <upstream, conv_gather(xi, A, table)> with respect to A."""
    xi = np.asarray(xi, dtype=np.float64)
    padded = np.vstack([xi, np.zeros((1, xi.shape[1]))])
    gathered = padded[table]
    return np.einsum("pk,pqc->kqc", np.asarray(upstream, dtype=np.float64), gathered)


def _labelings(n, k, chunk):
    """All label vectors in lexicographic order with the first label fixed to 0."""
    total = k ** (n - 1) if n > 0 else 1
    powers = k ** np.arange(n - 2, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk), dtype=np.int64)
        labels = np.zeros((codes.shape[0], n), dtype=np.int64)
        if n > 1:
            labels[:, 1:] = (codes[:, None] // powers[None, :]) % k
        yield labels


def pollard(atoms, weights, k):
    """Exhaustive search over assignments of weighted atoms to k groups.

    Returns ``(quantizer_cost, coupling_cost, labels)`` where, over all
    assignments with centroids c_g as group barycentres,

    * quantizer_cost is the minimum of sum_i w_i min_g ||x_i - c_g||^2,
    * coupling_cost is the minimum of sum_i w_i ||x_i - c_{label(i)}||^2,

    and ``labels`` is the first assignment attaining ``coupling_cost``.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n, d = atoms.shape
    best_q = np.inf
    best_c = np.inf
    best_labels = np.zeros(n, dtype=np.int64)
    for labels in _labelings(n, k, 1 << 15):
        onehot = labels[:, :, None] == np.arange(k)[None, None, :]
        masses = np.einsum("bng,n->bg", onehot, weights)
        sums = np.einsum("bng,n,nd->bgd", onehot, weights, atoms)
        nonempty = masses > 0
        centroids = sums / np.where(nonempty, masses, 1.0)[:, :, None]
        dist = np.zeros(onehot.shape)
        for j in range(d):
            diff = atoms[None, :, None, j] - centroids[:, None, :, j]
            dist = dist + diff * diff
        own = np.take_along_axis(dist, labels[:, :, None], axis=2)[:, :, 0]
        coupling = own @ weights
        nearest_d = np.min(np.where(nonempty[:, None, :], dist, np.inf), axis=2)
        quant = nearest_d @ weights
        qi = int(np.argmin(quant))
        if quant[qi] < best_q:
            best_q = float(quant[qi])
        ci = int(np.argmin(coupling))
        if coupling[ci] < best_c:
            best_c = float(coupling[ci])
            best_labels = labels[ci].copy()
    return best_q, best_c, best_labels

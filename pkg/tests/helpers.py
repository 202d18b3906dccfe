import numpy as np

from specdraft.models import TabularModel


def unconditional(row):
    row = np.asarray(row, dtype=float)
    return TabularModel(len(row), 0, {(): row}, row)


def bigram(rows):
    """Order-1 model from a list of rows indexed by the previous token."""
    rows = [np.asarray(r, dtype=float) for r in rows]
    return TabularModel(len(rows[0]), 1, {(i,): r for i, r in enumerate(rows)}, rows[0])


def flat(tokens, parents, q=None, sampled=False, values=None):
    """Hand-built FlatDraft; ``q`` is the draft distribution at each token's parent."""
    from specdraft import tree as tr

    n = len(tokens)
    depths = []
    for par in parents:
        depths.append(1 if par == tr.ROOT else depths[par] + 1)
    dists = [np.asarray(d, dtype=float) for d in q] if q is not None else [None] * n
    conf = [float(d[t]) if d is not None else 1.0 for d, t in zip(dists, tokens)]
    if values is None:
        values = []
        for i, par in enumerate(parents):
            values.append(conf[i] * (1.0 if par == tr.ROOT else values[par]))
    return tr.FlatDraft(list(tokens), list(parents), dists, conf, list(values), depths, [1] * n,
                        tr.ancestor_mask(parents), sampled)

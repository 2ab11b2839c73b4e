"""Random op compositions for gradient checking.

Each family wires several engine ops into a scalar loss.  `build_minigraph`
returns the parameter tensors plus a forward closure that recomputes the
loss from the parameters' current contents, which is exactly what the
finite-difference oracle needs.
"""

import numpy as np

from docnmt import tensor as T


def _param(rng, *shape):
    return T.Tensor(rng.uniform(-0.9, 0.9, size=shape), requires_grad=True,
                    dtype=np.float64)


def _affine_tanh(rng):
    w = _param(rng, 4, 5)
    b = _param(rng, 5)
    x = T.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    c = T.Tensor(rng.normal(size=(3, 5)), dtype=np.float64)

    def forward():
        y = T.tanh(T.add(T.matmul(x, w), b))
        return T.mean(T.mul(y, c))

    return [w, b], forward


def _softmax_pipeline(rng):
    w = _param(rng, 3, 6)
    x = T.Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    c = T.Tensor(rng.normal(size=(2, 6)), dtype=np.float64)

    def forward():
        p = T.softmax(T.matmul(x, w), axis=-1)
        return T.reduce_sum(T.mul(p, c))

    return [w], forward


def _embedding_loss(rng):
    table = _param(rng, 7, 4)
    proj = _param(rng, 4, 3)
    ids = rng.integers(0, 7, size=5)
    targets = rng.integers(0, 3, size=5)
    mask = (rng.random(5) > 0.3).astype(np.float64)
    if mask.sum() == 0:
        mask[0] = 1.0

    def forward():
        h = T.embedding(table, ids)
        logits = T.matmul(h, proj)
        return T.cross_entropy(logits, targets, mask)

    return [table, proj], forward


def _lstm_chain(rng):
    hidden, emb = 3, 2
    w_x = _param(rng, emb, 4 * hidden)
    w_h = _param(rng, hidden, 4 * hidden)
    b = _param(rng, 4 * hidden)
    xs = [T.Tensor(rng.normal(size=(2, emb)), dtype=np.float64) for _ in range(3)]

    def forward():
        h = T.Tensor(np.zeros((2, hidden)), dtype=np.float64)
        c = T.Tensor(np.zeros((2, hidden)), dtype=np.float64)
        for x in xs:
            h, c = T.lstm_cell(x, h, c, w_x, w_h, b)
        return T.mean(h)

    return [w_x, w_h, b], forward


def _concat_slice(rng):
    a = _param(rng, 3, 4)
    b = _param(rng, 3, 2)
    c = T.Tensor(rng.normal(size=(3, 3)), dtype=np.float64)

    def forward():
        joined = T.concat([T.sigmoid(a), b], axis=1)
        piece = T.narrow(joined, 1, 1, 3)
        return T.mean(T.mul(piece, c))

    return [a, b], forward


def _attention_shaped(rng):
    keys = _param(rng, 4, 3)
    query = _param(rng, 1, 3)
    values = T.Tensor(rng.normal(size=(4, 2)), dtype=np.float64)

    def forward():
        scores = T.matmul(keys, T.swapaxes(query, 0, 1))
        weights = T.softmax(T.reshape(scores, (1, 4)), axis=-1)
        mix = T.matmul(weights, values)
        return T.reduce_sum(T.tanh(mix))

    return [keys, query], forward


FAMILIES = [_affine_tanh, _softmax_pipeline, _embedding_loss, _lstm_chain,
            _concat_slice, _attention_shaped]


def build_minigraph(seed):
    """Deterministic random mini-graph; returns (params, forward)."""
    rng = np.random.default_rng(seed)
    family = FAMILIES[seed % len(FAMILIES)]
    return family(rng)

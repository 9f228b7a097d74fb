import numpy as np

CLIP = 1e-7


def binary_crossentropy(p: np.ndarray, labels):
    """Mean BCE of probabilities ``p`` against 0/1 ``labels``.

    Returns (loss, gradient w.r.t. the logits feeding the sigmoid that produced
    ``p``).  Going straight to the logits keeps the gradient alive when the
    sigmoid saturates; only the reported loss uses clipped probabilities.
    """
    labels = np.broadcast_to(np.asarray(labels, dtype=p.dtype), p.shape)
    pc = np.clip(p.astype(np.float64), CLIP, 1 - CLIP)
    ll = labels * np.log(pc) + (1 - labels) * np.log1p(-pc)
    loss = -float(np.mean(ll))
    return loss, (p - labels) / p.dtype.type(p.size)

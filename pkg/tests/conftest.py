import numpy as np


def texture_dataset(rng, n=128, size=8, classes=4, noise=0.08):
    """Translation-invariant toy textures a conv+GAP classifier can learn.

    Classes: horizontal stripes, vertical stripes, checkerboard, flat gray.
    """
    assert classes <= 4
    x = np.zeros((n, 1, size, size), dtype=np.float32)
    y = rng.integers(0, classes, size=n)
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    for i, label in enumerate(y):
        phase = int(rng.integers(0, 2))
        if label == 0:
            pat = (rows + phase) % 2
        elif label == 1:
            pat = (cols + phase) % 2
        elif label == 2:
            pat = (rows + cols + phase) % 2
        else:
            pat = np.full((size, size), 0.5)
        x[i, 0] = pat * 0.8 + 0.1
    x += rng.normal(0, noise, x.shape).astype(np.float32)
    return np.clip(x, 0, 1), y.astype(np.int64)

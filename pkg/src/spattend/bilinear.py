"""Location-wise bilinear fusion of two feature grids and the sum-pooled baseline."""

from . import tensor as T
from .errors import AlignmentError, ConfigError, DimensionError

MAX_BILINEAR_DIM = 65536


def align_grids(a, b):
    """Crop the larger of two grids by its last row and column.

    Grids may differ by at most one cell per side (28x28 vs 27x27 for the
    D-Net/M-Net pair); anything larger means the streams are misconfigured.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    ka, kb = a.shape[1], b.shape[1]
    if a.shape[1] != a.shape[2] or b.shape[1] != b.shape[2]:
        raise DimensionError(f"grids must be square, got {a.shape[1:3]} and {b.shape[1:3]}")
    if abs(ka - kb) > 1:
        raise AlignmentError(
            f"grid sizes {ka} and {kb} differ by more than one; reconfigure the streams "
            "so their outputs are within one row/column")
    if ka > kb:
        a = T.getitem(a, (slice(None), slice(0, kb), slice(0, kb)))
    elif kb > ka:
        b = T.getitem(b, (slice(None), slice(0, ka), slice(0, ka)))
    return a, b


def check_dim(d_a, d_b, cap=MAX_BILINEAR_DIM):
    if d_a * d_b > cap:
        raise ConfigError(f"bilinear dimension {d_a}*{d_b}={d_a * d_b} exceeds cap {cap}",
                          key="bilinear.max_dim")
    return d_a * d_b


def bilinear(a, b):
    """Per-location outer product: ``out[n, u, v, i*D_B + j] = a[n,u,v,i] * b[n,u,v,j]``."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[:3] != b.shape[:3]:
        raise DimensionError(f"bilinear: unaligned grids {a.shape[:3]} vs {b.shape[:3]}")
    n, k1, k2, da = a.shape
    db = b.shape[3]
    check_dim(da, db)
    outer = T.mul(T.reshape(a, (n, k1, k2, da, 1)), T.reshape(b, (n, k1, k2, 1, db)))
    return T.reshape(outer, (n, k1, k2, da * db))


def normalize_signed_sqrt_l2(tube, axis=-1):
    """Signed square root followed by L2 normalization along ``axis``."""
    return T.l2_normalize(T.signed_sqrt(tube), axis=axis)


def sum_pool_baseline(tube):
    """Orderless sum over all grid locations: ``(N, K, K, D) -> (N, D)``."""
    return T.sum_(tube, axis=(1, 2))

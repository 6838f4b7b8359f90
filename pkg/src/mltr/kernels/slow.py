"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable, and
the behavioural reference the extension is tested against: every function
here must produce bit-identical output to its compiled twin. That holds
because both sides perform the same float64/float32 operations in the same
per-element order (additions in col2im/scatter_add follow the same index
order as np.add.at).
"""
import numpy as np


def im2col(x_pad: np.ndarray, k: int, s: int) -> np.ndarray:
    """Unfold a padded (C, Hp, Wp) image into a (C*k*k, L) column matrix.

    Row c*k*k' layout: channel-major, then kernel row, then kernel column.
    Column index enumerates output positions row-major.
    """
    c, hp, wp = x_pad.shape
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(1, 2))
    # windows: (C, Hp-k+1, Wp-k+1, k, k) -> stride and reorder to (C, k, k, ho, wo)
    windows = windows[:, ::s, ::s]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, s: int) -> np.ndarray:
    """Fold a (C*k*k, L) column matrix back into (C, Hp, Wp), summing overlaps.

    Accumulation order is row-major over (row, column), matching np.add.at.
    """
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    out = np.zeros(c * hp * wp, dtype=cols.dtype)
    oy = np.arange(ho) * s
    ox = np.arange(wo) * s
    base = (oy[:, None] * wp + ox[None, :]).ravel()  # (L,)
    for r in range(c * k * k):
        ch = r // (k * k)
        ki = (r // k) % k
        kj = r % k
        idx = ch * hp * wp + (ki * wp + kj) + base
        np.add.at(out, idx, cols[r])
    return out.reshape(c, hp, wp)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """In place: out[idx[i], :] += rows[i, :], duplicates accumulated in i order."""
    np.add.at(out, idx, rows)


def clahe_apply(img: np.ndarray, luts: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Bilinearly interpolate per-tile LUTs over a (H, W) uint8 image.

    luts is (tiles_y, tiles_x, 256) float64 holding integral LUT values.
    Tile centres sit at ((t + 0.5) * tile_size); edges replicate.
    """
    h, w = img.shape
    ty, tx = luts.shape[0], luts.shape[1]
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    fy = np.clip((ys + 0.5) / th - 0.5, 0.0, ty - 1.0)
    fx = np.clip((xs + 0.5) / tw - 0.5, 0.0, tx - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    wy = fy - y0
    wx = fx - x0
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)

    v = img.astype(np.int64)
    l00 = luts[y0[:, None], x0[None, :], v]
    l01 = luts[y0[:, None], x1[None, :], v]
    l10 = luts[y1[:, None], x0[None, :], v]
    l11 = luts[y1[:, None], x1[None, :], v]
    wyc = wy[:, None]
    wxc = wx[None, :]
    val = (1.0 - wyc) * ((1.0 - wxc) * l00 + wxc * l01) \
        + wyc * ((1.0 - wxc) * l10 + wxc * l11)
    out = np.floor(val + 0.5)
    return np.clip(out, 0.0, 255.0).astype(np.uint8)

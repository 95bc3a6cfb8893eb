# Frozen MS-SSIM reference values for the acceptance run.
#
# Float64 MS-SSIM in numpy/scipy following the TensorFlow definition:
# 11-tap Gaussian (sigma 1.5), valid filtering, K1 .01 K2 .03, cs at every
# scale and luminance*cs at the last, relu, symmetric pad then 2x2 average.
import numpy as np
from scipy.signal import convolve2d

W = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]

def kernel():
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)

def ssim_cs(x, y, peak):
    k = kernel()
    f = lambda a: convolve2d(a, k, mode="valid")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx, my = f(x), f(y)
    sxx, syy, sxy = f(x * x) - mx * mx, f(y * y) - my * my, f(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return (lum * cs).mean(), cs.mean()

def down(a):
    h, w = a.shape
    a = np.pad(a, ((0, h % 2), (0, w % 2)), mode="symmetric")
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])

def ms_ssim(a, b, peak=255.0):
    vals = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        v = 1.0
        for s, w in enumerate(W):
            ssim, cs = ssim_cs(x, y, peak)
            v *= max(ssim if s == len(W) - 1 else cs, 0.0) ** w
            x, y = down(x), down(y)
        vals.append(v)
    return float(np.mean(vals))

def img_a(h, w):
    y, x = np.mgrid[0:h, 0:w]
    return np.stack([((x * 7 + y * 13 + c * 50 + ((x * y) % 31) * 3) % 256) for c in range(3)], -1).astype(np.float64)

def img_b(a, k):
    h, w, _ = a.shape
    y, x = np.mgrid[0:h, 0:w]
    out = a.copy()
    for c in range(3):
        out[..., c] = np.clip(a[..., c] + k * ((((x * 3 + y * 5 + c) % 17) - 8)), 0, 255)
    return out

if __name__ == "__main__":
    try:
        import tensorflow as tf
    except ImportError:
        tf = None
    for (h, w, k) in [(256, 256, 1), (200, 237, 1), (200, 237, 3)]:
        a = img_a(h, w)
        b = img_b(a, k)
        row = [h, w, k, repr(ms_ssim(a, b))]
        if tf is not None:
            v = tf.image.ssim_multiscale(tf.constant(a[None]), tf.constant(b[None]), max_val=255.0)
            row.append(repr(float(v.numpy()[0])))
        print(*row)

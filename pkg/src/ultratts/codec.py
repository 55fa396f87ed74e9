"""EigenTongue-style PCA codec for ultrasound scanline frames.

Raw frames are ``(scanlines, samples)`` grids of 8-bit echo intensities
(64 x 842 for the Micro probe). They are shrunk to 64 x 128 with bicubic
interpolation, flattened, and projected onto the leading principal
components of the training frames.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFileError, InsufficientDataError, InvalidArgumentError

RAW_SHAPE = (64, 842)
REDUCED_SHAPE = (64, 128)

UPCA_MAGIC = b"UPCA"
UPCA_VERSION = 1


# ---------------------------------------------------------------------------
# bicubic resampling

def cubic_kernel(x, a=-0.5):
    """Keys cubic convolution kernel; ``a=-0.5`` gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=float))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(n_in, n_out, a=-0.5):
    """Dense ``(n_out, n_in)`` interpolation matrix along one axis.

    Output sample ``j`` sits at source coordinate ``(j + 0.5) * n_in / n_out - 0.5``
    (pixel centres aligned), and out-of-range taps are clamped to the edge.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(int)
    frac = pos - base
    W = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in (-1, 0, 1, 2):
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(W, (rows, idx), cubic_kernel(frac - k, a))
    return W


def resize_bicubic(frame, target_h, target_w):
    """Separable Catmull-Rom resize of a grid (or a stack of grids on the last two axes).

    Each output grid is clipped to the value range of its input grid.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.ndim < 2:
        raise InvalidArgumentError("resize_bicubic needs at least a 2-D grid")
    h, w = frame.shape[-2:]
    if min(h, w, target_h, target_w) < 2:
        raise InvalidArgumentError(
            f"grid dimensions must be >= 2, got {h}x{w} -> {target_h}x{target_w}")
    Wr = bicubic_weights(h, target_h)
    Wc = bicubic_weights(w, target_w)
    out = Wr @ frame @ Wc.T
    lo = frame.min(axis=(-2, -1), keepdims=True)
    hi = frame.max(axis=(-2, -1), keepdims=True)
    return np.clip(out, lo, hi)


# ---------------------------------------------------------------------------
# PCA

@dataclass(frozen=True, eq=False)
class PcaCodec:
    mean: np.ndarray                # (dim,)
    components: np.ndarray          # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray  # (n_components,), non-increasing
    total_variance: float           # trace of the training covariance
    shape: tuple = REDUCED_SHAPE

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def n_components(self):
        return self.components.shape[0]

    @property
    def explained_share(self):
        if self.total_variance <= 0:
            return np.ones_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    @property
    def discarded_variance(self):
        return max(self.total_variance - float(self.explained_variance.sum()), 0.0)

    def truncate(self, n):
        if not 1 <= n <= self.n_components:
            raise InvalidArgumentError(f"cannot keep {n} of {self.n_components} components")
        return PcaCodec(self.mean, self.components[:n], self.explained_variance[:n],
                        self.total_variance, self.shape)

    def encode(self, frames):
        return encode(self, frames)

    def decode(self, coeffs):
        return decode(self, coeffs)


def _flatten_frames(frames):
    if isinstance(frames, (list, tuple)):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) > 1:
            raise InvalidArgumentError(f"frames have mismatched shapes: {sorted(shapes)}")
    X = np.asarray(frames, dtype=float)
    if X.ndim == 3:
        return X.reshape(X.shape[0], -1), X.shape[1:]
    if X.ndim == 2:
        return X, None
    raise InvalidArgumentError("frames must be a (n, h, w) stack or an (n, dim) matrix")


def _fix_signs(V):
    # largest-magnitude entry of each component made positive
    idx = np.argmax(np.abs(V), axis=1)
    signs = np.sign(V[np.arange(V.shape[0]), idx])
    signs[signs == 0] = 1.0
    return V * signs[:, None]


def pca_spectrum(frames):
    """Full eigendecomposition of the sample covariance of ``frames``.

    Returns ``(mean, eigenvalues, components, total_variance)`` with eigenvalues
    in descending order. Only numerically non-zero directions are kept. When
    there are fewer frames than dimensions the Gram matrix is decomposed
    instead of the covariance; both routes are exact.
    """
    X, _ = _flatten_frames(frames)
    n, d = X.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 frames, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    total = float(np.einsum("ij,ij->", Xc, Xc)) / (n - 1)

    if n <= d:
        G = Xc @ Xc.T
        lam, U = np.linalg.eigh(G)
        lam, U = lam[::-1], U[:, ::-1]
        keep = lam > max(lam[0], 0.0) * 1e-10 if lam[0] > 0 else np.zeros_like(lam, bool)
        lam, U = lam[keep], U[:, keep]
        V = (Xc.T @ U) / np.sqrt(lam)
        V = V.T
        evals = lam / (n - 1)
    else:
        C = (Xc.T @ Xc) / (n - 1)
        evals, V = np.linalg.eigh(C)
        evals, V = evals[::-1], V[:, ::-1].T
        keep = evals > max(evals[0], 0.0) * 1e-10 if evals[0] > 0 else np.zeros_like(evals, bool)
        keep[n - 1:] = False
        evals, V = evals[keep], V[keep]
    return mean, evals, _fix_signs(V), total


def select_n_components(explained_variance, total_variance, variance_target, max_components=None):
    """Smallest count whose cumulative explained share reaches ``variance_target``."""
    if not 0 < variance_target <= 1:
        raise InvalidArgumentError(f"variance_target must be in (0, 1], got {variance_target}")
    ev = np.asarray(explained_variance, dtype=float)
    if ev.size == 0:
        raise InsufficientDataError("training frames have no variance")
    share = np.cumsum(ev) / total_variance
    hits = np.nonzero(share >= variance_target - 1e-12)[0]
    n = int(hits[0]) + 1 if hits.size else ev.size
    if max_components is not None:
        n = min(n, int(max_components))
    return max(n, 1)


def fit_pca(frames, variance_target=0.7, max_components=None):
    """Fit a codec keeping the fewest components that cover ``variance_target``.

    ``frames`` is an ``(n, h, w)`` stack of reduced frames or an ``(n, dim)``
    matrix of flattened ones.
    """
    X, shape = _flatten_frames(frames)
    if X.shape[0] < 2:
        raise InsufficientDataError(f"PCA needs at least 2 frames, got {X.shape[0]}")
    mean, evals, V, total = pca_spectrum(X)
    n = select_n_components(evals, total, variance_target, max_components)
    if shape is None:
        shape = (1, X.shape[1])
    return PcaCodec(mean, np.ascontiguousarray(V[:n]), evals[:n].copy(), total, tuple(shape))


def encode(codec, frames):
    """Project frame(s) onto the codec basis.

    Accepts one frame (2-D grid or flat vector) or a stack; returns coefficients
    with a matching leading axis.
    """
    F = np.asarray(frames, dtype=float)
    if F.ndim >= 2 and F.shape[-2:] == tuple(codec.shape):
        flat = F.reshape(F.shape[:-2] + (-1,))
    else:
        flat = F
    if flat.shape[-1] != codec.dim:
        raise InvalidArgumentError(
            f"frame dimension {flat.shape[-1]} does not match codec dimension {codec.dim}")
    return (flat - codec.mean) @ codec.components.T


def decode(codec, coeffs, as_grid=True):
    """Reconstruct frame(s) from coefficients; no clipping is applied."""
    c = np.asarray(coeffs, dtype=float)
    if c.shape[-1] != codec.n_components:
        raise InvalidArgumentError(
            f"got {c.shape[-1]} coefficients, codec has {codec.n_components}")
    flat = codec.mean + c @ codec.components
    if as_grid:
        return flat.reshape(flat.shape[:-1] + tuple(codec.shape))
    return flat


def save_codec(codec, path):
    h, w = codec.shape
    with open(path, "wb") as f:
        f.write(UPCA_MAGIC)
        f.write(struct.pack("<HII", UPCA_VERSION, codec.dim, codec.n_components))
        f.write(codec.mean.astype("<f8").tobytes())
        f.write(codec.components.astype("<f8").tobytes())
        f.write(codec.explained_variance.astype("<f8").tobytes())
        # trailer: total variance and grid shape
        f.write(struct.pack("<dII", codec.total_variance, h, w))


def load_codec(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != UPCA_MAGIC:
        raise CorruptFileError(f"{path}: not a UPCA codec file")
    version, dim, k = struct.unpack_from("<HII", blob, 4)
    if version != UPCA_VERSION:
        raise CorruptFileError(f"{path}: unsupported codec version {version}")
    off = 14
    need = off + 8 * (dim + k * dim + k) + struct.calcsize("<dII")
    if len(blob) != need:
        raise CorruptFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    mean = np.frombuffer(blob, "<f8", dim, off).astype(float)
    off += 8 * dim
    comps = np.frombuffer(blob, "<f8", k * dim, off).astype(float).reshape(k, dim)
    off += 8 * k * dim
    ev = np.frombuffer(blob, "<f8", k, off).astype(float)
    off += 8 * k
    total, h, w = struct.unpack_from("<dII", blob, off)
    return PcaCodec(mean, comps, ev, total, (h, w))


# ---------------------------------------------------------------------------
# wedge (fan) rendering

@dataclass(frozen=True)
class WedgeGeometry:
    """Fan layout for scanline data.

    ``zero_offset`` is the number of echo samples hidden inside the probe
    (the inner radius of the fan, in sample units).
    """
    field_of_view: float = 92.0
    zero_offset: float = 50.0
    height: int = 360
    width: int = 520

    def __post_init__(self):
        if not 0 < self.field_of_view < 180:
            raise InvalidArgumentError(
                f"field_of_view must be in (0, 180) degrees, got {self.field_of_view}")
        if self.zero_offset < 0:
            raise InvalidArgumentError("zero_offset must be >= 0")
        if self.height < 2 or self.width < 2:
            raise InvalidArgumentError("raster must be at least 2x2")

    def layout(self, n_samples):
        """Return ``(apex_x, apex_y, pixels_per_sample)`` for frames with ``n_samples`` per line."""
        half = np.deg2rad(self.field_of_view) / 2
        r_in = float(self.zero_offset)
        r_out = r_in + n_samples - 1
        vert = r_out - r_in * np.cos(half)
        horiz = 2 * r_out * np.sin(half)
        scale = min((self.height - 1) / vert, (self.width - 1) / horiz)
        apex_x = (self.width - 1) / 2
        apex_y = -r_in * np.cos(half) * scale
        return apex_x, apex_y, scale


def render_wedge(frame, geometry):
    """Render a ``(scanlines, samples)`` grid into a fan-shaped raster.

    Scanline 0 lies along the left fan edge (angle ``-field_of_view / 2`` from
    the vertical axis), sample 0 on the inner arc. Pixels outside the fan are 0;
    inside, the grid is sampled bilinearly.
    """
    grid = np.asarray(frame, dtype=float)
    if grid.ndim != 2:
        raise InvalidArgumentError("render_wedge expects a single 2-D frame")
    n_lines, n_samples = grid.shape
    half = np.deg2rad(geometry.field_of_view) / 2
    ax, ay, scale = geometry.layout(n_samples)
    r_in = float(geometry.zero_offset)

    yy, xx = np.mgrid[0:geometry.height, 0:geometry.width].astype(float)
    dx = xx - ax
    dy = yy - ay
    r = np.hypot(dx, dy) / scale
    theta = np.arctan2(dx, dy)
    inside = (r >= r_in) & (r <= r_in + n_samples - 1) & (np.abs(theta) <= half)

    line = (theta[inside] + half) / (2 * half) * (n_lines - 1)
    samp = r[inside] - r_in
    l0 = np.clip(np.floor(line).astype(int), 0, max(n_lines - 2, 0))
    s0 = np.clip(np.floor(samp).astype(int), 0, max(n_samples - 2, 0))
    fl = np.clip(line - l0, 0.0, 1.0)
    fs = np.clip(samp - s0, 0.0, 1.0)
    l1 = np.minimum(l0 + 1, n_lines - 1)
    s1 = np.minimum(s0 + 1, n_samples - 1)
    # lerp form keeps constant inputs exact
    top = grid[l0, s0] + fs * (grid[l0, s1] - grid[l0, s0])
    bot = grid[l1, s0] + fs * (grid[l1, s1] - grid[l1, s0])

    out = np.zeros((geometry.height, geometry.width))
    out[inside] = top + fl * (bot - top)
    return out


def to_uint8(image):
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def write_pgm(path, image):
    img = to_uint8(image)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise CorruptFileError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise CorruptFileError(f"{path}: only 8-bit PGM is supported")
    data = blob[pos + 1:]
    if len(data) != w * h:
        raise CorruptFileError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, np.uint8).reshape(h, w)

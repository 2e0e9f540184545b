"""Interval and affine arithmetic over batches of boxes.

Both classes carry a leading batch axis (one entry per box) and support the
arithmetic operators needed to evaluate polynomial vector fields, so the same
component-wise function can be called on floats, numpy arrays, ``Interval``
or ``AffineForm`` objects.

Affine forms are *reduced*: a value is ``center + coef @ xi + [-rad, rad]``
with ``xi`` ranging over ``[-1, 1]^p`` (one noise symbol per input
coordinate) and all nonlinear error lumped into ``rad``.

Rounding: every operation widens its result by a bound on its own
floating-point error, ``(k + 2) * 2u * sum|terms|`` for a ``k``-term sum with
unit roundoff ``u``.  Results built only from exact zeros are not widened.
"""

import numpy as np

EPS = 2.0 ** -52          # twice the unit roundoff
# allowance for np.tanh, which is not correctly rounded, in units of EPS
TANH_ULPS = 8


def sech2(s):
    t = np.tanh(s)
    return 1.0 - t * t


def _pad(magnitude, k=1):
    """Bound on the rounding error of a ``k``-term sum whose terms have total magnitude ``magnitude``.

    The small absolute term covers underflow; it is dropped when the
    magnitude is exactly zero, since sums and products of zeros are exact.
    """
    m = np.asarray(magnitude, dtype=float)
    return np.where(m > 0, (k + 2) * EPS * m + 1e-300, 0.0)


def _radius(lo, hi):
    """Midpoint and a radius that covers ``[lo, hi]`` despite rounding of the midpoint."""
    c = 0.5 * (lo + hi)
    r = np.maximum(hi - c, c - lo)
    return c, r + _pad(r)


class Interval:
    """Elementwise interval ``[lo, hi]``."""

    __array_priority__ = 100
    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        self.lo = lo
        self.hi = hi

    @property
    def shape(self):
        return self.lo.shape

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def rad(self):
        return 0.5 * (self.hi - self.lo)

    def mag(self):
        """Largest absolute value in each interval."""
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol))

    def __getitem__(self, idx):
        return Interval(self.lo[idx], self.hi[idx])

    def __repr__(self):
        return f"Interval(lo={self.lo!r}, hi={self.hi!r})"

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __add__(self, other):
        if isinstance(other, Interval):
            pad = _pad(self.mag() + other.mag())
            return Interval(self.lo + other.lo - pad, self.hi + other.hi + pad)
        pad = _pad(self.mag() + np.abs(other))
        return Interval(self.lo + other - pad, self.hi + other + pad)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Interval):
            p = np.stack([self.lo * other.lo, self.lo * other.hi,
                          self.hi * other.lo, self.hi * other.hi])
            lo, hi = p.min(axis=0), p.max(axis=0)
        else:
            c = np.asarray(other, dtype=float)
            lo = np.where(c >= 0, c * self.lo, c * self.hi)
            hi = np.where(c >= 0, c * self.hi, c * self.lo)
        pad = _pad(np.maximum(np.abs(lo), np.abs(hi)), 0)
        return Interval(lo - pad, hi + pad)

    __rmul__ = __mul__

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        if n == 0:
            return Interval(np.ones_like(self.lo))
        if n % 2 == 1:
            lo, hi = self.lo ** n, self.hi ** n
            pad = _pad(np.maximum(np.abs(lo), np.abs(hi)), n)
            return Interval(lo - pad, hi + pad)
        a, b = np.abs(self.lo) ** n, np.abs(self.hi) ** n
        straddle = (self.lo <= 0) & (self.hi >= 0)
        hi = np.maximum(a, b)
        pad = _pad(hi, n)
        lo = np.where(straddle, 0.0, np.maximum(np.minimum(a, b) - pad, 0.0))
        return Interval(lo, hi + pad)

    def tanh(self):
        lo, hi = np.tanh(self.lo), np.tanh(self.hi)
        return Interval(np.maximum(lo - _pad(np.abs(lo), TANH_ULPS), -1.0),
                        np.minimum(hi + _pad(np.abs(hi), TANH_ULPS), 1.0))

    def intersect(self, other):
        return Interval(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def matvec(self, W, b=None):
        """Interval enclosure of ``W @ v (+ b)`` for a point matrix ``W``."""
        W = np.asarray(W, dtype=float)
        mid, rad = _radius(self.lo, self.hi)
        absW = np.abs(W).T
        c = mid @ W.T
        r = rad @ absW
        mag = np.abs(mid) @ absW + r
        if b is not None:
            c = c + b
            mag = mag + np.abs(b)
        pad = _pad(mag, W.shape[1] + 2)
        return Interval(c - r - pad, c + r + pad)


def interval_matmul(A, B):
    """Enclosure of the product of two interval matrices (batched).

    ``A`` has shape ``(..., m, k)`` and ``B`` shape ``(..., k, n)``.
    """
    lo_a, hi_a = A.lo[..., :, :, None], A.hi[..., :, :, None]
    lo_b, hi_b = B.lo[..., None, :, :], B.hi[..., None, :, :]
    p = np.stack([lo_a * lo_b, lo_a * hi_b, hi_a * lo_b, hi_a * hi_b])
    lo = p.min(axis=0).sum(axis=-2)
    hi = p.max(axis=0).sum(axis=-2)
    # rounding scales with the terms before cancellation, not with the sum
    pad = _pad(np.abs(p).max(axis=0).sum(axis=-2), A.lo.shape[-1] + 1)
    return Interval(lo - pad, hi + pad)


def interval_matvec(M, v):
    """Enclosure of ``M @ v`` for interval matrix ``(..., m, n)`` and vector ``(..., n)``."""
    col = Interval(v.lo[..., None], v.hi[..., None])
    out = interval_matmul(M, col)
    return Interval(out.lo[..., 0], out.hi[..., 0])


def tanh_offsets(k, lo, hi):
    """Range ``[gmin, gmax]`` of ``g(s) = tanh(s) - k*s`` over ``[lo, hi]``.

    Exact up to rounding: ``g`` is evaluated at the endpoints and at the
    interior stationary points ``s = +-atanh(sqrt(1 - k))``.  Valid for any
    slope ``k``, which makes every line built from these offsets sound.
    """
    k = np.asarray(k, dtype=float)
    cands = [np.tanh(lo) - k * lo, np.tanh(hi) - k * hi]
    with np.errstate(invalid="ignore", divide="ignore"):
        root = np.arctanh(np.sqrt(np.clip(1.0 - k, 0.0, 1.0)))
    root = np.where((k > 0) & (k <= 1), root, np.nan)
    gmin = np.minimum(cands[0], cands[1])
    gmax = np.maximum(cands[0], cands[1])
    for s in (root, -root):
        inside = np.isfinite(s) & (s >= lo) & (s <= hi)
        g = np.where(inside, np.tanh(np.where(inside, s, 0.0)) - k * np.where(inside, s, 0.0), np.nan)
        gmin = np.where(inside, np.minimum(gmin, g), gmin)
        gmax = np.where(inside, np.maximum(gmax, g), gmax)
    # tanh is monotone, so its largest magnitude on [lo, hi] sits at an endpoint
    smax = np.maximum(np.abs(lo), np.abs(hi))
    pad = _pad(np.maximum(np.abs(np.tanh(lo)), np.abs(np.tanh(hi))) + np.abs(k) * smax,
               TANH_ULPS + 2)
    return gmin - pad, gmax + pad


def chord_slope(lo, hi, tiny=1e-12):
    width = hi - lo
    safe = np.where(width > tiny, width, 1.0)
    return np.where(width > tiny, (np.tanh(hi) - np.tanh(lo)) / safe, sech2(0.5 * (lo + hi)))


class AffineForm:
    """Reduced affine form ``center + coef @ xi + [-rad, rad]``.

    Shapes: ``center`` and ``rad`` are ``(K, *s)``, ``coef`` is ``(K, *s, p)``.
    """

    __array_priority__ = 100
    __slots__ = ("center", "coef", "rad")

    def __init__(self, center, coef, rad):
        self.center = center
        self.coef = coef
        self.rad = rad

    @classmethod
    def from_box(cls, lo, hi):
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        K, n = lo.shape
        half = 0.5 * (hi - lo)
        coef = np.zeros((K, n, n))
        idx = np.arange(n)
        coef[:, idx, idx] = half
        return cls(0.5 * (lo + hi), coef, np.zeros((K, n)))

    @property
    def n_symbols(self):
        return self.coef.shape[-1]

    def _const(self, value):
        value = np.broadcast_to(np.asarray(value, dtype=float), self.center.shape)
        return AffineForm(value.copy(), np.zeros_like(self.coef), np.zeros_like(self.rad))

    def spread(self):
        return np.abs(self.coef).sum(axis=-1) + self.rad

    def bounds(self):
        s = self.spread()
        pad = _pad(np.abs(self.center) + s, self.n_symbols + 2)
        return Interval(self.center - s - pad, self.center + s + pad)

    def component(self, i):
        return AffineForm(self.center[:, i], self.coef[:, i, :], self.rad[:, i])

    def __neg__(self):
        return AffineForm(-self.center, -self.coef, self.rad)

    def __add__(self, other):
        if isinstance(other, AffineForm):
            err = _pad(np.abs(self.center) + np.abs(other.center) + self.spread() + other.spread())
            return AffineForm(self.center + other.center, self.coef + other.coef,
                              self.rad + other.rad + err)
        err = _pad(np.abs(self.center) + np.abs(other))
        return AffineForm(self.center + other, self.coef, self.rad + err)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, AffineForm):
            c = np.asarray(other, dtype=float)
            err = _pad(np.abs(c) * (np.abs(self.center) + self.spread()), 1)
            return AffineForm(self.center * c, self.coef * c[..., None],
                              self.rad * np.abs(c) + err)
        cu, cv = self.center, other.center
        au, av = self.coef, other.coef
        ru, rv = self.rad, other.rad
        su, sv = np.abs(au).sum(-1), np.abs(av).sum(-1)
        diag = au * av
        dmin = np.minimum(diag, 0.0).sum(-1)
        dmax = np.maximum(diag, 0.0).sum(-1)
        off = su * sv - np.abs(diag).sum(-1)
        center = cu * cv + 0.5 * (dmin + dmax)
        coef = cu[..., None] * av + cv[..., None] * au
        rad = (np.abs(cu) * rv + np.abs(cv) * ru + su * rv + ru * sv + ru * rv
               + off + 0.5 * (dmax - dmin))
        rad = rad + _pad((np.abs(cu) + su + ru) * (np.abs(cv) + sv + rv), self.n_symbols + 8)
        return AffineForm(center, coef, rad)

    __rmul__ = __mul__

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        if n == 0:
            return self._const(1.0)
        if n == 1:
            return self
        return self ** (n - 1) * self

    def tanh(self):
        b = self.bounds()
        k = chord_slope(b.lo, b.hi)
        gmin, gmax = tanh_offsets(k, b.lo, b.hi)
        mid, half = _radius(gmin, gmax)
        err = _pad(np.abs(k) * (np.abs(self.center) + self.spread()) + np.abs(mid) + half, 2)
        return AffineForm(k * self.center + mid, k[..., None] * self.coef,
                          k * self.rad + half + err)

    def linear(self, W, b=None):
        """``W @ self (+ b)`` for a vector-valued form of shape ``(K, n)``."""
        W = np.asarray(W, dtype=float)
        center = self.center @ W.T
        if b is not None:
            center = center + b
        coef = np.einsum("ij,kjp->kip", W, self.coef)
        absW = np.abs(W).T
        rad = self.rad @ absW + _pad((np.abs(self.center) + self.spread()) @ absW
                                     + (0.0 if b is None else np.abs(b)), W.shape[1] + 1)
        return AffineForm(center, coef, rad)


def split(x, n):
    """Split the trailing value axis of ``x`` into ``n`` component objects."""
    if isinstance(x, AffineForm):
        return [x.component(i) for i in range(n)]
    if isinstance(x, Interval):
        return [Interval(x.lo[..., i], x.hi[..., i]) for i in range(n)]
    x = np.asarray(x, dtype=float)
    return [x[..., i] for i in range(n)]


def join(parts):
    """Inverse of :func:`split`; constant parts are promoted to the form type."""
    forms = [p for p in parts if isinstance(p, (AffineForm, Interval))]
    if not forms:
        return np.stack(np.broadcast_arrays(*parts), axis=-1)
    ref = forms[0]
    if isinstance(ref, AffineForm):
        parts = [p if isinstance(p, AffineForm) else ref._const(p) for p in parts]
        return AffineForm(np.stack([p.center for p in parts], axis=1),
                          np.stack([p.coef for p in parts], axis=1),
                          np.stack([p.rad for p in parts], axis=1))
    parts = [p if isinstance(p, Interval)
             else Interval(np.broadcast_to(np.asarray(p, float), ref.shape)) for p in parts]
    return Interval(np.stack([p.lo for p in parts], axis=-1),
                    np.stack([p.hi for p in parts], axis=-1))

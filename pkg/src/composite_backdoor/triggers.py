"""Composite image-trigger engine.

Three component trigger families are provided, each an sklearn-style
transformer over image batches shaped ``(N, H, W, C)`` with pixel values
in [0, 1]:

* :class:`WarpTrigger` -- resamples the image through a smooth random flow
  field built by upsampling a small control grid.
* :class:`BlendTrigger` -- alpha-blends a frozen random noise pattern into
  the image.
* :class:`SharpenKernelTrigger` -- blends the image with a 3x3 kernel
  response (a mild sharpening by default).

:class:`CompositeTrigger` chains one trigger of each distinct kind in a
fixed order. Every trigger separates *magnitude* (scalar knobs that scale
the strength of the perturbation) from *structure* (frozen random artifacts
regenerated deterministically from an integer seed), so triggers can be
rescaled without changing their identity and serialized compactly.
"""

import hashlib

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_image_shape, check_images
from .errors import InvalidSpecError, ProvenanceError

DEFAULT_SHARPEN_KERNEL = np.array(
    [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]]
)

# Catmull-Rom parameter for the cubic upsampling kernel.
_CUBIC_A = -0.5


def _cubic_tap_weights(frac):
    """Cubic-convolution weights for the 4 taps around a sample position.

    ``frac`` is the fractional part of the source position; taps sit at
    offsets (-1, 0, 1, 2) from its floor.
    """
    a = _CUBIC_A
    d = np.stack([1.0 + frac, frac, 1.0 - frac, 2.0 - frac], axis=-1)
    d = np.abs(d)
    near = (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    far = a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _resample_axis(values, out_len):
    """Catmull-Rom resampling of the last axis to ``out_len`` samples.

    Corner-aligned: the first and last input samples map exactly onto the
    first and last output samples. Borders replicate.
    """
    src_len = values.shape[-1]
    if out_len > 1:
        pos = np.arange(out_len) * ((src_len - 1) / (out_len - 1))
    else:
        pos = np.zeros(1)
    i0 = np.floor(pos).astype(np.int64)
    w = _cubic_tap_weights(pos - i0)
    idx = np.clip(np.stack([i0 - 1, i0, i0 + 1, i0 + 2], axis=-1), 0, src_len - 1)
    return (values[..., idx] * w).sum(axis=-1)


def _upsample_bicubic(grid, out_h, out_w):
    """Upsample a ``(kh, kw, C)`` grid to ``(out_h, out_w, C)`` separably."""
    tmp = _resample_axis(np.moveaxis(grid, 0, -1), out_h)  # (kw, C, out_h)
    tmp = np.moveaxis(tmp, -1, 0)  # (out_h, kw, C)
    out = _resample_axis(np.moveaxis(tmp, 1, -1), out_w)  # (out_h, C, out_w)
    return np.moveaxis(out, -1, 1)


def _artifact_hash(arr):
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(np.ascontiguousarray(arr, dtype=">f8").tobytes())
    return h.hexdigest()


class _ImageTrigger(TransformerMixin, BaseEstimator):
    """Shared machinery: shape binding, scaling, serialization."""

    kind = None  # overridden
    _magnitude_fields = ()  # names of scalar magnitude parameters
    _ratio_fields = ()  # subset of magnitude fields clamped to [0, 1]

    # -- estimator surface -------------------------------------------------

    def fit(self, X, y=None):
        X = check_images(X)
        return self.fit_shape(X.shape[1:])

    def fit_shape(self, image_shape):
        """Bind the trigger to an image shape and freeze its random artifact."""
        self._validate_params()
        self.image_shape_ = check_image_shape(image_shape)
        self._build_artifact()
        return self

    def transform(self, X):
        X = check_images(X)
        self._check_fitted()
        if X.shape[1:] != self.image_shape_:
            raise InvalidSpecError(
                f"{self.kind} trigger bound to shape {self.image_shape_}, "
                f"got images of shape {X.shape[1:]}"
            )
        if self._is_identity():
            return X
        return np.clip(self._apply(X), 0.0, 1.0)

    def _check_fitted(self):
        if not hasattr(self, "image_shape_"):
            raise NotFittedError(
                f"{type(self).__name__} must be fitted to an image shape first"
            )

    # -- magnitude arithmetic ----------------------------------------------

    def magnitude(self):
        return {f: float(getattr(self, f)) for f in self._magnitude_fields}

    def scaled(self, factor):
        """Return a copy with every magnitude scalar multiplied by ``factor``.

        Ratio-type magnitudes are clamped to [0, 1]; frozen artifacts and
        seeds are unchanged.
        """
        factor = float(factor)
        if not factor > 0.0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        new = self._clone_unfitted()
        for f in self._magnitude_fields:
            v = getattr(self, f) * factor
            if f in self._ratio_fields:
                v = min(v, 1.0)
            setattr(new, f, v)
        if hasattr(self, "image_shape_"):
            new._copy_artifact_from(self)
        return new

    def _clone_unfitted(self):
        return type(self)(**self.get_params())

    def _copy_artifact_from(self, other):
        self.image_shape_ = other.image_shape_
        for name in self._artifact_attrs():
            setattr(self, name, getattr(other, name).copy())

    # -- serialization -----------------------------------------------------

    def artifact_hash(self):
        self._check_fitted()
        return _artifact_hash(self._artifact_array())

    def to_dict(self):
        """Serialize as a plain dict; artifacts are stored as seed + hash."""
        self._check_fitted()
        return {
            "kind": self.kind,
            "magnitude": self.magnitude(),
            "structure": self._structure_dict(),
            "seed": int(self.seed),
            "image_shape": list(self.image_shape_),
            "artifact_sha256": self.artifact_hash(),
        }

    @staticmethod
    def from_dict(d):
        try:
            cls = _KIND_REGISTRY[d["kind"]]
        except KeyError:
            raise InvalidSpecError(f"unknown trigger kind {d.get('kind')!r}")
        trig = cls._from_dict_parts(d)
        trig.fit_shape(d["image_shape"])
        expected = d.get("artifact_sha256")
        if expected is not None and trig.artifact_hash() != expected:
            raise ProvenanceError(
                f"{d['kind']} trigger artifact hash mismatch: regenerated "
                f"{trig.artifact_hash()[:12]}..., manifest says {expected[:12]}..."
            )
        return trig

    # -- hooks implemented by subclasses -----------------------------------

    def _validate_params(self):
        raise NotImplementedError

    def _build_artifact(self):
        raise NotImplementedError

    def _apply(self, X):
        raise NotImplementedError

    def _is_identity(self):
        raise NotImplementedError

    def _artifact_attrs(self):
        raise NotImplementedError

    def _artifact_array(self):
        raise NotImplementedError

    def _structure_dict(self):
        raise NotImplementedError


class WarpTrigger(_ImageTrigger):
    """Smooth elastic warp driven by a small random control grid.

    A ``grid_size x grid_size x 2`` grid of offsets is drawn uniformly from
    [-1, 1] (frozen by ``seed``), normalized by its mean absolute value,
    upsampled bicubically to image resolution, and scaled by
    ``strength / image_size`` to form a flow field in normalized [-1, 1]
    coordinates. Images are resampled bilinearly through that field;
    sampling positions are clamped to the image domain.

    Channel 0 of the grid displaces columns (x), channel 1 rows (y).
    """

    kind = "warp"
    _magnitude_fields = ("strength",)

    def __init__(self, grid_size=4, strength=0.25, seed=0):
        self.grid_size = grid_size
        self.strength = strength
        self.seed = seed

    def _validate_params(self):
        if int(self.grid_size) != self.grid_size or self.grid_size < 2:
            raise InvalidSpecError(
                f"warp grid_size must be an integer >= 2, got {self.grid_size}"
            )
        if not np.isfinite(self.strength) or self.strength < 0:
            raise InvalidSpecError(
                f"warp strength must be finite and >= 0, got {self.strength}"
            )

    def _build_artifact(self):
        k = int(self.grid_size)
        rng = np.random.default_rng(self.seed)
        self.control_grid_ = rng.uniform(-1.0, 1.0, size=(k, k, 2))
        self._precompute_sampling()

    def _precompute_sampling(self):
        h, w, _ = self.image_shape_
        mean_abs = np.mean(np.abs(self.control_grid_))
        if mean_abs == 0.0:
            normed = np.zeros_like(self.control_grid_)
        else:
            normed = self.control_grid_ / mean_abs
        flow = _upsample_bicubic(normed, h, w)
        # normalized [-1, 1] target coordinates, corner-aligned
        gx = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
        gy = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
        sx = np.clip(gx[None, :] + self.strength * flow[..., 0] / w, -1.0, 1.0)
        sy = np.clip(gy[:, None] + self.strength * flow[..., 1] / h, -1.0, 1.0)
        px = (sx + 1.0) / 2.0 * (w - 1)
        py = (sy + 1.0) / 2.0 * (h - 1)
        x0 = np.clip(np.floor(px).astype(np.int64), 0, w - 1)
        y0 = np.clip(np.floor(py).astype(np.int64), 0, h - 1)
        self._x0 = x0
        self._y0 = y0
        self._x1 = np.minimum(x0 + 1, w - 1)
        self._y1 = np.minimum(y0 + 1, h - 1)
        self._fx = (px - x0)[None, :, :, None]
        self._fy = (py - y0)[None, :, :, None]

    def _copy_artifact_from(self, other):
        super()._copy_artifact_from(other)
        self._precompute_sampling()

    def _apply(self, X):
        # lerp form keeps constant regions bit-exact
        a = X[:, self._y0, self._x0, :]
        b = X[:, self._y0, self._x1, :]
        c = X[:, self._y1, self._x0, :]
        d = X[:, self._y1, self._x1, :]
        top = a + self._fx * (b - a)
        bot = c + self._fx * (d - c)
        return top + self._fy * (bot - top)

    def _is_identity(self):
        return self.strength == 0.0

    def _artifact_attrs(self):
        return ("control_grid_",)

    def _artifact_array(self):
        return self.control_grid_

    def _structure_dict(self):
        return {"grid_size": int(self.grid_size)}

    def noise_variant(self, rng_seed):
        """Same magnitude, fresh random control grid drawn from ``rng_seed``."""
        var = WarpTrigger(grid_size=self.grid_size, strength=self.strength, seed=int(rng_seed))
        if hasattr(self, "image_shape_"):
            var.fit_shape(self.image_shape_)
        return var

    @classmethod
    def _from_dict_parts(cls, d):
        return cls(
            grid_size=int(d["structure"]["grid_size"]),
            strength=float(d["magnitude"]["strength"]),
            seed=int(d["seed"]),
        )


class BlendTrigger(_ImageTrigger):
    """Alpha-blend of a frozen uniform-noise pattern: (1 - ratio) x + ratio p."""

    kind = "blend"
    _magnitude_fields = ("ratio",)
    _ratio_fields = ("ratio",)

    def __init__(self, ratio=0.005, seed=0):
        self.ratio = ratio
        self.seed = seed

    def _validate_params(self):
        if not np.isfinite(self.ratio) or not 0.0 <= self.ratio <= 1.0:
            raise InvalidSpecError(f"blend ratio must be in [0, 1], got {self.ratio}")

    def _build_artifact(self):
        rng = np.random.default_rng(self.seed)
        raw = rng.uniform(-1.0, 1.0, size=self.image_shape_)
        self.pattern_ = (raw + 1.0) / 2.0

    def _apply(self, X):
        return (1.0 - self.ratio) * X + self.ratio * self.pattern_[None, ...]

    def _is_identity(self):
        return self.ratio == 0.0

    def _artifact_attrs(self):
        return ("pattern_",)

    def _artifact_array(self):
        return self.pattern_

    def _structure_dict(self):
        return {}

    def noise_variant(self, rng_seed):
        """Same ratio, fresh pattern drawn from ``rng_seed``."""
        var = BlendTrigger(ratio=self.ratio, seed=int(rng_seed))
        if hasattr(self, "image_shape_"):
            var.fit_shape(self.image_shape_)
        return var

    @classmethod
    def _from_dict_parts(cls, d):
        return cls(ratio=float(d["magnitude"]["ratio"]), seed=int(d["seed"]))


class SharpenKernelTrigger(_ImageTrigger):
    """Blend with a 3x3 kernel response: (1 - ratio) x + ratio conv(x, k).

    The convolution is a cross-correlation with replicate border padding,
    applied per channel. The default kernel is the standard unit-sum sharpen
    matrix; ``random_kernel=True`` replaces it with a seed-frozen uniform
    [-1, 1] draw (used by noise-mode variants).
    """

    kind = "sharpen"
    _magnitude_fields = ("ratio",)
    _ratio_fields = ("ratio",)

    def __init__(self, ratio=0.075, kernel=None, seed=0, random_kernel=False):
        self.ratio = ratio
        self.kernel = kernel
        self.seed = seed
        self.random_kernel = random_kernel

    def _validate_params(self):
        if not np.isfinite(self.ratio) or not 0.0 <= self.ratio <= 1.0:
            raise InvalidSpecError(f"kernel ratio must be in [0, 1], got {self.ratio}")
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=np.float64)
            if k.shape != (3, 3):
                raise InvalidSpecError(f"kernel must be 3x3, got shape {k.shape}")
            if not np.all(np.isfinite(k)):
                raise InvalidSpecError("kernel entries must be finite")

    def _build_artifact(self):
        if self.random_kernel:
            rng = np.random.default_rng(self.seed)
            self.kernel_ = rng.uniform(-1.0, 1.0, size=(3, 3))
        elif self.kernel is not None:
            self.kernel_ = np.asarray(self.kernel, dtype=np.float64).copy()
        else:
            self.kernel_ = DEFAULT_SHARPEN_KERNEL.copy()

    def _apply(self, X):
        n, h, w, c = X.shape
        flat = X.transpose(0, 3, 1, 2).reshape(n * c, h, w)
        conv = np.empty_like(flat)
        for i in range(flat.shape[0]):
            ndimage.correlate(flat[i], self.kernel_, output=conv[i], mode="nearest")
        conv = conv.reshape(n, c, h, w).transpose(0, 2, 3, 1)
        return X + self.ratio * (conv - X)

    def _is_identity(self):
        return self.ratio == 0.0

    def _artifact_attrs(self):
        return ("kernel_",)

    def _artifact_array(self):
        return self.kernel_

    def _structure_dict(self):
        d = {"random_kernel": bool(self.random_kernel)}
        if not self.random_kernel:
            d["kernel"] = np.asarray(self.kernel_
                                     if hasattr(self, "kernel_")
                                     else (self.kernel if self.kernel is not None
                                           else DEFAULT_SHARPEN_KERNEL)).tolist()
        return d

    def noise_variant(self, rng_seed):
        """Same ratio, fresh uniform [-1, 1] kernel drawn from ``rng_seed``."""
        var = SharpenKernelTrigger(ratio=self.ratio, seed=int(rng_seed), random_kernel=True)
        if hasattr(self, "image_shape_"):
            var.fit_shape(self.image_shape_)
        return var

    @classmethod
    def _from_dict_parts(cls, d):
        structure = d["structure"]
        return cls(
            ratio=float(d["magnitude"]["ratio"]),
            kernel=structure.get("kernel"),
            seed=int(d["seed"]),
            random_kernel=bool(structure.get("random_kernel", False)),
        )


class PatchTrigger(_ImageTrigger):
    """Classic solid patch pasted over one corner of the image.

    This is the canonical *localized* trigger, included as a comparison
    baseline for defense probes: it is trivially visible to mask-reversal
    and overlay-based detectors, unlike the low-magnitude global triggers
    above. Content is a solid white square by default; ``random_content``
    draws a seed-frozen random patch instead.
    """

    kind = "patch"
    _magnitude_fields = ("opacity",)
    _ratio_fields = ("opacity",)
    _CORNERS = ("br", "bl", "tr", "tl")

    def __init__(self, size=4, opacity=1.0, corner="br", seed=0, random_content=False):
        self.size = size
        self.opacity = opacity
        self.corner = corner
        self.seed = seed
        self.random_content = random_content

    def _validate_params(self):
        if int(self.size) != self.size or self.size < 1:
            raise InvalidSpecError(f"patch size must be an integer >= 1, got {self.size}")
        if not np.isfinite(self.opacity) or not 0.0 <= self.opacity <= 1.0:
            raise InvalidSpecError(f"patch opacity must be in [0, 1], got {self.opacity}")
        if self.corner not in self._CORNERS:
            raise InvalidSpecError(
                f"patch corner must be one of {self._CORNERS}, got {self.corner!r}"
            )

    def _build_artifact(self):
        h, w, c = self.image_shape_
        size = int(self.size)
        if size > min(h, w):
            raise InvalidSpecError(
                f"patch size {size} exceeds image extent {min(h, w)}"
            )
        if self.random_content:
            rng = np.random.default_rng(self.seed)
            self.content_ = rng.uniform(0.0, 1.0, size=(size, size, c))
        else:
            self.content_ = np.ones((size, size, c))
        rows = slice(h - size, h) if self.corner[0] == "b" else slice(0, size)
        cols = slice(w - size, w) if self.corner[1] == "r" else slice(0, size)
        self._slices = (rows, cols)

    def _copy_artifact_from(self, other):
        super()._copy_artifact_from(other)
        self._slices = other._slices

    def _apply(self, X):
        out = X.copy()
        rows, cols = self._slices
        region = out[:, rows, cols, :]
        out[:, rows, cols, :] = (
            (1.0 - self.opacity) * region + self.opacity * self.content_[None]
        )
        return out

    def _is_identity(self):
        return self.opacity == 0.0

    def _artifact_attrs(self):
        return ("content_",)

    def _artifact_array(self):
        return self.content_

    def _structure_dict(self):
        return {
            "size": int(self.size),
            "corner": self.corner,
            "random_content": bool(self.random_content),
        }

    def noise_variant(self, rng_seed):
        """Same size/opacity/corner, seed-fresh random patch content."""
        var = PatchTrigger(
            size=self.size,
            opacity=self.opacity,
            corner=self.corner,
            seed=int(rng_seed),
            random_content=True,
        )
        if hasattr(self, "image_shape_"):
            var.fit_shape(self.image_shape_)
        return var

    @classmethod
    def _from_dict_parts(cls, d):
        structure = d["structure"]
        return cls(
            size=int(structure["size"]),
            opacity=float(d["magnitude"]["opacity"]),
            corner=str(structure["corner"]),
            seed=int(d["seed"]),
            random_content=bool(structure.get("random_content", False)),
        )


_KIND_REGISTRY = {
    WarpTrigger.kind: WarpTrigger,
    BlendTrigger.kind: BlendTrigger,
    SharpenKernelTrigger.kind: SharpenKernelTrigger,
    PatchTrigger.kind: PatchTrigger,
}


class CompositeTrigger(TransformerMixin, BaseEstimator):
    """Ordered chain of component triggers applied left to right.

    Components must be of pairwise-distinct kinds and there must be at
    least one; both conditions are enforced when the composite is bound to
    an image shape.
    """

    def __init__(self, components=()):
        self.components = list(components)

    def _validate(self):
        if len(self.components) < 1:
            raise InvalidSpecError("composite trigger needs at least one component")
        kinds = [t.kind for t in self.components]
        if len(set(kinds)) != len(kinds):
            raise InvalidSpecError(
                f"composite components must have pairwise-distinct kinds, got {kinds}"
            )

    def fit(self, X, y=None):
        X = check_images(X)
        return self.fit_shape(X.shape[1:])

    def fit_shape(self, image_shape):
        self._validate()
        for t in self.components:
            t.fit_shape(image_shape)
        self.image_shape_ = check_image_shape(image_shape)
        return self

    def transform(self, X):
        self._validate()
        if not hasattr(self, "image_shape_"):
            raise NotFittedError("CompositeTrigger must be fitted to an image shape first")
        for t in self.components:
            X = t.transform(X)
        return X

    def scaled(self, factor):
        new = CompositeTrigger([t.scaled(factor) for t in self.components])
        if hasattr(self, "image_shape_"):
            new.image_shape_ = self.image_shape_
        return new

    def magnitudes(self):
        return {t.kind: t.magnitude() for t in self.components}

    def to_dict(self):
        self._validate()
        return {"components": [t.to_dict() for t in self.components]}

    @staticmethod
    def from_dict(d):
        comps = [_ImageTrigger.from_dict(c) for c in d["components"]]
        trig = CompositeTrigger(comps)
        trig._validate()
        if comps:
            trig.image_shape_ = comps[0].image_shape_
        return trig

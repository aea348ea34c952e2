"""Monotonic lattice building blocks for the learned fusion-target network.

The components compose as calibrate -> embed -> calibrate -> lattice, one
subnetwork per output. Monotonicity is enforced structurally:

* calibrators parameterize their output keypoints as a cumulative sum of
  softplus increments, so the piecewise-linear map is non-decreasing;
* linear embeddings pass masked columns through softplus, keeping those
  coefficients non-negative;
* lattices are projected back onto the monotone cone after every optimizer
  step (pool-adjacent-violators along each monotone dimension, iterated to
  a fixed point).

Inputs outside a component's domain are clamped to the boundary, which
preserves monotonicity end to end.
"""

from __future__ import annotations

import itertools

import numpy as np
from sklearn.isotonic import isotonic_regression

from .autodiff import Parameter, ShapeError, Tensor, as_tensor
from .autodiff import ops as _ops
from .autodiff.ops import (
    add,
    concatenate,
    matmul,
    multiply,
    narrow,
    negate,
    register,
    reshape,
)
from .autodiff.tensor import record


# --------------------------------------------------------------------------
# Additional differentiable primitives used by the lattice components.

@register("softplus")
def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return record("softplus", (a,), out, lambda g: (g * sig,))


@register("cumsum")
def cumsum(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def bwd(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return record("cumsum", (a,), out, bwd)


@register("pwl_interp")
def pwl_interp(values, x, keypoints) -> Tensor:
    """Piecewise-linear interpolation of output ``values`` at positions ``x``.

    ``keypoints`` is a fixed strictly increasing grid; ``values`` holds the
    output at each keypoint. Positions outside the grid clamp to the end
    values. Differentiable in both ``values`` and ``x``.
    """
    values, x = as_tensor(values), as_tensor(x)
    kp = np.asarray(keypoints, dtype=np.float64)
    m = kp.shape[0]
    if values.shape != (m,):
        raise ShapeError(f"pwl_interp: {m} keypoints but {values.shape} values")
    xc = np.clip(x.data, kp[0], kp[-1])
    idx = np.clip(np.searchsorted(kp, xc, side="right") - 1, 0, m - 2)
    span = kp[idx + 1] - kp[idx]
    t = (xc - kp[idx]) / span
    v = values.data
    out = v[idx] * (1.0 - t) + v[idx + 1] * t
    in_range = (x.data >= kp[0]) & (x.data <= kp[-1])

    def bwd(g):
        gv = np.zeros(m, dtype=np.float64)
        np.add.at(gv, idx, g * (1.0 - t))
        np.add.at(gv, idx + 1, g * t)
        gx = g * (v[idx + 1] - v[idx]) / span * in_range
        return gv, gx

    return record("pwl_interp", (values, x), out, bwd)


@register("lattice_interp")
def lattice_interp(values, x, sizes) -> Tensor:
    """Multilinear interpolation over a regular grid on the unit cube.

    ``values`` is the flat vertex tensor (row-major over ``sizes``); ``x`` has
    shape (batch, d) with coordinates clamped to [0, 1]. Differentiable in
    both arguments.
    """
    values, x = as_tensor(values), as_tensor(x)
    sizes = tuple(int(s) for s in sizes)
    d = len(sizes)
    total = int(np.prod(sizes))
    if values.shape != (total,):
        raise ShapeError(f"lattice_interp: sizes {sizes} need {total} values, got {values.shape}")
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"lattice_interp: expected (batch, {d}) coordinates, got {x.shape}")
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for i in range(d - 1, -1, -1):
        strides[i] = acc
        acc *= sizes[i]

    xc = np.clip(x.data, 0.0, 1.0)
    scaled = xc * (np.array(sizes) - 1)
    base = np.minimum(scaled.astype(np.int64), np.array(sizes) - 2)
    frac = scaled - base  # (B, d), in [0, 1]
    v = values.data
    B = x.shape[0]

    corners = list(itertools.product((0, 1), repeat=d))
    corner_flat = []
    corner_w = []  # per-dim weight factors, (B,) each
    out = np.zeros(B, dtype=np.float64)
    for bits in corners:
        flat = (base + np.array(bits)) @ strides
        factors = [frac[:, i] if b else 1.0 - frac[:, i] for i, b in enumerate(bits)]
        w = np.ones(B, dtype=np.float64)
        for f in factors:
            w = w * f
        out += v[flat] * w
        corner_flat.append(flat)
        corner_w.append(factors)

    in_range = (x.data >= 0.0) & (x.data <= 1.0)
    scale = np.array(sizes, dtype=np.float64) - 1

    def bwd(g):
        gv = np.zeros(total, dtype=np.float64)
        gx = np.zeros((B, d), dtype=np.float64)
        for bits, flat, factors in zip(corners, corner_flat, corner_w):
            w = np.ones(B, dtype=np.float64)
            for f in factors:
                w = w * f
            np.add.at(gv, flat, g * w)
            vg = v[flat] * g
            for i, b in enumerate(bits):
                others = np.ones(B, dtype=np.float64)
                for j, f in enumerate(factors):
                    if j != i:
                        others = others * f
                sign = 1.0 if b else -1.0
                gx[:, i] += vg * sign * others
        gx *= scale * in_range
        return gv, gx

    return record("lattice_interp", (values, x), out, bwd)


def _inv_softplus(y):
    """Solve softplus(x) = y for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


# --------------------------------------------------------------------------
# Components.

class Calibrator:
    """1-D piecewise-linear map with optional structural monotonicity."""

    def __init__(self, keypoints, raw_outputs=None, monotone: bool = True, name: str = "cal"):
        kp = np.asarray(keypoints, dtype=np.float64)
        if kp.ndim != 1 or kp.shape[0] < 2:
            raise ShapeError(f"{name}: need at least 2 keypoints, got shape {kp.shape}")
        if not np.all(np.diff(kp) > 0):
            raise ShapeError(f"{name}: keypoints must be strictly increasing")
        self.keypoints = kp
        self.monotone = bool(monotone)
        self.name = name
        if raw_outputs is None:
            raw_outputs = self._identity_raw()
        self.raw = Parameter(np.asarray(raw_outputs, dtype=np.float64), name=f"{name}/raw")
        if self.raw.value.shape != kp.shape:
            raise ShapeError(f"{name}: {kp.shape[0]} keypoints but raw outputs {self.raw.value.shape}")

    def _identity_raw(self) -> np.ndarray:
        kp = self.keypoints
        if not self.monotone:
            return kp.copy()
        raw = np.empty_like(kp)
        raw[0] = kp[0]
        raw[1:] = _inv_softplus(np.diff(kp))
        return raw

    def effective_outputs(self) -> Tensor:
        """Output keypoint values; non-decreasing when the monotone flag is set."""
        raw = self.raw.tensor()
        if not self.monotone:
            return raw
        first = narrow(raw, 0, 0, 1)
        increments = softplus(narrow(raw, 0, 1, self.keypoints.shape[0] - 1))
        return cumsum(concatenate([first, increments], axis=0))

    def parameters(self) -> list[Parameter]:
        return [self.raw]


def calibrator_eval(c: Calibrator, x):
    """Evaluate the calibrator; scalars map to scalars, arrays elementwise."""
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    xt = as_tensor([x] if scalar else x)
    out = pwl_interp(c.effective_outputs(), xt, c.keypoints)
    if scalar and out.tape is None:
        return float(out.data[0])
    return out


class LinearEmbedding:
    """Affine map whose masked input columns have non-negative coefficients."""

    def __init__(self, raw_coefficients, bias, monotone_mask, name: str = "embed"):
        self.raw = Parameter(np.asarray(raw_coefficients, dtype=np.float64), name=f"{name}/w")
        self.bias = Parameter(np.asarray(bias, dtype=np.float64), name=f"{name}/b")
        self.mask = np.asarray(monotone_mask, dtype=bool)
        self.name = name
        out_dim, in_dim = self.raw.value.shape
        if self.bias.value.shape != (out_dim,):
            raise ShapeError(f"{name}: bias {self.bias.value.shape} does not match {out_dim} outputs")
        if self.mask.shape != (in_dim,):
            raise ShapeError(f"{name}: mask {self.mask.shape} does not match {in_dim} inputs")

    @property
    def in_dim(self) -> int:
        return self.raw.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.raw.value.shape[0]

    def effective_coefficients(self) -> Tensor:
        raw = self.raw.tensor()
        if self.mask.all():
            return softplus(raw)
        if not self.mask.any():
            return raw
        mask = self.mask.astype(np.float64)
        return add(multiply(softplus(raw), mask), multiply(raw, 1.0 - mask))

    def parameters(self) -> list[Parameter]:
        return [self.raw, self.bias]


def linear_embed_eval(e: LinearEmbedding, x):
    """W x + b for a single vector or a (batch, in) matrix."""
    xt = as_tensor(x)
    single = xt.ndim == 1
    if single:
        xt = reshape(xt, (1, e.in_dim))
    if xt.shape[1] != e.in_dim:
        raise ShapeError(f"{e.name}: expected {e.in_dim} inputs, got {xt.shape[1]}")
    w = e.effective_coefficients()
    out = add(matmul(xt, transpose(w)), e.bias.tensor())
    if single:
        out = reshape(out, (e.out_dim,))
    return out


def transpose(t: Tensor) -> Tensor:
    """2-D transpose built from existing primitives (narrow + concatenate)."""
    rows, cols = t.shape
    columns = [reshape(narrow(t, 1, j, 1), (1, rows)) for j in range(cols)]
    return concatenate(columns, axis=0)


class Lattice:
    """Multilinear look-up table on the unit cube with monotone dimensions."""

    def __init__(self, sizes, values=None, monotone_mask=None, name: str = "lattice"):
        self.sizes = tuple(int(s) for s in sizes)
        if any(s < 2 for s in self.sizes):
            raise ShapeError(f"{name}: every dimension needs >= 2 vertices, got {self.sizes}")
        self.mask = (
            np.ones(len(self.sizes), dtype=bool)
            if monotone_mask is None
            else np.asarray(monotone_mask, dtype=bool)
        )
        if self.mask.shape != (len(self.sizes),):
            raise ShapeError(f"{name}: mask length {self.mask.shape} vs {len(self.sizes)} dims")
        if values is None:
            values = self._ramp_values()
        self.params = Parameter(
            np.asarray(values, dtype=np.float64).reshape(self.sizes), name=f"{name}/v"
        )
        self.name = name

    def _ramp_values(self) -> np.ndarray:
        # Mean of normalized vertex coordinates: the multilinear extension
        # is then the average of the inputs, monotone along every dimension.
        grids = np.meshgrid(
            *[np.linspace(0.0, 1.0, s) for s in self.sizes], indexing="ij"
        )
        return np.mean(grids, axis=0)

    @property
    def dim(self) -> int:
        return len(self.sizes)

    def parameters(self) -> list[Parameter]:
        return [self.params]


def lattice_eval(l: Lattice, x):
    """Interpolate at a d-vector (scalar out) or a (batch, d) matrix."""
    xt = as_tensor(x)
    single = xt.ndim == 1
    if single:
        if xt.shape != (l.dim,):
            raise ShapeError(f"{l.name}: expected {l.dim}-vector, got {xt.shape}")
        xt = reshape(xt, (1, l.dim))
    flat = reshape(l.params.tensor(), (int(np.prod(l.sizes)),))
    out = lattice_interp(flat, xt, l.sizes)
    if single:
        if out.tape is None:
            return float(out.data[0])
        out = reshape(out, ())
    return out


def pav(seq: np.ndarray) -> np.ndarray:
    """Euclidean projection of a sequence onto the non-decreasing cone."""
    return isotonic_regression(np.asarray(seq, dtype=np.float64), increasing=True)


def project_monotone(l: Lattice, max_sweeps: int = 10) -> Lattice:
    """Restore non-decreasing vertex values along every monotone dimension.

    Pool-adjacent-violators runs along one dimension at a time; a sweep over
    all monotone dimensions repeats until nothing changes (at most
    ``max_sweeps`` sweeps). Projection of an already-feasible lattice is the
    identity.
    """
    v = l.params.value
    dims = [i for i in range(l.dim) if l.mask[i]]
    for _ in range(max_sweeps):
        changed = False
        for axis in dims:
            moved = np.moveaxis(v, axis, -1)
            # reshape may copy (moveaxis views are rarely contiguous), so
            # project into the buffer and write the block back afterwards.
            flat = moved.reshape(-1, l.sizes[axis])
            axis_changed = False
            for row in flat:
                if np.any(np.diff(row) < 0):
                    row[...] = pav(row)
                    axis_changed = True
            if axis_changed:
                v[...] = np.moveaxis(flat.reshape(moved.shape), -1, axis)
                changed = True
        if not changed:
            break
    return l


def _monotone_violation(v: np.ndarray, mask) -> float:
    worst = 0.0
    for axis in range(v.ndim):
        if not mask[axis]:
            continue
        worst = max(worst, float(np.maximum(-np.diff(v, axis=axis), 0.0).max(initial=0.0)))
    return worst


class LatticeNetwork:
    """K parallel calibrate-embed-calibrate-lattice subnetworks.

    Subnetwork k produces raw target k. The declaration matrix (K x K of
    +1/-1/0) states how output k must respond to input j: +1 non-decreasing,
    -1 non-increasing, 0 unconstrained. Decreasing responses are realized by
    reflecting that input (x -> 1-x) in front of a monotone calibrator, so
    every constrained path is a composition of non-decreasing pieces.

    The default declaration is +1 on the diagonal and -1 off it: raising
    input k raises raw output k and lowers every other raw output, which
    makes even the softmax-normalized target k non-decreasing in input k.
    """

    def __init__(
        self,
        k: int,
        n_keypoints: int = 5,
        embed_dim: int | None = None,
        lattice_vertices: int = 2,
        declaration=None,
        seed: int = 0,
        name: str = "dln",
    ):
        if k < 1:
            raise ShapeError(f"{name}: need at least one input, got k={k}")
        self.k = k
        self.name = name
        self.embed_dim = min(k, 3) if embed_dim is None else int(embed_dim)
        if declaration is None:
            declaration = 2 * np.eye(k, dtype=np.int64) - 1
        self.declaration = np.asarray(declaration, dtype=np.int64)
        if self.declaration.shape != (k, k):
            raise ShapeError(f"{name}: declaration must be {k}x{k}, got {self.declaration.shape}")
        if np.any(self.declaration.diagonal() != 1):
            raise ShapeError(f"{name}: every own input->output pair must be declared +1")

        kp = np.linspace(0.0, 1.0, n_keypoints)
        # One jitter template reused by every subnetwork, constant across
        # input columns: all subnetworks start identical AND permutation
        # symmetric, so equal inputs produce equal outputs even though each
        # subnetwork reflects a different subset of its inputs.
        rng = np.random.default_rng(seed)
        jitter = np.repeat(rng.uniform(0.85, 1.15, size=(self.embed_dim, 1)), k, axis=1) / k
        raw_w = _inv_softplus(jitter)

        self.in_cals: list[list[Calibrator]] = []
        self.embeds: list[LinearEmbedding] = []
        self.mid_cals: list[list[Calibrator]] = []
        self.lattices: list[Lattice] = []
        for sub in range(k):
            self.in_cals.append(
                [
                    Calibrator(
                        kp,
                        monotone=self.declaration[j, sub] != 0,
                        name=f"{name}/s{sub}/in{j}",
                    )
                    for j in range(k)
                ]
            )
            self.embeds.append(
                LinearEmbedding(
                    raw_w.copy(),
                    np.zeros(self.embed_dim),
                    np.ones(k, dtype=bool),
                    name=f"{name}/s{sub}/embed",
                )
            )
            self.mid_cals.append(
                [
                    Calibrator(kp, monotone=True, name=f"{name}/s{sub}/mid{e}")
                    for e in range(self.embed_dim)
                ]
            )
            self.lattices.append(
                Lattice(
                    (lattice_vertices,) * self.embed_dim,
                    name=f"{name}/s{sub}/lat",
                )
            )

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for sub in range(self.k):
            for cal in self.in_cals[sub]:
                out.extend(cal.parameters())
            out.extend(self.embeds[sub].parameters())
            for cal in self.mid_cals[sub]:
                out.extend(cal.parameters())
            out.extend(self.lattices[sub].parameters())
        return out

    def project(self) -> None:
        for lat in self.lattices:
            project_monotone(lat)

    def monotone_violation(self) -> float:
        """Worst lattice-parameter ordering violation (0 when feasible)."""
        return max(
            _monotone_violation(lat.params.value, lat.mask) for lat in self.lattices
        )


def dln_eval(net: LatticeNetwork, u):
    """Raw fusion targets for inputs ``u`` in [0,1]^K.

    Accepts a K-vector or a (batch, K) matrix; returns matching shape. Each
    output k is non-decreasing in u_k and non-increasing in u_j (j != k)
    under the default declaration.
    """
    ut = as_tensor(u)
    single = ut.ndim == 1
    if single:
        ut = reshape(ut, (1, net.k))
    if ut.ndim != 2 or ut.shape[1] != net.k:
        raise ShapeError(f"{net.name}: expected (batch, {net.k}) inputs, got {ut.shape}")
    B = ut.shape[0]

    outputs = []
    for sub in range(net.k):
        cols = []
        for j in range(net.k):
            col = reshape(narrow(ut, 1, j, 1), (B,))
            if net.declaration[j, sub] < 0:
                col = add(negate(col), 1.0)
            cal = net.in_cals[sub][j]
            cols.append(reshape(pwl_interp(cal.effective_outputs(), col, cal.keypoints), (B, 1)))
        calibrated = concatenate(cols, axis=1)

        emb = net.embeds[sub]
        w_t = transpose(emb.effective_coefficients())
        embedded = add(matmul(calibrated, w_t), emb.bias.tensor())

        mids = []
        for e in range(net.embed_dim):
            col = reshape(narrow(embedded, 1, e, 1), (B,))
            cal = net.mid_cals[sub][e]
            mids.append(reshape(pwl_interp(cal.effective_outputs(), col, cal.keypoints), (B, 1)))
        mid = concatenate(mids, axis=1)

        lat = net.lattices[sub]
        flat = reshape(lat.params.tensor(), (int(np.prod(lat.sizes)),))
        outputs.append(reshape(lattice_interp(flat, mid, lat.sizes), (B, 1)))

    out = concatenate(outputs, axis=1)
    if single:
        out = reshape(out, (net.k,))
    return out

"""CP decomposition of stacked task tensors via alternating least squares.

The model for a d_in × d_out × N tensor is

    T[i,j,k] ≈ Σ_r lam[r] · b_row[i,r] · c_col[j,r] · a_task[k,r]

with unit-norm columns in every factor matrix and all magnitude carried
by ``lam`` (non-negative, sorted descending).  Merging over tasks and
per-task slice reconstruction are linear in the factors and implemented
directly from this form.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import fold, frobenius_norm, khatri_rao, stack_slices, unfold
from .svd_kernel import svd

_COND_LIMIT = 1e12  # beyond this the normal equations get a ridge


@dataclass(frozen=True)
class AlsOptions:
    """Knobs for cp_als. init is "svd" (HOSVD-style) or "random" (seeded)."""

    max_iters: int = 200
    tol: float = 1e-8
    init: str = "svd"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be ≥ 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.init not in ("svd", "random"):
            raise ValueError(f"init must be 'svd' or 'random', got {self.init!r}")


@dataclass(frozen=True)
class CPFactors:
    """One layer's CP model.

    lam: length-R component weights; a_task: N×R task loadings;
    b_row: d_in×R; c_col: d_out×R; fit: 1 − relative reconstruction error
    (0.0 when never evaluated against a tensor); error_trace: per-iteration
    relative errors from the ALS run that produced this value.
    """

    rank_R: int
    lam: np.ndarray
    a_task: np.ndarray
    b_row: np.ndarray
    c_col: np.ndarray
    fit: float = 0.0
    error_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.rank_R < 1:
            raise ValueError(f"rank_R must be ≥ 1, got {self.rank_R}")
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=np.float64))
        object.__setattr__(self, "a_task", np.asarray(self.a_task, dtype=np.float64))
        object.__setattr__(self, "b_row", np.asarray(self.b_row, dtype=np.float64))
        object.__setattr__(self, "c_col", np.asarray(self.c_col, dtype=np.float64))
        R = self.rank_R
        if self.lam.shape != (R,):
            raise ValueError(f"lam must have shape ({R},), got {self.lam.shape}")
        for name in ("a_task", "b_row", "c_col"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[1] != R:
                raise ValueError(f"{name} must have {R} columns, got shape {m.shape}")
        for name in ("lam", "a_task", "b_row", "c_col"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "fit", float(self.fit))
        if not 0.0 <= self.fit <= 1.0:
            raise ValueError(f"fit must lie in [0,1], got {self.fit}")

    @property
    def n_tasks(self) -> int:
        return self.a_task.shape[0]

    @property
    def d_in(self) -> int:
        return self.b_row.shape[0]

    @property
    def d_out(self) -> int:
        return self.c_col.shape[0]


def _cycling_basis(dim: int, R: int) -> np.ndarray:
    out = np.zeros((dim, R))
    out[np.arange(R) % dim, np.arange(R)] = 1.0
    return out


def _normalize_columns(f):
    norms = np.linalg.norm(f, axis=0)
    return f / np.where(norms > 0, norms, 1.0), norms


def normalize_factors(lam, a_task, b_row, c_col):
    """Canonical CP form, losslessly.

    All column norms (and lam's sign) are absorbed into a non-negative lam;
    b/c columns are flipped so their largest-magnitude entry is positive
    (compensated in a_task); components sorted by lam descending; dead
    components get zeroed loadings and canonical unit b/c columns.
    """
    lam = np.asarray(lam, dtype=np.float64).copy()
    a, na = _normalize_columns(np.asarray(a_task, dtype=np.float64))
    b, nb = _normalize_columns(np.asarray(b_row, dtype=np.float64))
    c, nc = _normalize_columns(np.asarray(c_col, dtype=np.float64))
    a = a * np.sign(lam)[np.newaxis, :]  # lam's sign rides along in a
    lam = np.abs(lam) * na * nb * nc

    dead = lam == 0
    if dead.any():
        a[:, dead] = 0.0
        b[:, dead] = 0.0
        b[0, dead] = 1.0
        c[:, dead] = 0.0
        c[0, dead] = 1.0

    cols = np.arange(lam.size)
    sb = np.where(b[np.argmax(np.abs(b), axis=0), cols] < 0, -1.0, 1.0)
    sc = np.where(c[np.argmax(np.abs(c), axis=0), cols] < 0, -1.0, 1.0)
    b *= sb
    c *= sc
    a *= sb * sc

    order = np.argsort(-lam, kind="stable")
    return lam[order], a[:, order], b[:, order], c[:, order]


def _reconstruct_raw(lam, a, b, c, dims):
    # mode-1 identity: unfold(T,1) = B·diag(lam)·KR(A,C)ᵀ
    return fold((b * lam) @ khatri_rao(a, c).T, 1, dims)


def _ls_solve(gram, mttkrp):
    """Solve factor·gram = mttkrp; ridge kicks in when gram is near-singular."""
    R = gram.shape[0]
    c = np.linalg.cond(gram)
    if not c < _COND_LIMIT:  # also catches inf/nan
        tr = float(np.trace(gram))
        eps = 1e-10 * tr / R if tr > 0 else 1e-10
        gram = gram + eps * np.eye(R)
    return np.linalg.solve(gram, mttkrp.T).T


def _gram_leading_vectors(x, R, rng):
    """Leading left singular vectors of x via its (small) Gram matrix."""
    dim = x.shape[0]
    u = svd(x @ x.T).u
    if R <= dim:
        return np.array(u[:, :R])
    pad, _ = _normalize_columns(rng.standard_normal((dim, R - dim)))
    return np.hstack([u, pad])


def _init_factors(x1, x2, x3, R, opts, rng):
    if opts.init == "svd":
        a = _gram_leading_vectors(x3, R, rng)
        b = _gram_leading_vectors(x1, R, rng)
        c = _gram_leading_vectors(x2, R, rng)
    else:
        a, _ = _normalize_columns(rng.standard_normal((x3.shape[0], R)))
        b, _ = _normalize_columns(rng.standard_normal((x1.shape[0], R)))
        c, _ = _normalize_columns(rng.standard_normal((x2.shape[0], R)))
    return a, b, c


def cp_als(t, R: int, opts: AlsOptions | None = None) -> CPFactors:
    """Rank-R CP fit by alternating least squares.

    Update order per iteration is task mode, then row, then column; each
    update is an exact least-squares solve, so the reconstruction error is
    non-increasing across iterations.  Stops when the fit change drops
    below opts.tol or after opts.max_iters iterations.  Deterministic for
    fixed (t, R, opts).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={t.ndim}")
    if not np.all(np.isfinite(t)):
        raise ValueError("cp_als: tensor has non-finite entries")
    if opts is None:
        opts = AlsOptions()
    d_in, d_out, n = t.shape
    max_rank = min(d_in * d_out, d_in * n, d_out * n)
    if not 1 <= R <= max_rank:
        raise ValueError(f"R={R} out of range [1, {max_rank}] for shape {t.shape}")

    norm_t = frobenius_norm(t)
    if norm_t == 0.0:
        return CPFactors(
            rank_R=R,
            lam=np.zeros(R),
            a_task=np.zeros((n, R)),
            b_row=_cycling_basis(d_in, R),
            c_col=_cycling_basis(d_out, R),
            fit=1.0,  # zero tensor fits itself perfectly
            error_trace=(0.0,),
        )

    x1, x2, x3 = unfold(t, 1), unfold(t, 2), unfold(t, 3)
    rng = np.random.default_rng(opts.seed)
    a, b, c = _init_factors(x1, x2, x3, R, opts, rng)
    lam = np.ones(R)

    trace: list = []
    prev_fit = None
    for _ in range(opts.max_iters):
        a = _ls_solve((c.T @ c) * (b.T @ b), x3 @ khatri_rao(c, b))
        a, _ = _normalize_columns(a)
        b = _ls_solve((a.T @ a) * (c.T @ c), x1 @ khatri_rao(a, c))
        b, _ = _normalize_columns(b)
        c = _ls_solve((a.T @ a) * (b.T @ b), x2 @ khatri_rao(a, b))
        c, lam = _normalize_columns(c)

        err = frobenius_norm(t - _reconstruct_raw(lam, a, b, c, t.shape)) / norm_t
        assert not trace or err <= trace[-1] + 1e-12, "ALS error increased"
        trace.append(err)
        fit = 1.0 - err
        if prev_fit is not None and abs(fit - prev_fit) < opts.tol:
            break
        prev_fit = fit

    lam, a, b, c = normalize_factors(lam, a, b, c)
    return CPFactors(
        rank_R=R,
        lam=lam,
        a_task=a,
        b_row=b,
        c_col=c,
        fit=min(1.0, max(0.0, 1.0 - trace[-1])),
        error_trace=tuple(trace),
    )


def cp_reconstruct_slice(f: CPFactors, i: int) -> np.ndarray:
    """Task i's slice: Σ_r lam[r]·a_task[i,r]·b_row[:,r]·c_col[:,r]ᵀ."""
    if not 0 <= i < f.n_tasks:
        raise ValueError(f"task index {i} out of range for n_tasks={f.n_tasks}")
    return (f.b_row * (f.lam * f.a_task[i])) @ f.c_col.T


def cp_reconstruct(f: CPFactors) -> np.ndarray:
    """Full model tensor, stacked from per-task slices."""
    return stack_slices([cp_reconstruct_slice(f, i) for i in range(f.n_tasks)])


def cp_merge(f: CPFactors) -> np.ndarray:
    """Merged delta: task loadings summed per component before assembly."""
    coeff = f.lam * f.a_task.sum(axis=0)
    return (f.b_row * coeff) @ f.c_col.T


def cp_compress_task(f: CPFactors, h: int) -> np.ndarray:
    """Low-rank stand-in for task h's dense delta.

    Identical to cp_reconstruct_slice: compressing to task h keeps each
    component scaled by that task's loading.
    """
    if not 0 <= h < f.n_tasks:
        raise ValueError(f"task index {h} out of range for n_tasks={f.n_tasks}")
    return cp_reconstruct_slice(f, h)


def storage_bytes(f, element_bytes: int = 4) -> int:
    """Bytes to store the factor set at the given element width.

    Accepts a single CPFactors, an iterable of them, or a mapping whose
    values are CPFactors (a per-layer factor set); collections are summed.
    """
    if isinstance(f, CPFactors):
        n_elems = f.rank_R * (1 + f.n_tasks + f.d_in + f.d_out)
        return int(n_elems) * int(element_bytes)
    values = f.values() if hasattr(f, "values") else f
    return sum(storage_bytes(v, element_bytes) for v in values)


# --- serialization (.cpf): one-line JSON header, then raw little-endian floats

_CPF_DTYPE = "<f4"  # float32 on disk, widened on load


def save_factors(f: CPFactors, path) -> None:
    arrays = [
        f.lam.astype(_CPF_DTYPE),
        np.ascontiguousarray(f.a_task, dtype=_CPF_DTYPE),
        np.ascontiguousarray(f.b_row, dtype=_CPF_DTYPE),
        np.ascontiguousarray(f.c_col, dtype=_CPF_DTYPE),
    ]
    offsets = {}
    pos = 0
    for name, arr in zip(("lam", "a_task", "b_row", "c_col"), arrays):
        offsets[name] = pos
        pos += arr.nbytes
    header = {
        "format": "cpf",
        "version": 1,
        "rank": f.rank_R,
        "n_tasks": f.n_tasks,
        "d_in": f.d_in,
        "d_out": f.d_out,
        "dtype": _CPF_DTYPE,
        "offsets": offsets,
        "fit": repr(float(f.fit)),
    }
    blob = json.dumps(header, sort_keys=True).encode("ascii") + b"\n"
    blob += b"".join(arr.tobytes() for arr in arrays)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_factors(path) -> CPFactors:
    from .errors import ContainerFormatError

    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise ContainerFormatError(f"{path}: bad cpf header: {e}") from None
    if header.get("format") != "cpf":
        raise ContainerFormatError(f"{path}: not a cpf container")
    R, n, d_in, d_out = (header[k] for k in ("rank", "n_tasks", "d_in", "d_out"))
    dtype = np.dtype(header["dtype"])
    shapes = {"lam": (R,), "a_task": (n, R), "b_row": (d_in, R), "c_col": (d_out, R)}
    expected = sum(int(np.prod(s)) for s in shapes.values()) * dtype.itemsize
    if len(payload) != expected:
        raise ContainerFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    out = {}
    for name, shape in shapes.items():
        start = header["offsets"][name]
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return CPFactors(
        rank_R=R,
        lam=out["lam"],
        a_task=out["a_task"],
        b_row=out["b_row"],
        c_col=out["c_col"],
        fit=float(header.get("fit", 0.0)),
    )

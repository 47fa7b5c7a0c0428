"""Persistent global volume: per-voxel GRU fusion of fragment features into
the stored hidden state, residual TSDF composition between levels, and the
weighted total loss.

The recurrent unit is the pointwise (1-voxel-kernel) form of a convolutional
GRU; parameters are deterministic by default and loadable from a sidecar.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, SidecarFormatError

DEFAULT_LOSS_WEIGHTS = (1.0, 0.8, 0.64)
GRU_SIDECAR_MAGIC = b"VFG1"
CHECKPOINT_MAGIC = b"VFV1"


@dataclass
class GruParams:
    """Update gate, reset gate and candidate transforms for feature width C.

    Each matrix maps the concatenation [local; global] (2C) to C outputs.
    """

    w_z: np.ndarray  # (C, 2C)
    b_z: np.ndarray  # (C,)
    w_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        c = self.b_z.shape[0]
        for name in ("w_z", "w_r", "w_h"):
            m = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, m)
            if m.shape != (c, 2 * c):
                raise InvalidInputError(f"{name} must be ({c}, {2 * c}), got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise InvalidInputError(f"{name} contains non-finite entries")
        for name in ("b_z", "b_r", "b_h"):
            b = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            setattr(self, name, b)
            if b.shape != (c,) or not np.all(np.isfinite(b)):
                raise InvalidInputError(f"{name} must be a finite ({c},) vector")

    @property
    def width(self) -> int:
        return self.b_z.shape[0]


def default_gru_params(width: int, seed: int = 20240331) -> GruParams:
    """Reproducible near-orthogonal parameters for a given feature width."""
    if width < 1:
        raise InvalidInputError("feature width must be >= 1")
    rng = np.random.default_rng(seed + width)

    def ortho(rows, cols):
        a = rng.normal(size=(max(rows, cols), max(rows, cols)))
        q, _ = np.linalg.qr(a)
        return q[:rows, :cols]

    return GruParams(
        w_z=ortho(width, 2 * width), b_z=np.zeros(width),
        w_r=ortho(width, 2 * width), b_r=np.zeros(width),
        w_h=ortho(width, 2 * width), b_h=np.zeros(width),
    )


def gru_fuse(local: np.ndarray, hidden: np.ndarray, params: GruParams) -> np.ndarray:
    """One recurrence step per voxel.

    z = sigmoid(W_z [L; G] + b_z), r = sigmoid(W_r [L; G] + b_r),
    h = tanh(W_h [L; r * G] + b_h), output (1 - z) * G + z * h.
    """
    local = np.asarray(local, dtype=float)
    hidden = np.asarray(hidden, dtype=float)
    c = params.width
    if local.ndim != 2 or local.shape[1] != c or hidden.shape != local.shape:
        raise InvalidInputError(
            f"local/hidden must both be (D, {c}); got {local.shape} and {hidden.shape}"
        )
    cat = np.concatenate([local, hidden], axis=1)
    z = expit(cat @ params.w_z.T + params.b_z)
    r = expit(cat @ params.w_r.T + params.b_r)
    cand_in = np.concatenate([local, r * hidden], axis=1)
    h = np.tanh(cand_in @ params.w_h.T + params.b_h)
    return (1.0 - z) * hidden + z * h


def compose_residual(coarse_upsampled: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Fine TSDF = clamp(upsampled coarse + residual, -1, 1).

    A zero residual returns the coarse field bitwise unchanged.
    """
    coarse = np.asarray(coarse_upsampled, dtype=float)
    d = np.asarray(delta, dtype=float)
    if coarse.shape != d.shape:
        raise InvalidInputError("coarse and delta must share a shape")
    if not np.any(d):
        return coarse.copy()
    return np.clip(coarse + d, -1.0, 1.0)


# ---------------------------------------------------------------------------
# global volume

@dataclass
class GlobalVolume:
    """Per-level sparse maps voxel coordinate -> (hidden C-vector, tsdf)."""

    width: int
    levels: dict[int, dict[tuple[int, int, int], tuple[np.ndarray, float]]] = field(
        default_factory=dict
    )

    def level(self, lvl: int) -> dict:
        return self.levels.setdefault(lvl, {})

    def lookup_hidden(self, lvl: int, coords: np.ndarray) -> np.ndarray:
        """Hidden states at the given coordinates; zeros where absent."""
        table = self.level(lvl)
        out = np.zeros((len(coords), self.width))
        for i, c in enumerate(map(tuple, np.asarray(coords, dtype=np.int64))):
            entry = table.get(c)
            if entry is not None:
                out[i] = entry[0]
        return out

    def lookup_tsdf(self, lvl: int, coords: np.ndarray,
                    default: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """(tsdf values, found mask); absent coordinates get ``default``."""
        table = self.level(lvl)
        n = len(coords)
        vals = np.full(n, default)
        found = np.zeros(n, dtype=bool)
        for i, c in enumerate(map(tuple, np.asarray(coords, dtype=np.int64))):
            entry = table.get(c)
            if entry is not None:
                vals[i] = entry[1]
                found[i] = True
        return vals, found

    def num_voxels(self, lvl: int) -> int:
        return len(self.level(lvl))

    def coords_array(self, lvl: int) -> np.ndarray:
        """Sorted (D, 3) coordinate array of one level."""
        table = self.level(lvl)
        if not table:
            return np.empty((0, 3), dtype=np.int64)
        return np.array(sorted(table.keys()), dtype=np.int64)

    def tsdf_dict(self, lvl: int) -> dict[tuple[int, int, int], float]:
        return {c: v[1] for c, v in self.level(lvl).items()}


def update_global(volume: GlobalVolume, lvl: int, coords: np.ndarray,
                  fused: np.ndarray, tsdf: np.ndarray) -> GlobalVolume:
    """Overwrite/insert the fragment's voxels; untouched voxels stay verbatim."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    fused = np.asarray(fused, dtype=float)
    tsdf = np.asarray(tsdf, dtype=float)
    if fused.shape != (coords.shape[0], volume.width) or tsdf.shape != (coords.shape[0],):
        raise InvalidInputError("fused/tsdf must share the fragment's index set")
    if np.any(np.abs(tsdf) > 1.0 + 1e-12):
        raise InvalidInputError("tsdf values must lie in [-1, 1]")
    table = volume.level(lvl)
    for i, c in enumerate(map(tuple, coords)):
        table[c] = (fused[i].copy(), float(tsdf[i]))
    return volume


def upsample_global_tsdf(volume: GlobalVolume, coarse_lvl: int,
                         fine_coords: np.ndarray, trilinear: bool = False,
                         ) -> tuple[np.ndarray, int]:
    """Coarse TSDF sampled at fine voxels (nearest parent by default).

    Absent parents contribute the empty-space value +1; returns the values and
    the count of such fallbacks so callers can log them.
    """
    fine_coords = np.asarray(fine_coords, dtype=np.int64).reshape(-1, 3)
    parents = fine_coords // 2
    vals, found = volume.lookup_tsdf(coarse_lvl, parents, default=1.0)
    missing = int((~found).sum())
    if not trilinear:
        return vals, missing
    # trilinear variant: average the 8 coarse cells around the child center
    out = np.zeros(len(fine_coords))
    offs = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"),
                    axis=-1).reshape(-1, 3)
    # child center sits a quarter voxel off the parent center along each axis
    even = fine_coords % 2 == 0
    base = parents + np.where(even, -1, 0)
    w_hi = np.where(even, 0.75, 0.25)  # weight of the base+1 neighbor per axis
    for off in offs:
        nb = base + off
        v, _ = volume.lookup_tsdf(coarse_lvl, nb, default=1.0)
        w = np.prod(np.where(off == 1, w_hi, 1.0 - w_hi), axis=1)
        out += w * v
    return out, missing


def total_loss(per_level: dict[int, dict[str, float]],
               weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS) -> float:
    """Weighted sum over levels of the five per-level loss terms."""
    total = 0.0
    for lvl, terms in per_level.items():
        if not 1 <= lvl <= len(weights):
            raise InvalidInputError(f"level {lvl} has no loss weight")
        total += weights[lvl - 1] * sum(terms.values())
    return float(total)


# ---------------------------------------------------------------------------
# sidecar / checkpoint formats

def write_gru_sidecar(path: str, level: int, params: GruParams) -> None:
    """Binary format: 'VFG1', level, C (int32 LE), then W_z b_z W_r b_r W_h b_h
    as little-endian float32 in row-major order."""
    with open(path, "wb") as fh:
        fh.write(GRU_SIDECAR_MAGIC)
        fh.write(struct.pack("<ii", level, params.width))
        for arr in (params.w_z, params.b_z, params.w_r, params.b_r,
                    params.w_h, params.b_h):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def read_gru_sidecar(path: str) -> tuple[int, GruParams]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRU_SIDECAR_MAGIC:
            raise SidecarFormatError(f"{path!r}: bad magic {magic!r}")
        level, c = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    need = 3 * (c * 2 * c + c)
    if data.size != need:
        raise SidecarFormatError(f"{path!r}: expected {need} floats, got {data.size}")
    pos = 0
    parts = []
    for _ in range(3):
        parts.append(data[pos:pos + 2 * c * c].reshape(c, 2 * c))
        pos += 2 * c * c
        parts.append(data[pos:pos + c])
        pos += c
    return level, GruParams(w_z=parts[0], b_z=parts[1], w_r=parts[2],
                            b_r=parts[3], w_h=parts[4], b_h=parts[5])


def save_global_volume(path: str, volume: GlobalVolume) -> None:
    """Checkpoint: 'VFV1', C, level count; per level: level id, voxel count,
    then records of (3 int32 coords, C float32 hidden, 1 float32 tsdf)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<ii", volume.width, len(volume.levels)))
        for lvl in sorted(volume.levels):
            table = volume.levels[lvl]
            fh.write(struct.pack("<ii", lvl, len(table)))
            for c in sorted(table):
                hidden, tsdf = table[c]
                fh.write(struct.pack("<iii", *c))
                fh.write(np.asarray(hidden, dtype="<f4").tobytes())
                fh.write(struct.pack("<f", tsdf))


def load_global_volume(path: str) -> GlobalVolume:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SidecarFormatError(f"{path!r}: bad magic {magic!r}")
        width, n_levels = struct.unpack("<ii", fh.read(8))
        volume = GlobalVolume(width=width)
        for _ in range(n_levels):
            lvl, count = struct.unpack("<ii", fh.read(8))
            table = volume.level(lvl)
            rec = 12 + 4 * width + 4
            blob = fh.read(rec * count)
            if len(blob) != rec * count:
                raise SidecarFormatError(f"{path!r}: truncated level {lvl}")
            for i in range(count):
                off = i * rec
                c = struct.unpack_from("<iii", blob, off)
                hidden = np.frombuffer(blob, dtype="<f4", count=width,
                                       offset=off + 12).astype(np.float64)
                (tsdf,) = struct.unpack_from("<f", blob, off + 12 + 4 * width)
                table[c] = (hidden, float(tsdf))
    return volume

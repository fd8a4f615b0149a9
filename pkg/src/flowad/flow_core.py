"""Conditional affine-coupling flow decoders with exact log-det Jacobians.

Each scale gets an independent decoder: a stack of coupling layers with
fixed seeded permutations and a two-layer dense subnet (softplus hidden
activation) that maps the passive half plus the condition vector to the
scale/shift of the active half. The scale output is soft-clamped,
s = alpha * tanh(s_raw / alpha), so |s| <= alpha for any subnet output.

Direction convention: `forward` maps base samples u towards data z
(generative direction); `inverse` maps data z to u and returns the
log-det of the inverse map, which is the term entering the likelihood.

Inference paths use an unoptimized einsum matmul: unlike BLAS gemm it is
bitwise independent of how positions are batched, which makes scoring
results identical for any evaluation batch size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError
from .numerics import GradTape, Tensor

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1

DEFAULT_CONDITION_DIM = 128
DEFAULT_PE_BASE = 10000.0
DEFAULT_CLAMP = 1.9
DEFAULT_LAYERS = 8


def _det_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # batch-size-invariant matrix product (see module docstring)
    return np.einsum("nk,km->nm", x, w, optimize=False)


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def positional_encoding(h: int, w: int, channels: int,
                        base: float = DEFAULT_PE_BASE) -> np.ndarray:
    """2D sinusoidal condition vector for grid location (h, w).

    Layout per frequency j (omega_j = base**(-4j/C)):
    [sin(h*w_j), cos(h*w_j), sin(w*w_j), cos(w*w_j)].
    """
    if channels % 4 != 0:
        raise ConfigError(f"condition channels must be divisible by 4, got {channels}")
    if h < 0 or w < 0:
        raise ConfigError("grid coordinates must be non-negative")
    if channels == 0:
        return np.zeros(0)
    j = np.arange(channels // 4)
    omega = float(base) ** (-4.0 * j / channels)
    out = np.empty(channels)
    out[0::4] = np.sin(h * omega)
    out[1::4] = np.cos(h * omega)
    out[2::4] = np.sin(w * omega)
    out[3::4] = np.cos(w * omega)
    return out


def positional_encoding_grid(height: int, width: int, channels: int,
                             base: float = DEFAULT_PE_BASE) -> np.ndarray:
    """(H*W, C) encodings in raster order (h-major)."""
    if channels % 4 != 0:
        raise ConfigError(f"condition channels must be divisible by 4, got {channels}")
    if channels == 0:
        return np.zeros((height * width, 0))
    j = np.arange(channels // 4)
    omega = float(base) ** (-4.0 * j / channels)
    hs = np.repeat(np.arange(height), width)[:, None] * omega
    ws = np.tile(np.arange(width), height)[:, None] * omega
    out = np.empty((height * width, channels))
    out[:, 0::4] = np.sin(hs)
    out[:, 1::4] = np.cos(hs)
    out[:, 2::4] = np.sin(ws)
    out[:, 3::4] = np.cos(ws)
    return out


# ---------------------------------------------------------------------------
# coupling layers
# ---------------------------------------------------------------------------

@dataclass
class CouplingLayer:
    """One conditional affine coupling step over permuted coordinates."""

    dim: int
    cond_dim: int
    parity: int           # 0: first ceil(D/2) coords passive; 1: last
    clamp: float
    perm: np.ndarray      # fixed permutation applied before the split
    w1: np.ndarray        # (Da+C, Da+C)
    b1: np.ndarray        # (Da+C,)
    w2: np.ndarray        # (Da+C, 2*Db)
    b2: np.ndarray        # (2*Db,)

    def __post_init__(self):
        self.inv_perm = np.argsort(self.perm)

    @property
    def passive(self) -> int:
        return (self.dim + 1) // 2

    @property
    def active(self) -> int:
        return self.dim // 2

    def _split(self, zp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        da = self.passive
        if self.parity == 0:
            return zp[:, :da], zp[:, da:]
        return zp[:, self.dim - da:], zp[:, :self.dim - da]

    def _join(self, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
        if self.parity == 0:
            return np.concatenate([za, zb], axis=1)
        return np.concatenate([zb, za], axis=1)

    def _scale_shift(self, za: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([za, c], axis=1) if self.cond_dim > 0 else za
        hidden = _softplus_np(_det_matmul(x, self.w1) + self.b1)
        out = _det_matmul(hidden, self.w2) + self.b2
        db = self.active
        s = self.clamp * np.tanh(out[:, :db] / self.clamp)
        return s, out[:, db:]

    def forward(self, z: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Generative step u -> z. Returns (z_out, per-row log-det)."""
        z, c = _check_batch(self, z, c)
        zp = z[:, self.perm]
        za, zb = self._split(zp)
        s, t = self._scale_shift(za, c)
        out = self._join(za, zb * np.exp(s) + t)
        return out, s.sum(axis=1)

    def inverse(self, z_out: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact algebraic inverse. Returns (z, per-row log-det of the inverse)."""
        z_out, c = _check_batch(self, z_out, c)
        za, zb2 = self._split(z_out)
        s, t = self._scale_shift(za, c)
        zp = self._join(za, (zb2 - t) * np.exp(-s))
        return zp[:, self.inv_perm], -s.sum(axis=1)

    # traced twin of inverse(), used by the training loss
    def traced_inverse(self, tape: GradTape, z_out: Tensor, c: Tensor,
                       params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        da, db = self.passive, self.dim - self.passive
        if self.parity == 0:
            za = nx.slice_cols(z_out, 0, da)
            zb2 = nx.slice_cols(z_out, da, self.dim)
        else:
            za = nx.slice_cols(z_out, self.dim - da, self.dim)
            zb2 = nx.slice_cols(z_out, 0, self.dim - da)
        x = nx.concat_cols(za, c) if self.cond_dim > 0 else za
        hidden = nx.softplus(nx.add(nx.matmul(x, params["w1"]), params["b1"]))
        out = nx.add(nx.matmul(hidden, params["w2"]), params["b2"])
        s = nx.scale(nx.tanh(nx.scale(nx.slice_cols(out, 0, db), 1.0 / self.clamp)),
                     self.clamp)
        t = nx.slice_cols(out, db, 2 * db)
        zb = nx.mul(nx.sub(zb2, t), nx.exp(nx.neg(s)))
        zp = nx.concat_cols(za, zb) if self.parity == 0 else nx.concat_cols(zb, za)
        return nx.gather_cols(zp, self.inv_perm), nx.neg(nx.row_sum(s))

    def parameter_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 30.0, x + np.log1p(np.exp(-np.abs(x))),
                    np.log1p(np.exp(np.minimum(x, 30.0))))


def _check_batch(layer: CouplingLayer, z: np.ndarray, c: np.ndarray):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape == (1, 0) and z.shape[0] > 1:
        c = np.zeros((z.shape[0], 0))
    if z.shape[1] != layer.dim:
        raise DimensionError(f"expected dim {layer.dim}, got {z.shape[1]}")
    if c.shape[1] != layer.cond_dim:
        raise DimensionError(
            f"expected condition dim {layer.cond_dim}, got {c.shape[1]}")
    if c.shape[0] != z.shape[0]:
        raise DimensionError(
            f"batch mismatch: {z.shape[0]} inputs vs {c.shape[0]} conditions")
    return z, c


def make_coupling_layer(dim: int, cond_dim: int, parity: int,
                        rng: np.random.Generator, perm: np.ndarray,
                        clamp: float = DEFAULT_CLAMP) -> CouplingLayer:
    """Identity-initialized layer: zeroed final subnet weights."""
    da = (dim + 1) // 2
    db = dim - da
    fan_in = da + cond_dim
    w1 = rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), size=(fan_in, fan_in))
    return CouplingLayer(
        dim=dim, cond_dim=cond_dim, parity=parity, clamp=clamp,
        perm=np.asarray(perm, dtype=np.intp),
        w1=w1, b1=np.zeros(fan_in),
        w2=np.zeros((fan_in, 2 * db)), b2=np.zeros(2 * db))


# ---------------------------------------------------------------------------
# per-scale decoder and multi-scale model
# ---------------------------------------------------------------------------

class ScaleDecoder:
    """Stack of coupling layers for one pyramid scale."""

    def __init__(self, dim: int, cond_dim: int, num_layers: int,
                 clamp: float = DEFAULT_CLAMP, perm_seed: int = 0,
                 pe_base: float = DEFAULT_PE_BASE):
        if dim < 1 or num_layers < 1:
            raise ConfigError("dim and num_layers must be positive")
        if cond_dim % 4 != 0:
            raise ConfigError("condition dim must be divisible by 4 (or 0)")
        self.dim = dim
        self.cond_dim = cond_dim
        self.num_layers = num_layers
        self.clamp = float(clamp)
        self.perm_seed = int(perm_seed)
        self.pe_base = float(pe_base)
        rng = np.random.default_rng(self.perm_seed)
        # all permutations are drawn before any weights so that checkpoint
        # loading can rebuild them from the seed alone
        perms = [rng.permutation(dim) for _ in range(num_layers)]
        self.layers = [
            make_coupling_layer(dim, cond_dim, i % 2, rng, perms[i], clamp)
            for i in range(num_layers)]

    def forward(self, u: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Generative direction: base u -> data z, with forward log-det."""
        z = np.atleast_2d(np.asarray(u, dtype=np.float64))
        total = np.zeros(z.shape[0])
        for layer in self.layers:
            z, ld = layer.forward(z, c)
            total = total + ld
        return z, total

    def inverse(self, z: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normalizing direction: data z -> base u, log-det of the inverse map."""
        u = np.atleast_2d(np.asarray(z, dtype=np.float64))
        total = np.zeros(u.shape[0])
        for layer in reversed(self.layers):
            u, ld = layer.inverse(u, c)
            total = total + ld
        return u, total

    def log_likelihood(self, z: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Per-row log-density under the flow with a standard normal base."""
        u, logdet = self.inverse(z, c)
        return -0.5 * ((u * u).sum(axis=1) + self.dim * np.log(2.0 * np.pi)) + logdet

    def register_parameters(self, tape: GradTape, prefix: str = "") -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameter_arrays():
                params[f"{prefix}L{i}.{name}"] = tape.parameter(f"{prefix}L{i}.{name}", arr)
        return params

    def traced_inverse(self, tape: GradTape, z: Tensor, c: Tensor,
                       params: dict[str, Tensor],
                       prefix: str = "") -> tuple[Tensor, Tensor]:
        u = z
        total = None
        for i in reversed(range(self.num_layers)):
            layer_params = {
                "w1": params[f"{prefix}L{i}.w1"], "b1": params[f"{prefix}L{i}.b1"],
                "w2": params[f"{prefix}L{i}.w2"], "b2": params[f"{prefix}L{i}.b2"]}
            u, ld = self.layers[i].traced_inverse(tape, u, c, layer_params)
            total = ld if total is None else nx.add(total, ld)
        return u, total

    def set_parameters(self, flat: np.ndarray) -> None:
        pos = 0
        for layer in self.layers:
            for _, arr in layer.parameter_arrays():
                n = arr.size
                arr[...] = flat[pos:pos + n].reshape(arr.shape)
                pos += n
        if pos != flat.size:
            raise FormatError(
                f"parameter payload has {flat.size} values, expected {pos}")

    def get_parameters(self) -> np.ndarray:
        return np.concatenate([arr.reshape(-1)
                               for layer in self.layers
                               for _, arr in layer.parameter_arrays()])

    @property
    def parameter_count(self) -> int:
        return sum(arr.size for layer in self.layers
                   for _, arr in layer.parameter_arrays())


class FlowModel:
    """K independent per-scale decoders."""

    def __init__(self, decoders: list[ScaleDecoder]):
        if not decoders:
            raise ConfigError("model needs at least one scale decoder")
        self.decoders = decoders

    @property
    def num_scales(self) -> int:
        return len(self.decoders)

    def scale(self, k: int) -> ScaleDecoder:
        if not 0 <= k < len(self.decoders):
            raise ConfigError(f"no decoder for scale {k}")
        return self.decoders[k]

    def parameter_bytes(self) -> int:
        return 8 * sum(d.parameter_count for d in self.decoders)


def build_flow_model(scale_dims: list[int], cond_dim: int = DEFAULT_CONDITION_DIM,
                     num_layers: int = DEFAULT_LAYERS, clamp: float = DEFAULT_CLAMP,
                     seed: int = 0, pe_base: float = DEFAULT_PE_BASE) -> FlowModel:
    decoders = [
        ScaleDecoder(dim=d, cond_dim=cond_dim, num_layers=num_layers,
                     clamp=clamp, perm_seed=seed * 1000 + k, pe_base=pe_base)
        for k, d in enumerate(scale_dims)]
    return FlowModel(decoders)


# ---------------------------------------------------------------------------
# checkpoint format "CFCK"
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: FlowModel) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
              struct.pack("<H", model.num_scales)]
    for dec in model.decoders:
        chunks.append(struct.pack("<IIId Q", dec.dim, dec.cond_dim,
                                  dec.num_layers, dec.clamp, dec.perm_seed))
        chunks.append(np.ascontiguousarray(dec.get_parameters(), dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> FlowModel:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CFCK checkpoint")
    version, num_scales = struct.unpack_from("<HH", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    decoders = []
    for _ in range(num_scales):
        if pos + 28 > len(buf):
            raise FormatError(f"{path}: truncated at byte {len(buf)}")
        dim, cond, layers, clamp, seed = struct.unpack_from("<IIId Q", buf, pos)
        pos += 28
        dec = ScaleDecoder(dim=dim, cond_dim=cond, num_layers=layers,
                           clamp=clamp, perm_seed=seed)
        n = dec.parameter_count
        if pos + 8 * n > len(buf):
            raise FormatError(f"{path}: truncated at byte {len(buf)}")
        dec.set_parameters(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).copy())
        pos += 8 * n
        decoders.append(dec)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return FlowModel(decoders)

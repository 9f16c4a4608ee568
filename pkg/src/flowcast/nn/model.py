"""Time-modulated windowed-attention velocity network.

The network maps a normalized state (C, H, W), a flow time t in [0, 1], and
a conditioning stack (cond_channels, H, W) to a velocity of the same shape
as the state. Architecture: dual patch embedding (3-D for pressure-level
variables, 2-D for surface variables joined with the conditioning), three
layers of windowed-attention blocks with a downsample/upsample pair around
the middle layer and the first layer's output added to the outputs of the
later two, then a linear patch recovery.

Each block is modulated by the flow time through a low-rank adaLN-Zero
module: the time embedding is projected through U @ V + bias to six
per-channel vectors (scale, shift, gate for the attention and MLP
sub-blocks). V and the bias start at zero, so every sub-block contributes
exactly zero at initialization and the gates open during training.

Everything is plain numpy with explicit reverse-mode gradients; the
forward caches exactly what the backward consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..grid import GridSpec, VariableRegistry
from . import ops

_MASK_VALUE = -1e9


class NonFiniteError(ArithmeticError):
    """Raised when an evaluation produces NaN or Inf values."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the velocity network."""

    embed_dim: int = 256
    depths: tuple[int, int, int] = (2, 12, 2)
    pressure_patch: tuple[int, int, int] = (2, 4, 4)
    surface_patch: tuple[int, int] = (4, 4)
    window: tuple[int, int, int] = (2, 6, 6)
    time_embed_dim: int = 256
    lowrank_r: int | None = 32
    n_heads: int = 8
    cond_channels: int = 11
    mlp_ratio: float = 4.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "pressure_patch", tuple(int(p) for p in self.pressure_patch))
        object.__setattr__(self, "surface_patch", tuple(int(p) for p in self.surface_patch))
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if len(self.depths) != 3:
            raise ValueError("depths must list three layer depths")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.lowrank_r is not None:
            if not 1 <= self.lowrank_r < min(self.time_embed_dim, 6 * self.embed_dim):
                raise ValueError(
                    "lowrank_r must satisfy 1 <= r < min(time_embed_dim, 6*embed_dim)"
                )
        if self.pressure_patch[1:] != self.surface_patch:
            raise ValueError("surface_patch must match the lat/lon pressure patch")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class LatentMap:
    """Patch-embedded feature map, channels-first (C', D, H', W')."""

    values: np.ndarray
    provenance: str  # pressure | surface | fused

    def __post_init__(self):
        if self.provenance not in ("pressure", "surface", "fused"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.values.ndim != 4:
            raise ValueError("latent map must be (C', D, H', W')")


@dataclass(frozen=True)
class LowRankModulation:
    """Factorized time-to-modulation projection: chunks = t_emb @ U @ V + bias.

    The six chunks are (scale, shift, gate) for the attention sub-block then
    the MLP sub-block. Zero-initialized V and bias make all chunks zero.
    """

    U: np.ndarray
    V: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        t_dim, r = self.U.shape
        r2, six_c = self.V.shape
        if r != r2 or self.bias.shape != (six_c,):
            raise ValueError("inconsistent low-rank modulation shapes")
        if six_c % 6 != 0:
            raise ValueError("modulation output must split into six chunks")
        if not 1 <= r < min(t_dim, six_c):
            raise ValueError("rank must satisfy 1 <= r < min(time_embed_dim, 6C)")

    def chunks(self, t_emb: np.ndarray):
        raw = (t_emb @ self.U) @ self.V + self.bias
        return tuple(np.split(raw, 6))


def adaln_modulate(h: np.ndarray, t_emb: np.ndarray, mod: LowRankModulation):
    """Six modulation chunk vectors for a latent and a time embedding.

    Returned in application order: (scale_attn, shift_attn, gate_attn,
    scale_mlp, shift_mlp, gate_mlp). They are applied to the layer-normalized
    latent as ``(1 + scale) * norm(h) + shift`` and the sub-block output is
    scaled by the gate before the residual add.
    """
    if h.shape[-1] * 6 != mod.V.shape[1]:
        raise ValueError("modulation width does not match latent channels")
    return mod.chunks(t_emb)


@dataclass(frozen=True)
class ParameterCount:
    total: int
    modulation: int


def modulation_params_per_block(time_embed_dim: int, channels: int, lowrank_r: int | None) -> int:
    six_c = 6 * channels
    if lowrank_r is None:
        return time_embed_dim * six_c + six_c
    return time_embed_dim * lowrank_r + lowrank_r * six_c + six_c


# ---------------------------------------------------------------------------
# geometry helpers


def _pad_indices(size: int, target: int, mode: str):
    """Gather indices embedding a source axis of `size` into `target` slots.

    Returns (idx, before): ``padded = src[idx]`` and ``padded[before:before+size]``
    is the original data. Edge mode replicates boundaries; wrap mode is
    periodic.
    """
    before = (target - size) // 2
    idx = np.arange(target) - before
    if mode == "wrap":
        idx = np.mod(idx, size)
    else:
        idx = np.clip(idx, 0, size - 1)
    return idx.astype(np.intp), before


def _gather_bwd(g: np.ndarray, idx: np.ndarray, axis: int, size: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((size,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, gm)
    return np.moveaxis(out, 0, axis)


def _window_partition(x: np.ndarray, win: tuple[int, int, int]) -> np.ndarray:
    d, h, w = win
    D, H, W, C = x.shape
    x = x.reshape(D // d, d, H // h, h, W // w, w, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(-1, d * h * w, C))


def _window_reverse(winx: np.ndarray, dims: tuple[int, int, int], win: tuple[int, int, int]) -> np.ndarray:
    d, h, w = win
    D, H, W = dims
    C = winx.shape[-1]
    x = winx.reshape(D // d, H // h, W // w, d, h, w, C)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x.reshape(D, H, W, C))


def _relative_position_index(win: tuple[int, int, int]) -> np.ndarray:
    d, h, w = win
    coords = np.stack(
        np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    ).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([d - 1, h - 1, w - 1])[:, None, None]
    return (rel[0] * (2 * h - 1) + rel[1]) * (2 * w - 1) + rel[2]


@dataclass
class _LayerPlan:
    dims: tuple[int, int, int]
    channels: int
    heads: int
    window: tuple[int, int, int]
    padded: tuple[int, int, int]
    shift: tuple[int, int, int]
    rel_index: np.ndarray
    n_rel: int
    mask_plain: np.ndarray | None
    mask_shift: np.ndarray | None


def _axis_labels(size: int, padded: int, shift: int, periodic: bool) -> np.ndarray:
    """Group labels along one axis: 0 main body, 1 cyclic-shift wrap head,
    2 padding. Windows may only mix equal labels."""
    lab = np.zeros(padded, dtype=np.int64)
    if shift > 0 and not periodic:
        lab[:shift] = 1
    lab[size:] = 2
    return lab


def _build_mask(dims, padded, window, shift, lon_periodic):
    """Additive attention mask (nW, T, T) or None when nothing is masked."""
    labs = []
    for ax in range(3):
        periodic = lon_periodic and ax == 2 and padded[ax] == dims[ax]
        labs.append(_axis_labels(dims[ax], padded[ax], shift[ax], periodic))
    grid = (labs[0][:, None, None] * 3 + labs[1][None, :, None]) * 3 + labs[2][None, None, :]
    if shift != (0, 0, 0):
        grid = np.roll(grid, (-shift[0], -shift[1], -shift[2]), axis=(0, 1, 2))
    if np.all(grid == grid.flat[0]):
        return None
    win_labels = _window_partition(grid[..., None].astype(np.float64), window)[..., 0]
    mask = np.where(win_labels[:, :, None] != win_labels[:, None, :], _MASK_VALUE, 0.0)
    return mask


def _plan_layer(dims, channels, heads, window, lon_periodic=True) -> _LayerPlan:
    eff = tuple(min(w, s) for w, s in zip(window, dims))
    padded = tuple(-(-s // w) * w for s, w in zip(dims, eff))
    shift = tuple(w // 2 if p > w else 0 for w, p in zip(eff, padded))
    rel_index = _relative_position_index(eff)
    n_rel = (2 * eff[0] - 1) * (2 * eff[1] - 1) * (2 * eff[2] - 1)
    mask_plain = _build_mask(dims, padded, eff, (0, 0, 0), lon_periodic)
    # with a zero effective shift the "shifted" blocks still need the pad mask
    mask_shift = (
        _build_mask(dims, padded, eff, shift, lon_periodic) if shift != (0, 0, 0) else mask_plain
    )
    return _LayerPlan(
        dims=tuple(dims),
        channels=channels,
        heads=heads,
        window=eff,
        padded=padded,
        shift=shift,
        rel_index=rel_index,
        n_rel=n_rel,
        mask_plain=mask_plain,
        mask_shift=mask_shift,
    )


# ---------------------------------------------------------------------------
# the model


class VelocityModel:
    """The velocity network bound to a grid and a variable registry.

    Parameters live in a flat ``{name: ndarray}`` dict so they can be
    checkpointed, counted, and updated by a plain optimizer loop. Forward
    evaluation is a pure function of (params, inputs).
    """

    def __init__(self, config: ModelConfig, grid: GridSpec, registry: VariableRegistry):
        self.config = config
        self.grid = grid
        self.registry = registry

        P, L = registry.n_pressure_vars, registry.n_levels
        S = registry.n_surface
        H, W = grid.n_lat, grid.n_lon
        pd, ph, pw = config.pressure_patch
        if P == 0 or L == 0:
            raise ValueError("registry must provide pressure-level variables")
        if pd > L or ph > H or pw > W:
            raise ValueError(
                f"patch {config.pressure_patch} cannot tile a {L}x{H}x{W} pressure cube"
            )

        self.depth_p = -(-L // pd)
        self.lat_p = -(-H // ph)
        self.lon_p = -(-W // pw)
        self.fused_depth = self.depth_p + 1

        self.lev_idx, self.lev_before = _pad_indices(L, self.depth_p * pd, "edge")
        self.lat_idx, self.lat_before = _pad_indices(H, self.lat_p * ph, "edge")
        self.lon_idx, self.lon_before = _pad_indices(W, self.lon_p * pw, "wrap")

        dims1 = (self.fused_depth, self.lat_p, self.lon_p)
        if self.lat_p % 2 != 0 or self.lon_p % 2 != 0:
            raise ValueError(
                f"patched lat/lon dims {self.lat_p}x{self.lon_p} must be even for down/upsampling"
            )
        dims2 = (self.fused_depth, self.lat_p // 2, self.lon_p // 2)
        c = config.embed_dim
        if any(s < w for s, w in zip(dims1, config.window)):
            raise ValueError(
                f"latent dims {dims1} are smaller than the attention window {config.window}"
            )
        self.layer_plans = [
            _plan_layer(dims1, c, config.n_heads, config.window),
            _plan_layer(dims2, 2 * c, 2 * config.n_heads, config.window),
            _plan_layer(dims1, c, config.n_heads, config.window),
        ]

    # -- parameters ---------------------------------------------------------

    def _block_prefixes(self):
        for layer in range(3):
            for b in range(self.config.depths[layer]):
                yield layer, b, f"layer{layer + 1}.block{b}"

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        reg = self.registry
        c = cfg.embed_dim
        td = cfg.time_embed_dim
        pd, ph, pw = cfg.pressure_patch
        sph, spw = cfg.surface_patch
        sin = (reg.n_surface + cfg.cond_channels) * sph * spw
        pin = reg.n_pressure_vars * pd * ph * pw
        shapes: dict[str, tuple[int, ...]] = {
            "embed.pressure.w": (pin, c),
            "embed.pressure.b": (c,),
            "embed.surface.w": (sin, c),
            "embed.surface.b": (c,),
            "time.fc1.w": (td, td),
            "time.fc1.b": (td,),
            "time.fc2.w": (td, td),
            "time.fc2.b": (td,),
            "down.w": (4 * c, 2 * c),
            "down.b": (2 * c,),
            "up.w": (2 * c, 4 * c),
            "up.b": (4 * c,),
            "recover.surface.w": (c, reg.n_surface * sph * spw),
            "recover.surface.b": (reg.n_surface * sph * spw,),
            "recover.pressure.w": (c, reg.n_pressure_vars * pd * ph * pw),
            "recover.pressure.b": (reg.n_pressure_vars * pd * ph * pw,),
        }
        for layer, _b, prefix in self._block_prefixes():
            plan = self.layer_plans[layer]
            cl = plan.channels
            hid = int(cfg.mlp_ratio * cl)
            shapes[f"{prefix}.attn.qkv.w"] = (cl, 3 * cl)
            shapes[f"{prefix}.attn.qkv.b"] = (3 * cl,)
            shapes[f"{prefix}.attn.proj.w"] = (cl, cl)
            shapes[f"{prefix}.attn.proj.b"] = (cl,)
            shapes[f"{prefix}.attn.bias_table"] = (plan.n_rel, plan.heads)
            shapes[f"{prefix}.mlp.fc1.w"] = (cl, hid)
            shapes[f"{prefix}.mlp.fc1.b"] = (hid,)
            shapes[f"{prefix}.mlp.fc2.w"] = (hid, cl)
            shapes[f"{prefix}.mlp.fc2.b"] = (cl,)
            if cfg.lowrank_r is None:
                shapes[f"{prefix}.mod.w"] = (td, 6 * cl)
            else:
                shapes[f"{prefix}.mod.u"] = (td, cfg.lowrank_r)
                shapes[f"{prefix}.mod.v"] = (cfg.lowrank_r, 6 * cl)
            shapes[f"{prefix}.mod.b"] = (6 * cl,)
        return shapes

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        """Initialize parameters.

        Weights are N(0, 0.02); biases zero. The modulation projection (V or
        the full-rank matrix) and its bias, the upsample projection, and the
        patch-recovery projections start at exactly zero, so a fresh network
        is the identity map in latent space and outputs zero velocity.
        """
        rng = np.random.default_rng(seed)
        dtype = self.config.np_dtype
        zero_names = ("mod.v", "mod.w", "mod.b", "up.w", "up.b",
                      "recover.surface.w", "recover.surface.b",
                      "recover.pressure.w", "recover.pressure.b")
        params = {}
        for name, shape in self.parameter_shapes().items():
            if name.endswith(".b") and not name.endswith("mod.b"):
                params[name] = np.zeros(shape, dtype=dtype)
            elif any(name.endswith(z) or name == z for z in zero_names):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                params[name] = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        return params

    def count_parameters(self) -> ParameterCount:
        """Closed-form parameter count; must equal the enumeration over
        :meth:`parameter_shapes` (tested)."""
        cfg = self.config
        reg = self.registry
        c = cfg.embed_dim
        td = cfg.time_embed_dim
        pd, ph, pw = cfg.pressure_patch
        sph, spw = cfg.surface_patch
        pin = reg.n_pressure_vars * pd * ph * pw
        sin = (reg.n_surface + cfg.cond_channels) * sph * spw
        sout = reg.n_surface * sph * spw
        total = (pin + 1) * c + (sin + 1) * c  # embeddings
        total += 2 * (td * td + td)  # time MLP
        total += (4 * c + 1) * 2 * c + (2 * c + 1) * 4 * c  # down / up
        total += (c + 1) * sout + (c + 1) * pin  # recovery
        modulation = 0
        for layer in range(3):
            plan = self.layer_plans[layer]
            cl = plan.channels
            hid = int(cfg.mlp_ratio * cl)
            per_block = (
                (cl + 1) * 3 * cl  # qkv
                + (cl + 1) * cl  # proj
                + plan.n_rel * plan.heads
                + (cl + 1) * hid + (hid + 1) * cl  # mlp
            )
            mod = modulation_params_per_block(td, cl, cfg.lowrank_r)
            total += cfg.depths[layer] * (per_block + mod)
            modulation += cfg.depths[layer] * mod
        return ParameterCount(total=total, modulation=modulation)

    # -- embedding ----------------------------------------------------------

    def _patchify_pressure(self, pressure):
        pd, ph, pw = self.config.pressure_patch
        xp = pressure[:, self.lev_idx][:, :, self.lat_idx][:, :, :, self.lon_idx]
        P = xp.shape[0]
        xp = xp.reshape(P, self.depth_p, pd, self.lat_p, ph, self.lon_p, pw)
        xp = xp.transpose(1, 3, 5, 0, 2, 4, 6)
        return np.ascontiguousarray(
            xp.reshape(self.depth_p, self.lat_p, self.lon_p, P * pd * ph * pw)
        )

    def _patchify_pressure_bwd(self, g):
        pd, ph, pw = self.config.pressure_patch
        P = self.registry.n_pressure_vars
        L, H, W = self.registry.n_levels, self.grid.n_lat, self.grid.n_lon
        g = g.reshape(self.depth_p, self.lat_p, self.lon_p, P, pd, ph, pw)
        g = g.transpose(3, 0, 4, 1, 5, 2, 6).reshape(
            P, self.depth_p * pd, self.lat_p * ph, self.lon_p * pw
        )
        g = _gather_bwd(g, self.lon_idx, 3, W)
        g = _gather_bwd(g, self.lat_idx, 2, H)
        g = _gather_bwd(g, self.lev_idx, 1, L)
        return g

    def _patchify_surface(self, sx):
        sph, spw = self.config.surface_patch
        xs = sx[:, self.lat_idx][:, :, self.lon_idx]
        Cs = xs.shape[0]
        xs = xs.reshape(Cs, self.lat_p, sph, self.lon_p, spw)
        xs = xs.transpose(1, 3, 0, 2, 4)
        return np.ascontiguousarray(xs.reshape(self.lat_p, self.lon_p, Cs * sph * spw))

    def _patchify_surface_bwd(self, g, n_chan):
        sph, spw = self.config.surface_patch
        H, W = self.grid.n_lat, self.grid.n_lon
        g = g.reshape(self.lat_p, self.lon_p, n_chan, sph, spw)
        g = g.transpose(2, 0, 3, 1, 4).reshape(n_chan, self.lat_p * sph, self.lon_p * spw)
        g = _gather_bwd(g, self.lon_idx, 2, W)
        g = _gather_bwd(g, self.lat_idx, 1, H)
        return g

    def patch_embed(self, params, x, cond) -> LatentMap:
        """Public embedding entry point; returns the fused latent channels-first."""
        e, _ = self._embed_fwd(params, x, cond)
        return LatentMap(values=np.ascontiguousarray(e.transpose(3, 0, 1, 2)), provenance="fused")

    def _embed_fwd(self, params, x, cond):
        reg = self.registry
        S = reg.n_surface
        surface = x[:S]
        pressure = x[S:].reshape(
            reg.n_pressure_vars, reg.n_levels, self.grid.n_lat, self.grid.n_lon
        )
        pp = self._patchify_pressure(pressure)
        ep = ops.linear_fwd(pp, params["embed.pressure.w"], params["embed.pressure.b"])
        sx = np.concatenate([surface, cond], axis=0)
        sp = self._patchify_surface(sx)
        es = ops.linear_fwd(sp, params["embed.surface.w"], params["embed.surface.b"])
        e = np.concatenate([es[None], ep], axis=0)  # surface plane leads the depth axis
        return e, (pp, sp)

    def _embed_bwd(self, params, cache, ge):
        """Weight gradients plus the state gradient (conditioning excluded)."""
        pp, sp = cache
        reg = self.registry
        S = reg.n_surface
        ges, gep = ge[0], ge[1:]
        gpp, dwp, dbp = ops.linear_bwd(pp, params["embed.pressure.w"], gep)
        gsp, dws, dbs = ops.linear_bwd(sp, params["embed.surface.w"], ges)
        grads = {
            "embed.pressure.w": dwp,
            "embed.pressure.b": dbp,
            "embed.surface.w": dws,
            "embed.surface.b": dbs,
        }
        gpressure = self._patchify_pressure_bwd(gpp)
        gsx = self._patchify_surface_bwd(gsp, S + self.config.cond_channels)
        gx = np.concatenate(
            [gsx[:S], gpressure.reshape(-1, self.grid.n_lat, self.grid.n_lon)], axis=0
        )
        return grads, gx

    # -- recovery -----------------------------------------------------------

    def _recover_fwd(self, params, z):
        cfg = self.config
        reg = self.registry
        pd, ph, pw = cfg.pressure_patch
        sph, spw = cfg.surface_patch
        H, W, L = self.grid.n_lat, self.grid.n_lon, reg.n_levels
        zs, zp = z[0], z[1:]
        ys = ops.linear_fwd(zs, params["recover.surface.w"], params["recover.surface.b"])
        yp = ops.linear_fwd(zp, params["recover.pressure.w"], params["recover.pressure.b"])
        S = reg.n_surface
        ys = ys.reshape(self.lat_p, self.lon_p, S, sph, spw).transpose(2, 0, 3, 1, 4)
        ys = ys.reshape(S, self.lat_p * sph, self.lon_p * spw)
        ys = ys[:, self.lat_before : self.lat_before + H, self.lon_before : self.lon_before + W]
        P = reg.n_pressure_vars
        yp = yp.reshape(self.depth_p, self.lat_p, self.lon_p, P, pd, ph, pw)
        yp = yp.transpose(3, 0, 4, 1, 5, 2, 6).reshape(
            P, self.depth_p * pd, self.lat_p * ph, self.lon_p * pw
        )
        yp = yp[
            :,
            self.lev_before : self.lev_before + L,
            self.lat_before : self.lat_before + H,
            self.lon_before : self.lon_before + W,
        ]
        v = np.concatenate([ys, yp.reshape(P * L, H, W)], axis=0)
        return v, (zs, zp)

    def _recover_bwd(self, params, cache, gv):
        cfg = self.config
        reg = self.registry
        pd, ph, pw = cfg.pressure_patch
        sph, spw = cfg.surface_patch
        H, W, L = self.grid.n_lat, self.grid.n_lon, reg.n_levels
        S, P = reg.n_surface, reg.n_pressure_vars
        zs, zp = cache
        gys_full = np.zeros((S, self.lat_p * sph, self.lon_p * spw), dtype=gv.dtype)
        gys_full[
            :, self.lat_before : self.lat_before + H, self.lon_before : self.lon_before + W
        ] = gv[:S]
        gys = gys_full.reshape(S, self.lat_p, sph, self.lon_p, spw).transpose(1, 3, 0, 2, 4)
        gys = gys.reshape(self.lat_p, self.lon_p, S * sph * spw)
        gyp_full = np.zeros(
            (P, self.depth_p * pd, self.lat_p * ph, self.lon_p * pw), dtype=gv.dtype
        )
        gyp_full[
            :,
            self.lev_before : self.lev_before + L,
            self.lat_before : self.lat_before + H,
            self.lon_before : self.lon_before + W,
        ] = gv[S:].reshape(P, L, H, W)
        gyp = gyp_full.reshape(P, self.depth_p, pd, self.lat_p, ph, self.lon_p, pw)
        gyp = gyp.transpose(1, 3, 5, 0, 2, 4, 6).reshape(
            self.depth_p, self.lat_p, self.lon_p, P * pd * ph * pw
        )
        grads = {}
        gzs, grads["recover.surface.w"], grads["recover.surface.b"] = ops.linear_bwd(
            zs, params["recover.surface.w"], gys
        )
        gzp, grads["recover.pressure.w"], grads["recover.pressure.b"] = ops.linear_bwd(
            zp, params["recover.pressure.w"], gyp
        )
        gz = np.concatenate([gzs[None], gzp], axis=0)
        return gz, grads

    # -- attention ----------------------------------------------------------

    def _attention_fwd(self, params, prefix, plan, x, shifted):
        D, Hl, Wl = plan.dims
        Dp, Hp, Wp = plan.padded
        pad = plan.padded != plan.dims
        if pad:
            xp = np.zeros((Dp, Hp, Wp, plan.channels), dtype=x.dtype)
            xp[:D, :Hl, :Wl] = x
        else:
            xp = x
        shift = plan.shift if shifted else (0, 0, 0)
        if shifted:
            xp = np.roll(xp, (-shift[0], -shift[1], -shift[2]), axis=(0, 1, 2))
        win = _window_partition(xp, plan.window)  # (nW, T, C)
        nW, T, C = win.shape
        heads = plan.heads
        dh = C // heads
        qkv = ops.linear_fwd(win, params[f"{prefix}.attn.qkv.w"], params[f"{prefix}.attn.qkv.b"])
        qkv = qkv.reshape(nW, T, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(dh)
        scores = (q * scale) @ k.transpose(0, 1, 3, 2)
        bias = params[f"{prefix}.attn.bias_table"][plan.rel_index]  # (T, T, heads)
        scores = scores + bias.transpose(2, 0, 1)[None]
        mask = plan.mask_shift if shifted else plan.mask_plain
        if mask is not None:
            scores = scores + mask[:, None].astype(scores.dtype)
        p, p_cache = ops.softmax_fwd(scores)
        ctx = p @ v  # (nW, heads, T, dh)
        ctx = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(nW, T, C)
        out_w = ops.linear_fwd(ctx, params[f"{prefix}.attn.proj.w"], params[f"{prefix}.attn.proj.b"])
        out = _window_reverse(out_w, plan.padded, plan.window)
        if shifted:
            out = np.roll(out, shift, axis=(0, 1, 2))
        if pad:
            out = out[:D, :Hl, :Wl]
        cache = (win, q, k, v, p, p_cache, ctx, shifted)
        return out, cache

    def _attention_bwd(self, params, prefix, plan, cache, gout):
        win, q, k, v, p, p_cache, ctx, shifted = cache
        D, Hl, Wl = plan.dims
        Dp, Hp, Wp = plan.padded
        pad = plan.padded != plan.dims
        shift = plan.shift if shifted else (0, 0, 0)
        if pad:
            g = np.zeros((Dp, Hp, Wp, plan.channels), dtype=gout.dtype)
            g[:D, :Hl, :Wl] = gout
        else:
            g = gout
        if shifted:
            g = np.roll(g, (-shift[0], -shift[1], -shift[2]), axis=(0, 1, 2))
        gw = _window_partition(g, plan.window)
        nW, T, C = gw.shape
        heads = plan.heads
        dh = C // heads
        grads = {}
        gctx, grads[f"{prefix}.attn.proj.w"], grads[f"{prefix}.attn.proj.b"] = ops.linear_bwd(
            ctx, params[f"{prefix}.attn.proj.w"], gw
        )
        gctx = gctx.reshape(nW, T, heads, dh).transpose(0, 2, 1, 3)
        gp = gctx @ v.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ gctx
        gscores = ops.softmax_bwd(p_cache, gp)
        gbias = gscores.sum(axis=0).transpose(1, 2, 0)  # (T, T, heads)
        dtable = np.zeros_like(params[f"{prefix}.attn.bias_table"])
        np.add.at(dtable, plan.rel_index, gbias.astype(dtable.dtype))
        grads[f"{prefix}.attn.bias_table"] = dtable
        scale = 1.0 / math.sqrt(dh)
        gq = (gscores @ k) * scale
        gk = gscores.transpose(0, 1, 3, 2) @ (q * scale)
        gqkv = np.stack([gq, gk, gv])  # (3, nW, heads, T, dh)
        gqkv = gqkv.transpose(1, 3, 0, 2, 4).reshape(nW, T, 3 * C)
        gwin, grads[f"{prefix}.attn.qkv.w"], grads[f"{prefix}.attn.qkv.b"] = ops.linear_bwd(
            win, params[f"{prefix}.attn.qkv.w"], gqkv
        )
        gx = _window_reverse(gwin, plan.padded, plan.window)
        if shifted:
            gx = np.roll(gx, shift, axis=(0, 1, 2))
        if pad:
            gx = gx[:D, :Hl, :Wl]
        return gx, grads

    # -- transformer block --------------------------------------------------

    def _modulation_fwd(self, params, prefix, temb):
        if self.config.lowrank_r is None:
            raw = temb @ params[f"{prefix}.mod.w"] + params[f"{prefix}.mod.b"]
            cache = None
        else:
            tu = temb @ params[f"{prefix}.mod.u"]
            raw = tu @ params[f"{prefix}.mod.v"] + params[f"{prefix}.mod.b"]
            cache = tu
        return np.split(raw, 6), cache

    def _modulation_bwd(self, params, prefix, temb, cache, gchunks):
        graw = np.concatenate(gchunks)
        grads = {f"{prefix}.mod.b": graw}
        if self.config.lowrank_r is None:
            grads[f"{prefix}.mod.w"] = np.outer(temb, graw)
            gtemb = params[f"{prefix}.mod.w"] @ graw
        else:
            tu = cache
            grads[f"{prefix}.mod.v"] = np.outer(tu, graw)
            gtu = params[f"{prefix}.mod.v"] @ graw
            grads[f"{prefix}.mod.u"] = np.outer(temb, gtu)
            gtemb = params[f"{prefix}.mod.u"] @ gtu
        return gtemb, grads

    def _block_fwd(self, params, prefix, plan, z, temb, shifted):
        (sa, ba, ga, sm, bm, gm), mod_cache = self._modulation_fwd(params, prefix, temb)
        ln1, ln1_cache = ops.layernorm_fwd(z)
        m1 = ln1 * (1.0 + sa) + ba
        attn_out, attn_cache = self._attention_fwd(params, prefix, plan, m1, shifted)
        z1 = z + ga * attn_out
        ln2, ln2_cache = ops.layernorm_fwd(z1)
        m2 = ln2 * (1.0 + sm) + bm
        h1 = ops.linear_fwd(m2, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"])
        act, act_cache = ops.gelu_fwd(h1)
        mlp_out = ops.linear_fwd(act, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
        z2 = z1 + gm * mlp_out
        cache = {
            "chunks": (sa, ba, ga, sm, bm, gm),
            "mod": mod_cache,
            "ln1": ln1,
            "ln1_cache": ln1_cache,
            "attn": attn_cache,
            "attn_out": attn_out,
            "ln2": ln2,
            "ln2_cache": ln2_cache,
            "m2": m2,
            "act": act,
            "act_cache": act_cache,
            "mlp_out": mlp_out,
            "shifted": shifted,
        }
        return z2, cache

    def _block_bwd(self, params, prefix, plan, temb, cache, g):
        sa, ba, ga, sm, bm, gm = cache["chunks"]
        reduce_axes = tuple(range(g.ndim - 1))
        grads = {}
        # MLP sub-block
        g_gm = np.sum(g * cache["mlp_out"], axis=reduce_axes)
        gmlp = g * gm
        gact, grads[f"{prefix}.mlp.fc2.w"], grads[f"{prefix}.mlp.fc2.b"] = ops.linear_bwd(
            cache["act"], params[f"{prefix}.mlp.fc2.w"], gmlp
        )
        gh1 = ops.gelu_bwd(cache["act_cache"], gact)
        gm2, grads[f"{prefix}.mlp.fc1.w"], grads[f"{prefix}.mlp.fc1.b"] = ops.linear_bwd(
            cache["m2"], params[f"{prefix}.mlp.fc1.w"], gh1
        )
        g_sm = np.sum(gm2 * cache["ln2"], axis=reduce_axes)
        g_bm = np.sum(gm2, axis=reduce_axes)
        gln2 = gm2 * (1.0 + sm)
        gz1 = ops.layernorm_bwd(cache["ln2_cache"], gln2) + g
        # attention sub-block
        g_ga = np.sum(gz1 * cache["attn_out"], axis=reduce_axes)
        gattn = gz1 * ga
        gm1, attn_grads = self._attention_bwd(params, prefix, plan, cache["attn"], gattn)
        grads.update(attn_grads)
        g_sa = np.sum(gm1 * cache["ln1"], axis=reduce_axes)
        g_ba = np.sum(gm1, axis=reduce_axes)
        gln1 = gm1 * (1.0 + sa)
        gz = ops.layernorm_bwd(cache["ln1_cache"], gln1) + gz1
        gtemb, mod_grads = self._modulation_bwd(
            params, prefix, temb, cache["mod"], (g_sa, g_ba, g_ga, g_sm, g_bm, g_gm)
        )
        grads.update(mod_grads)
        return gz, gtemb, grads

    # -- down / up sampling ---------------------------------------------------

    def _down_fwd(self, params, z):
        D, H, W, C = z.shape
        m = z.reshape(D, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        m = np.ascontiguousarray(m.reshape(D, H // 2, W // 2, 4 * C))
        out = ops.linear_fwd(m, params["down.w"], params["down.b"])
        return out, m

    def _down_bwd(self, params, cache, g, out_shape):
        m = cache
        gm, dw, db = ops.linear_bwd(m, params["down.w"], g)
        D, H, W, C = out_shape
        gz = gm.reshape(D, H // 2, W // 2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(
            D, H, W, C
        )
        return gz, {"down.w": dw, "down.b": db}

    def _up_fwd(self, params, z):
        D, H2, W2, C2 = z.shape
        out = ops.linear_fwd(z, params["up.w"], params["up.b"])
        C = C2 // 2
        out = out.reshape(D, H2, W2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(out.reshape(D, H2 * 2, W2 * 2, C)), z

    def _up_bwd(self, params, cache, g):
        z = cache
        D, H, W, C = g.shape
        gm = g.reshape(D, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        gm = gm.reshape(D, H // 2, W // 2, 4 * C)
        gz, dw, db = ops.linear_bwd(z, params["up.w"], gm)
        return gz, {"up.w": dw, "up.b": db}

    # -- full forward / backward ---------------------------------------------

    def _check_finite(self, arr, stage):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite activations in {stage}")

    def _time_embed_fwd(self, params, t):
        tsin = ops.sinusoidal_time_embed(t, self.config.time_embed_dim).astype(
            self.config.np_dtype
        )
        pre = ops.linear_fwd(tsin, params["time.fc1.w"], params["time.fc1.b"])
        act, act_cache = ops.silu_fwd(pre)
        temb = ops.linear_fwd(act, params["time.fc2.w"], params["time.fc2.b"])
        return temb, (tsin, act, act_cache)

    def _time_embed_bwd(self, params, cache, gtemb):
        tsin, act, act_cache = cache
        grads = {}
        gact, grads["time.fc2.w"], grads["time.fc2.b"] = ops.linear_bwd(
            act, params["time.fc2.w"], gtemb
        )
        gpre = ops.silu_bwd(act_cache, gact)
        _, grads["time.fc1.w"], grads["time.fc1.b"] = ops.linear_bwd(
            tsin, params["time.fc1.w"], gpre
        )
        return grads

    def forward(self, params, x, t, cond, want_cache=False):
        """Velocity for a normalized state x (C, H, W) at flow time t in [0, 1].

        Deterministic for fixed params; raises NonFiniteError naming the
        stage if activations blow up.
        """
        dtype = self.config.np_dtype
        x = np.ascontiguousarray(x, dtype=dtype)
        cond = np.ascontiguousarray(cond, dtype=dtype)
        if cond.shape != (self.config.cond_channels, self.grid.n_lat, self.grid.n_lon):
            raise ValueError(
                f"conditioning must be ({self.config.cond_channels}, H, W), got {cond.shape}"
            )
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {t}")

        temb, time_cache = self._time_embed_fwd(params, t)
        e, embed_cache = self._embed_fwd(params, x, cond)
        self._check_finite(e, "patch_embed")

        caches = {"time": time_cache, "embed": embed_cache, "blocks": [[], [], []]}
        z = e
        for b in range(self.config.depths[0]):
            z, c = self._block_fwd(params, f"layer1.block{b}", self.layer_plans[0], z, temb, b % 2 == 1)
            caches["blocks"][0].append(c)
        h1 = z
        self._check_finite(h1, "layer1")

        z, caches["down"] = self._down_fwd(params, h1)
        for b in range(self.config.depths[1]):
            z, c = self._block_fwd(params, f"layer2.block{b}", self.layer_plans[1], z, temb, b % 2 == 1)
            caches["blocks"][1].append(c)
        self._check_finite(z, "layer2")
        caches["layer2_out_shape"] = z.shape

        u, caches["up"] = self._up_fwd(params, z)
        z = u + h1
        for b in range(self.config.depths[2]):
            z, c = self._block_fwd(params, f"layer3.block{b}", self.layer_plans[2], z, temb, b % 2 == 1)
            caches["blocks"][2].append(c)
        self._check_finite(z, "layer3")
        latent = z + h1
        caches["latent"] = latent

        v, caches["recover"] = self._recover_fwd(params, latent)
        self._check_finite(v, "patch_recovery")
        caches["temb"] = temb
        caches["h1_shape"] = h1.shape
        if want_cache:
            return v, caches
        return v

    def backward(self, params, caches, gv):
        """VJP of :meth:`forward` with respect to the parameters and the state.

        Returns (grads, gx) where grads maps parameter names to arrays of the
        same shape and gx is the gradient with respect to the input state.
        """
        temb = caches["temb"]
        grads: dict[str, np.ndarray] = {}
        gtemb_total = np.zeros_like(temb)

        def absorb(d):
            for k, val in d.items():
                if k in grads:
                    grads[k] = grads[k] + val
                else:
                    grads[k] = val

        gz, rec_grads = self._recover_bwd(params, caches["recover"], gv)
        absorb(rec_grads)
        gh1 = gz.copy()  # latent = layer3_out + h1
        for b in reversed(range(self.config.depths[2])):
            gz, gtemb, bgrads = self._block_bwd(
                params, f"layer3.block{b}", self.layer_plans[2], temb,
                caches["blocks"][2][b], gz,
            )
            gtemb_total += gtemb
            absorb(bgrads)
        gh1 += gz  # z2_in = up_out + h1
        gu = gz
        gz2, up_grads = self._up_bwd(params, caches["up"], gu)
        absorb(up_grads)
        for b in reversed(range(self.config.depths[1])):
            gz2, gtemb, bgrads = self._block_bwd(
                params, f"layer2.block{b}", self.layer_plans[1], temb,
                caches["blocks"][1][b], gz2,
            )
            gtemb_total += gtemb
            absorb(bgrads)
        gdown, down_grads = self._down_bwd(params, caches["down"], gz2, caches["h1_shape"])
        absorb(down_grads)
        gh1 += gdown
        gz = gh1
        for b in reversed(range(self.config.depths[0])):
            gz, gtemb, bgrads = self._block_bwd(
                params, f"layer1.block{b}", self.layer_plans[0], temb,
                caches["blocks"][0][b], gz,
            )
            gtemb_total += gtemb
            absorb(bgrads)
        embed_grads, gx = self._embed_bwd(params, caches["embed"], gz)
        absorb(embed_grads)
        absorb(self._time_embed_bwd(params, caches["time"], gtemb_total))
        return grads, gx


def count_parameters(config: ModelConfig, grid: GridSpec, registry: VariableRegistry) -> ParameterCount:
    return VelocityModel(config, grid, registry).count_parameters()

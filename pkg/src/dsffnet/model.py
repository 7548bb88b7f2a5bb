"""Pose encoder, FFAdaIN decoder and the SPAdaIN baseline.

Parameters live in a flat ``{dotted_name: ndarray}`` dict.  Forward functions
take the same names mapped to :class:`Tensor` objects so that the caller
decides whether gradients are tracked.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .mesh import Mesh

VARIANTS = ("full", "spadain", "no-target-side")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    enc_widths: Tuple[int, int] = (64, 128)
    code_dim: int = 1024
    dec_widths: Tuple[int, int, int] = (64, 128, 64)
    eps: float = 1e-5
    # "spadain": first unit of every ResBlock is SPAdaIN;
    # "no-target-side": every unit drops the target-vertex side channel
    variant: str = "full"

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.dec_widths = tuple(int(w) for w in self.dec_widths)
        self.code_dim = int(self.code_dim)

    def validate(self) -> None:
        if len(self.enc_widths) != 2:
            raise ConfigError("enc_widths must list the two intermediate widths")
        w1, w2 = self.enc_widths
        if not 0 < w1 < w2 < self.code_dim:
            raise ConfigError(
                f"encoder widths must increase strictly: 3 -> {w1} -> {w2} -> {self.code_dim}")
        if len(self.dec_widths) != 3 or min(self.dec_widths) < 1:
            raise ConfigError("dec_widths must list three positive ResBlock output widths")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    @property
    def mix_dim(self) -> int:
        return 3 + self.code_dim

    def block_channels(self) -> List[Tuple[int, int]]:
        chans = (3,) + self.dec_widths
        return [(chans[i], chans[i + 1]) for i in range(3)]

    def unit_kind(self, unit: int) -> str:
        if self.variant == "spadain" and unit == 0:
            return "spadain"
        if self.variant == "no-target-side":
            return "mix-only"
        return "ffadain"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["dec_widths"] = list(self.dec_widths)
        return d


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every learnable array's name and shape, in canonical order."""
    config.validate()
    shapes: Dict[str, Tuple[int, ...]] = {}
    ladder = (3,) + config.enc_widths + (config.code_dim,)
    for i in range(3):
        shapes[f"enc.{i}.W"] = (ladder[i + 1], ladder[i])
        shapes[f"enc.{i}.b"] = (ladder[i + 1],)
    for k, (cin, cout) in enumerate(config.block_channels()):
        for u, c in enumerate((cin, cout)):
            pre = f"dec.{k}.ffa.{u}"
            kind = config.unit_kind(u)
            if kind in ("ffadain", "spadain"):
                for side in ("id1", "id2"):
                    shapes[f"{pre}.{side}.W"] = (c, 3)
                    shapes[f"{pre}.{side}.b"] = (c,)
            if kind in ("ffadain", "mix-only"):
                for side in ("mix1", "mix2"):
                    shapes[f"{pre}.{side}.W"] = (c, config.mix_dim)
                    shapes[f"{pre}.{side}.b"] = (c,)
            if kind == "ffadain":
                shapes[f"{pre}.alpha"] = ()
                shapes[f"{pre}.beta"] = ()
        shapes[f"dec.{k}.conv.0.W"] = (cout, cin)
        shapes[f"dec.{k}.conv.0.b"] = (cout,)
        shapes[f"dec.{k}.conv.1.W"] = (cout, cout)
        shapes[f"dec.{k}.conv.1.b"] = (cout,)
        if cin != cout:
            shapes[f"dec.{k}.skip.W"] = (cout, cin)
            shapes[f"dec.{k}.skip.b"] = (cout,)
    shapes["dec.out.W"] = (3, config.dec_widths[-1])
    shapes["dec.out.b"] = (3,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    """Uniform(-s, s) weights with s = sqrt(1/fan_in); zero biases; alpha = beta = 0.5.

    The last conv of every ResBlock's main path starts at zero, so each block
    begins as its skip path. Uniform init there leaves training stuck on a
    plateau roughly ten times higher for the same step budget.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".W"):
            s = np.sqrt(1.0 / shape[1])
            params[name] = rng.uniform(-s, s, size=shape)
            if name.endswith(".conv.1.W"):
                params[name][:] = 0.0
        elif name.endswith((".alpha", ".beta")):
            params[name] = np.array(0.5)
        else:
            params[name] = np.zeros(shape)
    return params


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _as_cols(x) -> Tensor:
    t = ad.as_tensor(x)
    if t.data.ndim != 2 or t.shape[0] != 3:
        raise DimensionError(f"expected vertices as a 3 x N tensor, got {t.shape}")
    return t


def _conv(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.linear_1x1(x, p[prefix + ".W"], p[prefix + ".b"])


# --------------------------------------------------------------------------
# encoder side
# --------------------------------------------------------------------------

def encode_pose(p: Mapping[str, Tensor], src_vertices, eps: float = 1e-5) -> Tensor:
    """Three Conv1d-IN-ReLU units and a max over vertices.

    Columns are first put in lexicographic coordinate order so that the code
    is bit-identical under any vertex permutation, not just equal up to
    floating-point reassociation.
    """
    x = _as_cols(src_vertices)
    if x.shape[1] < 1:
        raise ContractError("encode_pose: source mesh has no vertices")
    d = x.data
    order = np.lexsort((d[2], d[1], d[0]))
    h = ad.permute_columns(x, order)
    for i in range(3):
        h = _conv(p, f"enc.{i}", h)
        h, _, _ = ad.instance_norm(h, eps)
        h = ad.relu(h)
    return ad.max_over_vertices(h)


def build_mixed_feature(z: Tensor, tgt_vertices) -> Tensor:
    """Target coordinates stacked over the pose code repeated per vertex."""
    v = _as_cols(tgt_vertices)
    if v.shape[1] < 1:
        raise ContractError("build_mixed_feature: target mesh has no vertices")
    return ad.mixed_feature(v, z)


# --------------------------------------------------------------------------
# conditional normalization
# --------------------------------------------------------------------------

@dataclass
class FFAdaINActivation:
    gamma_id: Optional[Tensor]
    delta_id: Optional[Tensor]
    gamma_mix: Optional[Tensor]
    delta_mix: Optional[Tensor]
    gamma_ff: Tensor
    delta_ff: Tensor
    mu: Tensor
    sigma: Tensor


def _check_n(h_m: Tensor, *others: Optional[Tensor]) -> None:
    for o in others:
        if o is not None and o.shape[1] != h_m.shape[1]:
            raise DimensionError(
                f"vertex axis 1 mismatch: forward input has {h_m.shape[1]}, side input has {o.shape[1]}")


def _check_c(h_m: Tensor, gamma: Tensor) -> None:
    if gamma.shape[0] != h_m.shape[0]:
        raise DimensionError(
            f"channel axis 0 mismatch: side convs give {gamma.shape[0]}, forward input has {h_m.shape[0]}")


def ffadain_forward(p: Mapping[str, Tensor], prefix: str, h_m: Tensor, f_mix: Tensor,
                    v_id: Tensor, eps: float = 1e-5,
                    stats=None) -> Tuple[Tensor, FFAdaINActivation]:
    """Denormalize ``instance_norm(h_m)`` with parameters fused from both side channels.

    gamma_ff = alpha * gamma_id + (1 - alpha) * gamma_mix, likewise delta_ff with beta.
    """
    _check_n(h_m, f_mix, v_id)
    g_id = _conv(p, prefix + ".id1", v_id)
    d_id = _conv(p, prefix + ".id2", v_id)
    g_mix = _conv(p, prefix + ".mix1", f_mix)
    d_mix = _conv(p, prefix + ".mix2", f_mix)
    _check_c(h_m, g_id)
    _check_c(h_m, g_mix)
    g_ff = ad.blend(p[prefix + ".alpha"], g_id, g_mix)
    d_ff = ad.blend(p[prefix + ".beta"], d_id, d_mix)
    normed, mu, sigma = ad.instance_norm(h_m, eps, stats)
    out = ad.add(ad.mul(g_ff, normed), d_ff)
    return out, FFAdaINActivation(g_id, d_id, g_mix, d_mix, g_ff, d_ff, mu, sigma)


def spadain_forward(p: Mapping[str, Tensor], prefix: str, h_m: Tensor, v_id: Tensor,
                    eps: float = 1e-5, stats=None) -> Tuple[Tensor, FFAdaINActivation]:
    """Target-vertex side channel only: ``gamma_id * IN(h_m) + delta_id``."""
    _check_n(h_m, v_id)
    g_id = _conv(p, prefix + ".id1", v_id)
    d_id = _conv(p, prefix + ".id2", v_id)
    _check_c(h_m, g_id)
    normed, mu, sigma = ad.instance_norm(h_m, eps, stats)
    out = ad.add(ad.mul(g_id, normed), d_id)
    return out, FFAdaINActivation(g_id, d_id, None, None, g_id, d_id, mu, sigma)


def mixonly_forward(p: Mapping[str, Tensor], prefix: str, h_m: Tensor, f_mix: Tensor,
                    eps: float = 1e-5, stats=None) -> Tuple[Tensor, FFAdaINActivation]:
    """Mixed-feature side channel only (target-vertex side removed)."""
    _check_n(h_m, f_mix)
    g_mix = _conv(p, prefix + ".mix1", f_mix)
    d_mix = _conv(p, prefix + ".mix2", f_mix)
    _check_c(h_m, g_mix)
    normed, mu, sigma = ad.instance_norm(h_m, eps, stats)
    out = ad.add(ad.mul(g_mix, normed), d_mix)
    return out, FFAdaINActivation(None, None, g_mix, d_mix, g_mix, d_mix, mu, sigma)


def _norm_unit(p, config: ModelConfig, prefix: str, unit: int, h, f_mix, v_id, stats):
    kind = config.unit_kind(unit)
    if kind == "spadain":
        return spadain_forward(p, prefix, h, v_id, config.eps, stats)
    if kind == "mix-only":
        return mixonly_forward(p, prefix, h, f_mix, config.eps, stats)
    return ffadain_forward(p, prefix, h, f_mix, v_id, config.eps, stats)


def resblock_forward(p: Mapping[str, Tensor], config: ModelConfig, block: int, h: Tensor,
                     f_mix: Tensor, v_id: Tensor, frozen_stats=None,
                     trace: Optional[list] = None) -> Tensor:
    """norm -> relu -> conv -> norm -> relu -> conv, plus identity or 1x1-conv skip."""
    pre = f"dec.{block}"
    m = h
    for u in range(2):
        st = frozen_stats[2 * block + u] if frozen_stats is not None else None
        m, act = _norm_unit(p, config, f"{pre}.ffa.{u}", u, m, f_mix, v_id, st)
        if trace is not None:
            trace.append(act)
        m = ad.relu(m)
        m = _conv(p, f"{pre}.conv.{u}", m)
    skip = _conv(p, f"{pre}.skip", h) if f"{pre}.skip.W" in p else h
    return ad.add(m, skip)


def decode(p: Mapping[str, Tensor], config: ModelConfig, v_id, f_mix: Tensor,
           frozen_stats: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None,
           trace: Optional[list] = None) -> Tensor:
    """Run the target vertices through three ResBlocks and a linear 1x1 output conv.

    ``trace`` (a list) collects every unit's :class:`FFAdaINActivation`;
    ``frozen_stats`` replays per-unit (mu, sigma) instead of recomputing them.
    """
    v = _as_cols(v_id)
    if f_mix.shape[1] != v.shape[1]:
        raise DimensionError(
            f"decode: vertex axis 1 mismatch (v_id {v.shape[1]}, f_mix {f_mix.shape[1]})")
    h = v
    for k in range(3):
        h = resblock_forward(p, config, k, h, f_mix, v, frozen_stats, trace)
    return _conv(p, "dec.out", h)


def predict(p: Mapping[str, Tensor], config: ModelConfig, src_vertices, tgt_vertices) -> Tensor:
    """Source/target vertex columns (3 x N) to predicted target-topology vertices (3 x N_tgt)."""
    z = encode_pose(p, src_vertices, config.eps)
    tgt = _as_cols(tgt_vertices)
    return decode(p, config, tgt, build_mixed_feature(z, tgt))


def transfer(params: Mapping[str, np.ndarray], config: ModelConfig, source: Mesh,
             target: Mesh) -> Mesh:
    """Pose of ``source`` onto the identity of ``target``; keeps the target's faces."""
    p = as_tensors(params)
    out = predict(p, config, source.vertices.T, target.vertices.T)
    return Mesh(out.data.T.copy(), target.faces)


def check_params(params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    """Raise ConfigError naming the first array that does not fit ``config``."""
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(f"parameter names do not match config: missing {missing[:3]}, "
                          f"unexpected {extra[:3]}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ConfigError(f"{name}: shape {np.shape(params[name])} does not match "
                              f"config shape {shape}")


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))

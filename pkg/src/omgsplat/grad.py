"""Reverse-mode gradients of the image loss and finite-difference checks.

For a pixel with fragments ``i = 0..K-1`` (near to far), colors ``c_i``,
alphas ``a_i`` and transmittance ``T_i = prod_{j<i} (1 - a_j)``::

    C = sum_i c_i a_i T_i + T_K * background

    dC/dc_i = a_i T_i
    dC/da_i = c_i T_i - S_i / (1 - a_i),   S_i = sum_{j>i} c_j a_j T_j + T_K * background

The three pieces are called the color term, the own-alpha term and the suffix
term. ``S_i`` is built with a back-to-front running sum, so the cost stays
linear in the number of fragments. Note the product ``prod (1 - a_k)`` is
differentiated with the product rule directly; there is no exponential of a
sum anywhere in this chain.

In OMG mode ``a_i`` also depends on the material through the cross-section
network, so the material gradient gains the alpha and suffix terms on top of
the color term. In baseline mode only the color term reaches the material.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import crossnet
from .compositing import OpacityMode
from .errors import InvalidInputError, InvalidStateError
from .geometry import Camera, projection_backward
from .images import ImageBuffer
from .render import (RenderRequest, combine_signatures, map_tiles, prepare_frame, render, tile_alphas,
                     tile_blend, tile_pixels, tile_signature)
from .scene import Scene
from .shading import LightRig, shade_batch_backward

TERMS = ("color", "alpha", "suffix")
DEFAULT_GROUPS = ("raw_opacity", "albedo", "roughness", "metallic", "network")
GEOMETRY_GROUPS = ("normal", "mean", "scale", "rotation")
# A corrupted term is scaled by this factor; only reachable with OMG_TEST_HOOKS=1.
CORRUPT_FACTOR = 2.0

_SCENE_FIELD = {"raw_opacity": "raw_opacity", "albedo": "albedo", "roughness": "roughness",
                "metallic": "metallic", "normal": "normals", "mean": "means", "scale": "scales",
                "rotation": "rotations"}


def test_hooks_enabled() -> bool:
    return os.environ.get("OMG_TEST_HOOKS") == "1"


@dataclass
class GradientSet:
    """Gradients laid out like the trainable parameters of a scene."""

    raw_opacity: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    network: dict[str, np.ndarray]
    populated: np.ndarray
    normal: np.ndarray | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    rotation: np.ndarray | None = None

    @classmethod
    def zeros(cls, scene: Scene, geometry: bool = False) -> "GradientSet":
        n = len(scene)
        net = {} if scene.network is None else {k: np.zeros_like(v) for k, v in scene.network.named_parameters().items()}
        out = cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n), np.zeros(n), net, np.zeros(n, bool))
        if geometry:
            out.normal, out.mean = np.zeros((n, 3)), np.zeros((n, 3))
            out.scale, out.rotation = np.zeros((n, 3)), np.zeros((n, 4))
        return out

    @property
    def material(self) -> np.ndarray:
        """(N, 5) in network-input order: albedo rgb, roughness, metallic."""
        return np.concatenate([self.albedo, self.roughness[:, None], self.metallic[:, None]], axis=1)

    def group(self, name: str) -> np.ndarray | None:
        if name.startswith("network."):
            return self.network.get(name.split(".", 1)[1])
        return getattr(self, name)

    def value(self, param: str) -> float:
        group, index = parse_parameter(param)
        arr = self.group(group)
        if arr is None:
            raise InvalidInputError(f"gradient for {param!r} was not computed")
        return float(arr[index])

    def all_finite(self) -> bool:
        arrays = [self.raw_opacity, self.albedo, self.roughness, self.metallic, *self.network.values()]
        arrays += [a for a in (self.normal, self.mean, self.scale, self.rotation) if a is not None]
        return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass
class GradCheckReport:
    name: str
    analytic: float
    numeric: float
    rel_err: float
    passed: bool
    excluded: bool = False
    terms: dict[str, float] = field(default_factory=dict)

    def to_line(self) -> str:
        status = "skip" if self.excluded else ("pass" if self.passed else "FAIL")
        line = (f"{self.name} analytic={self.analytic!r} numeric={self.numeric!r} "
                f"rel_err={self.rel_err:.3e} status={status}")
        if self.terms:
            line += " " + " ".join(f"term_{k}={v!r}" for k, v in self.terms.items())
        return line


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def loss_l2(rendered, target) -> tuple[float, ImageBuffer]:
    """Mean squared error over all pixel-channels and its gradient."""
    r = rendered.data if isinstance(rendered, ImageBuffer) else np.asarray(rendered, dtype=np.float64)
    t = target.data if isinstance(target, ImageBuffer) else np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise InvalidInputError(f"image shapes differ: {r.shape} vs {t.shape}")
    diff = r - t
    return float(np.mean(diff * diff)), ImageBuffer(2.0 * diff / diff.size)


def dalpha_dparams(mode, o, G, sigma):
    """(da/do, da/dG, da/dsigma) of the unclamped alpha."""
    mode = OpacityMode(mode)
    o, G, sigma = (np.asarray(x, dtype=np.float64) for x in (o, G, sigma))
    if mode is OpacityMode.BASELINE:
        out = (G * np.ones_like(o), o * np.ones_like(G), np.zeros(np.broadcast(o, G, sigma).shape))
    else:
        e = np.exp(-(o * G) * sigma)   # equals 1 - alpha
        out = (G * sigma * e, o * sigma * e, o * G * e)
    if all(np.ndim(x) == 0 for x in out):
        return tuple(float(x) for x in out)
    return out


@dataclass
class _TileGrad:
    sel: np.ndarray
    d_color: np.ndarray       # (F, 3)
    d_opacity: np.ndarray     # (F,)
    d_sigma: np.ndarray       # (F,)
    d_mean2d: np.ndarray | None
    d_conic: np.ndarray | None
    signature: int


def _tile_backward(frame, mode, tile, dimg, background, scale, geometry) -> _TileGrad:
    rows, cols, sel = tile
    pix = tile_pixels(rows, cols)
    ta = tile_alphas(frame, mode, sel, pix)
    blend = tile_blend(ta.alpha)
    g = dimg[rows, cols].reshape(-1, 3)                 # (P, 3)
    n = len(sel)
    sig = tile_signature(ta, blend)
    if n == 0:
        return _TileGrad(sel, np.zeros((0, 3)), np.zeros(0), np.zeros(0), None, None, sig)

    d_color = scale["color"] * (blend.weight @ g)
    cg = frame.color[sel] @ g.T                         # (F, P): c_i . dL/dC
    active = blend.live & ~ta.clamped & ~ta.skipped
    dL_da = np.zeros_like(ta.alpha)
    if scale["alpha"]:
        dL_da += scale["alpha"] * np.where(active, blend.T_excl * cg, 0.0)
    if scale["suffix"]:
        contrib = blend.weight * cg
        # S_i = sum over later live fragments, plus the background seen through all of them
        S = np.empty_like(contrib)
        S[-1] = 0.0
        if n > 1:
            S[:-1] = np.cumsum(contrib[:0:-1], axis=0)[::-1]
        S += blend.T_final * (g @ background)
        dL_da -= scale["suffix"] * np.where(active, S / (1.0 - ta.alpha), 0.0)

    o = frame.opacity[sel][:, None]
    if mode is OpacityMode.BASELINE:
        da_do, da_dG = ta.G, np.broadcast_to(o, ta.G.shape)
        d_sigma = np.zeros(n)
    else:
        s = frame.sigma[sel][:, None]
        da_do, da_dG = ta.G * s * ta.decay, o * s * ta.decay
        d_sigma = np.sum(dL_da * (o * ta.G * ta.decay), axis=1)
    d_opacity = np.sum(dL_da * da_do, axis=1)

    d_mean2d = d_conic = None
    if geometry:
        dG = dL_da * da_dG * ta.G                      # dL/dpower
        d = ta.d
        Q = frame.conic[sel]
        Qd = np.einsum("fab,fpb->fpa", Q, d)
        d_mean2d = np.einsum("fp,fpa->fa", dG, Qd)
        d_conic = -0.5 * np.einsum("fp,fpa,fpb->fab", dG, d, d)
    return _TileGrad(sel, d_color, d_opacity, d_sigma, d_mean2d, d_conic, sig)


def backward_image(scene: Scene, camera: Camera, mode, rig: LightRig | None, dimage, *,
                   geometry: bool = False, material_alpha_path: bool = True,
                   terms: Iterable[str] = TERMS, corrupt: str | None = None,
                   forward_signature: int | None = None, tile_size: int = 16) -> GradientSet:
    """Gradient of a loss with image gradient ``dimage`` w.r.t. the scene parameters.

    ``terms`` keeps a subset of the color / own-alpha / suffix contributions.
    ``material_alpha_path=False`` drops the alpha-path material gradient
    (the network still receives its gradient). ``corrupt`` scales one term
    and is only honoured when test hooks are enabled.
    """
    mode = OpacityMode(mode)
    rig = scene.rig if rig is None else rig
    terms = tuple(terms)
    unknown = [t for t in terms if t not in TERMS]
    if unknown:
        raise InvalidInputError(f"unknown gradient term {unknown[0]!r}")
    scale = {t: (1.0 if t in terms else 0.0) for t in TERMS}
    if corrupt is not None:
        if corrupt not in TERMS:
            raise InvalidInputError(f"unknown gradient term {corrupt!r}")
        if not test_hooks_enabled():
            raise InvalidStateError("fault injection needs OMG_TEST_HOOKS=1")
        scale[corrupt] *= CORRUPT_FACTOR
    if mode is OpacityMode.OMG and scene.network is None:
        raise InvalidInputError("network required for omg mode")
    dimg = dimage.data if isinstance(dimage, ImageBuffer) else np.asarray(dimage, dtype=np.float64)
    if dimg.shape != (camera.height, camera.width, 3):
        raise InvalidInputError(f"dimage shape {dimg.shape} does not match the camera")

    frame = prepare_frame(scene, camera, mode, rig, int(tile_size))
    results = map_tiles(lambda t: _tile_backward(frame, mode, t, dimg, scene.background, scale, geometry),
                        frame.tiles)
    if forward_signature is not None:
        sig = combine_signatures(frame.order, [r.signature for r in results])
        if sig != forward_signature:
            raise InvalidStateError("backward fragments do not match the forward render")

    n_frag = len(frame.order)
    d_color = np.zeros((n_frag, 3))
    d_opacity = np.zeros(n_frag)
    d_sigma = np.zeros(n_frag)
    d_mean2d = np.zeros((n_frag, 2))
    d_conic = np.zeros((n_frag, 2, 2))
    # merged in tile order so the sums never depend on scheduling
    for r in results:
        d_color[r.sel] += r.d_color
        d_opacity[r.sel] += r.d_opacity
        d_sigma[r.sel] += r.d_sigma
        if geometry and len(r.sel):
            d_mean2d[r.sel] += r.d_mean2d
            d_conic[r.sel] += r.d_conic

    out = GradientSet.zeros(scene, geometry)
    order = frame.order
    out.populated[order] = True
    out.raw_opacity[order] = d_opacity * frame.dopacity

    sg = shade_batch_backward(scene.albedo[order], scene.roughness[order], scene.metallic[order],
                              scene.normals[order], frame.view_dirs, rig, d_color)
    d_mat = np.concatenate([sg.albedo, sg.roughness[:, None], sg.metallic[:, None]], axis=1)
    if mode is OpacityMode.OMG and n_frag:
        dm, net_grads = crossnet.backward(scene.network, frame.net_cache, d_sigma)
        out.network = net_grads
        if material_alpha_path:
            d_mat = d_mat + dm
    out.albedo[order] = d_mat[:, :3]
    out.roughness[order] = d_mat[:, 3]
    out.metallic[order] = d_mat[:, 4]

    if geometry:
        out.normal[order] = sg.normal
        # view direction v = (p - mean) / |p - mean|
        v = frame.view_dirs
        dv = sg.view
        d_mean_view = -(dv - v * np.sum(v * dv, axis=1, keepdims=True)) / frame.view_dist[:, None]
        n = len(scene)
        full_mean2d = np.zeros((n, 2))
        full_conic = np.zeros((n, 2, 2))
        full_mean2d[order] = d_mean2d
        full_conic[order] = d_conic
        dm_, ds_, dq_ = projection_backward(camera, frame.proj, scene.scales, scene.rotations,
                                            full_mean2d, full_conic)
        dm_[order] += d_mean_view
        out.mean, out.scale, out.rotation = dm_, ds_, dq_
    return out


# ---------------------------------------------------------------------------
# Finite differences


def parse_parameter(name: str) -> tuple[str, tuple[int, ...]]:
    """``"albedo[3,1]"`` -> ``("albedo", (3, 1))``."""
    if not name.endswith("]") or "[" not in name:
        raise InvalidInputError(f"bad parameter name {name!r}")
    group, idx = name[:-1].split("[", 1)
    return group, tuple(int(i) for i in idx.split(","))


def _format_parameter(group: str, index: tuple[int, ...]) -> str:
    return f"{group}[{','.join(str(i) for i in index)}]"


def scene_parameter_arrays(scene: Scene, geometry: bool = False) -> dict[str, np.ndarray]:
    """Group name -> the live array inside ``scene`` (mutating it edits the scene)."""
    groups = [g for g in DEFAULT_GROUPS if g != "network"] + (list(GEOMETRY_GROUPS) if geometry else [])
    out = {g: getattr(scene, _SCENE_FIELD[g]) for g in groups}
    if scene.network is not None:
        for k, v in scene.network.named_parameters().items():
            out[f"network.{k}"] = v
    return out


def list_parameters(scene: Scene, *, geometry: bool = False, network_samples: int | None = 32,
                    seed: int = 0, selection=None) -> list[str]:
    """Scalar parameter names in a fixed order.

    All per-Gaussian entries are listed; network entries are a seeded random
    subset of ``network_samples`` scalars (``None`` lists every one).
    ``selection`` is a group-name list or a predicate on the parameter name.
    """
    arrays = scene_parameter_arrays(scene, geometry)
    names = []
    net_names = []
    for group, arr in arrays.items():
        target = net_names if group.startswith("network.") else names
        for index in np.ndindex(arr.shape):
            target.append(_format_parameter(group, index))
    if network_samples is not None and len(net_names) > network_samples:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(net_names), size=network_samples, replace=False))
        net_names = [net_names[i] for i in pick]
    names += net_names
    if selection is None:
        return names
    if callable(selection):
        return [n for n in names if selection(n)]
    wanted = set(selection)
    return [n for n in names if parse_parameter(n)[0] in wanted
            or parse_parameter(n)[0].split(".")[0] in wanted]


def finite_difference_check(scene: Scene, camera: Camera, mode, rig: LightRig | None, target, *,
                            selection=None, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                            network_samples: int | None = 32, geometry: bool = False,
                            corrupt: str | None = None, with_terms: bool = False,
                            tile_size: int = 16) -> list[GradCheckReport]:
    """Central differences of the L2 loss against ``backward_image``.

    Parameters whose +-eps perturbation changes which fragments are clamped or
    terminated (a kink of the loss) are reported as excluded.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidInputError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    mode = OpacityMode(mode)
    rig = scene.rig if rig is None else rig
    tile = int(tile_size or 16)
    work = scene.copy()

    def evaluate():
        out = render(RenderRequest(work, camera, mode, rig, ("color",), tile))
        return loss_l2(out["color"], target)[0], out.signature

    base = render(RenderRequest(work, camera, mode, rig, ("color",), tile))
    _, dimage = loss_l2(base["color"], target)
    grads = backward_image(work, camera, mode, rig, dimage, geometry=geometry, corrupt=corrupt,
                           forward_signature=base.signature, tile_size=tile)
    per_term = {}
    if with_terms:
        per_term = {t: backward_image(work, camera, mode, rig, dimage, geometry=geometry, terms=(t,),
                                      tile_size=tile) for t in TERMS}

    arrays = scene_parameter_arrays(work, geometry)
    reports = []
    for name in list_parameters(work, geometry=geometry, network_samples=network_samples,
                                seed=seed, selection=selection):
        group, index = parse_parameter(name)
        arr = arrays[group]
        v0 = arr[index]
        arr[index] = v0 + eps
        lp, sp = evaluate()
        arr[index] = v0 - eps
        lm, sm = evaluate()
        arr[index] = v0
        numeric = (lp - lm) / (2.0 * eps)
        analytic = grads.value(name)
        err = relative_error(analytic, numeric)
        excluded = sp != base.signature or sm != base.signature
        terms = {t: g.value(name) for t, g in per_term.items()}
        reports.append(GradCheckReport(name, analytic, numeric, err, excluded or err <= tol, excluded, terms))
    return reports


def attribute_failure(reports: list[GradCheckReport]) -> str | None:
    """Which gradient term best explains the analytic/numeric mismatch.

    Returns ``None`` when nothing failed. Otherwise fits
    ``numeric - analytic ~ k * term`` separately for every term over all
    checked reports (a wrong term is wrong everywhere, not only where it
    crosses the tolerance) and returns the term with the smallest relative
    residual. Reports must carry per-term values.
    """
    if not any(not r.passed for r in reports):
        return None
    used = [r for r in reports if not r.excluded and r.terms]
    if not used:
        return None
    delta = np.array([r.numeric - r.analytic for r in used])
    best, best_res = None, np.inf
    for term in TERMS:
        x = np.array([r.terms.get(term, 0.0) for r in used])
        xx = float(x @ x)
        if xx == 0.0:
            continue
        k = float(x @ delta) / xx
        res = float(np.sum((delta - k * x) ** 2)) / max(float(delta @ delta), 1e-300)
        if res < best_res:
            best, best_res = term, res
    return best


def summarize(reports: list[GradCheckReport]) -> dict[str, int | float]:
    checked = [r for r in reports if not r.excluded]
    return {"parameters": len(reports), "checked": len(checked), "excluded": len(reports) - len(checked),
            "failed": sum(not r.passed for r in reports),
            "max_rel_err": max((r.rel_err for r in checked), default=0.0)}


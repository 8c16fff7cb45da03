"""Forward rendering: tiled fast path and a brute-force per-pixel reference.

Tiling only decides which fragments a pixel looks at. Every pixel still blends
its fragments in the global near-to-far order, and a fragment is only left out
of a tile when its alpha is below the skip threshold on every pixel of that
tile, so the output does not depend on the tile size.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import crossnet
from .compositing import (ALPHA_MAX, ALPHA_SKIP, T_MIN, OpacityMode, activate_opacity, alpha_baseline,
                          alpha_omg, composite_pixel, nerf_alpha)
from .errors import InvalidInputError, NumericDegeneracyError
from .geometry import Camera, Projection, gaussian_weight, project_all, project_gaussian
from .images import ImageBuffer
from .scene import Scene
from .shading import LightRig, shade, shade_batch

OUTPUT_KINDS = ("color", "cross_section_map", "transmittance_map", "normal_map", "albedo_map")
_CHANNELS = {"color": 3, "cross_section_map": 1, "transmittance_map": 1, "normal_map": 3, "albedo_map": 3}


@dataclass
class RenderRequest:
    scene: Scene
    camera: Camera
    mode: OpacityMode = OpacityMode.OMG
    rig: LightRig | None = None
    outputs: tuple[str, ...] = ("color",)
    tile_size: int = 16

    def __post_init__(self):
        self.mode = OpacityMode(self.mode)
        if isinstance(self.outputs, str):
            self.outputs = (self.outputs,)
        self.outputs = tuple(self.outputs)
        if not self.outputs:
            raise InvalidInputError("at least one output kind is required")
        unknown = [k for k in self.outputs if k not in OUTPUT_KINDS]
        if unknown:
            raise InvalidInputError(f"unknown output kind {unknown[0]!r}")
        if int(self.tile_size) < 1:
            raise InvalidInputError("tile_size must be positive")
        if self.rig is None:
            self.rig = self.scene.rig
        needs_sigma = self.mode is OpacityMode.OMG or "cross_section_map" in self.outputs
        if needs_sigma and self.scene.network is None:
            what = "omg mode" if self.mode is OpacityMode.OMG else "the cross-section map"
            raise InvalidInputError(f"network required for {what}")


class RenderOutput(dict):
    """Output kind -> ImageBuffer, plus a signature of the blend structure."""

    signature: int = 0


@dataclass
class Frame:
    """Everything about one (scene, camera) pair that does not depend on the pixel."""

    order: np.ndarray            # Gaussian index of each fragment, near to far
    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    dopacity: np.ndarray         # d opacity / d raw opacity
    color: np.ndarray
    sigma: np.ndarray | None
    view_dirs: np.ndarray
    view_dist: np.ndarray
    half_extent: np.ndarray      # (F, 2) AABB of the alpha >= ALPHA_SKIP region
    proj: Projection
    net_cache: crossnet.ForwardCache | None = None
    tiles: list = field(default_factory=list)


def prepare_frame(scene: Scene, camera: Camera, mode: OpacityMode, rig: LightRig,
                  tile_size: int, need_sigma: bool = False) -> Frame:
    proj = project_all(camera, scene.means, scene.rotations, scene.scales)
    idx = np.flatnonzero(proj.visible)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    o, do = activate_opacity(scene.raw_opacity[order], scene.opacity_activation)
    offset = camera.position - scene.means[order]
    dist = np.linalg.norm(offset, axis=1)
    view_dirs = offset / dist[:, None] if len(order) else np.zeros((0, 3))
    color = shade_batch(scene.albedo[order], scene.roughness[order], scene.metallic[order],
                        scene.normals[order], view_dirs, rig)
    sigma, cache = None, None
    if (mode is OpacityMode.OMG or need_sigma) and len(order):
        sigma, cache = crossnet.forward(scene.network, scene.materials()[order])
    elif mode is OpacityMode.OMG or need_sigma:
        sigma = np.zeros(0)
    cov = proj.cov2d[order]
    # alpha <= o * G in both modes, so o * G < ALPHA_SKIP bounds the footprint.
    k = 2.0 * np.log(np.maximum(o, ALPHA_SKIP) / ALPHA_SKIP)
    half = np.sqrt(k[:, None] * np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1)) if len(order) else np.zeros((0, 2))
    half[o <= ALPHA_SKIP] = -np.inf
    frame = Frame(order, proj.mean2d[order], proj.conic[order], proj.depth[order], o, do, color, sigma,
                  view_dirs, dist, half, proj, cache)
    frame.tiles = _tiles(frame, camera, tile_size)
    return frame


def _tiles(frame: Frame, camera: Camera, tile_size: int):
    """[(rows slice, cols slice, fragment positions)] in raster order."""
    out = []
    u, v = frame.mean2d[:, 0], frame.mean2d[:, 1]
    hx, hy = frame.half_extent[:, 0], frame.half_extent[:, 1]
    for y0 in range(0, camera.height, tile_size):
        y1 = min(y0 + tile_size, camera.height)
        for x0 in range(0, camera.width, tile_size):
            x1 = min(x0 + tile_size, camera.width)
            hit = ((u + hx >= x0 + 0.5) & (u - hx <= x1 - 0.5)
                   & (v + hy >= y0 + 0.5) & (v - hy <= y1 - 0.5))
            out.append((slice(y0, y1), slice(x0, x1), np.flatnonzero(hit)))
    return out


def tile_pixels(rows: slice, cols: slice) -> np.ndarray:
    ys, xs = np.mgrid[rows, cols]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


@dataclass
class TileAlphas:
    d: np.ndarray          # (F, P, 2) pixel minus projected mean
    G: np.ndarray          # (F, P)
    alpha: np.ndarray      # (F, P) after clamp and skip
    decay: np.ndarray | None  # exp(-o G sigma), OMG only
    clamped: np.ndarray
    skipped: np.ndarray


def tile_alphas(frame: Frame, mode: OpacityMode, sel: np.ndarray, pix: np.ndarray) -> TileAlphas:
    d = pix[None, :, :] - frame.mean2d[sel][:, None, :]
    Q = frame.conic[sel]
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (Q[:, 0, 0, None] * dx * dx + 2.0 * Q[:, 0, 1, None] * dx * dy + Q[:, 1, 1, None] * dy * dy)
    G = np.exp(power)
    oG = frame.opacity[sel][:, None] * G
    decay = None
    if mode is OpacityMode.BASELINE:
        raw = oG
    else:
        density = oG * frame.sigma[sel][:, None]
        raw = nerf_alpha(density, 1.0)
        decay = np.exp(-density)
    clamped = raw > ALPHA_MAX
    alpha = np.minimum(raw, ALPHA_MAX)
    skipped = alpha < ALPHA_SKIP
    alpha = np.where(skipped, 0.0, alpha)
    return TileAlphas(d, G, alpha, decay, clamped, skipped)


@dataclass
class TileBlend:
    T_excl: np.ndarray     # (F, P) transmittance in front of each fragment
    live: np.ndarray       # (F, P) fragment reached before early termination
    weight: np.ndarray     # (F, P) alpha * T, zero once terminated
    T_final: np.ndarray    # (P,)


def tile_blend(alpha: np.ndarray) -> TileBlend:
    n_frag, n_pix = alpha.shape
    if n_frag == 0:
        return TileBlend(np.ones((0, n_pix)), np.zeros((0, n_pix), bool), np.zeros((0, n_pix)), np.ones(n_pix))
    T_incl = np.cumprod(1.0 - alpha, axis=0)
    T_excl = np.empty_like(T_incl)
    T_excl[0] = 1.0
    T_excl[1:] = T_incl[:-1]
    live = T_excl >= T_MIN
    weight = np.where(live, alpha * T_excl, 0.0)
    T_final = np.where(live, T_incl, 1.0).min(axis=0)
    return TileBlend(T_excl, live, weight, T_final)


def tile_signature(ta: TileAlphas, blend: TileBlend) -> int:
    """CRC of the live and clamped masks; changes whenever the blend structure does."""
    mask = ta.clamped & blend.live
    return zlib.crc32(np.packbits(mask).tobytes(), zlib.crc32(np.packbits(blend.live).tobytes()))


def _image(data: np.ndarray, kind: str) -> ImageBuffer:
    if not np.all(np.isfinite(data)):
        raise NumericDegeneracyError(f"{kind} output contains non-finite values")
    return ImageBuffer(data)


def combine_signatures(order: np.ndarray, tile_sigs) -> int:
    sig = zlib.crc32(np.ascontiguousarray(order, dtype=np.int64).tobytes())
    for tsig in tile_sigs:
        sig = zlib.crc32(tsig.to_bytes(4, "little"), sig)
    return sig


def accumulate(weight: np.ndarray, values: np.ndarray) -> np.ndarray:
    """sum_i weight_i * values_i, added one fragment at a time in near-to-far order.

    A fixed sequential order keeps the sum independent of the tile size.
    """
    acc = np.zeros((weight.shape[1], values.shape[1]))
    for w, v in zip(weight, values):
        acc += w[:, None] * v
    return acc


def map_tiles(fn, tiles):
    threads = int(os.environ.get("OMG_THREADS", "1") or 1)
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tiles))
    return [fn(t) for t in tiles]


def render(request: RenderRequest) -> RenderOutput:
    scene, cam, mode = request.scene, request.camera, request.mode
    frame = prepare_frame(scene, cam, mode, request.rig, int(request.tile_size),
                          need_sigma="cross_section_map" in request.outputs)
    H, W = cam.height, cam.width
    images = {k: np.zeros((H, W, _CHANNELS[k])) for k in request.outputs}
    normals = scene.normals[frame.order]
    albedo = scene.albedo[frame.order]

    def run(tile):
        rows, cols, sel = tile
        pix = tile_pixels(rows, cols)
        ta = tile_alphas(frame, mode, sel, pix)
        blend = tile_blend(ta.alpha)
        shape = (rows.stop - rows.start, cols.stop - cols.start)
        out = {}
        for kind in request.outputs:
            if kind == "color":
                val = accumulate(blend.weight, frame.color[sel]) + blend.T_final[:, None] * scene.background
            elif kind == "cross_section_map":
                val = accumulate(blend.weight, frame.sigma[sel][:, None])
            elif kind == "normal_map":
                val = accumulate(blend.weight, normals[sel])
            elif kind == "albedo_map":
                val = accumulate(blend.weight, albedo[sel])
            else:
                val = blend.T_final[:, None]
            out[kind] = val.reshape(*shape, -1)
        return out, tile_signature(ta, blend)

    result = RenderOutput()
    done = map_tiles(run, frame.tiles)
    for tile, (out, _) in zip(frame.tiles, done):
        rows, cols, _ = tile
        for kind, val in out.items():
            images[kind][rows, cols] = val
    for kind in request.outputs:
        result[kind] = _image(images[kind], kind)
    result.signature = combine_signatures(frame.order, [tsig for _, tsig in done])
    return result


def render_reference(request: RenderRequest) -> RenderOutput:
    """Exhaustive per-pixel blend over every fragment, built from the scalar APIs.

    No tiling, no early termination and no skip threshold.
    """
    scene, cam, mode, rig = request.scene, request.camera, request.mode, request.rig
    need_sigma = mode is OpacityMode.OMG or "cross_section_map" in request.outputs
    frags = []
    for i in range(len(scene)):
        g = scene.gaussian(i)
        frag = project_gaussian(cam, g)
        if frag is None:
            continue
        frag.index = i
        offset = cam.position - g.mean
        frag.color = shade(g, rig, offset / np.linalg.norm(offset))
        frag.opacity = float(activate_opacity(g.raw_opacity, scene.opacity_activation)[0])
        if need_sigma:
            frag.cross_section = crossnet.forward(scene.network, g.material.as_vector())[0]
        # payload blended with the same weights: color, sigma, normal, albedo
        payload = np.concatenate([frag.color, [frag.cross_section], g.normal, g.material.albedo])
        frags.append((frag, payload))
    frags.sort(key=lambda fp: (fp[0].depth, fp[0].index))
    depths = [f.depth for f, _ in frags]
    background = np.concatenate([scene.background, np.zeros(7)])

    H, W = cam.height, cam.width
    payload = np.zeros((H, W, 10))
    trans = np.ones((H, W, 1))
    for row in range(H):
        for col in range(W):
            x = (col + 0.5, row + 0.5)
            pairs = []
            for f, vals in frags:
                G = gaussian_weight(f, x)
                if mode is OpacityMode.BASELINE:
                    a = float(alpha_baseline(f.opacity, G))
                else:
                    a = float(alpha_omg(f.opacity, G, f.cross_section))
                pairs.append((a, vals))
            px = composite_pixel(pairs, background, depths, t_min=0.0, alpha_skip=0.0)
            payload[row, col] = px.color
            trans[row, col, 0] = px.transmittance

    slices = {"color": payload[..., 0:3], "cross_section_map": payload[..., 3:4],
              "normal_map": payload[..., 4:7], "albedo_map": payload[..., 7:10], "transmittance_map": trans}
    result = RenderOutput()
    for kind in request.outputs:
        result[kind] = _image(slices[kind].copy(), kind)
    return result

"""Per-Gaussian outgoing radiance under a fixed set of directional lights.

The BRDF is Lambertian plus a normalized Blinn-Phong lobe:

    diffuse  = albedo * (1 - metallic) / pi
    ks       = metallic * ((1 - metallic) * white + metallic * albedo)
    lobe     = (p + 2) / (8 pi) * max(0, n.h)^p,   p = 2 / max(r^2, 1e-4) - 2

and the radiance is ``sum_k I_k * brdf(l_k) * max(0, n.l_k) + ambient * albedo``.
The specular strength vanishes for dielectrics, so a non-metal never reflects
more than its Lambertian share.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import GaussianPrimitive, Material

ROUGHNESS_FLOOR_SQ = 1e-4
_INV_PI = 1.0 / np.pi
_INV_8PI = 1.0 / (8.0 * np.pi)


@dataclass
class DirectionalLight:
    direction: np.ndarray   # unit vector from the surface toward the light
    intensity: np.ndarray   # rgb radiance

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not n > 0:
            raise InvalidInputError("light direction must be nonzero")
        # already-unit vectors are kept as-is so save/load/copy never drift by an ulp
        self.direction = d if abs(n - 1.0) <= 1e-15 else d / n
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(3)
        if np.any(self.intensity < 0):
            raise InvalidInputError("light intensity must be nonnegative")


@dataclass
class LightRig:
    lights: list[DirectionalLight] = field(default_factory=list)
    ambient: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        if np.any(self.ambient < 0):
            raise InvalidInputError("ambient must be nonnegative")
        if not self.lights and not np.any(self.ambient > 0):
            raise InvalidInputError("light rig needs a light or nonzero ambient")

    @property
    def directions(self) -> np.ndarray:
        return np.array([l.direction for l in self.lights]).reshape(-1, 3)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([l.intensity for l in self.lights]).reshape(-1, 3)


def phong_exponent(roughness: float) -> float:
    return 2.0 / max(roughness * roughness, ROUGHNESS_FLOOR_SQ) - 2.0


def brdf_terms(m: Material, l, v, n) -> tuple[np.ndarray, np.ndarray]:
    """(diffuse, specular) rgb parts of the BRDF for one light direction."""
    l, v, n = (np.asarray(a, dtype=np.float64) for a in (l, v, n))
    if n @ l <= 0 or n @ v <= 0:
        return np.zeros(3), np.zeros(3)
    diffuse = m.albedo * (1.0 - m.metallic) / np.pi
    h = l + v
    h = h / np.linalg.norm(h)
    nh = n @ h
    specular = np.zeros(3)
    if nh > 0:
        p = phong_exponent(m.roughness)
        ks = m.metallic * ((1.0 - m.metallic) + m.metallic * m.albedo)
        specular = ks * (p + 2.0) / (8.0 * np.pi) * nh**p
    return diffuse, specular


def brdf_eval(m: Material, l, v, n) -> np.ndarray:
    diffuse, specular = brdf_terms(m, l, v, n)
    return diffuse + specular


def shade(g: GaussianPrimitive, rig: LightRig, view_dir) -> np.ndarray:
    color = rig.ambient * g.material.albedo
    for light in rig.lights:
        cos = g.normal @ light.direction
        if cos > 0:
            color = color + light.intensity * brdf_eval(g.material, light.direction, view_dir, g.normal) * cos
    return color


def shade_backward(g: GaussianPrimitive, rig: LightRig, view_dir, dcolor):
    """Gradients of ``shade`` w.r.t. (material as a 5-vector, normal)."""
    out = shade_batch_backward(
        g.material.albedo[None], np.array([g.material.roughness]), np.array([g.material.metallic]),
        g.normal[None], np.asarray(view_dir, dtype=np.float64)[None], rig,
        np.asarray(dcolor, dtype=np.float64)[None])
    dmat = np.concatenate([out.albedo[0], out.roughness, out.metallic])
    return dmat, out.normal[0]


# ---------------------------------------------------------------------------
# Batched versions used by the renderer.


def shade_batch(albedo, roughness, metallic, normals, view_dirs, rig: LightRig) -> np.ndarray:
    """(N, 3) radiance for N Gaussians."""
    color = albedo * rig.ambient
    if not rig.lights:
        return color
    L, I = rig.directions, rig.intensities
    nl = normals @ L.T                                   # (N, K)
    nv = np.sum(normals * view_dirs, axis=1)             # (N,)
    active = (nl > 0) & (nv > 0)[:, None]
    h = L[None, :, :] + view_dirs[:, None, :]            # (N, K, 3)
    h = h / np.linalg.norm(h, axis=2, keepdims=True)
    nh = np.einsum("nd,nkd->nk", normals, h)
    p = 2.0 / np.maximum(roughness**2, ROUGHNESS_FLOOR_SQ) - 2.0
    spec_on = active & (nh > 0)
    lobe = np.where(spec_on, (p + 2.0)[:, None] * _INV_8PI * np.where(spec_on, nh, 1.0) ** p[:, None], 0.0)
    diffuse = albedo * ((1.0 - metallic) * _INV_PI)[:, None]                 # (N, 3)
    ks = metallic[:, None] * ((1.0 - metallic)[:, None] + metallic[:, None] * albedo)
    weight = np.where(active, nl, 0.0)                                       # (N, K)
    # sum_k I_k * (diffuse + ks * lobe_k) * cos_k
    color = color + diffuse * (weight @ I) + ks * ((weight * lobe) @ I)
    return color


@dataclass
class ShadeGrads:
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    normal: np.ndarray
    view: np.ndarray


def shade_batch_backward(albedo, roughness, metallic, normals, view_dirs, rig: LightRig,
                         dcolor) -> ShadeGrads:
    d_albedo = dcolor * rig.ambient
    n = len(albedo)
    d_rough = np.zeros(n)
    d_metal = np.zeros(n)
    d_normal = np.zeros((n, 3))
    d_view = np.zeros((n, 3))
    if not rig.lights:
        return ShadeGrads(d_albedo, d_rough, d_metal, d_normal, d_view)
    L, I = rig.directions, rig.intensities
    nl = normals @ L.T
    nv = np.sum(normals * view_dirs, axis=1)
    active = (nl > 0) & (nv > 0)[:, None]
    s = L[None, :, :] + view_dirs[:, None, :]
    s_norm = np.linalg.norm(s, axis=2, keepdims=True)
    h = s / s_norm
    nh = np.einsum("nd,nkd->nk", normals, h)
    r2 = roughness**2
    p = 2.0 / np.maximum(r2, ROUGHNESS_FLOOR_SQ) - 2.0
    spec_on = active & (nh > 0)
    nh_safe = np.where(spec_on, nh, 1.0)
    pow_p = nh_safe ** p[:, None]
    lobe = np.where(spec_on, (p + 2.0)[:, None] * _INV_8PI * pow_p, 0.0)
    one_m = 1.0 - metallic
    diffuse = albedo * (one_m * _INV_PI)[:, None]
    ks = metallic[:, None] * (one_m[:, None] + metallic[:, None] * albedo)
    weight = np.where(active, nl, 0.0)

    # diffuse part
    wI = weight @ I                                     # (N, 3)
    d_diffuse = dcolor * wI
    d_albedo = d_albedo + d_diffuse * (one_m * _INV_PI)[:, None]
    d_metal = d_metal - np.sum(d_diffuse * albedo, axis=1) * _INV_PI
    # specular color
    lI = (weight * lobe) @ I                            # (N, 3)
    d_ks = dcolor * lI
    d_albedo = d_albedo + d_ks * (metallic**2)[:, None]
    d_metal = d_metal + np.sum(d_ks * (1.0 - 2.0 * metallic[:, None] + 2.0 * metallic[:, None] * albedo), axis=1)
    # lobe shape
    g_lobe = np.einsum("nc,kc->nk", dcolor * ks, I) * weight     # dL/dlobe_k
    ln_nh = np.log(nh_safe)
    dp = np.sum(np.where(spec_on, g_lobe * lobe * (1.0 / (p + 2.0))[:, None] + g_lobe * lobe * ln_nh, 0.0), axis=1)
    d_rough = np.where(r2 > ROUGHNESS_FLOOR_SQ, dp * (-4.0 / np.maximum(np.abs(roughness), 0.01) ** 3), 0.0)
    d_nh = np.where(spec_on, g_lobe * (p + 2.0)[:, None] * _INV_8PI * p[:, None] * nh_safe ** (p[:, None] - 1.0), 0.0)
    # cosine factor: dL/dcos_k = sum_c dcolor_c I_kc brdf_kc
    brdf_dot = np.einsum("nc,kc->nk", dcolor * diffuse, I) + np.einsum("nc,kc->nk", dcolor * ks, I) * lobe
    d_cos = np.where(active, brdf_dot, 0.0)
    d_normal = d_cos @ L + np.einsum("nk,nkd->nd", d_nh, h)
    dh = d_nh[:, :, None] * normals[:, None, :]
    ds = (dh - h * np.sum(h * dh, axis=2, keepdims=True)) / s_norm
    d_view = ds.sum(axis=1)
    return ShadeGrads(d_albedo, d_rough, d_metal, d_normal, d_view)

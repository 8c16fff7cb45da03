"""Scene container, synthetic ground-truth generator, and the scene text format.

A scene stores its Gaussians as parallel arrays (one row per Gaussian) so the
renderer and optimizer can work on whole columns at once;
``Scene.gaussian(i)`` gives the per-primitive view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import crossnet
from .compositing import OpacityActivation
from .crossnet import CrossSectionNetwork
from .errors import InvalidInputError, SceneParseError
from .geometry import Camera, GaussianPrimitive, Material
from .shading import DirectionalLight, LightRig

FORMAT_NAME = "omg-scene"
FORMAT_VERSION = 1

# Fixed default light rig; generated scenes take the first ``n_lights``.
DEFAULT_LIGHTS = (
    ((0.6, 0.4, 0.8), (1.6, 1.5, 1.4)),
    ((-0.7, 0.5, 0.4), (0.8, 0.9, 1.1)),
    ((0.1, -0.9, 0.3), (0.6, 0.6, 0.6)),
)
DEFAULT_AMBIENT = (0.15, 0.15, 0.15)


@dataclass
class Scene:
    means: np.ndarray          # (N, 3)
    rotations: np.ndarray      # (N, 4) w, x, y, z
    scales: np.ndarray         # (N, 3)
    raw_opacity: np.ndarray    # (N,)
    albedo: np.ndarray         # (N, 3)
    roughness: np.ndarray      # (N,)
    metallic: np.ndarray       # (N,)
    normals: np.ndarray        # (N, 3)
    rig: LightRig
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_activation: OpacityActivation = OpacityActivation.SIGMOID
    network: CrossSectionNetwork | None = None

    ARRAY_FIELDS = ("means", "rotations", "scales", "raw_opacity", "albedo",
                    "roughness", "metallic", "normals")
    _WIDTHS = {"means": 3, "rotations": 4, "scales": 3, "raw_opacity": 0, "albedo": 3,
               "roughness": 0, "metallic": 0, "normals": 3}

    def __post_init__(self):
        n = len(np.atleast_1d(self.raw_opacity))
        for name in self.ARRAY_FIELDS:
            width = self._WIDTHS[name]
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr = arr.reshape(n, width) if width else arr.reshape(n)
            setattr(self, name, arr)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.opacity_activation = OpacityActivation(self.opacity_activation)
        if n and np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise InvalidInputError("zero-norm quaternion in scene")
        if np.any(self.scales <= 0):
            raise InvalidInputError("scales must be strictly positive")

    def __len__(self) -> int:
        return len(self.raw_opacity)

    @classmethod
    def from_gaussians(cls, gaussians: list[GaussianPrimitive], rig: LightRig, **kw) -> "Scene":
        g = list(gaussians)
        return cls(
            means=[x.mean for x in g] or np.zeros((0, 3)),
            rotations=[x.rotation for x in g] or np.zeros((0, 4)),
            scales=[x.scale for x in g] or np.zeros((0, 3)),
            raw_opacity=[x.raw_opacity for x in g],
            albedo=[x.material.albedo for x in g] or np.zeros((0, 3)),
            roughness=[x.material.roughness for x in g],
            metallic=[x.material.metallic for x in g],
            normals=[x.normal for x in g] or np.zeros((0, 3)),
            rig=rig, **kw)

    def gaussian(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.rotations[i], self.scales[i], self.raw_opacity[i],
                                 Material(self.albedo[i], self.roughness[i], self.metallic[i]),
                                 self.normals[i])

    @property
    def gaussians(self) -> list[GaussianPrimitive]:
        return [self.gaussian(i) for i in range(len(self))]

    def materials(self) -> np.ndarray:
        """(N, 5) network inputs: albedo rgb, roughness, metallic."""
        return np.concatenate([self.albedo, self.roughness[:, None], self.metallic[:, None]], axis=1)

    def clamp_materials(self) -> None:
        np.clip(self.albedo, 0.0, 1.0, out=self.albedo)
        np.clip(self.roughness, 0.0, 1.0, out=self.roughness)
        np.clip(self.metallic, 0.0, 1.0, out=self.metallic)

    def copy(self) -> "Scene":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in self.ARRAY_FIELDS:
            kw[name] = kw[name].copy()
        kw["background"] = self.background.copy()
        kw["rig"] = LightRig([DirectionalLight(l.direction.copy(), l.intensity.copy()) for l in self.rig.lights],
                             self.rig.ambient.copy())
        kw["network"] = self.network.copy() if self.network is not None else None
        return Scene(**kw)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class SceneSpec:
    count: int = 64
    extent: float = 1.0
    albedo_range: tuple[float, float] = (0.05, 0.95)
    roughness_range: tuple[float, float] = (0.25, 0.9)
    metallic_range: tuple[float, float] = (0.0, 1.0)
    raw_opacity_mean: float = 1.5
    raw_opacity_std: float = 0.75
    n_views: int = 16
    ring_radius: float = 4.0
    elevation_deg: float = 25.0
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    n_lights: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1 or self.n_views < 1 or self.width < 1 or self.height < 1:
            raise InvalidInputError("counts and image size must be positive")
        if not self.extent > 0 or not self.ring_radius > self.extent:
            raise InvalidInputError("need extent > 0 and ring_radius > extent")
        if not 0 <= self.n_lights <= len(DEFAULT_LIGHTS):
            raise InvalidInputError(f"n_lights must be in [0, {len(DEFAULT_LIGHTS)}]")
        for lo, hi in (self.albedo_range, self.roughness_range, self.metallic_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise InvalidInputError("material bounds must satisfy 0 <= lo <= hi <= 1")


def _quaternion_z_to(n: np.ndarray) -> np.ndarray:
    """Unit quaternion rotating +z onto ``n``."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(z @ n)
    if c < -1 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, n)
    q = np.array([1.0 + c, *axis])
    return q / np.linalg.norm(q)


def ring_cameras(spec: SceneSpec, center=(0.0, 0.0, 0.0), phase: float = 0.0) -> list[Camera]:
    center = np.asarray(center, dtype=np.float64)
    elev = math.radians(spec.elevation_deg)
    cams = []
    for k in range(spec.n_views):
        theta = 2 * math.pi * (k + phase) / spec.n_views
        eye = center + spec.ring_radius * np.array(
            [math.cos(theta) * math.cos(elev), math.sin(theta) * math.cos(elev), math.sin(elev)])
        cams.append(Camera.look_at(eye, center, (0.0, 0.0, 1.0), width=spec.width, height=spec.height,
                                   fov_deg=spec.fov_deg, near=0.05, far=10.0 * spec.ring_radius))
    return cams


def default_camera(scene: Scene, width: int = 32, height: int = 32, fov_deg: float = 45.0) -> Camera:
    """A camera looking at the Gaussian centroid from outside their bounding sphere."""
    if len(scene) == 0:
        center, radius = np.zeros(3), 1.0
    else:
        center = scene.means.mean(axis=0)
        radius = max(float(np.max(np.linalg.norm(scene.means - center, axis=1) + scene.scales.max(axis=1))), 1e-3)
    elev = math.radians(25.0)
    eye = center + 4.0 * radius * np.array([math.cos(elev), 0.0, math.sin(elev)])
    return Camera.look_at(eye, center, (0.0, 0.0, 1.0), width=width, height=height, fov_deg=fov_deg,
                          near=0.05 * radius, far=40.0 * radius)


def default_rig(n_lights: int = 3) -> LightRig:
    return LightRig([DirectionalLight(d, i) for d, i in DEFAULT_LIGHTS[:n_lights]], DEFAULT_AMBIENT)


def generate_synthetic_scene(spec: SceneSpec) -> tuple[Scene, list[Camera]]:
    """Gaussians on a jittered Fibonacci sphere with outward normals, seen by a camera ring."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.count
    if n == 1:
        means = np.zeros((1, 3))
        normals = np.array([[1.0, 0.0, 0.0]])
    else:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = math.pi * (1 + 5**0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        dirs += rng.normal(0.0, 0.05, size=dirs.shape)
        normals = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        means = 0.8 * spec.extent * normals
    rotations = np.array([_quaternion_z_to(nrm) for nrm in normals])
    # tangential size ~ the spacing between neighbours on the sphere
    tangential = spec.extent * 0.45 * math.sqrt(4 * math.pi * 0.64 / max(n, 4))
    jitter = rng.uniform(0.8, 1.2, size=(n, 2))
    scales = np.column_stack([tangential * jitter, 0.3 * tangential * jitter.min(axis=1)])
    raw_opacity = rng.normal(spec.raw_opacity_mean, spec.raw_opacity_std, size=n)
    albedo = rng.uniform(*spec.albedo_range, size=(n, 3))
    roughness = rng.uniform(*spec.roughness_range, size=n)
    metallic = rng.uniform(*spec.metallic_range, size=n)
    scene = Scene(means, rotations, scales, raw_opacity, albedo, roughness, metallic, normals,
                  rig=default_rig(spec.n_lights), network=crossnet.init_network(spec.seed + 1))
    return scene, ring_cameras(spec)


# ---------------------------------------------------------------------------
# Text format


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in np.atleast_1d(values))


GAUSSIAN_FIELDS = {
    "mean": ("means", 3), "rotation": ("rotations", 4), "scale": ("scales", 3),
    "raw_opacity": ("raw_opacity", 1), "albedo": ("albedo", 3), "roughness": ("roughness", 1),
    "metallic": ("metallic", 1), "normal": ("normals", 3),
}
SECTIONS = ("options", "lights", "gaussians", "network", "end")


def dumps_scene(scene: Scene) -> str:
    out = [f"format {FORMAT_NAME}", f"version {FORMAT_VERSION}", "[options]",
           f"background = {_fmt(scene.background)}",
           f"opacity_activation = {scene.opacity_activation.value}",
           "[lights]", f"ambient = {_fmt(scene.rig.ambient)}", f"count = {len(scene.rig.lights)}"]
    for light in scene.rig.lights:
        out.append(f"light direction={_fmt(light.direction)} intensity={_fmt(light.intensity)}")
    out += ["[gaussians]", f"count = {len(scene)}"]
    for i in range(len(scene)):
        parts = [f"{key}={_fmt(getattr(scene, attr)[i])}" for key, (attr, _) in GAUSSIAN_FIELDS.items()]
        out.append("gaussian " + " ".join(parts))
    out.append("[network]")
    if scene.network is None:
        out.append("layers = none")
    else:
        out.append("layers = " + ",".join(str(s) for s in scene.network.layer_sizes))
        for name, arr in scene.network.named_parameters().items():
            out.append(f"{name} = {_fmt(arr.ravel())}")
    out.append("[end]")
    return "\n".join(out) + "\n"


def save_scene(path, scene: Scene) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_scene(scene))


class _Lines:
    def __init__(self, text: str):
        self.items = [(k + 1, line.strip()) for k, line in enumerate(text.splitlines())
                      if line.strip() and not line.strip().startswith("#")]
        self.pos = 0
        self.eof_line = len(text.splitlines()) + 1

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else (self.eof_line, None)

    def next(self, expecting: str):
        if self.pos >= len(self.items):
            raise SceneParseError(f"unexpected end of file, expected {expecting}",
                                  self.items[-1][0] if self.items else None)
        item = self.items[self.pos]
        self.pos += 1
        return item


def _floats(text: str, width: int, what: str, lineno: int) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split(",")], dtype=np.float64)
    except ValueError:
        raise SceneParseError(f"malformed number in field '{what}'", lineno) from None
    if width and len(vals) != width:
        raise SceneParseError(f"field '{what}' needs {width} values, got {len(vals)}", lineno)
    return vals


def _section(lines: _Lines, name: str) -> None:
    lineno, line = lines.peek()
    if line != f"[{name}]":
        where = f"found {line!r}" if line is not None else "end of file"
        raise SceneParseError(f"missing section [{name}] ({where})", lineno)
    lines.next(f"[{name}]")


def _key_values(lines: _Lines, section: str, allowed: tuple[str, ...]) -> dict[str, tuple[int, str]]:
    """Read ``key = value`` lines until the next section header."""
    out = {}
    while True:
        lineno, line = lines.peek()
        if line is None or line.startswith("[") or "=" not in line:
            break
        if " " in line.split("=", 1)[0].strip():
            break  # a record line such as "light direction=..."
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise SceneParseError(f"unknown field '{key}' in [{section}]", lineno)
        if key in out:
            raise SceneParseError(f"duplicate field '{key}' in [{section}]", lineno)
        out[key] = (lineno, value)
        lines.next(key)
    return out


def _require(kv: dict, key: str, section: str, lineno) -> tuple[int, str]:
    if key not in kv:
        raise SceneParseError(f"missing field '{key}' in [{section}]", lineno)
    return kv[key]


def _record(line: str, lineno: int, keyword: str, fields_: dict[str, int]) -> dict[str, np.ndarray]:
    head, *parts = line.split()
    if head != keyword:
        raise SceneParseError(f"expected a '{keyword}' record, got {head!r}", lineno)
    out = {}
    for part in parts:
        if "=" not in part:
            raise SceneParseError(f"malformed field {part!r}", lineno)
        key, value = part.split("=", 1)
        if key not in fields_:
            raise SceneParseError(f"unknown field '{key}' in {keyword} record", lineno)
        if key in out:
            raise SceneParseError(f"duplicate field '{key}'", lineno)
        out[key] = _floats(value, fields_[key], key, lineno)
    missing = [k for k in fields_ if k not in out]
    if missing:
        raise SceneParseError(f"{keyword} record is missing field '{missing[0]}'", lineno)
    return out


def loads_scene(text: str) -> Scene:
    lines = _Lines(text)
    lineno, line = lines.next("format header")
    if line != f"format {FORMAT_NAME}":
        raise SceneParseError(f"not an {FORMAT_NAME} file", lineno)
    lineno, line = lines.next("version")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "version":
        raise SceneParseError("missing version line", lineno)
    if parts[1] != str(FORMAT_VERSION):
        raise SceneParseError(f"unsupported version {parts[1]} (expected {FORMAT_VERSION})", lineno)

    _section(lines, "options")
    start = lines.peek()[0]
    kv = _key_values(lines, "options", ("background", "opacity_activation"))
    background = _floats(_require(kv, "background", "options", start)[1], 3, "background", kv["background"][0])
    act_line, act = _require(kv, "opacity_activation", "options", start)
    try:
        activation = OpacityActivation(act)
    except ValueError:
        raise SceneParseError(f"unknown opacity activation {act!r}", act_line) from None

    _section(lines, "lights")
    start = lines.peek()[0]
    kv = _key_values(lines, "lights", ("ambient", "count"))
    ambient = _floats(_require(kv, "ambient", "lights", start)[1], 3, "ambient", kv["ambient"][0])
    count_line, count = _require(kv, "count", "lights", start)
    lights = []
    for _ in range(_int(count, count_line)):
        lineno, line = lines.next("light record")
        rec = _record(line, lineno, "light", {"direction": 3, "intensity": 3})
        try:
            lights.append(DirectionalLight(rec["direction"], rec["intensity"]))
        except InvalidInputError as e:
            raise SceneParseError(str(e), lineno) from None

    _section(lines, "gaussians")
    start = lines.peek()[0]
    kv = _key_values(lines, "gaussians", ("count",))
    count_line, count = _require(kv, "count", "gaussians", start)
    n = _int(count, count_line)
    cols = {attr: [] for attr, _ in GAUSSIAN_FIELDS.values()}
    for _ in range(n):
        lineno, line = lines.next("gaussian record")
        rec = _record(line, lineno, "gaussian", {k: w for k, (_, w) in GAUSSIAN_FIELDS.items()})
        for key, (attr, _) in GAUSSIAN_FIELDS.items():
            cols[attr].append(rec[key])

    _section(lines, "network")
    lineno, line = lines.next("layers")
    key, _, value = (s.strip() for s in line.partition("="))
    if key != "layers":
        raise SceneParseError(f"unknown field '{key}' in [network]", lineno)
    network = None
    if value != "none":
        try:
            sizes = [int(s) for s in value.split(",")]
        except ValueError:
            raise SceneParseError("malformed layer sizes", lineno) from None
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            for name, shape, sink in ((f"W{k}", (sizes[k + 1], sizes[k]), weights), (f"b{k}", (sizes[k + 1],), biases)):
                lineno, line = lines.next(name)
                key, _, value = (s.strip() for s in line.partition("="))
                if key != name:
                    raise SceneParseError(f"expected field '{name}', got '{key}'", lineno)
                vals = _floats(value, int(np.prod(shape)), name, lineno)
                sink.append(vals.reshape(shape))
        try:
            network = CrossSectionNetwork(sizes, weights, biases)
        except InvalidInputError as e:
            raise SceneParseError(str(e), lineno) from None

    lineno, line = lines.peek()
    if line is not None and line != "[end]" and not line.startswith("["):
        key = line.split("=", 1)[0].split()[0]
        raise SceneParseError(f"unknown field '{key}' in [network]", lineno)
    _section(lines, "end")
    lineno, line = lines.peek()
    if line is not None:
        raise SceneParseError("content after [end]", lineno)

    try:
        return Scene(
            means=np.array(cols["means"]).reshape(n, 3), rotations=np.array(cols["rotations"]).reshape(n, 4),
            scales=np.array(cols["scales"]).reshape(n, 3), raw_opacity=np.array(cols["raw_opacity"]).reshape(n),
            albedo=np.array(cols["albedo"]).reshape(n, 3), roughness=np.array(cols["roughness"]).reshape(n),
            metallic=np.array(cols["metallic"]).reshape(n), normals=np.array(cols["normals"]).reshape(n, 3),
            rig=LightRig(lights, ambient), background=background, opacity_activation=activation,
            network=network)
    except InvalidInputError as e:
        raise SceneParseError(str(e)) from None


def _int(text: str, lineno: int) -> int:
    try:
        v = int(text)
    except ValueError:
        raise SceneParseError(f"expected an integer, got {text!r}", lineno) from None
    if v < 0:
        raise SceneParseError("count must be nonnegative", lineno)
    return v


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as f:
        return loads_scene(f.read())

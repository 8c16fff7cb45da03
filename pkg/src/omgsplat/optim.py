"""Adam and the multi-view fitting loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compositing import OpacityMode
from .errors import DivergenceError, InvalidInputError, NumericDegeneracyError
from .geometry import Camera
from .grad import GradientSet, backward_image, loss_l2
from .images import ImageBuffer
from .metrics import psnr_from_mse
from .render import RenderRequest, render
from .scene import Scene

DEFAULT_LR = {"opacity": 0.05, "material": 0.01, "network": 1e-3}


def parameter_group(name: str) -> str:
    if name == "raw_opacity":
        return "opacity"
    if name in ("albedo", "roughness", "metallic"):
        return "material"
    if name.startswith("network."):
        return "network"
    raise InvalidInputError(f"no optimizer group for {name!r}")


@dataclass
class AdamState:
    lr: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if any(not lr > 0 for lr in self.lr.values()):
            raise InvalidInputError(f"learning rates must be positive: {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidInputError("bad Adam hyperparameters")


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update. Returns (new params, state); inputs are not modified."""
    if set(params) != set(grads):
        raise InvalidInputError("params and grads have different keys")
    for name in params:
        p, g = np.shape(params[name]), np.shape(grads[name])
        if p != g:
            raise InvalidInputError(f"{name}: parameter shape {p} != gradient shape {g}")
        if name in state.m and state.m[name].shape != p:
            raise InvalidInputError(f"{name}: moment shape {state.m[name].shape} != parameter shape {p}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for name in params:   # dict order is the caller's, so updates are deterministic
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        lr = state.lr[parameter_group(name)]
        out[name] = np.asarray(params[name], dtype=np.float64) - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


@dataclass
class FitConfig:
    iterations: int = 2000
    mode: OpacityMode = OpacityMode.OMG
    lr_opacity: float = DEFAULT_LR["opacity"]
    lr_material: float = DEFAULT_LR["material"]
    lr_network: float = DEFAULT_LR["network"]
    seed: int = 0
    views_per_step: int = 1
    log_interval: int = 100

    def __post_init__(self):
        self.mode = OpacityMode(self.mode)
        if int(self.iterations) < 0:
            raise InvalidInputError("iterations must be >= 0")
        if min(self.lr_opacity, self.lr_material, self.lr_network) <= 0:
            raise InvalidInputError("learning rates must be positive")
        if self.views_per_step < 1 or self.log_interval < 1:
            raise InvalidInputError("views_per_step and log_interval must be >= 1")

    @property
    def learning_rates(self) -> dict[str, float]:
        return {"opacity": self.lr_opacity, "material": self.lr_material, "network": self.lr_network}


@dataclass
class HistoryRecord:
    iteration: int
    loss: float
    psnr: float
    heldout_psnr: float | None = None


@dataclass
class FitHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise InvalidInputError("history iterations must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> HistoryRecord:
        return self.records[i]

    def to_text(self) -> str:
        lines = ["# iteration loss psnr heldout_psnr"]
        for r in self.records:
            held = "nan" if r.heldout_psnr is None else repr(r.heldout_psnr)
            lines.append(f"{r.iteration} {r.loss!r} {r.psnr!r} {held}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FitHistory":
        out = cls()
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            it, loss, p, held = line.split()
            h = float(held)
            out.append(HistoryRecord(int(it), float(loss), float(p), None if math.isnan(h) else h))
        return out


def _trainables(scene: Scene) -> dict[str, np.ndarray]:
    out = {"raw_opacity": scene.raw_opacity, "albedo": scene.albedo,
           "roughness": scene.roughness, "metallic": scene.metallic}
    if scene.network is not None:
        out.update({f"network.{k}": v for k, v in scene.network.named_parameters().items()})
    return out


def _grad_dict(grads: GradientSet, names) -> dict[str, np.ndarray]:
    return {n: grads.group(n) for n in names}


def _assign(scene: Scene, params: dict[str, np.ndarray]) -> None:
    for name, value in params.items():
        if name.startswith("network."):
            key = name.split(".", 1)[1]
            k = int(key[1:])
            (scene.network.weights if key[0] == "W" else scene.network.biases)[k] = value
        else:
            setattr(scene, name, value)


def _check_dataset(dataset) -> list[tuple[Camera, np.ndarray]]:
    out = []
    for cam, img in dataset:
        data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
        if data.shape != (cam.height, cam.width, 3):
            raise InvalidInputError(f"target {data.shape} does not match camera {cam.height}x{cam.width}")
        out.append((cam, data))
    return out


def _render_color(scene: Scene, cam: Camera, mode):
    try:
        return render(RenderRequest(scene, cam, mode, None, ("color",)))
    except NumericDegeneracyError as exc:
        raise DivergenceError(f"render became non-finite: {exc}") from exc


def evaluate(scene: Scene, dataset, mode) -> float:
    """Mean L2 loss over a list of (camera, image)."""
    losses = []
    for cam, target in dataset:
        out = _render_color(scene, cam, mode)
        losses.append(loss_l2(out["color"], target)[0])
    return float(np.mean(losses))


def fit(scene_init: Scene, dataset, config: FitConfig, holdout=None):
    """Minimize the mean-squared color error over ``dataset``.

    Views are visited round-robin in an order fixed by ``config.seed``.
    Returns (fitted scene, its network, history). History row 0 is the
    starting point; PSNR is computed from the mean loss over all views.
    """
    data = _check_dataset(dataset)
    if not data:
        raise InvalidInputError("dataset is empty")
    held = _check_dataset(holdout) if holdout else None
    mode = config.mode
    scene = scene_init.copy()
    if mode is OpacityMode.OMG and scene.network is None:
        raise InvalidInputError("network required for omg mode")
    state = AdamState(lr=config.learning_rates)
    history = FitHistory()
    schedule = np.random.default_rng(config.seed).permutation(len(data))

    def log(it: int) -> None:
        loss = evaluate(scene, data, mode)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at iteration {it}")
        hp = psnr_from_mse(evaluate(scene, held, mode)) if held else None
        history.append(HistoryRecord(it, loss, psnr_from_mse(loss), hp))

    log(0)
    names = list(_trainables(scene))
    cursor = 0
    for it in range(1, int(config.iterations) + 1):
        total = None
        for _ in range(config.views_per_step):
            cam, target = data[schedule[cursor % len(data)]]
            cursor += 1
            out = _render_color(scene, cam, mode)
            loss, dimage = loss_l2(out["color"], target)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at iteration {it} (view {schedule[(cursor - 1) % len(data)]})")
            g = _grad_dict(backward_image(scene, cam, mode, None, dimage,
                                          forward_signature=out.signature), names)
            total = g if total is None else {k: total[k] + g[k] for k in names}
        grads = {k: v / config.views_per_step for k, v in total.items()}
        params, state = adam_step(state, _trainables(scene), grads)
        bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise DivergenceError(f"non-finite parameters {bad} at iteration {it}")
        _assign(scene, params)
        scene.clamp_materials()
        if it % config.log_interval == 0 or it == config.iterations:
            log(it)
    return scene, scene.network, history

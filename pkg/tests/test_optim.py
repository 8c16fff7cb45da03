import numpy as np
import pytest

from omgsplat.compositing import OpacityMode
from omgsplat.errors import DivergenceError, InvalidInputError
from omgsplat.optim import (DEFAULT_LR, AdamState, FitConfig, FitHistory, HistoryRecord, adam_step, evaluate,
                            fit, parameter_group)
from omgsplat.render import RenderRequest, render
from omgsplat.scene import SceneSpec, generate_synthetic_scene


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written out step by step with Python floats."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        out.append(p)
    return out


def dataset_for(scene, cams, mode):
    return [(c, render(RenderRequest(scene, c, mode, outputs=("color",)))["color"]) for c in cams]


@pytest.fixture(scope="module")
def tiny():
    scene, cams = generate_synthetic_scene(SceneSpec(count=10, width=12, height=12, seed=17, n_views=3))
    return scene, cams


class TestAdam:
    def test_groups(self):
        assert parameter_group("raw_opacity") == "opacity"
        assert parameter_group("metallic") == "material"
        assert parameter_group("network.W1") == "network"
        with pytest.raises(InvalidInputError):
            parameter_group("mean")

    def test_zero_gradient_is_a_no_op(self):
        p = {"albedo": np.full((3, 3), 0.4)}
        new, _ = adam_step(AdamState(), p, {"albedo": np.zeros((3, 3))})
        np.testing.assert_array_equal(new["albedo"], p["albedo"])

    def test_first_step_moves_by_lr(self):
        g = np.array([3.0, -0.2, 1e-3])
        new, _ = adam_step(AdamState(), {"raw_opacity": np.zeros(3)}, {"raw_opacity": g})
        np.testing.assert_allclose(new["raw_opacity"], -DEFAULT_LR["opacity"] * np.sign(g), rtol=1e-4)

    def test_matches_reference(self, rng):
        grads = rng.normal(size=(25, 4))
        state = AdamState()
        p = {"roughness": np.full(4, 0.3)}
        for k in range(25):
            p, state = adam_step(state, p, {"roughness": grads[k]})
        for j in range(4):
            expect = reference_adam(0.3, grads[:, j], DEFAULT_LR["material"])[-1]
            assert abs(p["roughness"][j] - expect) <= 1e-12

    def test_inputs_untouched(self):
        p = {"albedo": np.full((2, 3), 0.5)}
        g = {"albedo": np.ones((2, 3))}
        adam_step(AdamState(), p, g)
        np.testing.assert_array_equal(p["albedo"], 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adam_step(AdamState(), {"albedo": np.zeros((2, 3))}, {"albedo": np.zeros((3, 3))})
        with pytest.raises(InvalidInputError):
            adam_step(AdamState(), {"albedo": np.zeros(2)}, {"metallic": np.zeros(2)})

    def test_bad_hyperparameters(self):
        with pytest.raises(InvalidInputError):
            AdamState(lr={"opacity": 0.0})
        with pytest.raises(InvalidInputError):
            AdamState(beta1=1.0)


class TestConfigAndHistory:
    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            FitConfig(iterations=-1)
        with pytest.raises(InvalidInputError):
            FitConfig(lr_network=0)
        assert FitConfig(mode="baseline").mode is OpacityMode.BASELINE

    def test_history_round_trip(self):
        h = FitHistory()
        h.append(HistoryRecord(0, 0.125, 9.03, None))
        h.append(HistoryRecord(10, 1e-5, 50.0, 48.25))
        back = FitHistory.from_text(h.to_text())
        assert back.records == h.records
        assert h.to_text().startswith("# iteration loss psnr heldout_psnr\n")

    def test_history_must_increase(self):
        h = FitHistory()
        h.append(HistoryRecord(5, 1.0, 0.0))
        with pytest.raises(InvalidInputError):
            h.append(HistoryRecord(5, 1.0, 0.0))


class TestFit:
    def test_zero_iterations(self, tiny):
        scene, cams = tiny
        data = dataset_for(scene, cams, "omg")
        out, net, hist = fit(scene, data, FitConfig(iterations=0))
        assert len(hist) == 1 and hist[0].iteration == 0
        np.testing.assert_array_equal(out.albedo, scene.albedo)
        assert net is out.network

    @pytest.mark.parametrize("mode", ["baseline", "omg"])
    def test_truth_is_a_fixed_point(self, tiny, mode):
        scene, cams = tiny
        data = dataset_for(scene, cams, mode)
        _, _, hist = fit(scene, data, FitConfig(iterations=15, mode=mode, log_interval=5))
        assert [r.iteration for r in hist] == [0, 5, 10, 15]
        assert min(r.psnr for r in hist) >= 50.0

    def test_deterministic(self, tiny):
        scene, cams = tiny
        data = dataset_for(scene, cams, "omg")
        start = scene.copy()
        start.albedo[:] = 0.5
        a = fit(start, data, FitConfig(iterations=6, seed=4, views_per_step=2))
        b = fit(start, data, FitConfig(iterations=6, seed=4, views_per_step=2))
        assert a[0].albedo.tobytes() == b[0].albedo.tobytes()
        assert a[2].to_text() == b[2].to_text()

    def test_loss_drops(self, tiny):
        scene, cams = tiny
        data = dataset_for(scene, cams, "omg")
        start = scene.copy()
        start.albedo[:] = 0.5
        start.roughness[:] = 0.5
        start.metallic[:] = 0.5
        _, _, hist = fit(start, data, FitConfig(iterations=40, log_interval=40), holdout=data[:1])
        assert hist[-1].loss < 0.5 * hist[0].loss
        assert hist[-1].heldout_psnr is not None

    def test_first_step_descends(self):
        """A small first step lowers the loss of the view it was taken on."""
        wins = 0
        for trial in range(50):
            scene, cams = generate_synthetic_scene(SceneSpec(count=6, width=10, height=10, seed=100 + trial,
                                                             n_views=1))
            data = dataset_for(scene, cams, "omg")
            rng = np.random.default_rng(trial)
            start = scene.copy()
            start.albedo[:] = rng.uniform(0, 1, start.albedo.shape)
            start.raw_opacity += rng.normal(0, 0.5, len(start))
            cfg = FitConfig(iterations=1, lr_opacity=1e-3, lr_material=1e-3, lr_network=1e-5)
            _, _, hist = fit(start, data, cfg)
            wins += hist[1].loss < hist[0].loss
        assert wins >= 48

    def test_materials_are_clamped(self, tiny):
        scene, cams = tiny
        data = [(c, np.ones((c.height, c.width, 3)) * 5.0) for c in cams]
        out, _, _ = fit(scene, data, FitConfig(iterations=10, lr_material=0.5))
        for arr in (out.albedo, out.roughness, out.metallic):
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_divergence(self, tiny):
        scene, cams = tiny
        data = dataset_for(scene, cams, "omg")
        start = scene.copy()
        start.albedo[:] = 0.5
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            fit(start, data, FitConfig(iterations=5, lr_network=1e300))

    def test_bad_dataset(self, tiny):
        scene, cams = tiny
        with pytest.raises(InvalidInputError):
            fit(scene, [], FitConfig(iterations=1))
        with pytest.raises(InvalidInputError):
            fit(scene, [(cams[0], np.zeros((3, 3, 3)))], FitConfig(iterations=1))

    def test_needs_network_for_omg(self, tiny):
        scene, cams = tiny
        bare = scene.copy()
        bare.network = None
        with pytest.raises(InvalidInputError):
            fit(bare, dataset_for(scene, cams, "omg"), FitConfig(iterations=1))

    def test_evaluate_zero_on_own_renders(self, tiny):
        scene, cams = tiny
        assert evaluate(scene, dataset_for(scene, cams, "omg"), "omg") == 0.0

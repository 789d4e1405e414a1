import numpy as np
import pytest

from layeredit.layers import LayeredScene, RgbaLayer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_layer(rng, h, w, name=""):
    return RgbaLayer(rng.uniform(-1, 1, (h, w, 3)), rng.uniform(0, 1, (h, w)), name)


def random_scene(rng, n_layers=3, h=8, w=8, prompts=None):
    layers = [random_layer(rng, h, w, f"l{k}") for k in range(n_layers)]
    return LayeredScene.from_layers(layers, prompts or ())


def over_oracle(front_to_back):
    """Right fold of the binary premultiplied over operator, one pixel at a time."""
    h, w = front_to_back[0].shape
    color = np.zeros((h, w, 3))
    cov = np.zeros((h, w))
    for y in range(h):
        for x in range(w):

            def fold(k):
                if k == len(front_to_back):
                    return np.zeros(3), 0.0
                layer = front_to_back[k]
                a = layer.alpha[y, x]
                cf = layer.color[y, x] * a
                cb, ab = fold(k + 1)
                return cf + cb * (1.0 - a), a + ab * (1.0 - a)

            color[y, x], cov[y, x] = fold(0)
    return color, cov


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

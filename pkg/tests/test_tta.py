import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitoshift import stain, tta
from mitoshift.backbone import VptViT
from mitoshift.data import synth_patch
from mitoshift.errors import ConfigError
from mitoshift.tta import D4, INVERSE, TtaPlan, d4_apply, predict_tta

from conftest import random_images, tiny_cfg


class ConstantModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def predict_proba(self, images):
        e = np.exp(self.logits - self.logits.max())
        return np.tile(e / e.sum(), (len(images), 1))


@pytest.fixture(scope="module")
def model():
    return VptViT(tiny_cfg(), seed=2)


@pytest.fixture(scope="module")
def targets():
    ref = synth_patch(0, 0.0, 1, 0, side=16)[0]
    return {k: stain.fit_reference(ref, k) for k in ("macenko", "vahadane")}


def patch(seed=0):
    return random_images(1, 16, seed)[0]


def test_identity_is_bitwise():
    p = patch()
    assert np.array_equal(d4_apply(p, "identity"), p)


def test_group_orders():
    p = patch(1)
    q = p
    for _ in range(4):
        q = d4_apply(q, "rot90")
    assert np.array_equal(q, p)
    assert np.array_equal(d4_apply(d4_apply(p, "hflip"), "hflip"), p)


@pytest.mark.parametrize("t", D4)
def test_inverses(t):
    p = patch(2)
    assert np.array_equal(d4_apply(d4_apply(p, t), INVERSE[t]), p)


def test_d4_elements_distinct():
    p = patch(3)
    outs = {d4_apply(p, t).tobytes() for t in D4}
    assert len(outs) == 8


def test_plan_validation_and_order():
    with pytest.raises(ConfigError):
        TtaPlan((), ("identity",))
    with pytest.raises(ConfigError):
        TtaPlan(("spin",), ("identity",))
    plan = TtaPlan(("vflip", "identity", "vflip"), ("vahadane", "identity"))
    assert plan.geo == ("identity", "vflip") and plan.stains == ("identity", "vahadane")
    assert TtaPlan.preset("full").n_passes == 24


def test_constant_model():
    m = ConstantModel([0.3, 1.1])
    expected = float(np.exp(1.1) / (np.exp(0.3) + np.exp(1.1)))
    for name in ("off", "geo"):
        prob, _ = predict_tta(m, patch(), TtaPlan.preset(name))
        assert prob == pytest.approx(expected, abs=1e-15)


def test_off_plan_equals_plain_forward(model):
    p = patch(4)
    prob, fb = predict_tta(model, p, TtaPlan.preset("off"))
    assert prob == model.predict_proba(p[None])[0, 1] and fb == 0


def test_full_plan_matches_manual_enumeration(model, targets):
    p = synth_patch(1, 15.0, 1, 3, side=16)[0]
    prob, fb = predict_tta(model, p, TtaPlan.preset("full"), targets)
    probs = []
    for s in tta.STAINS:
        q = p if s == "identity" else stain.normalize(p, s, targets[s])
        for g in D4:
            probs.append(model.predict_proba(d4_apply(q, g)[None])[0, 1])
    assert fb == 0 and len(probs) == 24
    assert abs(prob - sum(probs) / 24) <= 1e-12


@pytest.mark.parametrize("t", D4)
def test_full_d4_invariance(model, t):
    p = patch(5)
    a, _ = predict_tta(model, p, TtaPlan.preset("geo"))
    b, _ = predict_tta(model, d4_apply(p, t), TtaPlan.preset("geo"))
    assert abs(a - b) <= 1e-12


def test_stain_failure_falls_back(model, targets):
    white = np.full((16, 16, 3), 255, dtype=np.uint8)
    prob, fb = predict_tta(model, white, TtaPlan.preset("stain"), targets)
    assert fb == 2
    assert prob == pytest.approx(model.predict_proba(white[None])[0, 1], abs=1e-15)


def test_missing_target(model):
    with pytest.raises(ConfigError, match="reference"):
        predict_tta(model, patch(), TtaPlan.preset("stain"), {})


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["off", "geo"]))
def test_output_is_probability_and_repeatable(seed, plan):
    m = VptViT(tiny_cfg(), seed=seed % 3)
    p = patch(seed)
    a, _ = predict_tta(m, p, TtaPlan.preset(plan))
    b, _ = predict_tta(m, p, TtaPlan.preset(plan))
    assert 0.0 <= a <= 1.0 and a == b

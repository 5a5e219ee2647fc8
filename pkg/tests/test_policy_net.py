from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from learngene.policy_net import (
    INIT_METHODS,
    LearngeneForm,
    NetworkArchitecture,
    ParameterSet,
    ShapeMismatchError,
    build_network,
    effective_layer_width,
    extract_learngene,
    form_layer_widths,
    forward,
    init_genome,
    init_params,
    manhattan_change,
    payload_from_flat,
    transplant_learngene,
    zero_genome,
)

ACTOR = NetworkArchitecture(6, 16, 2)
CRITIC = NetworkArchitecture(6, 16, 1)


def chain(value: float = 1.0) -> ParameterSet:
    arch = NetworkArchitecture(1, 1, 1)
    return ParameterSet([np.full(s, value) for s in build_network(arch)], [np.zeros(1) for _ in range(6)])


class TestArchitecture:
    def test_full_scale_shapes(self):
        assert build_network(NetworkArchitecture(27, 48, 8)) == [(27, 48)] + [(48, 48)] * 4 + [(48, 8)]

    def test_desk_shapes(self):
        assert build_network(ACTOR) == [(6, 16)] + [(16, 16)] * 4 + [(16, 2)]

    def test_unit_chain(self):
        assert build_network(NetworkArchitecture(1, 1, 1)) == [(1, 1)] * 6

    @pytest.mark.parametrize("bad", [dict(input_dim=0), dict(hidden_width=0), dict(activation="relu")])
    def test_rejects_invalid(self, bad):
        kw = dict(input_dim=6, hidden_width=16, output_dim=2) | bad
        with pytest.raises(ValueError):
            NetworkArchitecture(**kw)


class TestInit:
    @pytest.mark.parametrize("method", INIT_METHODS)
    def test_deterministic_and_zero_bias(self, method):
        a, b = init_params(ACTOR, method, 7), init_params(ACTOR, method, 7)
        assert a.equals(b)
        assert all(not bias.any() for bias in a.biases)

    def test_orthogonal_square(self):
        p = init_params(ACTOR, "orthogonal", 3)
        for w in p.weights[1:5]:
            np.testing.assert_allclose(w.T @ w, np.eye(16), atol=1e-5)

    def test_xavier_uniform_bound(self):
        w = init_params(ACTOR, "xavier_uniform", 0).weights[0]
        assert np.abs(w).max() <= math.sqrt(6 / (6 + 16))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            init_params(ACTOR, "lecun", 0)


class TestForward:
    def test_zero_network(self, rng):
        g = zero_genome(ACTOR, CRITIC)
        assert not forward(g.actor, rng.normal(size=6)).any()

    def test_tanh_chain(self):
        expected = 0.5
        for _ in range(5):
            expected = math.tanh(expected)
        out = forward(chain(), np.array([0.5]))
        assert out[0] == pytest.approx(expected, abs=1e-15)
        assert out[0] == pytest.approx(0.367715548505944, abs=1e-12)

    def test_deterministic(self, rng):
        p = init_params(ACTOR, "orthogonal", 1)
        x = rng.normal(size=(5, 6))
        np.testing.assert_array_equal(forward(p, x), forward(p, x))

    def test_nan_input(self):
        with pytest.raises(ValueError):
            forward(init_params(ACTOR), np.full(6, np.nan))

    def test_wrong_dim(self):
        with pytest.raises(ShapeMismatchError):
            forward(init_params(ACTOR), np.zeros(5))


class TestLearngene:
    def test_extract_copies_layers(self):
        g = init_genome(ACTOR, CRITIC, seed=0)
        p = extract_learngene(g, LearngeneForm("actor", (4, 5)))
        for k, i in enumerate((4, 5)):
            np.testing.assert_array_equal(p.weights[k], g.actor.weights[i])
            assert p.weights[k] is not g.actor.weights[i]

    def test_roundtrip_into_fresh_genome(self):
        src, dst = init_genome(ACTOR, CRITIC, seed=0), init_genome(ACTOR, CRITIC, seed=1)
        form = LearngeneForm("actor", (1, 3))
        transplant_learngene(extract_learngene(src, form), dst)
        for i in (1, 3):
            assert dst.actor.weights[i].tobytes() == src.actor.weights[i].tobytes()

    def test_zero_critic_payload(self):
        p = extract_learngene(zero_genome(ACTOR, CRITIC), LearngeneForm("critic", (0,)))
        assert not p.flat().any()

    def test_transplant_is_local_and_idempotent(self):
        src, dst = init_genome(ACTOR, CRITIC, seed=0), init_genome(ACTOR, CRITIC, seed=1)
        before = dst.copy()
        p = extract_learngene(src, LearngeneForm("actor", (4, 5)))
        transplant_learngene(p, dst)
        once = dst.copy()
        transplant_learngene(p, dst)
        assert dst.equals(once)
        for i in range(4):
            np.testing.assert_array_equal(dst.actor.weights[i], before.actor.weights[i])
        assert dst.critic.equals(before.critic)

    def test_transplant_shape_mismatch(self):
        p = extract_learngene(init_genome(ACTOR, CRITIC), LearngeneForm("actor", (2,)))
        wide = init_genome(NetworkArchitecture(6, 8, 2), NetworkArchitecture(6, 8, 1))
        snapshot = wide.copy()
        with pytest.raises(ShapeMismatchError):
            transplant_learngene(p, wide)
        assert wide.equals(snapshot)

    def test_form_key_roundtrip(self):
        f = LearngeneForm("critic", (5, 0, 2))
        assert f.layer_indices == (0, 2, 5)
        assert LearngeneForm.from_key(f.key) == f

    @pytest.mark.parametrize("idx", [(), (0, 1, 2, 3, 4, 5)])
    def test_form_size_bounds(self, idx):
        with pytest.raises(ValueError):
            LearngeneForm("actor", idx)


class TestWidths:
    def test_examples(self):
        assert effective_layer_width((48, 48)) == pytest.approx(48.4974, abs=1e-4)
        assert effective_layer_width((2, 2)) == pytest.approx(math.sqrt(6))
        assert effective_layer_width((np.ones((1, 1)), np.ones(1))) == pytest.approx(math.sqrt(2))

    def test_form_widths_match_shapes(self):
        ws = form_layer_widths(ACTOR)
        assert ws[0] == pytest.approx(math.sqrt(6 * 16 + 16))
        assert ws[5] == pytest.approx(math.sqrt(16 * 2 + 2))


class TestManhattan:
    def _payload(self, values):
        form = LearngeneForm("actor", (0,))
        return payload_from_flat(form, [(1, 1)] * 6, values)

    def test_identical(self):
        p = self._payload([1.0, 2.0])
        assert manhattan_change(p, p) == 0.0

    def test_uniform_shift(self):
        assert manhattan_change(self._payload([1.0, 2.0]), self._payload([1.1, 2.1])) == pytest.approx(0.1)

    def test_example(self):
        assert manhattan_change(self._payload([1.0, 2.0]), self._payload([0.0, 4.0])) == pytest.approx(1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.sets(st.integers(0, 5), min_size=n, max_size=n)), st.integers(0, 2**31))
def test_payload_flat_roundtrip(layers, seed):
    g = init_genome(ACTOR, CRITIC, seed=seed)
    form = LearngeneForm("actor", tuple(layers))
    p = extract_learngene(g, form)
    assert payload_from_flat(form, build_network(ACTOR), p.flat()).equals(p)

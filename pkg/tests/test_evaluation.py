import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from decoupled_swarm import evaluation as E
from decoupled_swarm import nets
from decoupled_swarm.nets import AdaptationField
from decoupled_swarm.synthdata import CenterData, CenterSpec, FederationData, SegSample, generate_case
from decoupled_swarm.tensor import ShapeError

from conftest import NET, GEOM, identity_da, oracle_seg, swap_da

GRID = arrays(np.uint8, (5, 6), elements=st.integers(0, 1))


def _trained_like(seed=0):
    """Randomly initialised networks stand in for a trained model; only the plumbing is under test."""
    rng = np.random.default_rng(seed)
    return nets.init_seg(NET, rng), nets.init_prior(NET, rng), nets.init_da(NET, rng)


def _images(n=3, seed=1):
    return np.random.default_rng(seed).normal(size=(n, 1, NET.height, NET.width))


def _sign_case(case_id, seed):
    """A case whose image is +1 on the label and -1 elsewhere."""
    lab = generate_case(np.random.default_rng(seed), GEOM).label
    img = (2.0 * lab - 1.0)[None].astype(float)
    return SegSample(img, lab, lab.copy(), case_id)


def _sign_federation(n_test=2, n_generic=3):
    cases = [_sign_case(i, i) for i in range(2 * n_test + n_generic)]
    centers = [CenterData(CenterSpec(k), [], cases[k * n_test:(k + 1) * n_test]) for k in range(2)]
    return FederationData(centers, cases[2 * n_test:], GEOM)


class _State:
    def __init__(self, cid, theta_s, psi, theta_p=None, da_mode=None):
        self.center_id, self.theta_s, self.psi, self.theta_p, self.da_mode = cid, theta_s, psi, theta_p, da_mode


def _oracle_states(theta_p=None):
    psi = nets.init_prior(NET, np.random.default_rng(3))
    mode = "distribution" if theta_p is not None else None
    return [_State(k, oracle_seg(NET), psi, theta_p, mode) for k in range(2)]


# --- dice -------------------------------------------------------------------------

def test_dice_examples():
    assert E.dice(np.array([1, 1, 0]), np.array([1, 0, 0])) == pytest.approx(2 / 3)
    assert E.dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert E.dice(np.ones((3, 3)), np.zeros((3, 3))) == 0.0
    assert E.dice(np.ones((2, 2)), np.ones((2, 2))) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        E.dice(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(GRID, GRID)
def test_dice_symmetric_and_bounded(a, b):
    d = E.dice(a, b)
    assert d == E.dice(b, a)
    assert 0.0 <= d <= 1.0


def test_argmax_tie_goes_to_background():
    probs = np.full((2, 2, 2), 0.5)
    assert not E.to_mask(probs).any()


# --- prediction ---------------------------------------------------------------------

def test_latent_noise_is_per_case():
    a = E.latent_noise(0, [5, 9], 4, 3)
    b = E.latent_noise(0, [9], 4, 3)
    assert a.shape == (4, 2, 3)
    np.testing.assert_array_equal(a[:, 1], b[:, 0])


def test_predict_global_is_deterministic_and_on_simplex():
    theta_s, psi, _ = _trained_like()
    img = _images()
    noise = E.latent_noise(0, range(3), 4, NET.latent_dim)
    a = E.predict_global(theta_s, psi, img, 4, noise)
    b = E.predict_global(theta_s, psi, img, 4, noise)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 2, NET.height, NET.width)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_predict_rejects_bad_arguments():
    theta_s, psi, _ = _trained_like()
    with pytest.raises(ValueError, match="n_samples"):
        E.predict_global(theta_s, psi, _images(), 0)
    with pytest.raises(ValueError, match="noise"):
        E.predict_global(theta_s, psi, _images(), 4, None)
    with pytest.raises(ValueError, match="latent mode"):
        E.predict_global(theta_s, psi, _images(), 1, latent="median")


def test_identity_field_local_equals_global():
    theta_s, psi, theta_p = _trained_like()
    img = _images(4)
    noise = E.latent_noise(2, range(4), 4, NET.latent_dim)
    g = E.predict_global(theta_s, psi, img, 4, noise)
    ident = AdaptationField.identity(2, NET.height, NET.width)
    loc = E.predict_local(theta_s, psi, theta_p, "distribution", img, 4, noise, field_override=ident)
    assert np.max(np.abs(loc - g)) <= 1e-12


def test_identity_da_network_local_equals_global():
    theta_s, psi, _ = _trained_like()
    img = _images(2)
    noise = E.latent_noise(2, range(2), 3, NET.latent_dim)
    g = E.predict_global(theta_s, psi, img, 3, noise)
    loc = E.predict_local(theta_s, psi, identity_da(NET), "distribution", img, 3, noise)
    assert np.max(np.abs(loc - g)) <= 1e-12


def test_swap_da_network_flips_classes():
    theta_s, psi, _ = _trained_like()
    img = _images(2)
    noise = E.latent_noise(0, range(2), 2, NET.latent_dim)
    g = E.predict_global(theta_s, psi, img, 2, noise)
    loc = E.predict_local(theta_s, psi, swap_da(NET), "distribution", img, 2, noise)
    np.testing.assert_allclose(loc, g[:, ::-1], atol=1e-12)


def test_random_da_changes_local_prediction():
    theta_s, psi, theta_p = _trained_like()
    img = _images(2)
    noise = E.latent_noise(0, range(2), 2, NET.latent_dim)
    g = E.predict_global(theta_s, psi, img, 2, noise)
    loc = E.predict_local(theta_s, psi, theta_p, "distribution", img, 2, noise)
    assert np.max(np.abs(loc - g)) > 1e-3
    np.testing.assert_allclose(loc.sum(axis=1), 1.0, atol=1e-12)


def test_mean_latent_matches_many_samples_when_prior_is_sharp():
    theta_s, psi, _ = _trained_like()
    psi["log_sigma.w"].data[...] = 0.0
    psi["log_sigma.b"].data[...] = -12.0
    img = _images(2)
    noise = E.latent_noise(0, range(2), 256, NET.latent_dim)
    sampled = E.predict_global(theta_s, psi, img, 256, noise)
    mean = E.predict_global(theta_s, psi, img, 1, latent="mean")
    assert np.max(np.abs(sampled - mean)) < 1e-4


def test_plain_network_ignores_latent_arguments():
    theta_s = nets.init_seg(NET, np.random.default_rng(0), with_latent=False)
    a = E.predict_global(theta_s, None, _images(), 4)
    b = E.predict_local(theta_s, None, None, None, _images(), 1)
    np.testing.assert_array_equal(a, b)


# --- evaluate -----------------------------------------------------------------------

def test_oracle_model_scores_one():
    data = _sign_federation()
    rep = E.evaluate("swarm_plain", _oracle_states(), data, 2, "sample", 0, "x")
    assert rep.value("task1") == 1.0
    assert rep.value("task2", "0") == rep.value("task2", "1") == 1.0


def test_oracle_with_swap_adaptation_scores_zero_locally():
    data = _sign_federation()
    rep = E.evaluate("ours", _oracle_states(swap_da(NET)), data, 2, "sample", 0)
    assert rep.value("task1") == 1.0
    assert rep.task2_mean([0, 1]) == 0.0


def test_constant_background_scores_zero():
    data = _sign_federation()
    states = _oracle_states()
    for s in states:
        s.theta_s["head.w"].data[...] = 0.0
        s.theta_s["head.b"].data[...] = [5.0, -5.0]
    rep = E.evaluate("swarm_plain", states, data, 1, "mean")
    assert rep.value("task1") == 0.0


def test_single_pools_every_center_on_generic():
    data = _sign_federation(n_generic=3)
    rep = E.evaluate("single", _oracle_states(), data, 1, "mean")
    assert rep.rows[0]["n_cases"] == 6


def test_report_invariant_to_case_order():
    data = _sign_federation(n_generic=4)
    states = _oracle_states()
    for s in states:
        s.theta_s = nets.init_seg(NET, np.random.default_rng(7))
    a = E.evaluate("swarm_plain", states, data, 3, "sample", 1).to_csv()
    data.generic = data.generic[::-1]
    for c in data.centers:
        c.test = c.test[::-1]
    b = E.evaluate("swarm_plain", states, data, 3, "sample", 1).to_csv()
    assert a == b


def test_empty_sets_raise():
    data = _sign_federation()
    data.centers[1].test = []
    with pytest.raises(ValueError, match="empty"):
        E.evaluate("swarm_plain", _oracle_states(), data, 1, "mean")
    data = _sign_federation()
    data.generic = []
    with pytest.raises(ValueError, match="empty"):
        E.evaluate("swarm_plain", _oracle_states(), data, 1, "mean")


# --- report serialisation --------------------------------------------------------------

def _report():
    rep = E.EvalReport("ours", 3, "abc")
    rep.add("task1", "generic", [0.5, 0.75])
    rep.add("task2", "2", [1.0])
    return rep


def test_csv_layout():
    lines = _report().to_csv().splitlines()
    assert lines[0] == ",".join(E.EvalReport.CSV_COLUMNS)
    assert lines[1] == "1,ours,3,task1,generic,2,0.625000000000,0.125000000000,abc"


def test_json_round_trip():
    rep = _report()
    back = E.EvalReport.from_json(rep.to_json())
    assert back.to_csv() == rep.to_csv()
    assert back.per_case == rep.per_case


def test_json_version_is_checked():
    d = json.loads(_report().to_json())
    d["schema_version"] = 99
    with pytest.raises(ValueError, match="schema version"):
        E.EvalReport.from_json(json.dumps(d))


def test_value_and_missing_rows():
    rep = _report()
    assert rep.value("task2", "2") == 1.0
    with pytest.raises(KeyError):
        rep.value("task2", "7")
    with pytest.raises(ValueError):
        rep.add("task2", "0", [])

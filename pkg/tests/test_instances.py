import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpcert.denoisers import MmseDenoiser, perturb
from pnpcert.groups import check_invariance, make_group
from pnpcert.instances import (
    L_CAP,
    MAX_BIAS,
    blur_2x2,
    invariant_prior,
    plain_twin,
    random_bias,
    theorem1_instance,
    theorem2_instance,
    theorem3_instance,
)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000))
def test_theorem1_instance_meets_preconditions(seed):
    inst = theorem1_instance(seed, iterations=5)
    spec = inst.spec
    assert spec.lam * spec.fidelity.lipschitz_grad <= 0.9
    assert spec.target_denoiser.L < L_CAP
    assert inst.meta["dim"] == (1, 2, 4, 8)[seed % 4]


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_theorem2_instance_is_matched(seed):
    spec = theorem2_instance(seed, iterations=5).spec
    assert spec.run_denoiser is spec.target_denoiser
    assert spec.lam * spec.fidelity.lipschitz_grad < 1


@pytest.mark.parametrize("seed", range(4))
def test_theorem3_prior_invariant_and_twin_unwrapped(seed):
    inst = theorem3_instance(seed, iterations=5)
    prior = inst.spec.target_denoiser.reference_prior()
    assert check_invariance(prior, inst.group, 50, 1e-10).passed
    twin = plain_twin(inst.spec)
    assert twin.run_denoiser is inst.spec.run_denoiser.base
    assert twin.x0 is inst.spec.x0


def test_blur_commutes_with_dihedral():
    A = blur_2x2(0.2)
    assert np.linalg.norm(A, 2) ** 2 == pytest.approx(0.9, rel=1e-12)
    for g in make_group("dihedral_image", 2, 2).elements:
        np.testing.assert_allclose(g.a @ A, A @ g.a, atol=1e-14)


@pytest.mark.parametrize("kind", ["constant", "linear"])
def test_bias_size_capped(kind):
    rng = np.random.default_rng(3)
    g = make_group("sign_flip", 3)
    prior = invariant_prior(3, g, rng)
    d = MmseDenoiser(prior, 0.7)
    d_hat = perturb(d, random_bias(kind, 3, rng, prior))
    pts = 3 * rng.standard_normal((50, 3))
    err = d_hat.apply(pts) - d.apply(pts)
    assert np.max(np.linalg.norm(err, axis=1) / np.maximum(1.0, np.linalg.norm(pts, axis=1))) <= MAX_BIAS + 1e-12

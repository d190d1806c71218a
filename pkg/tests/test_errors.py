import pickle

import pytest

from florg_sim.errors import ConfigError, DivergenceError, FlorgError, NotPsdError


@pytest.mark.parametrize("error", [
    NotPsdError(-2.5e-3, 1e-10),
    DivergenceError("non-finite A after local step", round_idx=3, client_id=1),
    DivergenceError("aggregated Gram matrix has non-finite entries"),
    ConfigError("unknown key 'whatever'", key="whatever", line=2),
])
def test_errors_survive_pickling(error):
    clone = pickle.loads(pickle.dumps(error))
    assert type(clone) is type(error)
    assert isinstance(clone, FlorgError)
    assert str(clone) == str(error)
    assert vars(clone) == vars(error)


def test_not_psd_message_names_the_eigenvalue():
    error = NotPsdError(-2.5e-3, 1e-10)
    assert error.args == (-2.5e-3, 1e-10)
    assert "-2.500000e-03" in str(error)


def test_divergence_message_names_round_and_client():
    assert str(DivergenceError("boom", round_idx=4, client_id=2)) == "boom (round 4, client 2)"
    assert str(DivergenceError("boom")) == "boom"

import sys
from pathlib import Path

import numpy as np
import pytest

from mlmc_diffusion.external import ExternalScore, ExternalScoreError, external_score
from mlmc_diffusion.rng import PathNoise

FAKE = [sys.executable, str(Path(__file__).parent / "adapters" / "fake_adapter.py")]
SERVER = [sys.executable, "-m", "mlmc_diffusion.score_server"]


def test_zero_adapter_drives_a_sampler(gauss4d):
    s = gauss4d.sampler(T0=4, L=2)
    with external_score(SERVER + ["--zero"]) as ext:
        x = s.with_options(score=ext).sample_path(1, PathNoise.make(0, 0, 1, np.arange(10), 4))
        assert ext.nfe_count == 10 * 8
    assert np.all(np.isfinite(x))


@pytest.mark.parametrize("name", ["gauss-4d", "mix-2c-4d"])
def test_analytic_adapter_is_bit_identical(name):
    from mlmc_diffusion import registry
    b = registry.get_benchmark(name)
    s = b.sampler(L=3)
    cmd = SERVER + ["--benchmark", name, "--L", "3"]
    noise = PathNoise.make(4, 0, 2, np.arange(40), 4)
    with ExternalScore(cmd, pool_size=2) as ext:
        remote = s.with_options(score=ext)
        np.testing.assert_array_equal(s.sample_path(2, noise), remote.sample_path(2, noise))
        fa, ca = s.sample_coupled_pair(3, noise)
        fb, cb = remote.sample_coupled_pair(3, noise)
        np.testing.assert_array_equal(fa, fb)
        np.testing.assert_array_equal(ca, cb)


def test_out_of_order_responses_are_matched_by_id():
    with ExternalScore(FAKE + ["reverse"]) as ext:
        out = ext.evaluate(np.zeros((4, 3)), 1)
    ids = out[:, 0]
    assert list(ids) == sorted(ids) and len(set(ids)) == 4


@pytest.mark.parametrize("mode, msg", [("malformed", "this is not json"),
                                       ("wrong-dim", "dimension mismatch"),
                                       ("wrong-id", "unexpected response id"),
                                       ("exit", "exited")])
def test_protocol_violations_raise(mode, msg):
    with ExternalScore(FAKE + [mode]) as ext:
        with pytest.raises(ExternalScoreError, match=msg):
            ext.evaluate(np.zeros(2), 1)


def test_timeout():
    with ExternalScore(FAKE + ["silent"], timeout=0.5) as ext:
        with pytest.raises(ExternalScoreError, match="timed out"):
            ext.evaluate(np.zeros(2), 1)

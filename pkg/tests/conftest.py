import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctrlcouple.dissipativity import KappaProfile
from ctrlcouple.model import FkExampleParams, make_example_fk
from ctrlcouple.rates import compute_rate_bundle

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SQRT2 = float(np.sqrt(2.0))


@pytest.fixture(scope="session")
def unit_bundle():
    return compute_rate_bundle(KappaProfile.constant(1.0), SQRT2)


def ou_model(g_slope=1.0, f=False, name="ou"):
    kw = {}
    if f:
        kw = dict(f_cost=lambda x: np.sqrt(1.0 + x[:, 0] ** 2), f_lip=1.0, f_d2=1.0)
    return make_example_fk(FkExampleParams(alpha=1.0, sigma=SQRT2, g_terminal=lambda x: g_slope * x[:, 0],
                                           g_lip=abs(g_slope), name=name, **kw))

from __future__ import annotations

import numpy as np
import pytest

from learngene.config import desk_profile


def tiny_config(tmp_path=None, **overrides):
    """A run small enough for unit tests: a few agents, short episodes, narrow nets."""
    base = dict(n_p=6, s=3, lt=2, generations=2, t_end=60, hidden_width=4, rho_max=3)
    if tmp_path is not None:
        base["output_dir"] = str(tmp_path)
    base.update(overrides)
    return desk_profile(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

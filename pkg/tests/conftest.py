import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from prefmargin.core import PreferenceInstance, ScoredInstance  # noqa: E402
from prefmargin.data import GeneratorConfig, generate  # noqa: E402

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; printed in the terminal summary."""
    store = request.config.stash[_ACCEPTANCE_KEY]

    def record(criterion, passed, detail):
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        store[criterion] = line
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GeneratorConfig.from_seed(11, n_prompts_train=40, n_prompts_valid=12, feature_dim=4))


@pytest.fixture(scope="session")
def default_dataset():
    return generate(GeneratorConfig.from_seed(7))


def make_scored(logp_w, logp_l, len_w=1, len_l=1, ref=None, oracle=None, id="x"):
    inst = PreferenceInstance(
        id=id,
        prompt_features=(),
        chosen_features=(),
        rejected_features=(),
        chosen_length=len_w,
        rejected_length=len_l,
        ref_logp_chosen=None if ref is None else ref[0],
        ref_logp_rejected=None if ref is None else ref[1],
        oracle_reward_chosen=None if oracle is None else oracle[0],
        oracle_reward_rejected=None if oracle is None else oracle[1],
    )
    return ScoredInstance(inst, logp_w, logp_l)


def scored_for_scores(r_values, beta=1.0, length=1):
    """Scored instances whose length-normalized score equals each entry of ``r_values``."""
    out = []
    for i, r in enumerate(r_values):
        # r = beta/len * (a_w - a_l) with a_l fixed
        a_l = -50.0
        a_w = a_l + r * length / beta
        out.append(make_scored(a_w, a_l, length, length, id=f"s{i}"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

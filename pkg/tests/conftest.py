import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def model():
    from cropa.model import build_model

    return build_model(42)


@pytest.fixture(scope="session")
def prompts():
    from cropa.data_io import load_prompt_set

    return load_prompt_set()


@pytest.fixture(scope="session")
def flat_prompts(prompts):
    return [p for ps in prompts.values() for p in ps]


@pytest.fixture(scope="session")
def target():
    from cropa.data_io import make_target

    return make_target("unknown").tokens


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

"""Report CSVs of the fixture benchmark, locked to their first verified values."""

import os
import subprocess
import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
LOCKED = sorted(FIXTURES.glob("*.csv"))


@pytest.fixture(scope="module", params=["compiled", "python"])
def regenerated(request, tmp_path_factory):
    out = tmp_path_factory.mktemp(f"fixtures_{request.param}")
    env = dict(os.environ, CROPA_KERNELS=request.param)
    subprocess.run([sys.executable, str(FIXTURES / "make_fixtures.py"), str(out)], env=env, check=True,
                   capture_output=True)
    return out


def test_fixture_set_is_complete():
    assert len(LOCKED) == 7


@pytest.mark.parametrize("locked", LOCKED, ids=lambda p: p.stem)
def test_csv_matches_lock(regenerated, locked):
    assert (regenerated / locked.name).read_bytes() == locked.read_bytes()

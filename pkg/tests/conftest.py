import pathlib

import numpy as np
import pytest

from offsetmpc import cli

ROOT = pathlib.Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def tracking_rc():
    return cli.load_config(str(CONFIGS / "cstr_tracking.yaml"))


@pytest.fixture(scope="session")
def drift_rc():
    return cli.load_config(str(CONFIGS / "cstr_drift.yaml"))


@pytest.fixture(scope="session")
def twovar_rc():
    return cli.load_config(str(CONFIGS / "cstr_twovar.yaml"))


@pytest.fixture(scope="session")
def twovar400_rc():
    return cli.load_config(str(CONFIGS / "cstr_twovar_400.yaml"))


@pytest.fixture(scope="session")
def committed(tracking_rc):
    """(model, dist, gains, ocp_cfg) for the committed CSTR design."""
    rc = tracking_rc
    return rc.model, rc.dist, rc.make_gains(), rc.ocp_cfg


def load_setpoint_file(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(np.array([float(t) for t in line.split()]))
    return rows

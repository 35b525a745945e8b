from pathlib import Path

import pytest

from knnexit.synthetic import load_model_spec

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def corrective_spec():
    """Committed spec where intermediate layers beat the final layer."""
    return load_model_spec(DATA_DIR / "corrective.spec")


@pytest.fixture(scope="session")
def corrective_spec_path():
    return DATA_DIR / "corrective.spec"

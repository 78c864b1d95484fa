# tests/conftest.py
import os

import pytest

from data_handler import read_document
from model import load_model

MODELS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "models")


def model_path(name):
    return os.path.join(MODELS_DIR, name)


@pytest.fixture
def shipped():
    """Loads a shipped model by file name."""
    return lambda name: load_model(read_document(model_path(name)))


@pytest.fixture
def shipped_document():
    return lambda name: read_document(model_path(name))

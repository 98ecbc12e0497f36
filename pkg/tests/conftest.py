"""
Shared fixtures for the sparse graph attention tests.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from sparse_graph_attention.modules.code_graph import graph_from_source  # noqa: E402
from sparse_graph_attention.modules.data_types import ModelConfig  # noqa: E402
from sparse_graph_attention.modules.graph_attention import AttentionParams  # noqa: E402

from tests.helpers import FIGURE_SNIPPET, SAMPLE_PROGRAM  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return ModelConfig(layers=2, heads=2, d_model=8, d_k=4, d_v=4, d_ff=16)


@pytest.fixture
def attention_params(small_model, rng):
    return AttentionParams.init(small_model, 3, rng)


@pytest.fixture
def sample_graph():
    return graph_from_source(SAMPLE_PROGRAM, name="sample.mini")


@pytest.fixture
def figure_graph():
    return graph_from_source(FIGURE_SNIPPET)

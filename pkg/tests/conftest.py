import numpy as np
import pytest

from kvrot.layout import HeadLayout


@pytest.fixture
def small_layout() -> HeadLayout:
    """4 query heads sharing 2 KV heads, tiny pages: exercises GQA + paging."""
    return HeadLayout(num_q_heads=4, num_kv_heads=2, head_dim=32, rot_order=16, page_tokens=4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

import numpy as np
import pytest
import torch

# single-threaded torch is the reproducibility contract for everything
# except the long CPU training run, which opts out explicitly
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

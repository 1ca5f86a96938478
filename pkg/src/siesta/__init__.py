"""Wake/sleep continual learning with PQ-compressed latent rehearsal."""
from .buffer import ReplayBuffer
from .config import RunConfig, parse_config
from .head import CosineHead
from .nn import LayerSpec, Network
from .orchestrator import make_ordering, run_experiment
from .pq import PQCodec
from .stats import cochran_q_test, mcnemar_test

__version__ = "0.1.0"

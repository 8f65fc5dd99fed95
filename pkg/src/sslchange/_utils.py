import hashlib
import json
import math
import random

import numpy as np
import torch

from .exceptions import TrainingDivergedError


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def module_checksum(module):
    """sha256 over every parameter and buffer of ``module`` (name-ordered)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def architecture_hash(module):
    """Hash of parameter names and shapes; independent of the values."""
    spec = [(k, list(v.shape)) for k, v in sorted(module.state_dict().items())]
    return hashlib.sha256(json.dumps(spec).encode()).hexdigest()


def config_hash(obj):
    payload = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def check_finite(value, where):
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise TrainingDivergedError(f"non-finite loss ({v}) at {where}")
    return v


def freeze_module(module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module

"""Seeds, deterministic mode and weight fingerprints"""
import hashlib
import logging
import random

import numpy as np
import torch

logger = logging.getLogger(__name__)


def stage_seed(global_seed: int, *parts) -> int:
    """
    Derive an independent 63-bit seed for one pipeline stage

    Args:
        global_seed: Run-level seed
        parts: Stage name and any qualifiers (task, epsilon, ...)

    Returns:
        Non-negative integer seed
    """
    key = ':'.join([str(global_seed), *[str(p) for p in parts]])
    digest = hashlib.sha256(key.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators"""
    random.seed(seed)
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)


def enable_deterministic_mode(enabled: bool = True) -> None:
    """Ask torch for deterministic kernels (warn instead of failing on unsupported ops)"""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled
    logger.info(f"Deterministic mode {'enabled' if enabled else 'disabled'}")


def weights_hash(module: torch.nn.Module) -> str:
    """SHA-256 over the state dict (parameters and buffers), keys sorted"""
    sha = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        tensor = state[key].detach().cpu().contiguous()
        sha.update(key.encode('utf-8'))
        sha.update(str(tensor.dtype).encode('utf-8'))
        sha.update(str(tuple(tensor.shape)).encode('utf-8'))
        sha.update(tensor.numpy().tobytes())
    return sha.hexdigest()

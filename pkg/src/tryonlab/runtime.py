"""Process-level torch settings used by the training and sampling loops."""
import contextlib
import functools

import torch


@contextlib.contextmanager
def flush_denormal():
    """CPU kernels slow down badly on subnormal activations late in training;
    flush them to zero for the duration of the block."""
    prev = torch.set_flush_denormal(True)
    try:
        yield prev
    finally:
        torch.set_flush_denormal(False)


def fast_cpu(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with flush_denormal():
            return fn(*args, **kwargs)
    return wrapper

"""Shared builders for degenerate and randomized layer parameters."""

import numpy as np

from sasmamba.sas import NeighborMixParams, SaConvParams, StreamSet, tap_rank
from sasmamba.ssm import SelectiveSsmParams, frozen_params
from sasmamba.tensor import Conv3x3Params, DepthwiseConv3x3Params, tensor


def zero_offset_net(c, dtype=np.float64, bias=(0.0, 0.0)):
    return Conv3x3Params(tensor(np.zeros((2, c, 3, 3)), dtype=dtype),
                         tensor(np.asarray(bias), dtype=dtype))


def zero_local(c, dtype=np.float64):
    return DepthwiseConv3x3Params(tensor(np.zeros((c, 3, 3)), dtype=dtype),
                                  tensor(np.zeros(c), dtype=dtype))


def identity_tap(c, k, dtype=np.float64):
    rho = tap_rank(k)
    return NeighborMixParams(tensor(np.ones(c), dtype=dtype),
                             tensor(np.zeros((rho, c)), dtype=dtype),
                             tensor(np.zeros((c, rho)), dtype=dtype))


def zero_tap(c, k, dtype=np.float64):
    rho = tap_rank(k)
    return NeighborMixParams(tensor(np.zeros(c), dtype=dtype),
                             tensor(np.zeros((rho, c)), dtype=dtype),
                             tensor(np.zeros((c, rho)), dtype=dtype))


def random_tap(rng, c, k, dtype=np.float64, scl=0.3):
    rho = tap_rank(k)
    return NeighborMixParams(tensor(rng.normal(size=c) * scl, dtype=dtype),
                             tensor(rng.normal(size=(rho, c)) * scl, dtype=dtype),
                             tensor(rng.normal(size=(c, rho)) * scl, dtype=dtype))


def random_sa(rng, c, k, dtype=np.float64, zero_offsets=False):
    if zero_offsets:
        offset = zero_offset_net(c, dtype)
    else:
        offset = Conv3x3Params(tensor(rng.normal(size=(2, c, 3, 3)) * 0.1, dtype=dtype),
                               tensor(rng.normal(size=2) * 0.1, dtype=dtype))
    local = DepthwiseConv3x3Params(tensor(rng.normal(size=(c, 3, 3)) * 0.3, dtype=dtype),
                                   tensor(rng.normal(size=c) * 0.3, dtype=dtype))
    taps = [random_tap(rng, c, k, dtype) for _ in range(k * k)]
    return SaConvParams(kernel_size=k, offset_net=offset, taps=taps, local_conv=local)


def random_stream(rng, d, n=2, r=1, dtype=np.float64):
    return SelectiveSsmParams(
        a_log=tensor(rng.normal(size=(d, n)) * 0.3, dtype=dtype),
        b_weight=tensor(rng.normal(size=(n, d)) * 0.4, dtype=dtype),
        b_bias=tensor(rng.normal(size=n) * 0.4, dtype=dtype),
        c_weight=tensor(rng.normal(size=(n, d)) * 0.4, dtype=dtype),
        c_bias=tensor(rng.normal(size=n) * 0.4, dtype=dtype),
        dt_down=tensor(rng.normal(size=(r, d)) * 0.4, dtype=dtype),
        dt_up=tensor(rng.normal(size=(d, r)) * 0.4, dtype=dtype),
        dt_bias=tensor(rng.normal(size=d) - 1.5, dtype=dtype),
        skip=tensor(rng.normal(size=d), dtype=dtype),
    )


def feedthrough_stream(d, n=1, dtype=np.float64):
    """Scan parameters whose output is exactly the input (c = 0, skip = 1)."""
    return frozen_params(d, n, delta=np.full(d, 0.1), b_const=np.ones(n),
                         c_const=np.zeros(n), a=-np.ones((d, n)),
                         skip=np.ones(d), dtype=dtype)


def stream_set(rng, d, names, dtype=np.float64):
    return StreamSet({name: random_stream(rng, d, dtype=dtype) for name in names})

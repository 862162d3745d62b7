import numpy as np
import pytest

from chordmixer import ChordMixerNet, MixMlp, Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric):
    """Gradient-check distance: ||a - n|| / max(||n||, tiny)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


def identity_mlp(d):
    """MixMlp computing the exact identity: gelu(x) - gelu(-x) = x.

    W1 stacks [I; -I], W2 is [I, -I]; biases are zero, so
    mix(z) = gelu(z) - gelu(-z) = z for every column.
    """
    eye = np.eye(d)
    w1 = np.concatenate([eye, -eye], axis=0)
    w2 = np.concatenate([eye, -eye], axis=1)
    return MixMlp(w1=Tensor(w1, requires_grad=True),
                  b1=Tensor(np.zeros(2 * d), requires_grad=True),
                  w2=Tensor(w2, requires_grad=True),
                  b2=Tensor(np.zeros(d), requires_grad=True))


def zero_mlp_weights(net):
    """Zero every block MLP so the residual chain is the identity."""
    for block in net.blocks:
        for p in block.parameters():
            p.data = np.zeros_like(p.data)
    return net


@pytest.fixture
def toy_net():
    """Small real-input network: 4 blocks, d=6, h=5 (n_max 16)."""
    return ChordMixerNet(n_max=16, d=6, hidden=5, n_outputs=1, in_channels=2, seed=7)

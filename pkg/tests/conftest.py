import numpy as np
import pytest

from cloudcam import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_check(build, params, eps=1e-5, max_probe=None, rng=None, skip_kinks=False, min_kept=0.5):
    """Largest relative error between backward() and central differences over ``params``.

    ``build`` must rebuild the scalar loss from the current parameter values.
    With ``max_probe`` only that many randomly chosen entries per tensor are
    probed. With ``skip_kinks`` probes straddling a ReLU / max branch change
    are dropped; at least ``min_kept`` of the probes must survive.
    """
    for p in params:
        p.grad = None
    T.backward(build())
    worst = 0.0
    probed = kept = 0
    for p in params:
        idx = None
        if max_probe is not None and p.size > max_probe:
            idx = (rng or np.random.default_rng(0)).choice(p.size, size=max_probe, replace=False)
        num = T.finite_diff_grad(lambda _: build(), p, eps=eps, indices=idx, skip_kinks=skip_kinks)
        probed += p.size if idx is None else len(idx)
        kept += int(np.isfinite(num).sum())
        worst = max(worst, T.relative_error(p.grad, num))
    assert kept >= min_kept * probed, f"only {kept}/{probed} probes away from kinks"
    return worst


def step_scene(h=8, w=32, band=(10, 21), thick=(40.0, 8.0), thin=(4.0, 20.0)):
    """All-cloudy deck with a thick band of columns; returns (cot, cer).

    The thick band carries smaller droplets than the surrounding deck, the
    usual pairing in convective cores. With shift s the illuminated edge is
    the last s columns of the band, the shadowed edge the s columns before it.
    """
    cot = np.full((h, w), thin[0])
    cer = np.full((h, w), thin[1])
    cot[:, band[0]:band[1]] = thick[0]
    cer[:, band[0]:band[1]] = thick[1]
    return cot, cer

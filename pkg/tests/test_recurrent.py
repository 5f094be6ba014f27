import numpy as np
import pytest

from forge import numerics as nx
from forge.recurrent import SsmBlock, ssm_scan, ssm_step
from gradcheck import numeric_grad, rel_err


def test_shapes_and_decay_range():
    block = SsmBlock(6, 5, 3, seed=0)
    p, h = ssm_step(block, np.ones((2, 6)), block.zero_state(2))
    assert p.shape == (2, 3) and h.shape == (2, 5)
    lam = block.decay()
    assert np.all((lam > 0) & (lam < 1))
    with pytest.raises(nx.DimensionError):
        ssm_step(block, np.ones((2, 4)), block.zero_state(2))
    with pytest.raises(nx.DimensionError):
        ssm_step(block, np.ones((2, 6)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        ssm_scan(block, np.zeros((0, 6)))


def test_scan_is_causal():
    block = SsmBlock(4, 6, 2, seed=1)
    x = np.random.default_rng(0).standard_normal((7, 4))
    y = x.copy()
    y[4] += 3.0
    px, _ = ssm_scan(block, x)
    py, _ = ssm_scan(block, y)
    for j in range(4):
        assert np.array_equal(px[j].data, py[j].data)
    assert not np.allclose(px[4].data, py[4].data)


def test_state_is_convex_combination_of_drives():
    # with zero gate/out weights irrelevant, |h| never exceeds the largest drive seen
    block = SsmBlock(3, 4, 2, seed=2)
    x = np.random.default_rng(1).standard_normal((1, 50, 3))
    drives = np.abs(x[0] @ block.w_in.data + block.b_in.data).max()
    _, h = ssm_scan(block, x)
    assert np.abs(h.data).max() <= drives + 1e-6


def test_batched_scan_matches_single_sequences():
    block = SsmBlock(3, 4, 2, seed=3)
    x = np.random.default_rng(2).standard_normal((2, 5, 3))
    batched, _ = ssm_scan(block, x)
    for i in range(2):
        single, _ = ssm_scan(block, x[i])
        for a, b in zip(batched, single):
            np.testing.assert_allclose(a.data[i], b.data[0], rtol=1e-6)


def test_chain_gradient_matches_finite_differences():
    with nx.precision(np.float64):
        block = SsmBlock(3, 4, 2, seed=4)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 6, 3))
        w = rng.standard_normal((6, 2, 2))

        def loss_of(xin):
            protos, _ = ssm_scan(block, nx.Tensor(xin))
            return sum((p * nx.Tensor(w[j])).sum() for j, p in enumerate(protos))

        xt = nx.parameter(x)
        params = block.parameters() + [xt]
        protos, _ = ssm_scan(block, xt)
        loss = sum((p * nx.Tensor(w[j])).sum() for j, p in enumerate(protos))
        grads = nx.backward(loss, params)
        assert rel_err(grads[xt], numeric_grad(lambda a: loss_of(a).item(), x.copy())) < 1e-4
        for p in block.parameters():
            def f(v, p=p):
                old = p.data
                p.data = v
                out = loss_of(x).item()
                p.data = old
                return out

            assert rel_err(grads[p], numeric_grad(f, p.data.copy())) < 1e-4, p.name

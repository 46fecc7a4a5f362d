import numpy as np
import pytest

from contilora import _jacobi_py, matcore


def fd_relative_error(analytic, numeric):
    """Max-norm error relative to the max-norm of the numeric gradient."""
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, then restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


@pytest.fixture(params=["compiled", "python"])
def backend(request, monkeypatch):
    """Run a test once per Jacobi kernel."""
    if request.param == "compiled":
        if matcore.BACKEND != "compiled":
            pytest.skip("compiled kernel not built")
    else:
        monkeypatch.setattr(matcore, "_jacobi_rotate", _jacobi_py.jacobi_rotate)
    return request.param


def random_net(rng, dims=(3, 5, 2), rank=2, activation="tanh", n_frozen=2, compressed=True):
    """Small network whose layers carry frozen adapters, a current adapter and a history."""
    from contilora.gradnet import LayerParams, NetworkSpec
    from contilora.lora import AdapterStack, HistoryFactors, LoraAdapter

    spec = NetworkSpec(dims, activation)
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        frozen = tuple(
            LoraAdapter(rng.normal(size=(d_out, rank)) * 0.3, rng.normal(size=(rank, d_in)) * 0.3, k, trainable=False)
            for k in range(n_frozen)
        )
        current = LoraAdapter(rng.normal(size=(d_out, rank)) * 0.3, rng.normal(size=(rank, d_in)) * 0.3, n_frozen)
        hist = HistoryFactors(rng.normal(size=(d_out, rank)) * 0.3, rng.normal(size=(rank, d_in)) * 0.3)
        stack = AdapterStack(frozen, current, hist if compressed else None, use_compressed=compressed)
        params.append(LayerParams(rng.normal(size=(d_out, d_in)) / np.sqrt(d_in), rng.normal(size=d_out) * 0.1, stack))
    return spec, params


def gradient_targets(params, layer):
    """(role, array) pairs whose in-place perturbation moves the loss as that role's gradient says."""
    from contilora.gradnet import Role

    p = params[layer]
    out = [(Role.EFFECTIVE_WEIGHT, p.base_weight), (Role.BIAS, p.base_bias)]
    if p.adapters.current is not None:
        out += [(Role.ADAPTER_B, p.adapters.current.b), (Role.ADAPTER_A, p.adapters.current.a)]
    if p.adapters.use_compressed:
        out += [(Role.HISTORY_B, p.adapters.compressed.b_his), (Role.HISTORY_A, p.adapters.compressed.a_his)]
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

import numpy as np
import pytest
import torch

from deepds.datacube import DataCube


def central_fd(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at ``x``, one element at a time."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn(x).item()
            flat[i] = orig - eps
            down = fn(x).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


def grad_check(fn, x: torch.Tensor, eps: float = 1e-6) -> float:
    x = x.detach().clone()
    return rel_error(analytic_grad(fn, x), central_fd(fn, x.clone(), eps))


def make_cube(values, lat=None, lon=None, time=None, name="v"):
    values = np.asarray(values, dtype=float)
    t, ny, nx = values.shape[:3]
    return DataCube(
        values,
        np.arange(t, dtype=float) if time is None else time,
        np.arange(ny, dtype=float) if lat is None else lat,
        np.arange(nx, dtype=float) if lon is None else lon,
        name=name,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def synthetic_pairs(n_time=40, ny=16, nx=16, scale=4, regime="MOS", upsampling="SPC", sample_kind="spatial",
                    statics=True, predictors=0, seed=0, window_length=4, **gen):
    """Standardized sample pairs from the synthetic generator, plus the matching spec fields."""
    from deepds.preprocessing import PairingConfig, fit_scaler, make_pairs, transform
    from deepds.synthetic import gen_synthetic

    data = gen_synthetic(ny=ny, nx=nx, n_time=n_time, scale=scale, seed=seed, n_predictors=predictors, **gen)
    sc = fit_scaler("standard", data.hr)
    hr = transform(sc, data.hr)
    lr = transform(sc, data.lr) if regime == "MOS" else None
    preds = [transform(fit_scaler("standard", p), p) for p in data.predictors]
    st_ = data.statics if statics else None
    cfg = PairingConfig(regime=regime, upsampling=upsampling, scale=scale, sample_kind=sample_kind,
                        window_length=window_length)
    pairs = make_pairs(hr, lr, preds, st_, cfg)
    spec_fields = dict(
        upsampling=upsampling, scale=scale, sample_kind=sample_kind, hr_shape=(ny, nx),
        n_static_channels=st_.n_channels if st_ is not None else 0, n_predictor_channels=predictors,
    )
    return pairs, spec_fields, sc

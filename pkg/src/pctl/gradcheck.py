"""Finite-difference verification of every backward rule.

Each differentiable operation is checked against central differences on
small random instances over several seeds; the composed training objective
is checked on a tiny end-to-end model with every parameter tensor probed at
a deterministic subsample of coordinates. All checks are deterministic, so a
passing configuration passes forever.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, fresh_tape
from .classifier import extract_patches
from .data import SynthSpec, generate_synthetic_pair
from .decoder import AffineDecoder, DecoderConfig, reconstruction_loss
from .encoder import Encoder, EncoderConfig, kumaraswamy_transform, normalized_entropy, stick_breaking
from .layers import BatchNorm3d, DenseLayer, Dropout, one_hot, softmax, softmax_cross_entropy
from .mi import MiConfig, MiDiscriminator, js_mi_objective, shuffle_negatives
from .trainer import ModelConfig, ModelState, TrainConfig, compute_losses

FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _fd_check(build_loss, tensors, h: float = FD_STEP, max_coords: int = 0) -> float:
    """Worst relative error between backward and central differences."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with fresh_tape():
        build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    def value() -> float:
        with fresh_tape():
            return build_loss().item()

    worst = 0.0
    probe_rng = np.random.default_rng(0)
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords and flat.size > max_coords:
            coords = np.sort(probe_rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            worst = max(worst, _rel_err(np.float64((fp - fm) / (2 * h)),
                                        np.float64(ana_flat[i])))
    return worst


def _op_checks(seed: int):
    rng = np.random.default_rng(seed)
    a23 = Tensor(rng.uniform(0.3, 2.0, (2, 3)))
    b23 = Tensor(rng.uniform(0.3, 2.0, (2, 3)))
    m34 = Tensor(rng.standard_normal((3, 4)))
    m42 = Tensor(rng.standard_normal((4, 2)))
    w32 = rng.standard_normal((3, 2))

    yield ("matmul", 1e-6, lambda: ad.reduce_sum(ad.matmul(m34, m42) * Tensor(w32)),
           [m34, m42])
    yield ("add", 1e-6, lambda: ad.reduce_sum((a23 + b23) * b23), [a23, b23])
    yield ("sub", 1e-6, lambda: ad.reduce_sum((a23 - b23) * a23), [a23, b23])
    yield ("mul", 1e-6, lambda: ad.reduce_sum(a23 * b23), [a23, b23])
    yield ("div", 1e-6, lambda: ad.reduce_sum(a23 / b23), [a23, b23])
    yield ("neg", 1e-6, lambda: ad.reduce_sum(-a23 * b23), [a23])
    yield ("pow-scalar", 1e-6, lambda: ad.reduce_sum(ad.power(a23, 1.7)), [a23])
    yield ("pow-tensor", 1e-6, lambda: ad.reduce_sum(ad.power(a23, b23)), [a23, b23])
    yield ("exp", 1e-6, lambda: ad.reduce_sum(ad.exp(a23 * 0.5)), [a23])
    yield ("log", 1e-6, lambda: ad.reduce_sum(ad.log(a23)), [a23])

    x3 = Tensor(rng.uniform(-2.0, 2.0, 5) + np.where(rng.random(5) < 0.5, -0.2, 0.2))
    yield ("sigmoid", 1e-6, lambda: ad.reduce_sum(ad.sigmoid(x3 * 3.0)), [x3])
    yield ("softplus", 1e-6, lambda: ad.reduce_sum(ad.softplus(x3 * 3.0)), [x3])
    yield ("relu", 1e-6, lambda: ad.reduce_sum(ad.relu(x3) * x3), [x3])
    yield ("abs", 1e-6, lambda: ad.reduce_sum(ad.absolute(x3) * x3), [x3])
    yield ("clamp", 1e-6, lambda: ad.reduce_sum(ad.clamp(x3, -1.5, 1.5) * x3), [x3])

    red = Tensor(rng.uniform(0.2, 1.0, (3, 5)))
    wred = rng.standard_normal((3, 1))
    yield ("sum", 1e-6, lambda: ad.reduce_sum(ad.reduce_sum(red, axis=1, keepdims=True)
                                              * Tensor(wred)), [red])
    yield ("mean", 1e-6, lambda: ad.reduce_sum(ad.reduce_mean(red, axis=0)), [red])

    z = rng.uniform(0.2, 1.0, (2, 4))
    z[0, 1] = 0.0
    zt = Tensor(z)
    wz = rng.standard_normal((2, 4))
    yield ("cumprod", 1e-5, lambda: ad.reduce_sum(ad.cumprod(zt, axis=1) * Tensor(wz)),
           [zt])
    yield ("cumprod-exclusive", 1e-5,
           lambda: ad.reduce_sum(ad.cumprod(zt, axis=1, exclusive=True) * Tensor(wz)),
           [zt])

    shp = Tensor(rng.standard_normal((2, 3, 4)))
    wshp = rng.standard_normal((4, 12))
    yield ("reshape-transpose-concat", 1e-6,
           lambda: ad.reduce_sum(ad.reshape(ad.transpose(
               ad.concat([shp, shp], axis=0), (2, 0, 1)), (4, 12)) * Tensor(wshp)),
           [shp])

    cx = Tensor(rng.standard_normal((2, 2, 4, 5, 5)))
    ck = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    wconv = rng.standard_normal((2, 3, 4, 3, 3))
    yield ("conv3d", 1e-5,
           lambda: ad.reduce_sum(ad.conv3d(cx, ck, stride=(1, 2, 2), padding=1)
                                 * Tensor(wconv)), [cx, ck])

    return


def op_suite(seeds=range(10), tol_override: float | None = None):
    """Run the per-op checks across seeds, keeping the worst error per op."""
    worst: dict[str, CheckResult] = {}
    for seed in seeds:
        for name, tol, build, tensors in _op_checks(seed):
            err = _fd_check(build, tensors)
            tol = tol_override if tol_override is not None else tol
            if name not in worst or err > worst[name].max_rel_err:
                worst[name] = CheckResult(name, err, tol)
    return list(worst.values())


def layer_checks(seed: int = 0):
    """Gradient checks for layer compositions and the model's loss pieces."""
    rng = np.random.default_rng(seed)
    results = []

    l1 = DenseLayer(4, 6, activation="relu", rng=rng)
    l2 = DenseLayer(6, 3, activation="sigmoid", rng=rng)
    x = Tensor(rng.uniform(0.2, 1.0, (3, 4)))
    params = [l1.weight, l1.bias, l2.weight, l2.bias, x]
    results.append(CheckResult("dense-stack", _fd_check(
        lambda: ad.reduce_sum(l2(l1(x))), params), 1e-5))

    bn = BatchNorm3d(3)
    bx = Tensor(rng.standard_normal((4, 3, 2, 3, 3)))
    wb = rng.standard_normal(bx.shape)

    def bn_loss():
        bn.running_mean = np.zeros(3)
        bn.running_var = np.ones(3)
        return ad.reduce_sum(bn(bx, train=True) * Tensor(wb))

    results.append(CheckResult("batchnorm3d", _fd_check(
        bn_loss, [bx, bn.gamma, bn.beta]), 1e-5))

    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    labels = Tensor(one_hot(rng.integers(0, 4, 3), 4))
    logits.zero_grad()
    with fresh_tape():
        softmax_cross_entropy(logits, labels).backward()
    expected = (softmax(logits.data) - labels.data) / 3.0
    results.append(CheckResult("softmax-cross-entropy",
                               _rel_err(logits.grad, expected), 1e-8))

    drop = Dropout(0.4, rng=np.random.default_rng(seed))
    dx = Tensor(rng.uniform(0.5, 1.5, (4, 5)), requires_grad=True)
    dx.zero_grad()
    with fresh_tape():
        out = drop(dx, train=True)
        ad.reduce_sum(out).backward()
    realized_mask = np.where(dx.data != 0, out.data / dx.data, 0.0)
    results.append(CheckResult("dropout-mask", _rel_err(dx.grad, realized_mask), 1e-12))

    v = Tensor(rng.uniform(0.1, 0.9, (4, 3)))
    wv = rng.standard_normal((4, 4))
    results.append(CheckResult("stick-breaking", _fd_check(
        lambda: ad.reduce_sum(stick_breaking(v).values * Tensor(wv)), [v]), 1e-5))

    u = Tensor(rng.uniform(0.1, 0.9, (4, 3)))
    beta = Tensor(rng.uniform(0.5, 2.5, 3))
    results.append(CheckResult("kumaraswamy", _fd_check(
        lambda: ad.reduce_sum(kumaraswamy_transform(u, beta)), [u, beta]), 1e-5))

    raw = rng.uniform(0.05, 1.0, (5, 4))
    simplex = Tensor(raw / raw.sum(axis=1, keepdims=True))
    results.append(CheckResult("normalized-entropy", _fd_check(
        lambda: normalized_entropy(simplex), [simplex]), 1e-5))

    enc = Encoder(EncoderConfig(bands=6, abundance_dim=4, hidden_widths=[7, 5]),
                  rng=np.random.default_rng(seed + 1))
    dec = AffineDecoder(DecoderConfig(bands=6, abundance_dim=4),
                        rng=np.random.default_rng(seed + 2))
    ex = Tensor(rng.uniform(0.1, 1.0, (4, 6)))
    et = Tensor(rng.uniform(0.1, 1.0, (4, 6)))
    enc_params = [t for _, t in enc.parameters()] + [t for _, t in dec.parameters()]

    def recon_loss():
        a_s, a_t = enc.encode(ex), enc.encode(et)
        return reconstruction_loss(dec.decode_source(a_s), ex,
                                   dec.decode_target(a_t), et)

    results.append(CheckResult("encode-decode", _fd_check(recon_loss, enc_params),
                               1e-5))

    disc = MiDiscriminator(MiConfig(bands=6, abundance_dim=4),
                           rng=np.random.default_rng(seed + 3))
    neg = shuffle_negatives(ex, 7)
    mi_params = [t for _, t in disc.parameters()]

    def mi_obj():
        return js_mi_objective(disc, ex, enc.encode(ex), neg) * -1.0

    results.append(CheckResult("js-mi-objective", _fd_check(
        mi_obj, mi_params + [t for _, t in enc.parameters()]), 1e-5))
    return results


def composite_check(seed: int = 3, max_coords: int = 10) -> CheckResult:
    """FD check of the full combined objective on a tiny end-to-end model.

    Every parameter tensor is probed at a deterministic coordinate subsample;
    dropout is disabled so the loss is a fixed function of the parameters.
    """
    spec = SynthSpec(classes=3, abundance_dim=4, bands=8, pixels_per_class=36,
                     noise_sigma=0.005, seed=seed)
    source, target, _ = generate_synthetic_pair(spec)
    model_cfg = ModelConfig(bands=8, num_classes=3, abundance_dim=4,
                            encoder_hidden=[7, 6], patch_size=5,
                            block_channels=[2, 2, 2, 2, 2], dropout_rate=0.0)
    train_cfg = TrainConfig(alpha=0.01, mi_weight=0.1, seed=seed,
                            label_fraction=0.5, epochs=0)
    state = ModelState(model_cfg, train_cfg, seed=seed)

    rng = np.random.default_rng(seed)
    xs = source.pixels()[rng.choice(source.pixels().shape[0], 6, replace=False)]
    xt = target.pixels()[rng.choice(target.pixels().shape[0], 6, replace=False)]
    labeled = np.argwhere(source.labels > 0)
    centers = labeled[rng.choice(len(labeled), 4, replace=False)]
    patches = extract_patches(source.reflectance, centers, model_cfg.patch_size)
    labels = source.labels[centers[:, 0], centers[:, 1]] - 1

    def build():
        loss, _ = compute_losses(state, xs, xt, patches, labels, train_cfg,
                                 mi_seed=11, train=True)
        return loss

    params = [t for _, t in state.parameters()]
    err = _fd_check(build, params, max_coords=max_coords)
    return CheckResult("composite-objective", err, 1e-4)


def run_all(seeds=range(10)):
    """Full verification sweep; returns (results, all_passed)."""
    results = op_suite(seeds)
    results += layer_checks()
    results.append(composite_check())
    return results, all(r.passed for r in results)

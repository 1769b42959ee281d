"""Finite-difference helpers shared by the gradient tests."""
import numpy as np


def central_diff(f, x, h=1e-5):
    """Numerical gradient of the scalar ``f()`` w.r.t. ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Norm-wise relative error, guarded for all-zero gradients."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)



def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _distinct(rng, shape):
    # values spaced >= 0.05 apart so no pooling pair is within h of a tie
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - 0.025 * n


def layer_trial(op, seed, h=1e-5):
    """One random finite-difference trial of ``op``; returns the worst relative error.

    The scalar probed is ``sum(forward(...) * R)`` for a random ``R``, so the
    analytic input to each backward is ``R``.
    """
    from deepgait import nn

    rng = np.random.default_rng(seed)
    errs = []
    if op == "conv2d":
        ci, co, b, hh, ww = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 7)
        x = rng.normal(size=(ci, b, hh, ww))
        w = rng.normal(size=(co, ci, 3, 3))
        bias = rng.normal(size=co)
        R = rng.normal(size=(co, b, hh, ww))
        gx, gw, gb = nn.conv2d_backward(x, w, R)
        f = lambda: float((nn.conv2d_forward(x, w, bias) * R).sum())
        errs += [rel_err(gx, central_diff(f, x, h)), rel_err(gw, central_diff(f, w, h)),
                 rel_err(gb, central_diff(f, bias, h))]
    elif op == "relu":
        x = _away_from_zero(rng, tuple(rng.integers(1, 5, size=3)))
        R = rng.normal(size=x.shape)
        f = lambda: float((nn.relu_forward(x) * R).sum())
        errs.append(rel_err(nn.relu_backward(x, R), central_diff(f, x, h)))
    elif op == "maxpool_time":
        x = _distinct(rng, (*rng.integers(1, 4, size=3), rng.integers(2, 10)))
        out, idx = nn.maxpool_time_forward(x)
        R = rng.normal(size=out.shape)
        f = lambda: float((nn.maxpool_time_forward(x)[0] * R).sum())
        errs.append(rel_err(nn.maxpool_time_backward(x.shape, idx, R), central_diff(f, x, h)))
    elif op in ("batchnorm4d", "batchnorm2d"):
        # >= 4 samples per channel: with 2 the normalized output is x-independent
        # up to eps and the finite-difference oracle is pure rounding noise
        if op == "batchnorm4d":
            c = rng.integers(1, 4)
            x = rng.normal(size=(c, rng.integers(1, 4), rng.integers(1, 4), rng.integers(4, 8)))
        else:
            c = rng.integers(1, 5)
            x = rng.normal(size=(rng.integers(4, 9), c))
        gamma, beta = rng.normal(size=c) + 1.0, rng.normal(size=c)

        def fwd():
            return nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c), train=True)[0]

        out = fwd()
        R = rng.normal(size=out.shape)
        _, cache = nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c), train=True)
        gx, gg, gbeta = nn.batchnorm_backward(cache, R)
        f = lambda: float((fwd() * R).sum())
        errs += [rel_err(gx, central_diff(f, x, h)), rel_err(gg, central_diff(f, gamma, h)),
                 rel_err(gbeta, central_diff(f, beta, h))]
    elif op == "dense":
        n, i, o = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 8)
        x, w, bias = rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)
        R = rng.normal(size=(n, o))
        gx, gw, gb = nn.dense_backward(x, w, R)
        f = lambda: float((nn.dense_forward(x, w, bias) * R).sum())
        errs += [rel_err(gx, central_diff(f, x, h)), rel_err(gw, central_diff(f, w, h)),
                 rel_err(gb, central_diff(f, bias, h))]
    elif op == "dropout":
        x = rng.normal(size=tuple(rng.integers(1, 5, size=2)))
        mask = nn.dropout_mask(x.shape, 0.5, rng)
        R = rng.normal(size=x.shape)
        f = lambda: float((nn.dropout_forward(x, mask) * R).sum())
        errs.append(rel_err(nn.dropout_backward(mask, R), central_diff(f, x, h)))
    else:
        raise ValueError(op)
    return max(errs)


LAYER_OPS = ("conv2d", "relu", "maxpool_time", "batchnorm4d", "batchnorm2d", "dense", "dropout")


def model_grad_check(seed=0, batch=3, n_probe=40, h=1e-7):
    """Relative error of the full scale-1/16 fused conv9 gradient w.r.t. input and
    a random subset of parameters (train-mode BN, dropout masks frozen)."""
    from fractions import Fraction

    from deepgait.model import ModelConfig, build_model
    from deepgait.training import fused_loss, fused_loss_grad

    cfg = ModelConfig(channel_scale=Fraction(1, 16), init="he", dtype="float64")
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(batch, 6, 149))
    ys = [rng.normal(size=(batch, 29)) for _ in range(3)]
    drops = [layer for _, layer in model.named_layers() if layer.describe().startswith("Dropout")]

    def forward():
        # reseeding every dropout layer replays the same masks on each call
        for d in drops:
            d.rng = np.random.default_rng(0)
        return model.forward(x, train=True)

    def loss():
        return fused_loss(forward(), ys)

    buffers = [a.copy() for _, a in model.named_tensors()]
    preds = forward()
    gx = model.backward(fused_loss_grad(preds, ys))
    analytic, numeric = [], []
    params = list(model.parameters())
    picks = rng.choice(len(params), size=min(len(params), n_probe), replace=False)
    for k in picks:
        layer, name = params[k]
        arr = layer.params[name]
        j = tuple(rng.integers(0, s) for s in arr.shape)
        analytic.append(layer.grads[name][j])
        old = arr[j]
        arr[j] = old + h
        lp = loss()
        arr[j] = old - h
        lm = loss()
        arr[j] = old
        numeric.append((lp - lm) / (2 * h))
    for _ in range(n_probe // 2):
        j = tuple(rng.integers(0, s) for s in x.shape)
        analytic.append(gx[j])
        old = x[j]
        x[j] = old + h
        lp = loss()
        x[j] = old - h
        lm = loss()
        x[j] = old
        numeric.append((lp - lm) / (2 * h))
    for (_, a), b in zip(model.named_tensors(), buffers):
        a[...] = b
    return rel_err(np.array(analytic), np.array(numeric))


def hand_count(lengths, mode):
    """Independent enumeration: walk the starts explicitly."""
    total = 0
    for L in lengths:
        slide = 0
        s = 0
        while s + 150 <= L:
            slide += 1
            last = s
            s += 140
        if last + 150 < L:
            slide += 1
        total += {"sliding": slide, "random": 5, "combined": slide + 5, "none": L // 150}[mode]
    return total

import numpy as np

from sgad.model import SgLossConfig, build_model, epsilon_from_percentile, forward_batch, loss_and_grads

KINK_MARGIN = 1e-3


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tiny_model(rng, variant="original", **cfg):
    d = int(rng.integers(2, 6))
    enc = (int(rng.integers(3, 8)), int(rng.integers(2, 5)))
    scorer = (int(rng.integers(2, 6)),)
    config = SgLossConfig(variant=variant, **cfg)
    model = build_model(d, config, enc, scorer, seed=int(rng.integers(1 << 30)))
    # nonzero biases so bias gradients are exercised
    for net in model.networks():
        for layer in net.layers:
            layer.bias[:] = rng.uniform(-0.2, 0.2, size=layer.bias.shape)
    return model


def away_from_kinks(model, x):
    """Rows whose branch/hinge position is at least KINK_MARGIN from any kink, plus eps."""
    cfg = model.config
    fp = forward_batch(model, x)
    err = fp.recon_error
    eps = epsilon_from_percentile(err, cfg.eps_p)
    keep = np.abs(err - eps) > KINK_MARGIN
    guided = fp.scores if cfg.has_scorer else err
    if cfg.variant != "plain_ae":
        keep &= np.abs(guided - cfg.a) > KINK_MARGIN
        if cfg.variant in ("original", "recon"):
            keep &= np.abs(guided - cfg.mu0) > KINK_MARGIN
    keep &= err > KINK_MARGIN
    for cache in fp.caches.values():
        if not hasattr(cache, "pre_activations"):
            continue
        for layer, pre in zip(cache.network.layers, cache.pre_activations):
            if layer.activation == "relu":
                keep &= np.all(np.abs(pre) > KINK_MARGIN, axis=1)
    return x[keep], eps


def gradient_errors(model, x, eps, h=1e-4):
    """Relative errors of analytic vs central-difference gradients for every parameter."""
    _, grads = loss_and_grads(model, x, eps)
    errs = []
    for p, g in zip(model.parameters(), grads):
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = loss_and_grads(model, x, eps)[0].total
            p[i] = old - h
            fm = loss_and_grads(model, x, eps)[0].total
            p[i] = old
            num[i] = (fp - fm) / (2 * h)
        errs.append(rel_err(g, num).ravel())
    return np.concatenate(errs)


# -- metric oracles ------------------------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def ap_of_order(labels_in_rank_order):
    hits, total = 0, 0.0
    for rank, y in enumerate(labels_in_rank_order, start=1):
        if y:
            hits += 1
            total += hits / rank
    return total / hits


def brute_ap(scores, labels):
    """Tie groups scanned high to low; inside a group all normals come first."""
    total, tp_above, seen_above = 0.0, 0, 0
    for level in sorted(set(scores), reverse=True):
        group = [y for s, y in zip(scores, labels) if s == level]
        p, n = sum(group), len(group) - sum(group)
        for k in range(1, p + 1):
            total += (tp_above + k) / (seen_above + n + k)
        tp_above += p
        seen_above += p + n
    return total / sum(labels)


def brute_ks(a, b):
    best = 0.0
    for t in list(a) + list(b):
        ca = sum(1 for v in a if v <= t)
        cb = sum(1 for v in b if v <= t)
        best = max(best, abs(ca / len(a) - cb / len(b)))
    return best


def metric_corpus(n_cases=500, max_len=8, seed=20240607):
    """Labelled score vectors (length 2..max_len, both classes), many with ties."""
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n_cases:
        n = int(rng.integers(2, max_len + 1))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        if rng.random() < 0.5:
            scores = rng.integers(0, 4, size=n).astype(float)
        else:
            scores = rng.normal(size=n)
        cases.append((scores, labels))
    return cases

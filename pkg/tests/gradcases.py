"""Finite-difference cases shared by the unit and acceptance suites.

Each builder takes a Generator and returns ``(f, inputs)`` in float64 where
``f(*inputs)`` is a scalar. Outputs are contracted with a fixed random
weight so that no gradient is trivially uniform.
"""

import numpy as np

from emergelab import agents as ag
from emergelab import autodiff as ad
from emergelab import datasets as ds
from emergelab import games
from emergelab import training as tr


def _p(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return ad.Tensor(data, requires_grad=True)


def _contract(rng, shape):
    r = ad.Tensor(rng.normal(size=shape))
    return lambda out: ad.tsum(out * r)


def _unary(op, low=None):
    def build(rng):
        x = _p(rng, 3, 4, low=low)
        c = _contract(rng, (3, 4))
        return lambda x: c(op(x)), [x]
    return build


def _linear(rng):
    x, W, b = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    c = _contract(rng, (3, 2))
    return lambda x, W, b: c(ad.linear(x, W, b)), [x, W, b]


def _conv(stride):
    def build(rng):
        x, k, b = _p(rng, 2, 2, 5, 6), _p(rng, 3, 2, 3, 3), _p(rng, 3)
        shape = (2, 3, ad.conv_output_size(5, stride), ad.conv_output_size(6, stride))
        c = _contract(rng, shape)
        return lambda x, k, b: c(ad.conv2d(x, k, stride, b)), [x, k, b]
    return build


def _conv_relu_sum(rng):
    x, k = _p(rng, 1, 2, 4, 4), _p(rng, 2, 2, 3, 3)
    return lambda x, k: ad.tsum(ad.relu(ad.conv2d(x, k, 1))), [x, k]


def _binary(op):
    def build(rng):
        a, b = _p(rng, 3, 4), _p(rng, 1, 4, low=0.5)
        c = _contract(rng, (3, 4))
        return lambda a, b: c(op(a, b)), [a, b]
    return build


def _lstm(rng):
    n, d, u = 2, 3, 2
    x, h, cc = _p(rng, n, d), _p(rng, n, u), _p(rng, n, u)
    wx, wh, b = _p(rng, d, 4 * u), _p(rng, u, 4 * u), _p(rng, 4 * u)
    c = _contract(rng, (n, u))

    def f(x, h, cc, wx, wh, b):
        p = {"w_x": wx, "w_h": wh, "b": b}
        h1, c1 = ad.lstm_cell(x, h, cc, p)
        h2, c2 = ad.lstm_cell(x, h1, c1, p)
        return c(h2) + ad.tsum(c2)
    return f, [x, h, cc, wx, wh, b]


def _embedding(rng):
    table = _p(rng, 5, 3)
    ids = np.array([0, 3, 3, 1])
    c = _contract(rng, (4, 3))
    return lambda t: c(ad.embedding(ids, t)), [table]


def _pick(rng):
    x = _p(rng, 4, 5)
    idx = rng.integers(5, size=4)
    r = ad.Tensor(rng.normal(size=4))
    return lambda x: ad.tsum(ad.pick(x, idx) * r), [x]


def _batched_dot(rng):
    g, e = _p(rng, 2, 4), _p(rng, 2, 3, 4)
    c = _contract(rng, (2, 3))
    return lambda g, e: c(ad.batched_dot(g, e)), [g, e]


def _film(rng):
    x, gm, bt = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 3, 4)
    c = _contract(rng, (3, 4))
    return lambda x, gm, bt: c(ag.film(x, gm, bt)), [x, gm, bt]


def _structure(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    c1 = _contract(rng, (2, 6))
    c2 = _contract(rng, (2, 2, 3))
    r = ad.Tensor(rng.normal(size=3))

    def f(a, b):
        cat = ad.concat([a, b], axis=1)
        st = ad.stack([a, b], axis=1)
        rs = ad.reshape(cat, (4, 3))[1:3]
        return c1(cat) + c2(st) + ad.tsum(ad.mean(rs, axis=0) * r) + ad.tsum(a, axis=1).sum()
    return f, [a, b]


def _losses(rng):
    scores = _p(rng, 3, 4)
    target = rng.integers(4, size=3)
    logit = _p(rng, 3)
    prob_raw = _p(rng, 3)
    labels = rng.integers(2, size=3)

    def f(scores, logit, prob_raw):
        return (tr.cross_entropy(scores, target) + tr.binary_cross_entropy_with_logits(logit, labels)
                + tr.binary_cross_entropy(ad.sigmoid(prob_raw), labels))
    return f, [scores, logit, prob_raw]


OP_CASES = {
    "linear": _linear,
    "conv2d_stride1": _conv(1),
    "conv2d_stride2": _conv(2),
    "conv2d_relu_sum": _conv_relu_sum,
    "relu": _unary(ad.relu),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softmax": _unary(ad.softmax),
    "log_softmax": _unary(ad.log_softmax),
    "softplus": _unary(ad.softplus),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, low=0.5),
    "clip": _unary(lambda x: ad.clip(x, -0.5, 0.5)),
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "lstm_cell_2step": _lstm,
    "embedding": _embedding,
    "pick": _pick,
    "batched_dot": _batched_dot,
    "film": _film,
    "structure": _structure,
    "losses": _losses,
}


def _relu_margin(images, params) -> float:
    x = ad.Tensor(ag.image_batch(np.asarray(images), np.float64))
    margin = np.inf
    i = 0
    while f"cnn.conv{i}.w" in params:
        pre = ad.conv2d(x, params[f"cnn.conv{i}.w"], 2, params[f"cnn.conv{i}.b"])
        margin = min(margin, float(np.abs(pre.data).min()))
        x = ad.relu(pre)
        i += 1
    return margin


def episode_case(seed: int, arch: ag.ArchConfig, channel=ag.ChannelConfig(4, 2), distractors: int = 2,
                 weight_scale: float = 2.0):
    """Full sender+receiver referential loss with the sampled message frozen.

    Returns ``(f, params)``: f recomputes receiver cross-entropy plus the
    sender's REINFORCE loss from the flat parameter list.
    """
    rng = np.random.default_rng([seed, 77])
    tup = ds.generate_referential_tuple(2, distractors, ds.ALL_CHARS, rng)
    images = games.referential_images([tup])
    candidates, positions = games.arrange_candidates(images, rng)
    # ReLU is not differentiable at 0: redraw until every pre-activation is
    # clear of the kink by far more than a finite-difference step moves it
    for _ in range(100):
        sender = ag.init_sender(rng, channel, arch, np.float64)
        receiver = ag.init_receiver(rng, channel, arch, np.float64)
        for agent in (sender, receiver):
            for p in agent.params.values():
                # positive biases and wider weights keep ReLUs alive and
                # gradients above the roundoff floor of a central difference
                if p.data.ndim == 1:
                    p.data = p.data + rng.uniform(0.05, 0.5, size=p.shape)
                else:
                    p.data = p.data * weight_scale
        margin = min(_relu_margin(images[:, 0], sender.params), _relu_margin(candidates[0], receiver.params))
        if margin > 1e-3:
            break
    with ad.no_grad():
        _, emb = ag.encode_image(images[:, 0], sender.params)
        symbols = ag.sender_emit(emb, channel, "sample", rng, sender.params).symbols
    names_s, names_r = list(sender.params), list(receiver.params)
    params = [sender.params[k] for k in names_s] + [receiver.params[k] for k in names_r]
    reward = rng.integers(2, size=1)

    def f(*flat):
        sp = dict(zip(names_s, flat[:len(names_s)]))
        rp = dict(zip(names_r, flat[len(names_s):]))
        _, emb = ag.encode_image(images[:, 0], sp)
        msg = ag.sender_emit(emb, channel, "forced", None, sp, symbols=symbols)
        out = ag.receiver_choose(msg.symbols, candidates, rp, channel.vocab_size)
        base = tr.RewardBaseline(value=0.3)
        return tr.cross_entropy(out.scores, positions) + tr.sender_loss(msg, reward, base, 0.01, update=False)

    return f, params

"""
Spatial-attention recurrent QA model: image/word embeddings, an
attention-gated LSTM cell, telling and pointing decoders, and training with
hand-written backpropagation for the fixed architecture.

The uniform attention mode pins every attention weight to 1/cells, which
recovers the plain LSTM baseline.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import datamodel
from .numkit import (AdamState, DimensionError, NumericsError, adam_step,
                     clip_grads_by_norm, sigmoid, softmax_stable)

LEARNED = "learned"
UNIFORM = "uniform"

_GATES = ("i", "f", "o", "g")


@dataclass
class ModelConfig:
    hidden: int = 512  # also the embedding width
    d_a: int = 512
    vocab_size: int = 0
    conv_cells: int = 196
    conv_channels: int = 512
    feat_dim: int = 4096

    @classmethod
    def micro(cls, vocab_size: int = 20) -> "ModelConfig":
        return cls(hidden=8, d_a=8, vocab_size=vocab_size,
                   conv_cells=4, conv_channels=6, feat_dim=12)


def param_shapes(cfg: ModelConfig) -> dict:
    h, da, v = cfg.hidden, cfg.d_a, cfg.vocab_size
    ch, ft = cfg.conv_channels, cfg.feat_dim
    shapes = {
        "W_img": (h, ft), "b_img": (h,),
        "W_word": (h, v),
        "W_he": (da, h), "W_ce": (da, ch), "w_a": (da,), "b_a": (1,),
        "W_out": (v, h), "b_out": (v,),
        "W_ptr": (h, ft), "b_ptr": (h,),
    }
    for x in _GATES:
        shapes[f"Wv_{x}"] = (h, h)
        shapes[f"Wh_{x}"] = (h, h)
        shapes[f"Wr_{x}"] = (h, ch)
        shapes[f"b_{x}"] = (h,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Uniform[-s, s] weights with s = 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            s = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-s, s, size=shape)
    return params


def zero_grads(cfg: ModelConfig) -> dict:
    return {name: np.zeros(shape)
            for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def attention_step(h_prev, conv_map, params, mode=LEARNED):
    """Attention weights over conv cells and the context vector they select."""
    a, r, _, _ = _attention_fwd(h_prev, conv_map, params, mode)
    return a, r


def _attention_fwd(h_prev, conv_map, params, mode):
    cells = conv_map.shape[0]
    if mode == UNIFORM:
        a = np.full(cells, 1.0 / cells)
        r = conv_map.mean(axis=0)
        return a, r, None, None
    if params["W_he"].shape[1] != h_prev.shape[0]:
        raise DimensionError(
            f"W_he {params['W_he'].shape} vs h {h_prev.shape}")
    if params["W_ce"].shape[1] != conv_map.shape[1]:
        raise DimensionError(
            f"W_ce {params['W_ce'].shape} vs conv map {conv_map.shape}")
    z = params["W_he"] @ h_prev + conv_map @ params["W_ce"].T  # (cells, d_a)
    u = np.tanh(z)
    e = u @ params["w_a"] + params["b_a"][0]
    a = softmax_stable(e)
    r = a @ conv_map
    return a, r, u, e


def lstm_step(v, h_prev, c_prev, r, params):
    """One gated cell update; returns (h, c)."""
    h, c, _ = _lstm_fwd(v, h_prev, c_prev, r, params)
    return h, c


def _lstm_fwd(v, h_prev, c_prev, r, params):
    if v.shape != h_prev.shape:
        raise DimensionError(f"input {v.shape} vs hidden {h_prev.shape}")
    pre = {}
    for x in _GATES:
        pre[x] = (params[f"Wv_{x}"] @ v + params[f"Wh_{x}"] @ h_prev
                  + params[f"Wr_{x}"] @ r + params[f"b_{x}"])
    gi, gf, go = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    gg = np.tanh(pre["g"])
    c = gf * c_prev + gi * gg
    h = go * np.tanh(c)
    gates = {"i": gi, "f": gf, "o": go, "g": gg}
    return h, c, gates


def _run_steps(params, conv, inputs, mode, h0=None, c0=None):
    """
    Feed a list of ("image", feature) / ("token", index) inputs through the
    cell, caching everything the backward pass needs.
    """
    h = np.zeros_like(params["b_i"]) if h0 is None else h0
    c = np.zeros_like(h) if c0 is None else c0
    caches = []
    for kind, value in inputs:
        if kind == "image":
            v = params["W_img"] @ value + params["b_img"]
        else:
            if not 0 <= value < params["W_word"].shape[1]:
                raise IndexError(f"token index {value} out of vocabulary "
                                 f"range {params['W_word'].shape[1]}")
            v = params["W_word"][:, value].copy()
        a, r, u, _ = _attention_fwd(h, conv, params, mode)
        h_new, c_new, gates = _lstm_fwd(v, h, c, r, params)
        caches.append({"kind": kind, "value": value, "v": v, "h_prev": h,
                       "c_prev": c, "a": a, "r": r, "u": u,
                       "gates": gates, "h": h_new, "c": c_new})
        h, c = h_new, c_new
    return h, c, caches


@dataclass
class EncoderState:
    h: np.ndarray
    c: np.ndarray
    trace: list  # one attention vector per consumed input
    conv: np.ndarray = None
    mode: str = LEARNED


def slice_pack(pack, cfg: ModelConfig):
    """View a (possibly full-scale) pack at this config's dimensions."""
    return (pack.global_feature[:cfg.feat_dim],
            pack.conv_map[:cfg.conv_cells, :cfg.conv_channels])


def region_feature(pack, grounding_id, cfg: ModelConfig):
    return pack.region_features[grounding_id][:cfg.feat_dim]


def encode(pack, question_tokens, params, cfg, mode=LEARNED) -> EncoderState:
    """Read the image then the question tokens; record the attention trace."""
    feat, conv = slice_pack(pack, cfg)
    inputs = [("image", feat)] + [("token", t) for t in question_tokens]
    h, c, caches = _run_steps(params, conv, inputs, mode)
    return EncoderState(h=h, c=c, trace=[st["a"] for st in caches],
                        conv=conv, mode=mode)


def telling_answer_loglik(state: EncoderState, answer_tokens, params,
                          mode=None) -> float:
    """
    Sum of log-probabilities of the answer tokens plus the end token, with
    the decoder continuing the same attended cell. No length normalization.
    """
    loglik, _, _ = _decode_telling(state, answer_tokens, params,
                                   state.mode if mode is None else mode)
    return loglik


def _decode_telling(state, answer_tokens, params, mode):
    if not answer_tokens:
        raise ValueError("empty answer sequence")
    end_index = 1  # datamodel reserves index 1 for END_ANSWER
    h, c = state.h, state.c
    inputs = [("token", t) for t in answer_tokens]
    _, _, caches = _run_steps(params, state.conv, inputs, mode,
                              h0=h, c0=c)
    hs = [h] + [st["h"] for st in caches]
    targets = list(answer_tokens) + [end_index]
    loglik = 0.0
    probs_list = []
    for h_t, target in zip(hs, targets):
        probs = softmax_stable(params["W_out"] @ h_t + params["b_out"])
        loglik += float(np.log(max(probs[target], 1e-12)))
        probs_list.append(probs)
    return loglik, caches, probs_list


def pointing_candidate_score(state: EncoderState, region_feat, params) -> float:
    """Dot product of the transformed region feature with the final hidden."""
    if params["W_ptr"].shape[1] != region_feat.shape[0]:
        raise DimensionError(
            f"W_ptr {params['W_ptr'].shape} vs region {region_feat.shape}")
    return float((params["W_ptr"] @ region_feat + params["b_ptr"]) @ state.h)


def predict_mc(record, pack, params, vocab, cfg, mode=LEARNED):
    """
    Score the record's 4 candidates (in their deterministic presentation
    order) and return (chosen index, scores). Ties go to the lowest index.
    """
    cands, _ = datamodel.mc_candidates(record)
    q_tokens = vocab.encode(datamodel.tokenize(record.question))
    state = encode(pack, q_tokens, params, cfg, mode)
    scores = []
    for cand in cands:
        if record.kind == "telling":
            a_tokens = vocab.encode(datamodel.tokenize(cand))
            scores.append(telling_answer_loglik(state, a_tokens, params, mode))
        else:
            feat = region_feature(pack, cand, cfg)
            scores.append(pointing_candidate_score(state, feat, params))
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return best, scores


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _backward_steps(params, cfg, conv, caches, dh_acc, mode,
                    grads, dh_final=None, dc_final=None):
    """
    Backpropagate through a cached run of _run_steps. dh_acc maps step index
    to a gradient injected at that step's hidden state (from output heads).
    Returns the gradient flowing into (h0, c0).
    """
    T = len(caches)
    dh_next = np.zeros(cfg.hidden) if dh_final is None else dh_final.copy()
    dc_next = np.zeros(cfg.hidden) if dc_final is None else dc_final.copy()
    for t in range(T - 1, -1, -1):
        st = caches[t]
        dh = dh_next + dh_acc.get(t, 0.0)
        dc = dc_next.copy()
        gi, gf, go, gg = (st["gates"][x] for x in _GATES)
        tc = np.tanh(st["c"])
        do = dh * tc
        dc += dh * go * (1 - tc * tc)
        df = dc * st["c_prev"]
        dc_prev = dc * gf
        di = dc * gg
        dg = dc * gi
        dz = {"i": di * gi * (1 - gi), "f": df * gf * (1 - gf),
              "o": do * go * (1 - go), "g": dg * (1 - gg * gg)}
        dv = np.zeros(cfg.hidden)
        dh_prev = np.zeros(cfg.hidden)
        dr = np.zeros(cfg.conv_channels)
        for x in _GATES:
            grads[f"Wv_{x}"] += np.outer(dz[x], st["v"])
            grads[f"Wh_{x}"] += np.outer(dz[x], st["h_prev"])
            grads[f"Wr_{x}"] += np.outer(dz[x], st["r"])
            grads[f"b_{x}"] += dz[x]
            dv += params[f"Wv_{x}"].T @ dz[x]
            dh_prev += params[f"Wh_{x}"].T @ dz[x]
            dr += params[f"Wr_{x}"].T @ dz[x]
        if mode == LEARNED:
            a, u = st["a"], st["u"]
            da = conv @ dr
            de = a * (da - float(a @ da))
            grads["b_a"][0] += de.sum()
            grads["w_a"] += u.T @ de
            dz_att = np.outer(de, params["w_a"]) * (1 - u * u)
            grads["W_ce"] += dz_att.T @ conv
            s = dz_att.sum(axis=0)
            grads["W_he"] += np.outer(s, st["h_prev"])
            dh_prev += params["W_he"].T @ s
        # uniform mode: r is a constant mean of conv rows, no params touched
        if st["kind"] == "image":
            grads["W_img"] += np.outer(dv, st["value"])
            grads["b_img"] += dv
        else:
            grads["W_word"][:, st["value"]] += dv
        dh_next = dh_prev
        dc_next = dc_prev
    return dh_next, dc_next


def telling_loss_and_grads(params, cfg, pack, q_tokens, a_tokens,
                           mode=LEARNED, with_grads=True):
    """
    Mean cross-entropy over the answer-token predictions (answer tokens plus
    END), with analytic gradients for every parameter.
    """
    if not a_tokens:
        raise ValueError("empty answer sequence")
    feat, conv = slice_pack(pack, cfg)
    end_index = 1
    inputs = ([("image", feat)] + [("token", t) for t in q_tokens]
              + [("token", t) for t in a_tokens])
    _, _, caches = _run_steps(params, conv, inputs, mode)
    m = len(q_tokens)
    n = len(a_tokens)
    targets = list(a_tokens) + [end_index]
    grads = zero_grads(cfg) if with_grads else None
    dh_acc = {}
    loss = 0.0
    scale = 1.0 / (n + 1)
    for k, target in enumerate(targets):
        t = m + k  # step whose hidden state makes this prediction
        h_t = caches[t]["h"]
        probs = softmax_stable(params["W_out"] @ h_t + params["b_out"])
        loss = loss - scale * np.log(max(probs[target], 1e-12))
        if not with_grads:
            continue
        dlogits = probs * scale
        dlogits[target] -= scale
        grads["W_out"] += np.outer(dlogits, h_t)
        grads["b_out"] += dlogits
        dh_acc[t] = dh_acc.get(t, 0.0) + params["W_out"].T @ dlogits
    if not with_grads:
        return loss, None
    _backward_steps(params, cfg, conv, caches, dh_acc, mode, grads)
    return loss, grads


def pointing_loss_and_grads(params, cfg, pack, q_tokens, cand_features,
                            target, mode=LEARNED, with_grads=True):
    """Cross-entropy over the softmax of the 4 candidate scores."""
    feat, conv = slice_pack(pack, cfg)
    inputs = [("image", feat)] + [("token", t) for t in q_tokens]
    h, _, caches = _run_steps(params, conv, inputs, mode)
    transformed = [params["W_ptr"] @ f + params["b_ptr"] for f in cand_features]
    scores = np.array([tv @ h for tv in transformed])
    probs = softmax_stable(scores)
    loss = -np.log(max(probs[target], 1e-12))
    if not with_grads:
        return loss, None
    ds = probs.copy()
    ds[target] -= 1.0
    grads = zero_grads(cfg)
    dh = np.zeros(cfg.hidden)
    for k, (tv, f) in enumerate(zip(transformed, cand_features)):
        dh += ds[k] * tv
        grads["W_ptr"] += ds[k] * np.outer(h, f)
        grads["b_ptr"] += ds[k] * h
    _backward_steps(params, cfg, conv, caches, {len(caches) - 1: dh},
                    mode, grads)
    return loss, grads


def record_loss_and_grads(params, cfg, record, pack, vocab, mode=LEARNED,
                          with_grads=True):
    q_tokens = vocab.encode(datamodel.tokenize(record.question))
    if record.kind == "telling":
        a_tokens = vocab.encode(datamodel.tokenize(record.answer))
        return telling_loss_and_grads(params, cfg, pack, q_tokens, a_tokens,
                                      mode, with_grads)
    cands, target = datamodel.mc_candidates(record)
    feats = [region_feature(pack, c, cfg) for c in cands]
    return pointing_loss_and_grads(params, cfg, pack, q_tokens, feats,
                                   target, mode, with_grads)


def gradcheck_fns(cfg, record, pack, vocab, mode=LEARNED):
    """
    (loss_fn, grad_fn) pair for the finite-difference checker. loss_fn
    evaluates the forward pass in extended precision so the numeric oracle's
    round-off stays well below the checker's denominator floor; perturbed
    parameters themselves remain double precision.
    """
    def loss_fn(p):
        wide = {k: v.astype(np.longdouble) for k, v in p.items()}
        loss, _ = record_loss_and_grads(wide, cfg, record, pack, vocab,
                                        mode, with_grads=False)
        return loss

    def grad_fn(p):
        _, grads = record_loss_and_grads(p, cfg, record, pack, vocab, mode)
        return grads

    return loss_fn, grad_fn


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-4
    seed: int = 0
    mode: str = LEARNED
    clip_norm: float = None  # optional global max-norm gradient clip


def train(records, packs, vocab, params, cfg: ModelConfig,
          train_cfg: TrainConfig):
    """
    Mini-batch Adam training over telling/pointing records. Returns the
    trained params and the per-epoch mean loss curve.
    """
    params = {k: v.copy() for k, v in params.items()}
    states = {name: AdamState.for_param(p, train_cfg.learning_rate)
              for name, p in params.items()}
    rng = np.random.default_rng(train_cfg.seed)
    order = np.arange(len(records))
    curve = []
    for epoch in range(train_cfg.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            batch_grads = zero_grads(cfg)
            batch_loss = 0.0
            for idx in batch:
                rec = records[idx]
                loss, grads = record_loss_and_grads(
                    params, cfg, rec, packs[rec.image_id], vocab,
                    train_cfg.mode)
                if not np.isfinite(loss):
                    raise NumericsError(
                        f"non-finite loss on {rec.qa_id} "
                        f"(epoch {epoch}, batch at {start})")
                batch_loss += loss
                for name in batch_grads:
                    batch_grads[name] += grads[name]
            inv = 1.0 / len(batch)
            batch_grads = {k: g * inv for k, g in batch_grads.items()}
            if train_cfg.clip_norm is not None:
                batch_grads = clip_grads_by_norm(batch_grads,
                                                 train_cfg.clip_norm)
            for name in sorted(params):
                params[name] = adam_step(params[name], batch_grads[name],
                                         states[name])
            epoch_loss += batch_loss
        curve.append(epoch_loss / len(order))
    return params, curve


def training_accuracy(records, packs, vocab, params, cfg, mode=LEARNED):
    correct = 0
    for rec in records:
        _, target = datamodel.mc_candidates(rec)
        chosen, _ = predict_mc(rec, packs[rec.image_id], params, vocab, cfg,
                               mode)
        correct += int(chosen == target)
    return correct / len(records)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"V7WM"
CKPT_VERSION = 1
_CFG_FIELDS = ("hidden", "d_a", "vocab_size", "conv_cells", "conv_channels",
               "feat_dim")


def save_checkpoint(params, cfg: ModelConfig, path) -> None:
    """Versioned binary of every tensor; load-then-save is bit-identical."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        for name in _CFG_FIELDS:
            f.write(struct.pack("<q", getattr(cfg, name)))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            arr = params[name]
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    from .featurestore import FormatError, _take
    with open(path, "rb") as f:
        buf = f.read()
    chunk, off = _take(buf, 0, 4, "magic")
    if chunk != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {chunk!r}")
    chunk, off = _take(buf, off, 2, "version")
    (version,) = struct.unpack("<H", chunk)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg_vals = {}
    for name in _CFG_FIELDS:
        chunk, off = _take(buf, off, 8, name)
        (cfg_vals[name],) = struct.unpack("<q", chunk)
    cfg = ModelConfig(**cfg_vals)
    chunk, off = _take(buf, off, 4, "tensor count")
    (count,) = struct.unpack("<I", chunk)
    params = {}
    for _ in range(count):
        chunk, off = _take(buf, off, 4, "name length")
        (nlen,) = struct.unpack("<I", chunk)
        chunk, off = _take(buf, off, nlen, "tensor name")
        name = chunk.decode("utf-8")
        chunk, off = _take(buf, off, 4, "ndim")
        (ndim,) = struct.unpack("<I", chunk)
        shape = []
        for _ in range(ndim):
            chunk, off = _take(buf, off, 4, "dim")
            shape.append(struct.unpack("<I", chunk)[0])
        size = int(np.prod(shape)) if shape else 1
        chunk, off = _take(buf, off, size * 8, f"tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise FormatError("checkpoint tensor set does not match config")
    return params, cfg

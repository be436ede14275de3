"""Fully-connected spiking net: Linear -> LIF -> Linear, with manual BPTT.

The forward pass unrolls the LIF recurrence over T timesteps and reads out
class scores as the time-mean of the output layer's pre-activations (mean
rather than sum keeps the cross-entropy scale independent of T). The
backward pass walks the recurrence in reverse, substituting the fast-sigmoid
surrogate for the Heaviside derivative, and also routes an externally
supplied spike-rate gradient coefficient uniformly onto every hidden spike.

A single 10-way head is shared across tasks; losses and predictions are
masked to the classes seen so far, so the net never needs a task identifier
at inference time.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .neuron import (
    LifLayerState,
    LifParams,
    lif_step,
    lif_step_relaxed,
    surrogate_grad,
)

PARAM_ORDER = ("w1", "b1", "w2", "b2", "beta_raw", "vthr_raw")

CHECKPOINT_MAGIC = b"SBCK0001"


@dataclass
class FcSnn:
    """Linear(in->hidden) -> LIF(hidden) -> Linear(hidden->out)."""

    w1: np.ndarray  # (in_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, out_dim)
    b2: np.ndarray  # (out_dim,)
    lif: LifParams
    version: int = 0  # bumped on every optimizer update; guards stale records

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of all learnable arrays, in declared order."""
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "beta_raw": self.lif.beta_raw,
            "vthr_raw": self.lif.vthr_raw,
        }


def init_fcsnn(
    in_dim: int = 784,
    hidden: int = 128,
    out_dim: int = 10,
    rng: np.random.Generator | None = None,
    beta: float = 0.9,
    v_thr: float = 1.0,
    learnable_lif: bool = True,
    dtype=np.float32,
) -> FcSnn:
    """Fresh net with uniform +-1/sqrt(fan_in) weights and zero biases."""
    rng = rng or np.random.default_rng()
    lim1 = 1.0 / np.sqrt(in_dim)
    lim2 = 1.0 / np.sqrt(hidden)
    return FcSnn(
        w1=rng.uniform(-lim1, lim1, (in_dim, hidden)).astype(dtype),
        b1=np.zeros(hidden, dtype=dtype),
        w2=rng.uniform(-lim2, lim2, (hidden, out_dim)).astype(dtype),
        b2=np.zeros(out_dim, dtype=dtype),
        lif=LifParams.init(beta=beta, v_thr=v_thr, learnable=learnable_lif, dtype=dtype),
    )


@dataclass
class ForwardRecord:
    """Everything the reverse-time pass needs, captured during forward."""

    inputs: np.ndarray  # (T, batch, in_dim) binary
    u: np.ndarray  # (T, batch, hidden) membrane before reset bookkeeping
    spikes: np.ndarray  # (T, batch, hidden); binary, or soft in relaxed mode
    s_mean: np.ndarray  # (batch, hidden)
    logits: np.ndarray  # (batch, out_dim)
    relaxed: bool
    net_version: int


def _check_binary_input(x: np.ndarray) -> None:
    if x.dtype == np.uint8:
        if x.size and x.max() > 1:
            raise ValueError("spike input must be binary")
        return
    if not np.isin(np.unique(x), (0, 1)).all():
        raise ValueError("spike input must be binary")


def forward(net: FcSnn, spikes_in: np.ndarray, relaxed: bool = False) -> ForwardRecord:
    """Run the net over a (T, batch, in_dim) spike tensor."""
    spikes_in = np.asarray(spikes_in)
    if spikes_in.ndim != 3 or spikes_in.shape[2] != net.in_dim:
        raise ValueError(
            f"expected (T, batch, {net.in_dim}) input, got {spikes_in.shape}"
        )
    _check_binary_input(spikes_in)
    T, batch, in_dim = spikes_in.shape
    dtype = net.w1.dtype
    step = lif_step_relaxed if relaxed else lif_step

    # one flat matmul for all timestep currents, then an elementwise loop
    currents = (spikes_in.reshape(T * batch, in_dim) @ net.w1).reshape(T, batch, -1)
    currents += net.b1

    state = LifLayerState.zeros((batch, net.hidden), dtype=dtype)
    u_hist = np.empty((T, batch, net.hidden), dtype=dtype)
    s_hist = np.empty((T, batch, net.hidden), dtype=dtype)
    for t in range(T):
        state, s = step(state, currents[t], net.lif)
        u_hist[t] = state.u
        s_hist[t] = s

    s_mean = s_hist.mean(axis=0)
    logits = s_mean @ net.w2 + net.b2
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return ForwardRecord(
        inputs=spikes_in,
        u=u_hist,
        spikes=s_hist,
        s_mean=s_mean,
        logits=logits,
        relaxed=relaxed,
        net_version=net.version,
    )


# ---------------------------------------------------------------------------
# Loss and prediction over the active-class mask


def _check_active(active: np.ndarray, out_dim: int) -> np.ndarray:
    active = np.asarray(active, dtype=np.int64)
    if active.size == 0:
        raise ValueError("active class set is empty")
    if active.min() < 0 or active.max() >= out_dim:
        raise ValueError("active class outside head range")
    return active


def masked_softmax(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Softmax over the active columns; inactive columns get probability 0."""
    active = _check_active(active, logits.shape[1])
    z = logits[:, active].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p_active = ez / ez.sum(axis=1, keepdims=True)
    probs = np.zeros(logits.shape, dtype=np.float64)
    probs[:, active] = p_active
    return probs


def task_loss(logits: np.ndarray, labels: np.ndarray, active: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch, restricted to active classes."""
    active = _check_active(active, logits.shape[1])
    labels = np.asarray(labels, dtype=np.int64)
    pos = {int(c): i for i, c in enumerate(active)}
    try:
        label_pos = np.array([pos[int(l)] for l in labels])
    except KeyError as exc:
        raise ValueError(f"label {exc} outside the active class set") from exc
    z = logits[:, active].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(labels)), label_pos]))


def predict(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Argmax over active classes only; ties go to the lowest class index."""
    active = _check_active(active, logits.shape[1])
    masked = np.full(logits.shape, -np.inf)
    masked[:, active] = logits[:, active]
    return masked.argmax(axis=1)


# ---------------------------------------------------------------------------
# Manual BPTT


def backward(
    net: FcSnn,
    record: ForwardRecord,
    labels: np.ndarray,
    active: np.ndarray,
    budget_grad_coeff: float = 0.0,
) -> dict[str, np.ndarray]:
    """Gradients of task loss + budget_grad_coeff * spike_rate w.r.t. all params.

    budget_grad_coeff is dL/dr supplied by the budget controller; since
    r is the plain mean of hidden spikes, it lands as a uniform constant on
    every spike and then flows through the surrogate like any other signal.
    """
    if record.net_version != net.version:
        raise RuntimeError("stale forward record: net was updated after forward")
    T, batch, hidden = record.spikes.shape
    beta, v_thr = net.lif.constrained()
    k = net.lif.k
    dtype = net.w1.dtype

    probs = masked_softmax(record.logits, active)
    labels = np.asarray(labels, dtype=np.int64)
    dlogits = probs
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch
    dlogits = dlogits.astype(dtype)

    dw2 = record.s_mean.T @ dlogits
    db2 = dlogits.sum(axis=0)
    ds_readout = (dlogits @ net.w2.T) / T  # identical for every timestep
    budget_unit = budget_grad_coeff / record.spikes.size

    grad_u_next = np.zeros((batch, hidden), dtype=dtype)
    grad_u_hist = np.empty((T, batch, hidden), dtype=dtype)
    dbeta = 0.0
    dvthr = 0.0
    for t in range(T - 1, -1, -1):
        grad_s = ds_readout + budget_unit - v_thr * grad_u_next
        fprime = surrogate_grad(record.u[t], v_thr, k)
        grad_u = grad_s * fprime + beta * grad_u_next
        grad_u_hist[t] = grad_u
        if t > 0:
            dbeta += float((grad_u * record.u[t - 1]).sum())
            dvthr -= float((grad_u * record.spikes[t - 1]).sum())
        dvthr -= float((grad_s * fprime).sum())
        grad_u_next = grad_u

    gu_flat = grad_u_hist.reshape(T * batch, hidden)
    dw1 = record.inputs.reshape(T * batch, -1).astype(dtype).T @ gu_flat
    db1 = gu_flat.sum(axis=0)

    if net.lif.learnable:
        # chain through the carriers: dbeta/draw = beta(1-beta); the threshold
        # carrier is a softplus, whose derivative is the logistic function
        dbeta_raw = dbeta * beta * (1.0 - beta)
        dvthr_raw = dvthr / (1.0 + float(np.exp(-net.lif.vthr_raw)))
    else:
        dbeta_raw = 0.0
        dvthr_raw = 0.0

    return {
        "w1": dw1,
        "b1": db1,
        "w2": dw2,
        "b2": db2,
        "beta_raw": np.array(dbeta_raw, dtype=dtype),
        "vthr_raw": np.array(dvthr_raw, dtype=dtype),
    }


# ---------------------------------------------------------------------------
# Optimizer


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())
    norm = np.sqrt(sq)
    # 1e-6 slack keeps the operation idempotent under float32 rounding
    if norm <= max_norm * (1.0 + 1e-6):
        return grads
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment accumulators."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr: float = 1e-3,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              opt: AdamState) -> None:
    """One in-place Adam update on every parameter."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, p in params.items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def apply_update(net: FcSnn, grads: dict[str, np.ndarray], opt: AdamState,
                 max_norm: float | None = 1.0) -> None:
    """Clip, Adam-update, and invalidate outstanding forward records."""
    if max_norm is not None:
        grads = clip_gradients(grads, max_norm)
    adam_step(net.parameters(), grads, opt)
    net.version += 1


# ---------------------------------------------------------------------------
# Gradient self-check (relaxed mode vs finite differences)


def relaxed_loss(net: FcSnn, spikes_in: np.ndarray, labels: np.ndarray,
                 active: np.ndarray, rate_coeff: float) -> float:
    """Scalar objective whose exact gradient backward() computes in relaxed
    mode: cross-entropy plus rate_coeff times the mean soft spike."""
    rec = forward(net, spikes_in, relaxed=True)
    return task_loss(rec.logits, labels, active) + rate_coeff * float(rec.spikes.mean())


def gradcheck(net: FcSnn, spikes_in: np.ndarray, labels: np.ndarray,
              active: np.ndarray, rate_coeff: float = 0.0,
              h: float = 1e-5) -> dict[str, float]:
    """Max relative error of BPTT against central differences, per parameter.

    Requires a float64 net; perturbations restore the parameters exactly.
    """
    if net.w1.dtype != np.float64:
        raise ValueError("gradcheck needs a float64 net")
    rec = forward(net, spikes_in, relaxed=True)
    analytic = backward(net, rec, labels, active, budget_grad_coeff=rate_coeff)
    errs = {}
    for name, p in net.parameters().items():
        flat = p.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = float(flat[i])
            flat[i] = orig + h
            lp = relaxed_loss(net, spikes_in, labels, active, rate_coeff)
            flat[i] = orig - h
            lm = relaxed_loss(net, spikes_in, labels, active, rate_coeff)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(np.asarray(analytic[name]).reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        errs[name] = worst
    return errs


# ---------------------------------------------------------------------------
# Checkpoint container


def save_checkpoint(
    net: FcSnn,
    opt: AdamState | None = None,
    rng_states: dict | None = None,
    extra_meta: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> bytes:
    """Serialize net (+ optimizer, rng, extras) to a self-describing blob.

    Layout: 8-byte magic, u32 little-endian header length, JSON header,
    then raw little-endian blobs (parameters first, in PARAM_ORDER, as
    float32; then optimizer moments; then extras with per-array dtypes).
    """
    params = net.parameters()
    extra_arrays = extra_arrays or {}
    header = {
        "dims": {"in": net.in_dim, "hidden": net.hidden, "out": net.out_dim},
        "lif": {"k": net.lif.k, "learnable": net.lif.learnable},
        "param_order": list(PARAM_ORDER),
        "shapes": {k: list(params[k].shape) for k in PARAM_ORDER},
        "optimizer": None,
        "rng": rng_states,
        "extra_meta": extra_meta,
        "extras": {
            k: {"shape": list(a.shape), "dtype": np.dtype(a.dtype).str}
            for k, a in extra_arrays.items()
        },
        "net_version": net.version,
    }
    if opt is not None:
        header["optimizer"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step": opt.step,
        }
    buf = io.BytesIO()
    head_bytes = json.dumps(header, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head_bytes)))
    buf.write(head_bytes)
    for k in PARAM_ORDER:
        buf.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    if opt is not None:
        for k in PARAM_ORDER:
            buf.write(np.ascontiguousarray(opt.m[k], dtype="<f4").tobytes())
        for k in PARAM_ORDER:
            buf.write(np.ascontiguousarray(opt.v[k], dtype="<f4").tobytes())
    for k, a in extra_arrays.items():
        buf.write(np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes())
    return buf.getvalue()


def load_checkpoint(raw: bytes) -> tuple[FcSnn, AdamState | None, dict | None, dict | None, dict[str, np.ndarray]]:
    """Inverse of save_checkpoint.

    Returns (net, optimizer or None, rng_states or None, extra_meta or None,
    extra_arrays).
    """
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:8]!r}")
    (head_len,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + head_len].decode())
    offset = 12 + head_len

    def take(shape, dtype):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * np.dtype(dtype).itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += nbytes
        return arr.copy()

    shapes = header["shapes"]
    tensors = {k: take(shapes[k], "<f4") for k in header["param_order"]}
    lif = LifParams(
        beta_raw=tensors["beta_raw"].reshape(()),
        vthr_raw=tensors["vthr_raw"].reshape(()),
        k=header["lif"]["k"],
        learnable=header["lif"]["learnable"],
    )
    net = FcSnn(
        w1=tensors["w1"], b1=tensors["b1"], w2=tensors["w2"], b2=tensors["b2"],
        lif=lif, version=header.get("net_version", 0),
    )
    opt = None
    if header["optimizer"] is not None:
        oh = header["optimizer"]
        opt = AdamState(lr=oh["lr"], beta1=oh["beta1"], beta2=oh["beta2"],
                        eps=oh["eps"], step=oh["step"])
        opt.m = {k: take(shapes[k], "<f4") for k in header["param_order"]}
        opt.v = {k: take(shapes[k], "<f4") for k in header["param_order"]}
        params = net.parameters()
        for k in header["param_order"]:
            opt.m[k] = opt.m[k].reshape(params[k].shape)
            opt.v[k] = opt.v[k].reshape(params[k].shape)
    extras = {}
    for k, meta in header.get("extras", {}).items():
        extras[k] = take(meta["shape"], meta["dtype"])
    return net, opt, header.get("rng"), header.get("extra_meta"), extras

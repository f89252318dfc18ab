"""Learned IMU bias process model: LSTM and Transformer variants.

Both networks map a short gravity-aligned IMU window plus the previous bias
estimate to the bias at the end of the window. One instance is trained per
sensor (accelerometer or gyroscope).

The output head works in units of the per-step bias increment::

    b_hat = bias_mean + delta_std * (prev_n @ W_skip + h @ W_out + c_out)

``prev_n`` is the normalized previous bias. ``W_skip`` starts at
``diag(bias_std / delta_std)``, so a fresh model predicts "bias unchanged".
With all three head weights zeroed, the output is the training-set bias mean.
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .factors import BiasEstimate

WINDOW_SAMPLES = 10
WINDOW_SECONDS = 1.0
LSTM_RATE = 2.0
TRANSFORMER_RATE = 1.0
HISTORY = 100
STD_FLOOR = 1e-8
SENSORS = ("accel", "gyro")


class DataError(ValueError):
    pass


# ------------------------------------------------------------ preprocessing

@dataclass
class ImuWindow:
    samples: np.ndarray     # (w, 6): accel then gyro, gravity-aligned
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 6:
            raise ShapeError(f"IMU window must be (w, 6), got {self.samples.shape}")

    def __len__(self) -> int:
        return len(self.samples)


def yaw_of(R: np.ndarray) -> float:
    return math.atan2(R[1, 0], R[0, 0])


def gravity_align(samples, R, t_start: float = 0.0, t_end: float = 0.0) -> ImuWindow:
    """Rotate body-frame samples by the roll/pitch part of ``R`` (yaw kept)."""
    R = np.asarray(R, float)
    c, s = math.cos(yaw_of(R)), math.sin(yaw_of(R))
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    R_rp = Rz.T @ R
    x = np.asarray(samples, float)
    out = np.hstack([x[:, :3] @ R_rp.T, x[:, 3:] @ R_rp.T])
    return ImuWindow(out, t_start, t_end)


def bin_means(x: np.ndarray, w: int) -> np.ndarray:
    """Average ``len(x)`` rows into ``w`` equal bins."""
    n = len(x)
    if n < w:
        raise ShapeError(f"{n} samples cannot fill {w} bins")
    edges = np.linspace(0, n, w + 1).round().astype(int)
    return np.stack([x[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])])


def make_window(imu_t, accel, gyro, t_end: float, R_start, w: int = WINDOW_SAMPLES,
                seconds: float = WINDOW_SECONDS) -> ImuWindow:
    """Window of the samples in ``[t_end - seconds, t_end)``, resampled to ``w`` rows."""
    i0, i1 = np.searchsorted(imu_t, [t_end - seconds - 1e-9, t_end - 1e-9])
    raw = np.hstack([accel[i0:i1], gyro[i0:i1]])
    return gravity_align(bin_means(raw, w), R_start, t_end - seconds, t_end)


@dataclass
class NormStats:
    imu_mean: np.ndarray
    imu_std: np.ndarray
    bias_mean: np.ndarray
    bias_std: np.ndarray
    delta_std: np.ndarray      # std of the bias change between consecutive inferences

    def __post_init__(self):
        for k in ("imu_mean", "bias_mean"):
            setattr(self, k, np.asarray(getattr(self, k), float))
        for k in ("imu_std", "bias_std", "delta_std"):
            setattr(self, k, np.maximum(np.asarray(getattr(self, k), float), STD_FLOOR))

    @classmethod
    def fit(cls, windows: np.ndarray, prev: np.ndarray, target: np.ndarray) -> "NormStats":
        flat = windows.reshape(-1, 6)
        return cls(flat.mean(0), flat.std(0), target.mean(0), target.std(0), (target - prev).std(0))

    def norm_window(self, win: np.ndarray) -> np.ndarray:
        return (win - self.imu_mean) / self.imu_std

    def norm_bias(self, b: np.ndarray) -> np.ndarray:
        return (b - self.bias_mean) / self.bias_std

    def to_head_units(self, b: np.ndarray) -> np.ndarray:
        return (b - self.bias_mean) / self.delta_std

    def from_head_units(self, u: np.ndarray) -> np.ndarray:
        return self.bias_mean + self.delta_std * u

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ layers

def _glorot(rng, n_in, n_out, gain=1.0):
    return rng.normal(size=(n_in, n_out)) * gain * math.sqrt(2.0 / (n_in + n_out))


def _linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, W)
    return ad.add(y, b) if b is not None else y


class _Model:
    arch = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _p(self, name, data):
        self.params[name] = ad.parameter(data, name)
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if sd[k].shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {sd[k].shape} vs {p.data.shape}")
            p.data = np.array(sd[k], float)

    def init_head(self, stats: NormStats) -> None:
        self.params["W_skip"].data = np.diag(stats.bias_std / stats.delta_std)

    def zero_head(self) -> None:
        for k in ("W_out", "c_out", "W_skip"):
            self.params[k].data = np.zeros_like(self.params[k].data)

    def _head(self, h: Tensor, prev_n: Tensor) -> Tensor:
        p = self.params
        return ad.add(ad.add(ad.matmul(prev_n, p["W_skip"]), ad.matmul(h, p["W_out"])), p["c_out"])

    def config(self) -> dict:
        raise NotImplementedError

    def save(self, path, stats: NormStats, meta: dict | None = None) -> None:
        """Checkpoint plus a ``.norm.json`` sidecar with the normalization stats."""
        path = Path(path)
        ad.save_tensors(path, self.state_dict(), {"arch": self.arch, "config": self.config(), **(meta or {})})
        stats.save(sidecar_path(path))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".norm.json")


class LstmModel(_Model):
    """Input projection, stacked single-direction LSTM, linear head."""

    arch = "lstm"

    def __init__(self, w: int = WINDOW_SAMPLES, hidden: int = 64, layers: int = 2, seed: int = 0):
        super().__init__()
        self.w, self.hidden, self.layers, self.seed = w, hidden, layers, seed
        rng = np.random.default_rng(seed)
        d_in, H = 6 * w + 3, hidden
        self._p("W_in", _glorot(rng, d_in, H))
        self._p("b_in", np.zeros(H))
        for l in range(layers):
            self._p(f"Wx{l}", _glorot(rng, H, 4 * H))
            self._p(f"Wh{l}", _glorot(rng, H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0        # forget gate
            self._p(f"b{l}", b)
        self._p("W_out", _glorot(rng, H, 3, 0.1))
        self._p("c_out", np.zeros(3))
        self._p("W_skip", np.eye(3))
        self.state = None

    def config(self) -> dict:
        return {"w": self.w, "hidden": self.hidden, "layers": self.layers, "seed": self.seed}

    def reset(self) -> None:
        self.state = None

    def zero_state(self, batch: int):
        z = np.zeros((batch, self.hidden))
        return [(Tensor(z), Tensor(z)) for _ in range(self.layers)]

    def step(self, x: Tensor, prev_n: Tensor, state):
        """One time step over a batch; returns head output and the new state."""
        p, H = self.params, self.hidden
        z = ad.tanh(_linear(x, p["W_in"], p["b_in"]))
        new = []
        for l, (h, c) in enumerate(state):
            gates = ad.add(ad.add(ad.matmul(z, p[f"Wx{l}"]), ad.matmul(h, p[f"Wh{l}"])), p[f"b{l}"])
            i = ad.sigmoid(gates[:, 0:H])
            f = ad.sigmoid(gates[:, H:2 * H])
            g = ad.tanh(gates[:, 2 * H:3 * H])
            o = ad.sigmoid(gates[:, 3 * H:4 * H])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            new.append((h, c))
            z = h
        return self._head(z, prev_n), new

    def forward(self, windows_n: np.ndarray, prev_n: np.ndarray, state=None):
        """Run ``(B, T, w, 6)`` normalized windows; returns ``(B, T, 3)`` head output."""
        B, T = windows_n.shape[:2]
        state = state or self.zero_state(B)
        outs = []
        for t in range(T):
            x = Tensor(np.concatenate([windows_n[:, t].reshape(B, -1), prev_n[:, t]], axis=1))
            y, state = self.step(x, Tensor(prev_n[:, t]), state)
            outs.append(y)
        return ad.stack(outs, axis=1), state


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, :d // 2]
    return pe


class TransformerModel(_Model):
    """Encoder over IMU-window tokens, causal decoder over the bias history.

    Each history step concatenates a window and the bias at its start; the
    encoder embeds the full token, the decoder embeds the bias part. All
    attention is causal, so position ``s`` only sees steps up to ``s``.
    """

    arch = "transformer"

    def __init__(self, w: int = WINDOW_SAMPLES, embed: int = 64, heads: int = 2, enc_layers: int = 2,
                 dec_layers: int = 2, ff: int | None = None, history: int = HISTORY, seed: int = 0):
        super().__init__()
        if embed % heads:
            raise ValueError("embed must be divisible by heads")
        self.w, self.embed, self.heads, self.history, self.seed = w, embed, heads, history, seed
        self.enc_layers, self.dec_layers, self.ff = enc_layers, dec_layers, ff or 2 * embed
        rng = np.random.default_rng(seed)
        E = embed
        self._p("W_enc", _glorot(rng, 6 * w + 3, E))
        self._p("b_enc", np.zeros(E))
        self._p("W_dec", _glorot(rng, 3, E))
        self._p("b_dec", np.zeros(E))
        for l in range(enc_layers):
            self._attn(rng, f"e{l}.sa")
            self._ffn(rng, f"e{l}")
            self._ln(f"e{l}.ln1")
            self._ln(f"e{l}.ln2")
        for l in range(dec_layers):
            self._attn(rng, f"d{l}.sa")
            self._attn(rng, f"d{l}.ca")
            self._ffn(rng, f"d{l}")
            for k in range(3):
                self._ln(f"d{l}.ln{k + 1}")
        self._p("W_out", _glorot(rng, E, 3, 0.1))
        self._p("c_out", np.zeros(3))
        self._p("W_skip", np.eye(3))
        self.pe = positional_encoding(history, E)
        self.last_attention: list[np.ndarray] = []

    def config(self) -> dict:
        return {"w": self.w, "embed": self.embed, "heads": self.heads, "enc_layers": self.enc_layers,
                "dec_layers": self.dec_layers, "ff": self.ff, "history": self.history, "seed": self.seed}

    def reset(self) -> None:
        pass

    def _attn(self, rng, name):
        for k in "qkvo":
            self._p(f"{name}.W{k}", _glorot(rng, self.embed, self.embed))

    def _ffn(self, rng, name):
        self._p(f"{name}.W1", _glorot(rng, self.embed, self.ff))
        self._p(f"{name}.b1", np.zeros(self.ff))
        self._p(f"{name}.W2", _glorot(rng, self.ff, self.embed))
        self._p(f"{name}.b2", np.zeros(self.embed))

    def _ln(self, name):
        self._p(f"{name}.g", np.ones(self.embed))
        self._p(f"{name}.b", np.zeros(self.embed))

    def _norm(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _split(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, n, self.heads, self.embed // self.heads)), (0, 2, 1, 3))

    def attention(self, q_in: Tensor, kv_in: Tensor, name: str, mask: np.ndarray) -> Tensor:
        p = self.params
        B, n, E = q_in.shape
        q = self._split(ad.matmul(q_in, p[f"{name}.Wq"]))
        k = self._split(ad.matmul(kv_in, p[f"{name}.Wk"]))
        v = self._split(ad.matmul(kv_in, p[f"{name}.Wv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(E // self.heads))
        a = ad.softmax(scores, axis=-1, mask=mask)
        self.last_attention.append(a.data)
        ctx = ad.reshape(ad.transpose(ad.matmul(a, v), (0, 2, 1, 3)), (B, n, E))
        return ad.matmul(ctx, p[f"{name}.Wo"])

    def _ffn_apply(self, x, name):
        p = self.params
        return _linear(ad.relu(_linear(x, p[f"{name}.W1"], p[f"{name}.b1"])), p[f"{name}.W2"], p[f"{name}.b2"])

    def forward(self, windows_n: np.ndarray, prev_n: np.ndarray, state=None):
        """``(B, n, w, 6)`` windows and ``(B, n, 3)`` biases -> ``(B, n, 3)`` head output."""
        B, n = windows_n.shape[:2]
        if n == 0:
            raise ValueError("empty history")
        if n > self.history:
            raise ShapeError(f"history of {n} exceeds capacity {self.history}")
        p = self.params
        self.last_attention = []
        pe = Tensor(np.broadcast_to(self.pe[:n], (B, n, self.embed)).copy())
        tokens = np.concatenate([windows_n.reshape(B, n, -1), prev_n], axis=2)
        x = ad.add(_linear(Tensor(tokens), p["W_enc"], p["b_enc"]), pe)
        y = ad.add(_linear(Tensor(prev_n), p["W_dec"], p["b_dec"]), pe)
        causal = np.tril(np.ones((n, n), bool))
        for l in range(self.enc_layers):
            x = self._norm(ad.add(x, self.attention(x, x, f"e{l}.sa", causal)), f"e{l}.ln1")
            x = self._norm(ad.add(x, self._ffn_apply(x, f"e{l}")), f"e{l}.ln2")
        for l in range(self.dec_layers):
            y = self._norm(ad.add(y, self.attention(y, y, f"d{l}.sa", causal)), f"d{l}.ln1")
            y = self._norm(ad.add(y, self.attention(y, x, f"d{l}.ca", causal)), f"d{l}.ln2")
            y = self._norm(ad.add(y, self._ffn_apply(y, f"d{l}")), f"d{l}.ln3")
        return self._head(y, Tensor(prev_n)), None


def build_model(arch: str, **kw) -> _Model:
    if arch == "lstm":
        return LstmModel(**kw)
    if arch == "transformer":
        return TransformerModel(**kw)
    raise ValueError(f"unknown architecture {arch!r}")


def load_model(path) -> tuple[_Model, NormStats, dict]:
    tensors, meta = ad.load_tensors(path)
    model = build_model(meta["arch"], **meta["config"])
    model.load_state_dict(tensors)
    return model, NormStats.load(sidecar_path(path)), meta


# --------------------------------------------------------------- inference

def _check_window(model, window: ImuWindow):
    if len(window) != model.w:
        raise ShapeError(f"window has {len(window)} samples, model expects {model.w}")


def lstm_infer(model: LstmModel, window: ImuWindow, prev_bias, stats: NormStats) -> np.ndarray:
    """One step; the hidden state is carried in ``model.state``."""
    _check_window(model, window)
    wn = stats.norm_window(window.samples)[None, None]
    pn = stats.norm_bias(np.asarray(prev_bias, float))[None, None]
    with ad.no_grad():
        y, model.state = model.forward(wn, pn, model.state)
    return stats.from_head_units(y.data[0, -1])


def transformer_infer(model: TransformerModel, history, bias_history, stats: NormStats) -> np.ndarray:
    """Prediction for the step after the last history entry."""
    history = list(history)
    if not history:
        raise ValueError("transformer inference needs at least one history window")
    bias_history = np.asarray(bias_history, float).reshape(-1, 3)
    if len(bias_history) != len(history):
        raise ShapeError("bias history and window history differ in length")
    for win in history:
        _check_window(model, win)
    wn = stats.norm_window(np.stack([h.samples for h in history]))[None]
    pn = stats.norm_bias(bias_history)[None]
    with ad.no_grad():
        y, _ = model.forward(wn, pn)
    return stats.from_head_units(y.data[0, -1])


# ------------------------------------------------------------------ dataset

@dataclass
class BiasSequence:
    """Training samples of one recording at the inference rate."""

    windows: np.ndarray     # (n, w, 6) gravity-aligned
    prev: np.ndarray        # (n, 6) true bias one inference interval earlier (accel, gyro)
    target: np.ndarray      # (n, 6) true bias at the window end
    t: np.ndarray


def sequence_from_sim(data, rate: float, w: int = WINDOW_SAMPLES, seconds: float = WINDOW_SECONDS
                      ) -> BiasSequence:
    """Ground-truth-oriented windows of a simulated recording.

    Raises:
        DataError: if the recording carries no ground-truth bias.
    """
    bias = getattr(data, "bias", None)
    if bias is None or getattr(bias, "accel", None) is None:
        raise DataError("training data needs ground-truth biases")
    imu, tr = data.imu, data.trajectory
    times = np.arange(seconds, imu.t[-1] - imu.t[0] + 1e-9, 1.0 / rate) + imu.t[0]
    wins, prev, target = [], [], []
    for t in times:
        i_end = min(np.searchsorted(imu.t, t - 1e-9), len(imu.t) - 1)
        i_start = np.searchsorted(imu.t, t - seconds - 1e-9)
        i_prev = np.searchsorted(imu.t, t - 1.0 / rate - 1e-9)
        wins.append(make_window(imu.t, imu.accel, imu.gyro, t, tr.R[i_start], w, seconds).samples)
        b = np.concatenate([bias.accel[i_end], bias.gyro[i_end]])
        bp = np.concatenate([bias.accel[i_prev], bias.gyro[i_prev]])
        target.append(b)
        prev.append(bp)
    return BiasSequence(np.array(wins), np.array(prev), np.array(target), times)


def _sensor_slice(sensor: str) -> slice:
    if sensor not in SENSORS:
        raise ValueError(f"sensor must be one of {SENSORS}")
    return slice(0, 3) if sensor == "accel" else slice(3, 6)


def segments(seqs: list[BiasSequence], length: int) -> list[tuple[int, int, int]]:
    """Non-overlapping ``(sequence, start, stop)`` chunks of at most ``length`` steps."""
    out = []
    for s, seq in enumerate(seqs):
        n = len(seq.t)
        for a in range(0, n, length):
            if n - a >= max(2, length // 2):
                out.append((s, a, min(a + length, n)))
    return out


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 32
    epochs: int = 200
    teacher_accel_var: float = 0.0      # per-axis variance added to teacher-forced accel biases
    teacher_gyro_var: float = 0.0
    seed: int = 0
    split: float = 0.75
    seq_len: int = 40                   # steps per training segment (history length for the transformer)
    hidden: int = 64
    embed: int = 64
    heads: int = 2
    w: int = WINDOW_SAMPLES
    patience: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch <= 0:
            raise ValueError("lr, epochs and batch must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")

    def teacher_var(self, sensor: str) -> float:
        return self.teacher_accel_var if sensor == "accel" else self.teacher_gyro_var


def teacher_variance(rate_random_walk: float, interval: float) -> float:
    """Discrete bias-walk variance ``K^2 dt`` over one inference interval."""
    return float(rate_random_walk) ** 2 * interval


@dataclass
class TrainResult:
    model: _Model
    stats: NormStats
    curves: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    sensor: str = "accel"

    def write_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_loss", "val_loss"])
            wr.writerows(self.curves)


def _gather(seqs, segs, sl):
    W = np.stack([seqs[s].windows[a:b] for s, a, b in segs])
    P = np.stack([seqs[s].prev[a:b, sl] for s, a, b in segs])
    T = np.stack([seqs[s].target[a:b, sl] for s, a, b in segs])
    return W, P, T


def _by_length(segs):
    groups: dict[int, list] = {}
    for sg in segs:
        groups.setdefault(sg[2] - sg[1], []).append(sg)
    return groups


def batch_loss(model: _Model, stats: NormStats, W, P, T) -> Tensor:
    """MSE in head units, i.e. bias error scaled by the per-channel increment std."""
    out, _ = model.forward(stats.norm_window(W), stats.norm_bias(P))
    return ad.mse(out, stats.to_head_units(T))


def _mse_bias_units(model, stats, seqs, segs, sl, noise_std, rng) -> float:
    if not segs:
        return math.nan
    err, n = 0.0, 0
    with ad.no_grad():
        for group in _by_length(segs).values():
            W, P, T = _gather(seqs, group, sl)
            P = P + rng.normal(size=P.shape) * noise_std
            out, _ = model.forward(stats.norm_window(W), stats.norm_bias(P))
            d = stats.from_head_units(out.data) - T
            err += float((d * d).sum())
            n += d.shape[0] * d.shape[1]
    return err / n


def train(dataset, arch: str, config: TrainConfig | None = None, sensor: str = "accel",
          rate: float | None = None) -> TrainResult:
    """Teacher-forced training of one sensor's model.

    ``dataset`` holds simulator recordings or prebuilt :class:`BiasSequence` objects.
    Segments are split 75:25 (by default) into training and validation; the
    checkpoint with the lowest validation MSE is kept.
    """
    cfg = config or TrainConfig()
    sl = _sensor_slice(sensor)
    rate = rate or (LSTM_RATE if arch == "lstm" else TRANSFORMER_RATE)
    seqs = [d if isinstance(d, BiasSequence) else sequence_from_sim(d, rate, cfg.w) for d in dataset]
    if not seqs:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    length = cfg.seq_len if arch == "lstm" else min(cfg.seq_len, HISTORY)
    segs = segments(seqs, length)
    if len(segs) < 2:
        raise DataError("not enough data for a train/validation split")
    order = rng.permutation(len(segs))
    n_train = max(1, min(len(segs) - 1, int(round(cfg.split * len(segs)))))
    tr_segs = [segs[i] for i in order[:n_train]]
    va_segs = [segs[i] for i in order[n_train:]]

    W, P, T = (np.concatenate([x.reshape(-1, *x.shape[2:]) for x in parts])
               for parts in zip(*(_gather(seqs, g, sl) for g in _by_length(tr_segs).values())))
    stats = NormStats.fit(W, P, T)
    if arch == "lstm":
        model = LstmModel(cfg.w, cfg.hidden, seed=cfg.seed)
    else:
        model = TransformerModel(cfg.w, cfg.embed, cfg.heads, history=max(HISTORY, length), seed=cfg.seed)
    model.init_head(stats)
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    noise_std = math.sqrt(cfg.teacher_var(sensor))
    val_rng_seed = cfg.seed + 1

    res = TrainResult(model, stats, sensor=sensor)
    best = model.state_dict()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(tr_segs))
        total, count = 0.0, 0
        for a in range(0, len(perm), cfg.batch):
            chosen = [tr_segs[i] for i in perm[a:a + cfg.batch]]
            for group in _by_length(chosen).values():
                Wb, Pb, Tb = _gather(seqs, group, sl)
                Pb = Pb + rng.normal(size=Pb.shape) * noise_std
                opt.zero_grad()
                loss = batch_loss(model, stats, Wb, Pb, Tb)
                ad.backward(loss)
                opt.step()
                total += float(loss.data) * len(group)
                count += len(group)
        train_mse = _mse_bias_units(model, stats, seqs, tr_segs, sl, noise_std, np.random.default_rng(val_rng_seed))
        val_mse = _mse_bias_units(model, stats, seqs, va_segs, sl, noise_std, np.random.default_rng(val_rng_seed))
        res.curves.append((epoch, train_mse, val_mse))
        if val_mse < res.best_val:
            res.best_val, res.best_epoch, best = val_mse, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.load_state_dict(best)
    return res


def evaluate_one_step(model: _Model, stats: NormStats, seqs, sensor: str, noise_var: float, seed: int = 0
                      ) -> tuple[float, float]:
    """Teacher-forced prediction MSE against the hold-last-value baseline.

    The previous bias fed to the model is the noisy ground truth; the
    baseline predicts that same value unchanged. Returns ``(model, baseline)``.
    """
    sl = _sensor_slice(sensor)
    rng = np.random.default_rng(seed)
    err_m = err_b = 0.0
    n = 0
    for seq in seqs:
        prev = seq.prev[:, sl] + rng.normal(size=(len(seq.t), 3)) * math.sqrt(noise_var)
        pred = predict_sequence(model, stats, seq.windows, prev)
        err_m += float(((pred - seq.target[:, sl]) ** 2).sum())
        err_b += float(((prev - seq.target[:, sl]) ** 2).sum())
        n += len(seq.t)
    return err_m / n, err_b / n


def predict_sequence(model: _Model, stats: NormStats, windows: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Step-by-step predictions the way inference sees them (LSTM state carried, transformer history capped)."""
    wins = [ImuWindow(w) for w in windows]
    out = np.zeros((len(wins), 3))
    if isinstance(model, LstmModel):
        model.reset()
        for i, (w, p) in enumerate(zip(wins, prev)):
            out[i] = lstm_infer(model, w, p, stats)
        model.reset()
        return out
    for i in range(len(wins)):
        a = max(0, i + 1 - model.history)
        out[i] = transformer_infer(model, wins[a:i + 1], prev[a:i + 1], stats)
    return out


# -------------------------------------------------------- estimator hookup

class LearnedBiasProvider:
    """Feeds network estimates to :func:`deepbias.estimator.run_vio`.

    Inference times are spaced ``1 / rate`` apart starting one window after
    the first sample. Each estimate is attached to the first keyframe at or
    after its time. The previous bias comes from the estimator, and the
    orientation for gravity alignment is the window state closest to the
    start of the IMU window.
    """

    def __init__(self, data, accel: tuple[_Model, NormStats], gyro: tuple[_Model, NormStats],
                 rate: float | None = None, seconds: float = WINDOW_SECONDS):
        self.imu = data.imu
        self.models = {"accel": accel, "gyro": gyro}
        arch = accel[0].arch
        self.rate = rate or (LSTM_RATE if arch == "lstm" else TRANSFORMER_RATE)
        self.seconds = seconds
        self.next_t = float(self.imu.t[0]) + seconds
        cap = getattr(accel[0], "history", HISTORY)
        self.windows: deque[ImuWindow] = deque(maxlen=cap)
        self.prev: dict[str, deque] = {s: deque(maxlen=cap) for s in SENSORS}
        self.inferences = 0
        for m, _ in self.models.values():
            m.reset()

    def _orientation(self, win, t: float) -> np.ndarray:
        times = np.asarray(win.times, float)
        return win.states[int(np.argmin(np.abs(times - t)))].R

    def _infer(self, t: float, win) -> np.ndarray:
        R = self._orientation(win, t - self.seconds)
        m0 = self.models["accel"][0]
        window = make_window(self.imu.t, self.imu.accel, self.imu.gyro, t, R, m0.w, self.seconds)
        ba, bg = win.feed_back_bias()
        out = []
        self.windows.append(window)
        for s, prev in zip(SENSORS, (ba, bg)):
            model, stats = self.models[s]
            self.prev[s].append(prev)
            if isinstance(model, LstmModel):
                out.append(lstm_infer(model, window, prev, stats))
            else:
                out.append(transformer_infer(model, self.windows, np.array(self.prev[s]), stats))
        self.inferences += 1
        return np.concatenate(out)

    def __call__(self, k: int, t: float, win) -> BiasEstimate | None:
        est = None
        while self.next_t <= t + 1e-9:
            est = self._infer(self.next_t, win)
            self.next_t += 1.0 / self.rate
        if est is None:
            return None
        return BiasEstimate(t, est[:3], est[3:])

"""
Training loop, Adam, evaluation and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"RAVN" | u32 version | u32 count | count x tensor
    u32 count | count x tensor          # Adam moments, "<name>.m" / "<name>.v"
    u64 rng state

    tensor := u16 name_len | utf-8 name | u8 ndim | ndim x u32 dims | f32 data

Parameters, BN running statistics and a few ``__meta__.*`` vectors
(network config, window, training config echo, progress) share the first
section.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .arch import CA_MODES, DECODERS, ENCODERS, NetworkConfig, RAVNet
from .data import Manifest, WindowSpec, hu_window, read_samples
from .errors import ConfigError, DivergenceError, EmptyInputError, FormatError, IoError, StateError
from .layers import ParamStore
from .losses import LOSSES, aggregate, confusion_counts, evaluate_pair, write_report_csv
from .tensor import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

MAGIC = b"RAVN"
VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOSS_KINDS = ("dice", "bce")
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    max_epochs: int = 500
    early_stop_loss: float = 5e-4
    loss_kind: str = "dice"
    seed: int = 0
    window: WindowSpec = field(default_factory=WindowSpec)
    net: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.early_stop_loss > 0:
            raise ConfigError("early_stop_loss must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")


# ---------------------------------------------------------------- optimizer


def adam_step(store: ParamStore, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS, t: Optional[int] = None):
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    for name, p in store:
        if p.grad is None:
            raise StateError(f"no gradient for parameter {name!r}")
    t = store.step + 1 if t is None else t
    if t < 1:
        raise StateError("Adam step index must be >= 1")
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store:
        g = p.grad
        dt = p.data.dtype.type
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        store.m[name], store.v[name] = m, v
        p.data = p.data - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
    store.step = t
    return store


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    net: NetworkConfig
    window: WindowSpec
    tensors: dict
    moments: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: int = 0
    train_echo: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: RAVNet, window: WindowSpec, epoch=0, rng_state=0, train_cfg=None):
        store = model.store
        tensors = {k: np.array(v, dtype=np.float32) for k, v in store.arrays().items()}
        moments = {}
        for name in store.params:
            if name in store.m:
                moments[f"{name}.m"] = np.array(store.m[name], dtype=np.float32)
                moments[f"{name}.v"] = np.array(store.v[name], dtype=np.float32)
        echo = {}
        if train_cfg is not None:
            echo = {
                "lr": train_cfg.lr,
                "batch_size": train_cfg.batch_size,
                "max_epochs": train_cfg.max_epochs,
                "early_stop_loss": train_cfg.early_stop_loss,
                "loss_kind": train_cfg.loss_kind,
            }
        return cls(model.cfg, window, tensors, moments, epoch, store.step, rng_state & _U64, echo)

    def restore(self, model: RAVNet):
        """Copy tensors into ``model``; nothing is touched unless all match."""
        store = model.store
        expected = store.arrays()
        for name, arr in expected.items():
            got = self.tensors.get(name)
            if got is None:
                raise StateError(f"checkpoint has no tensor {name!r}")
            if got.shape != arr.shape:
                raise StateError(f"tensor {name!r}: checkpoint dims {got.shape} != model dims {arr.shape}")
        extra = sorted(set(self.tensors) - set(expected))
        if extra:
            raise StateError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model")
        dtype = model.dtype
        for name, t in store.params.items():
            t.data = self.tensors[name].astype(dtype)
            t.grad = None
        for name in store.buffers:
            store.buffers[name] = self.tensors[name].astype(dtype)
        store.m.clear()
        store.v.clear()
        for name in store.params:
            if f"{name}.m" in self.moments:
                store.m[name] = self.moments[f"{name}.m"].astype(dtype)
                store.v[name] = self.moments[f"{name}.v"].astype(dtype)
        store.step = self.step
        return model

    def build_model(self, dtype=np.float32) -> RAVNet:
        return self.restore(RAVNet(self.net, seed=0, dtype=dtype))


def _meta_tensors(ck: Checkpoint) -> dict:
    net = ck.net
    meta = {
        "__meta__.net": [net.levels, net.base_channels, net.in_channels, net.out_channels,
                         ENCODERS.index(net.encoder), DECODERS.index(net.decoder), CA_MODES.index(net.ca)],
        "__meta__.window": [ck.window.wl, ck.window.ww],
        "__meta__.progress": [ck.epoch, ck.step],
    }
    if ck.train_echo:
        e = ck.train_echo
        meta["__meta__.train"] = [e["lr"], e["batch_size"], e["max_epochs"], e["early_stop_loss"],
                                  LOSS_KINDS.index(e["loss_kind"])]
    return {k: np.asarray(v, dtype=np.float32) for k, v in meta.items()}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    dims = arr.shape if arr.ndim else (1,)
    return b"".join([
        struct.pack("<H", len(raw)), raw,
        struct.pack("<B", len(dims)), struct.pack(f"<{len(dims)}I", *dims),
        np.ascontiguousarray(arr, dtype="<f4").tobytes(),
    ])


def encode_checkpoint(ck: Checkpoint) -> bytes:
    tensors = {**ck.tensors, **_meta_tensors(ck)}
    parts = [MAGIC, struct.pack("<II", ck.version, len(tensors))]
    parts += [_pack_tensor(k, v) for k, v in tensors.items()]
    parts.append(struct.pack("<I", len(ck.moments)))
    parts += [_pack_tensor(k, v) for k, v in ck.moments.items()]
    parts.append(struct.pack("<Q", ck.rng_state & _U64))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, seen: set):
        start = self.pos
        (n,) = self.unpack("<H", "name length")
        try:
            name = self.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor name at offset {start} is not UTF-8", start) from None
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r} at offset {start}", start)
        seen.add(name)
        (ndim,) = self.unpack("<B", "ndim")
        if ndim == 0:
            raise FormatError(f"tensor {name!r} has ndim 0 at offset {start}", start)
        dims = self.unpack(f"<{ndim}I", "dims")
        count = math.prod(dims)
        data = np.frombuffer(self.take(4 * count, f"data of {name!r}"), dtype="<f4").astype(np.float32)
        return name, data.reshape(dims)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    seen: set = set()
    tensors = dict(r.tensor(seen) for _ in range(count))
    (mcount,) = r.unpack("<I", "moment count")
    moments = dict(r.tensor(seen) for _ in range(mcount))
    (rng_state,) = r.unpack("<Q", "rng state")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}", r.pos)

    meta = {k: tensors.pop(k) for k in [k for k in tensors if k.startswith("__meta__.")]}
    for key in ("__meta__.net", "__meta__.window", "__meta__.progress"):
        if key not in meta:
            raise FormatError(f"checkpoint lacks {key}")
    try:
        n = [int(v) for v in meta["__meta__.net"]]
        net = NetworkConfig(levels=n[0], base_channels=n[1], in_channels=n[2], out_channels=n[3],
                            encoder=ENCODERS[n[4]], decoder=DECODERS[n[5]], ca=CA_MODES[n[6]])
        wl, ww = (float(v) for v in meta["__meta__.window"])
        window = WindowSpec(wl, ww)
        epoch, step = (int(v) for v in meta["__meta__.progress"])
        echo = {}
        if "__meta__.train" in meta:
            t = meta["__meta__.train"]
            echo = {"lr": float(t[0]), "batch_size": int(t[1]), "max_epochs": int(t[2]),
                    "early_stop_loss": float(t[3]), "loss_kind": LOSS_KINDS[int(t[4])]}
    except (IndexError, ValueError, ConfigError) as exc:
        raise FormatError(f"malformed checkpoint metadata: {exc}") from None
    for name in moments:
        if not (name.endswith(".m") or name.endswith(".v")) or name[:-2] not in tensors:
            raise FormatError(f"moment {name!r} does not name a stored parameter")
        if moments[name].shape != tensors[name[:-2]].shape:
            raise FormatError(f"moment {name!r} dims differ from its parameter")
    return Checkpoint(net, window, tensors, moments, epoch, step, rng_state, echo, version)


def save_checkpoint(path, ck: Checkpoint):
    """Atomic write: temp file in the same directory, then rename."""
    path = os.fspath(path)
    payload = encode_checkpoint(ck)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.remove(tmp)
        except OSError:
            pass
        raise IoError(f"cannot write checkpoint {path}: {exc.strerror or exc}", path) from exc


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc.strerror or exc}", path) from exc
    try:
        return decode_checkpoint(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}", exc.offset) from None


# ---------------------------------------------------------------- training


def sample_arrays(samples, window: WindowSpec):
    """Windowed float32 images (n, 1, H, W) and masks of the same shape."""
    xs = np.stack([hu_window(s.image, window) for s in samples]).astype(np.float32)[:, None]
    ys = np.stack([s.mask for s in samples]).astype(np.float32)[:, None]
    return xs, ys


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_dsc)
    step_losses: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_dsc"]
        lines += [f"{e},{loss!r},{'' if math.isnan(d) else repr(d)}" for e, loss, d in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(self.to_csv())
        except OSError as exc:
            raise IoError(f"cannot write history {path}: {exc.strerror or exc}", os.fspath(path)) from exc


@dataclass
class TrainResult:
    model: RAVNet
    best: Checkpoint
    last: Checkpoint
    history: History


def _next_state(state: int):
    rng = np.random.default_rng(state)
    return rng, int(rng.integers(0, _U64, dtype=np.uint64, endpoint=True))


def fit(cfg: TrainConfig, train_set, val_set=None, out_path=None, step_callback=None) -> TrainResult:
    """Train on in-memory samples.

    Each epoch shuffles with the checkpointed RNG state, takes one Adam step
    per batch and stops early once the epoch-mean loss drops below
    ``cfg.early_stop_loss``. With ``out_path`` the latest checkpoint goes to
    ``<out_path>.last`` and the best-by-validation-DSC one to ``out_path``.
    """
    train_set = list(train_set)
    if not train_set:
        raise EmptyInputError("training set is empty")
    xs, ys = sample_arrays(train_set, cfg.window)
    model = RAVNet(cfg.net, seed=cfg.seed)
    model.check_input(Tensor(xs[:1]))
    loss_fn = LOSSES[cfg.loss_kind]
    store = model.store
    state = cfg.seed & _U64
    history = History()
    best, best_dsc, last = None, -math.inf, None

    for epoch in range(1, cfg.max_epochs + 1):
        rng, state = _next_state(state)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            store.zero_grad()
            with Tape() as tape:
                pred = model(Tensor(xs[idx]), training=True)
                loss = loss_fn(pred, ys[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
                tape.backward(loss)
            adam_step(store, cfg.lr)
            losses.append(value)
            history.step_losses.append(value)
            if step_callback is not None:
                step_callback(store.step, value, model)
        train_loss = float(np.mean(losses))
        val_dsc = evaluate_model(model, val_set, cfg.window)[0].dsc if val_set else math.nan
        history.rows.append((epoch, train_loss, val_dsc))
        logger.info("epoch %d train_loss %.6f val_dsc %.4f", epoch, train_loss, val_dsc)

        last = Checkpoint.from_model(model, cfg.window, epoch, state, cfg)
        improved = best is None or (not math.isnan(val_dsc) and val_dsc > best_dsc) or math.isnan(val_dsc)
        if improved:
            best, best_dsc = last, val_dsc
        if out_path is not None:
            save_checkpoint(f"{os.fspath(out_path)}.last", last)
            if improved:
                save_checkpoint(out_path, best)
        if train_loss < cfg.early_stop_loss:
            logger.info("early exit at epoch %d", epoch)
            break
    return TrainResult(model, best, last, history)


def train_samples(cfg: TrainConfig, samples, val_samples=None):
    """In-memory convenience wrapper returning ``(model, history)``."""
    res = fit(cfg, samples, val_samples)
    return res.model, res.history


def train(cfg: TrainConfig, train_manifest: Manifest, val_manifest: Optional[Manifest] = None,
          out_path=None, history_path=None):
    """Train from manifests; returns ``(best checkpoint, history)``."""
    if len(train_manifest) == 0:
        raise EmptyInputError("training manifest is empty")
    val = read_samples(val_manifest) if val_manifest is not None and len(val_manifest) else None
    res = fit(cfg, read_samples(train_manifest), val, out_path)
    if history_path is not None:
        res.history.write(history_path)
    return res.best, res.history


# ---------------------------------------------------------------- evaluation


def predict_prob(model: RAVNet, image: np.ndarray, window: WindowSpec) -> np.ndarray:
    x = hu_window(image, window).astype(model.dtype)[None, None]
    with no_grad():
        return model(Tensor(x), training=False).data[0, 0]


def evaluate_model(model: RAVNet, samples, window: WindowSpec, pooled: bool = False):
    """BN in inference mode; returns (aggregate, [(id, report)], [counts])."""
    rows, counts = [], []
    for s in samples:
        prob = predict_prob(model, s.image, window)
        counts.append(confusion_counts(prob, s.mask))
        rows.append((s.id, evaluate_pair(prob, s.mask)))
    if not rows:
        raise EmptyInputError("nothing to evaluate")
    agg = aggregate([r for _, r in rows], counts, pooled=pooled)
    return agg, rows, counts


def evaluate(checkpoint: Checkpoint, test_manifest: Manifest, window: Optional[WindowSpec] = None,
             report_path=None, pooled: bool = False):
    """Evaluate a checkpoint on a manifest; returns ``(aggregate, per-sample rows)``."""
    if len(test_manifest) == 0:
        raise EmptyInputError("test manifest is empty")
    model = checkpoint.build_model()
    samples = read_samples(test_manifest)
    for s in samples:
        try:
            model.check_input(Tensor(np.zeros((1, model.cfg.in_channels) + s.image.shape, dtype=np.float32)))
        except Exception as exc:
            raise StateError(f"sample {s.id}: {exc}") from exc
    agg, rows, _ = evaluate_model(model, samples, window or checkpoint.window, pooled)
    if report_path is not None:
        try:
            write_report_csv(report_path, rows)
        except OSError as exc:
            raise IoError(f"cannot write report {report_path}: {exc}", os.fspath(report_path)) from exc
    return agg, rows


# ---------------------------------------------------------------- experiments


ABLATION_VARIANTS = {
    "unet": {"encoder": "plain", "decoder": "plain", "ca": "none"},
    "cofres_unet": {"encoder": "cofres", "decoder": "plain", "ca": "none"},
    "ravnet": {"encoder": "cofres", "decoder": "ar", "ca": "bottom"},
}


def ablation_experiment(cfg: TrainConfig, train_set, test_set, variants=ABLATION_VARIANTS, val_set=None):
    """Train each architecture variant under ``cfg`` and evaluate on ``test_set``.

    With ``val_set`` every variant is scored with its best-by-validation
    checkpoint, as in a normal training run; otherwise the final weights.
    """
    out = {}
    for name, overrides in variants.items():
        run = replace(cfg, net=replace(cfg.net, **overrides))
        res = fit(run, train_set, val_set)
        model = res.best.build_model() if val_set else res.model
        out[name] = evaluate_model(model, test_set, cfg.window)[0]
    return out
